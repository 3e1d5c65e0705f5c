//! Seeded synthetic segmentation data: one ellipse (2D) or ellipsoid (3D)
//! per image, optionally notched, on a noisy background.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::metrics::LabelVolume;
use crate::volume::{save_labels, Volume, VoxelType};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub dims: usize,
    pub extent: Vec<usize>,
    pub count: usize,
    pub notches: bool,
    pub noise_sigma: f64,
    /// Range of the foreground-minus-background intensity step.
    pub contrast: (f64, f64),
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn blobs_2d(count: usize, size: usize, seed: u64) -> Self {
        SyntheticSpec { dims: 2, extent: vec![size, size], count, notches: true, noise_sigma: 0.1, contrast: (0.3, 0.6), seed }
    }

    pub fn validate(&self) -> Result<()> {
        if (self.dims != 2 && self.dims != 3) || self.extent.len() != self.dims || self.extent.iter().any(|&e| e < 4) {
            return Err(Error::Config(format!("synthetic grid {:?} must have {} extents of at least 4", self.extent, self.dims)));
        }
        if !(self.noise_sigma >= 0.0) || !(self.contrast.0 <= self.contrast.1) {
            return Err(Error::Config("noise must be non-negative and the contrast range ordered".into()));
        }
        Ok(())
    }
}

/// The generating geometry of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    /// Rotation in the first two axes.
    pub angle: f64,
    pub notch: Option<([f64; 3], f64)>,
}

impl Shape {
    /// Whether the voxel center `p` lies inside.
    pub fn contains(&self, p: [f64; 3], dims: usize) -> bool {
        let d: Vec<f64> = (0..3).map(|a| p[a] - self.center[a]).collect();
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let u = c * d[0] + s * d[1];
        let v = -s * d[0] + c * d[1];
        let mut r = (u / self.radii[0]).powi(2) + (v / self.radii[1]).powi(2);
        if dims == 3 {
            r += (d[2] / self.radii[2]).powi(2);
        }
        if r > 1.0 {
            return false;
        }
        match &self.notch {
            Some((nc, nr)) => (0..dims).map(|a| (p[a] - nc[a]).powi(2)).sum::<f64>() > nr * nr,
            None => true,
        }
    }

    pub fn rasterize(&self, extent: &[usize]) -> Vec<u8> {
        let dims = extent.len();
        let n: usize = extent.iter().product();
        (0..n)
            .map(|i| {
                let mut p = [0.0; 3];
                let mut r = i;
                for a in (0..dims).rev() {
                    p[a] = (r % extent[a]) as f64;
                    r /= extent[a];
                }
                u8::from(self.contains(p, dims))
            })
            .collect()
    }
}

/// Rasterized disk of radius `r` (in voxels) centered at `center`.
pub fn disk_mask(extent: [usize; 2], center: [f64; 2], r: f64) -> Vec<u8> {
    let s = Shape { center: [center[0], center[1], 0.0], radii: [r, r, 1.0], angle: 0.0, notch: None };
    s.rasterize(&extent)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub shape: Shape,
    /// Intensities in `[0, 1]`, row-major over the grid.
    pub image: Vec<f64>,
    pub mask: Vec<u8>,
}

pub fn generate(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
    let dims = spec.dims;
    let ext = &spec.extent;
    let min_ext = *ext.iter().min().expect("non-empty") as f64;
    (0..spec.count)
        .map(|_| {
            let mut center = [0.0; 3];
            let mut radii = [1.0; 3];
            for a in 0..dims {
                center[a] = rng.gen_range(0.35..0.65) * (ext[a] - 1) as f64;
                radii[a] = rng.gen_range(0.14..0.3) * min_ext;
            }
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let notch = (spec.notches && rng.gen_bool(0.5)).then(|| {
                let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let (c, s) = (angle.cos(), angle.sin());
                let (u, v) = (radii[0] * phi.cos(), radii[1] * phi.sin());
                let mut nc = center;
                nc[0] += c * u - s * v;
                nc[1] += s * u + c * v;
                (nc, 0.45 * radii[0].min(radii[1]))
            });
            let shape = Shape { center, radii, angle, notch };
            let mask = shape.rasterize(ext);
            let bg = rng.gen_range(0.1..0.3);
            let step = rng.gen_range(spec.contrast.0..=spec.contrast.1);
            let image = mask
                .iter()
                .map(|&m| {
                    let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    (bg + step * m as f64 + n).clamp(0.0, 1.0)
                })
                .collect();
            Ok(Sample { shape, image, mask })
        })
        .collect()
}

/// Writes images, masks and `manifest.txt` under `dir`; returns the
/// manifest path. 2D samples are 8-bit PNGs, 3D samples PMVL volumes.
pub fn write_dataset(spec: &SyntheticSpec, dir: &Path) -> Result<PathBuf> {
    let samples = generate(spec)?;
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let ext = if spec.dims == 2 { "png" } else { "pmvl" };
    let spacing = vec![1.0; spec.dims];
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let img_rel = format!("images/{i:04}.{ext}");
        let mask_rel = format!("masks/{i:04}.{ext}");
        if spec.dims == 2 {
            #[cfg(feature = "png")]
            {
                let bytes: Vec<u8> = s.image.iter().map(|v| (v * 255.0).round() as u8).collect();
                crate::volume::write_gray_png(&dir.join(&img_rel), [spec.extent[0], spec.extent[1]], &bytes)?;
            }
            #[cfg(not(feature = "png"))]
            return Err(Error::Format("built without image support".into()));
        } else {
            Volume::new(spec.extent.clone(), spacing.clone(), s.image.clone())?.save(&dir.join(&img_rel), VoxelType::F32)?;
        }
        let labels = LabelVolume::new(spec.extent.clone(), spacing.clone(), s.mask.clone())?;
        save_labels(&dir.join(&mask_rel), &labels)?;
        manifest.push_str(&format!("{img_rel} {mask_rel}\n"));
    }
    let path = dir.join("manifest.txt");
    let mut f = std::fs::File::create(&path)?;
    f.write_all(manifest.as_bytes())?;
    Ok(path)
}
