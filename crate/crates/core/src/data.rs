//! Dataset manifests and case loading.
//!
//! A manifest is a text file with one `image mask` path pair per line,
//! relative to the manifest's directory. Blank lines and `#` comments are
//! ignored.

use std::path::{Path, PathBuf};

use crate::error::{shape_err, Error, Result};
use crate::metrics::LabelVolume;
use crate::tensor::Tensor;
use crate::volume::{load_labels, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub image: PathBuf,
    pub mask: PathBuf,
}

pub fn read_manifest(path: &Path) -> Result<Vec<Case>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut cases = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 2 {
            return Err(Error::Format(format!("{}:{}: expected `image mask`", path.display(), n + 1)));
        }
        cases.push(Case { image: base.join(parts[0]), mask: base.join(parts[1]) });
    }
    Ok(cases)
}

/// Loads an image as `channels × spatial` with intensities in `[0, 1]`
/// for 8-bit files. Single-channel images are repeated when
/// `in_channels > 1`.
pub fn load_image(path: &Path, in_channels: usize) -> Result<Tensor> {
    let (channels, spatial, data) = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        #[cfg(feature = "png")]
        {
            let (c, [h, w], bytes) = crate::volume::read_image(path)?;
            let n = h * w;
            let mut planar = vec![0.0; c * n];
            for (i, &b) in bytes.iter().enumerate() {
                planar[(i % c) * n + i / c] = b as f64 / 255.0;
            }
            (c, vec![h, w], planar)
        }
        #[cfg(not(feature = "png"))]
        return Err(Error::Format("built without image support".into()));
    } else {
        let v = Volume::load(path)?;
        (1, v.shape, v.data)
    };
    let data = match (channels, in_channels) {
        (a, b) if a == b => data,
        (1, b) => data.iter().cycle().take(b * data.len()).copied().collect(),
        (a, b) => return Err(shape_err!("{} has {a} channels, the network expects {b}", path.display())),
    };
    let mut shape = vec![in_channels];
    shape.extend(spatial);
    Tensor::new(shape, data)
}

/// Loads every case of a manifest.
pub fn load_cases(cases: &[Case], in_channels: usize) -> Result<Vec<(Tensor, LabelVolume)>> {
    cases
        .iter()
        .map(|c| {
            let img = load_image(&c.image, in_channels)?;
            let mask = load_labels(&c.mask)?;
            if img.shape()[1..] != *mask.shape() {
                return Err(shape_err!("{} and {} differ in shape", c.image.display(), c.mask.display()));
            }
            Ok((img, mask))
        })
        .collect()
}
