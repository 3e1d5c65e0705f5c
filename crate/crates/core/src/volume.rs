//! Raw volume files and 8-bit image files.
//!
//! PMVL layout, little-endian: magic `PMVL`, `u32` rank, `u32` extents,
//! `f64` spacing per axis, `u8` voxel type (0 = f64, 1 = f32, 2 = u8,
//! 3 = i16), then row-major voxels.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::metrics::LabelVolume;
use crate::tensor::read_u32;

pub const PMVL_MAGIC: &[u8; 4] = b"PMVL";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoxelType {
    F64 = 0,
    F32 = 1,
    U8 = 2,
    I16 = 3,
}

impl VoxelType {
    fn from_tag(t: u8) -> Result<Self> {
        Ok(match t {
            0 => VoxelType::F64,
            1 => VoxelType::F32,
            2 => VoxelType::U8,
            3 => VoxelType::I16,
            _ => return Err(Error::Format(format!("unknown voxel type tag {t}"))),
        })
    }
}

/// Intensity volume with physical spacing (mm per axis).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub shape: Vec<usize>,
    pub spacing: Vec<f64>,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn new(shape: Vec<usize>, spacing: Vec<f64>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(shape_err!("volume extents must be positive, got {shape:?}"));
        }
        if spacing.len() != shape.len() || spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Invalid(format!("spacing {spacing:?} must be positive per axis")));
        }
        if data.len() != shape.iter().product::<usize>() {
            return Err(shape_err!("{} voxels do not fill {shape:?}", data.len()));
        }
        Ok(Volume { shape, spacing, data })
    }

    pub fn from_labels(l: &LabelVolume) -> Self {
        Volume { shape: l.shape().to_vec(), spacing: l.spacing().to_vec(), data: l.labels().iter().map(|&v| v as f64).collect() }
    }

    /// Interprets voxels as class ids; every value must be an integer in 0..=255.
    pub fn to_labels(&self) -> Result<LabelVolume> {
        let labels = self
            .data
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                    Ok(v as u8)
                } else {
                    Err(Error::Invalid(format!("voxel value {v} is not a class id")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        LabelVolume::new(self.shape.clone(), self.spacing.clone(), labels)
    }

    pub fn write<W: Write>(&self, w: &mut W, ty: VoxelType) -> Result<()> {
        w.write_all(PMVL_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &s in &self.spacing {
            w.write_all(&s.to_le_bytes())?;
        }
        w.write_all(&[ty as u8])?;
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for &v in &self.data {
            match ty {
                VoxelType::F64 => buf.extend_from_slice(&v.to_le_bytes()),
                VoxelType::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
                VoxelType::U8 => buf.push(v.round().clamp(0.0, 255.0) as u8),
                VoxelType::I16 => buf.extend_from_slice(&(v.round().clamp(-32768.0, 32767.0) as i16).to_le_bytes()),
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != PMVL_MAGIC {
            return Err(Error::Format("not a PMVL volume".into()));
        }
        let rank = read_u32(r)? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("implausible volume rank {rank}")));
        }
        let shape = (0..rank).map(|_| read_u32(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let mut spacing = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            spacing.push(f64::from_le_bytes(b));
        }
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let ty = VoxelType::from_tag(tag[0])?;
        let n: usize = shape.iter().product();
        let size = match ty {
            VoxelType::F64 => 8,
            VoxelType::F32 => 4,
            VoxelType::U8 => 1,
            VoxelType::I16 => 2,
        };
        let mut raw = vec![0u8; n * size];
        r.read_exact(&mut raw).map_err(|_| Error::Format("volume data is truncated".into()))?;
        let data = match ty {
            VoxelType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
            VoxelType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect(),
            VoxelType::U8 => raw.iter().map(|&b| b as f64).collect(),
            VoxelType::I16 => raw.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f64).collect(),
        };
        Volume::new(shape, spacing, data)
    }

    pub fn save(&self, path: &Path, ty: VoxelType) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f, ty)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Reads an 8-bit image as `(channels, [H, W], interleaved bytes)`.
/// Grayscale files give one channel, everything else is converted to RGB.
#[cfg(feature = "png")]
pub fn read_image(path: &Path) -> Result<(usize, [usize; 2], Vec<u8>)> {
    let img = image::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img.color().channel_count() {
        1 | 2 => Ok((1, [h, w], img.into_luma8().into_raw())),
        _ => Ok((3, [h, w], img.into_rgb8().into_raw())),
    }
}

#[cfg(feature = "png")]
pub fn write_gray_png(path: &Path, shape: [usize; 2], data: &[u8]) -> Result<()> {
    let [h, w] = shape;
    if data.len() != h * w {
        return Err(shape_err!("{} pixels do not fill {h}×{w}", data.len()));
    }
    image::save_buffer(path, data, w as u32, h as u32, image::ExtendedColorType::L8)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Loads a 2D mask image (pixel value = class id) or a PMVL label volume.
pub fn load_labels(path: &Path) -> Result<LabelVolume> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        #[cfg(feature = "png")]
        {
            let (c, [h, w], data) = read_image(path)?;
            if c != 1 {
                return Err(Error::Format(format!("{}: masks must be single-channel", path.display())));
            }
            return LabelVolume::unit(vec![h, w], data);
        }
        #[cfg(not(feature = "png"))]
        return Err(Error::Format("built without image support".into()));
    }
    Volume::load(path)?.to_labels()
}

/// Saves labels as a PNG for 2D grids or a `u8` PMVL volume otherwise.
pub fn save_labels(path: &Path, labels: &LabelVolume) -> Result<()> {
    if labels.shape().len() == 2 && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        #[cfg(feature = "png")]
        return write_gray_png(path, [labels.shape()[0], labels.shape()[1]], labels.labels());
    }
    Volume::from_labels(labels).save(path, VoxelType::U8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pmvl_roundtrip_all_types() {
        let v = Volume::new(vec![2, 3, 2], vec![0.5, 0.5, 1.25], (0..12).map(|i| i as f64 * 3.0).collect()).unwrap();
        for ty in [VoxelType::F64, VoxelType::F32, VoxelType::U8, VoxelType::I16] {
            let mut buf = Vec::new();
            v.write(&mut buf, ty).unwrap();
            assert_eq!(&buf[..4], b"PMVL");
            assert_eq!(Volume::read(&mut buf.as_slice()).unwrap(), v);
        }
        let mut buf = Vec::new();
        v.write(&mut buf, VoxelType::U8).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 12 + 24 + 1 + 12);
        buf.truncate(buf.len() - 1);
        assert!(Volume::read(&mut buf.as_slice()).is_err());
    }
}
