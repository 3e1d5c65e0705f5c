//! Intensity clipping, resampling, normalization and cropping of CT volumes.

use crate::error::{Error, Result};
use crate::graph::Interp;
use crate::volume::Volume;

pub const HU_CLIP: (f64, f64) = (-1412.0, 17943.0);
pub const TARGET_SPACING_MM: f64 = 0.5;
pub const CROP_3D: [usize; 3] = [160, 160, 96];

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessSpec {
    pub clip: (f64, f64),
    pub target_spacing: f64,
    pub interp: Interp,
    /// Center crop, padding with zeros where the volume is smaller.
    pub crop: Option<Vec<usize>>,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        PreprocessSpec { clip: HU_CLIP, target_spacing: TARGET_SPACING_MM, interp: Interp::Linear, crop: Some(CROP_3D.to_vec()) }
    }
}

/// Things worth telling the user about a preprocessing run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PreprocessLog {
    pub clipped: usize,
    pub constant: bool,
}

pub fn clip(v: &mut Volume, lo: f64, hi: f64) -> usize {
    let mut n = 0;
    for x in &mut v.data {
        if *x < lo || *x > hi {
            n += 1;
            *x = x.clamp(lo, hi);
        }
    }
    n
}

/// Resamples to `target` mm on every axis. Sample `i` of the output sits at
/// physical offset `i·target` from the first input voxel; positions past
/// the last input voxel take its value.
pub fn resample(v: &Volume, target: f64, interp: Interp) -> Result<Volume> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::Invalid(format!("target spacing must be positive, got {target}")));
    }
    let mut cur = v.clone();
    for a in 0..v.shape.len() {
        if cur.spacing[a] == target {
            continue;
        }
        cur = resample_axis(&cur, a, target, interp);
    }
    Ok(cur)
}

fn resample_axis(v: &Volume, axis: usize, target: f64, interp: Interp) -> Volume {
    let n = v.shape[axis];
    let ratio = target / v.spacing[axis];
    let m = ((n as f64 / ratio).round() as usize).max(1);
    let outer: usize = v.shape[..axis].iter().product();
    let inner: usize = v.shape[axis + 1..].iter().product();
    let mut data = vec![0.0; outer * m * inner];
    for j in 0..m {
        let src = (j as f64 * ratio).min((n - 1) as f64);
        let (i0, i1, lam) = match interp {
            Interp::Nearest => {
                let i = (src.round() as usize).min(n - 1);
                (i, i, 0.0)
            }
            Interp::Linear => {
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, src - i0 as f64)
            }
        };
        for o in 0..outer {
            for t in 0..inner {
                let a = v.data[(o * n + i0) * inner + t];
                let b = v.data[(o * n + i1) * inner + t];
                data[(o * m + j) * inner + t] = if lam == 0.0 { a } else { (1.0 - lam) * a + lam * b };
            }
        }
    }
    let mut shape = v.shape.clone();
    shape[axis] = m;
    let mut spacing = v.spacing.clone();
    spacing[axis] = target;
    Volume { shape, spacing, data }
}

/// Maps the intensity range onto `[0, 1]`. A constant volume becomes all
/// zeros; the return value reports that case.
pub fn normalize(v: &mut Volume) -> bool {
    let (lo, hi) = v.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if hi <= lo {
        v.data.iter_mut().for_each(|x| *x = 0.0);
        return true;
    }
    let span = hi - lo;
    v.data.iter_mut().for_each(|x| *x = (*x - lo) / span);
    false
}

/// Center crop (or zero pad) to `shape`. An odd excess removes one more
/// voxel from the end than from the start.
pub fn center_crop_or_pad(v: &Volume, shape: &[usize]) -> Result<Volume> {
    if shape.len() != v.shape.len() || shape.contains(&0) {
        return Err(Error::Invalid(format!("cannot crop {:?} to {shape:?}", v.shape)));
    }
    let rank = shape.len();
    let offset: Vec<isize> = v.shape.iter().zip(shape).map(|(&n, &m)| (n as isize - m as isize).div_euclid(2)).collect();
    let in_strides = crate::tensor::strides(&v.shape);
    let total: usize = shape.iter().product();
    let mut data = vec![0.0; total];
    let mut idx = vec![0usize; rank];
    for out in data.iter_mut() {
        let mut src = 0usize;
        let mut inside = true;
        for a in 0..rank {
            let s = idx[a] as isize + offset[a];
            if s < 0 || s >= v.shape[a] as isize {
                inside = false;
                break;
            }
            src += s as usize * in_strides[a];
        }
        if inside {
            *out = v.data[src];
        }
        for a in (0..rank).rev() {
            idx[a] += 1;
            if idx[a] < shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    Volume::new(shape.to_vec(), v.spacing.clone(), data)
}

pub fn preprocess_volume(v: &Volume, spec: &PreprocessSpec) -> Result<(Volume, PreprocessLog)> {
    if v.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("input volume".into()));
    }
    let mut out = v.clone();
    let clipped = clip(&mut out, spec.clip.0, spec.clip.1);
    let mut out = resample(&out, spec.target_spacing, spec.interp)?;
    let constant = normalize(&mut out);
    if constant {
        log::warn!("volume is constant after clipping; normalized to zeros");
    }
    if let Some(shape) = &spec.crop {
        out = center_crop_or_pad(&out, shape)?;
    }
    Ok((out, PreprocessLog { clipped, constant }))
}
