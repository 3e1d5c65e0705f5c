//! Dice-family losses over per-class probability maps.
//!
//! Unbatched inputs are `classes × spatial`; the `_batched` forms take a
//! leading batch axis and average over it. The batched forms skip the
//! `[0, 1]` range check so that finite-difference probes around zero stay
//! valid.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Per-class weights of the weighted extended dice loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    w: Vec<f64>,
    normalized: bool,
}

impl ClassWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::Invalid("class weights must not be empty".into()));
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invalid(format!("class weights must be finite and non-negative, got {w:?}")));
        }
        let normalized = (w.iter().sum::<f64>() - 1.0).abs() < 1e-12;
        Ok(ClassWeights { w, normalized })
    }

    /// `1/classes` for every class.
    pub fn uniform(classes: usize) -> Self {
        let n = classes.max(1);
        ClassWeights { w: vec![1.0 / n as f64; n], normalized: true }
    }

    /// Parses a comma-separated list such as `0.25,0.75`.
    pub fn parse(s: &str) -> Result<Self> {
        let w = s
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|e| Error::Invalid(format!("class weight {t:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(w)
    }

    pub fn values(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn normalize(&self) -> Self {
        let s: f64 = self.w.iter().sum();
        if s == 0.0 {
            return Self::uniform(self.w.len());
        }
        ClassWeights { w: self.w.iter().map(|v| v / s).collect(), normalized: true }
    }
}

fn check(p: &Tensor, g: &Tensor, eps: f64, min_rank: usize) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(shape_err!("prediction {:?} and target {:?} differ in shape", p.shape(), g.shape()));
    }
    if p.rank() < min_rank {
        return Err(shape_err!("expected at least {min_rank} axes, got {:?}", p.shape()));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Invalid(format!("epsilon must be positive, got {eps}")));
    }
    Ok(())
}

fn check_range(p: &Tensor) -> Result<()> {
    if p.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Invalid("prediction entries must lie in [0, 1]".into()));
    }
    Ok(())
}

/// `(Σ p·g, Σ p², Σ g², Σ p, Σ g)` for each contiguous class plane.
fn class_sums(p: &[f64], g: &[f64], per: usize) -> Vec<[f64; 5]> {
    p.chunks(per)
        .zip(g.chunks(per))
        .map(|(pc, gc)| {
            let mut s = [0.0; 5];
            for (&a, &b) in pc.iter().zip(gc) {
                s[0] += a * b;
                s[1] += a * a;
                s[2] += b * b;
                s[3] += a;
                s[4] += b;
            }
            s
        })
        .collect()
}

/// Squared-denominator dice coefficient of every class.
pub fn extended_dice_terms(p: &Tensor, g: &Tensor, eps: f64) -> Result<Vec<f64>> {
    check(p, g, eps, 1)?;
    let per = p.numel() / p.shape()[0];
    Ok(class_sums(p.data(), g.data(), per).iter().map(|s| 2.0 * s[0] / (s[1] + s[2] + eps)).collect())
}

/// Weighted extended dice loss, `1 − Σ w_i · 2Σpg / (Σp² + Σg² + ε)`.
pub fn wedl(p: &Tensor, g: &Tensor, w: &ClassWeights, eps: f64) -> Result<f64> {
    check_range(p)?;
    let terms = extended_dice_terms(p, g, eps)?;
    if terms.len() != w.len() {
        return Err(shape_err!("{} class weights for {} classes", w.len(), terms.len()));
    }
    Ok(1.0 - terms.iter().zip(w.values()).map(|(d, w)| d * w).sum::<f64>())
}

/// Standard dice loss `1 − (2Σpg + ε)/(Σp + Σg + ε)`, averaged over classes.
pub fn standard_dice(p: &Tensor, g: &Tensor, eps: f64) -> Result<f64> {
    check_range(p)?;
    check(p, g, eps, 1)?;
    let nc = p.shape()[0];
    let per = p.numel() / nc;
    let sums = class_sums(p.data(), g.data(), per);
    Ok(sums.iter().map(|s| 1.0 - (2.0 * s[0] + eps) / (s[3] + s[4] + eps)).sum::<f64>() / nc as f64)
}

pub(crate) fn wedl_batched(p: &Tensor, g: &Tensor, w: &[f64], eps: f64) -> Result<f64> {
    check(p, g, eps, 2)?;
    let (b, nc) = (p.shape()[0], p.shape()[1]);
    if w.len() != nc {
        return Err(shape_err!("{} class weights for {nc} classes", w.len()));
    }
    let per = p.numel() / (b * nc);
    let sums = class_sums(p.data(), g.data(), per);
    let mut total = 0.0;
    for (i, s) in sums.iter().enumerate() {
        total += w[i % nc] * 2.0 * s[0] / (s[1] + s[2] + eps);
    }
    Ok((b as f64 - total) / b as f64)
}

pub(crate) fn wedl_batched_grad(p: &Tensor, g: &Tensor, w: &[f64], eps: f64) -> Tensor {
    let (b, nc) = (p.shape()[0], p.shape()[1]);
    let per = p.numel() / (b * nc);
    let sums = class_sums(p.data(), g.data(), per);
    let mut out = vec![0.0; p.numel()];
    for (i, s) in sums.iter().enumerate() {
        let d = s[1] + s[2] + eps;
        let c = -w[i % nc] / (b as f64 * d * d);
        for j in i * per..(i + 1) * per {
            out[j] = c * (2.0 * g.data()[j] * d - 4.0 * s[0] * p.data()[j]);
        }
    }
    Tensor::from_parts(p.shape().to_vec(), out)
}

pub(crate) fn dice_batched(p: &Tensor, g: &Tensor, eps: f64) -> Result<f64> {
    check(p, g, eps, 2)?;
    let (b, nc) = (p.shape()[0], p.shape()[1]);
    let per = p.numel() / (b * nc);
    let sums = class_sums(p.data(), g.data(), per);
    let total: f64 = sums.iter().map(|s| 1.0 - (2.0 * s[0] + eps) / (s[3] + s[4] + eps)).sum();
    Ok(total / (b * nc) as f64)
}

pub(crate) fn dice_batched_grad(p: &Tensor, g: &Tensor, eps: f64) -> Tensor {
    let (b, nc) = (p.shape()[0], p.shape()[1]);
    let per = p.numel() / (b * nc);
    let sums = class_sums(p.data(), g.data(), per);
    let mut out = vec![0.0; p.numel()];
    let scale = 1.0 / (b * nc) as f64;
    for (i, s) in sums.iter().enumerate() {
        let d = s[3] + s[4] + eps;
        let num = 2.0 * s[0] + eps;
        for j in i * per..(i + 1) * per {
            out[j] = -scale * (2.0 * g.data()[j] * d - num) / (d * d);
        }
    }
    Tensor::from_parts(p.shape().to_vec(), out)
}

/// One-hot encoding of an integer mask `spatial` into `classes × spatial`.
/// With `classes == 1` the single channel is the foreground indicator.
pub fn one_hot(mask: &[u8], spatial: &[usize], classes: usize) -> Result<Tensor> {
    let n: usize = spatial.iter().product();
    if mask.len() != n {
        return Err(shape_err!("mask of {} voxels does not fill {spatial:?}", mask.len()));
    }
    let mut shape = vec![classes];
    shape.extend_from_slice(spatial);
    let mut out = vec![0.0; classes * n];
    for (j, &m) in mask.iter().enumerate() {
        if classes == 1 {
            out[j] = f64::from(m > 0);
        } else if (m as usize) < classes {
            out[m as usize * n + j] = 1.0;
        } else {
            return Err(Error::Invalid(format!("label {m} out of range for {classes} classes")));
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_is_near_zero() {
        let mut mask = vec![0u8; 400];
        mask[..200].iter_mut().for_each(|m| *m = 1);
        let g = one_hot(&mask, &[20, 20], 2).unwrap();
        let l = wedl(&g, &g, &ClassWeights::uniform(2), DEFAULT_EPSILON).unwrap();
        assert!(l <= 1e-5 && l > 0.0);
        let expected = 0.5 * (1e-6 / (400.0 + 1e-6)) * 2.0;
        assert!((l - expected).abs() < 1e-15);
    }

    #[test]
    fn empty_prediction_is_one() {
        let g = one_hot(&[1, 0, 1, 1], &[2, 2], 2).unwrap();
        let p = Tensor::zeros(g.shape());
        assert_eq!(wedl(&p, &g, &ClassWeights::uniform(2), 1e-6).unwrap(), 1.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let g = Tensor::zeros(&[1, 4]);
        assert!(wedl(&g, &Tensor::zeros(&[1, 5]), &ClassWeights::uniform(1), 1e-6).is_err());
        assert!(wedl(&g, &g, &ClassWeights::uniform(1), -1.0).is_err());
        assert!(ClassWeights::parse("0.5,-1").is_err());
        assert!(ClassWeights::parse("0.25, 0.75").unwrap().is_normalized());
    }

    #[test]
    fn inverted_standard_dice_near_one() {
        let mask: Vec<u8> = (0..64).map(|i| (i % 2) as u8).collect();
        let g = one_hot(&mask, &[8, 8], 1).unwrap();
        let p = g.map(|v| 1.0 - v);
        assert!(standard_dice(&p, &g, 1e-6).unwrap() > 0.999);
        assert!(standard_dice(&g, &g, 1e-6).unwrap() < 1e-7);
    }
}
