//! Overlap and surface-distance metrics between label volumes.
//!
//! Conventions: a class absent from both volumes scores 1 on DSC/IoU, a
//! class absent from exactly one scores 0. Surfaces use face connectivity
//! (4 in 2D, 6 in 3D) and treat the outside of the volume as background.
//! Surface distances are undefined, not zero, when either set is empty.

use crate::error::{shape_err, Error, Result};

pub const DEFAULT_THETA_MM: f64 = 1.0;
/// Above this many points per set, distances go through a distance transform.
pub const PAIRWISE_LIMIT: usize = 10_000;

/// Integer class id per voxel on a 2D or 3D grid with physical spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    shape: Vec<usize>,
    spacing: Vec<f64>,
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(shape: Vec<usize>, spacing: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if !(shape.len() == 2 || shape.len() == 3) || shape.contains(&0) {
            return Err(shape_err!("label volumes are 2D or 3D with positive extents, got {shape:?}"));
        }
        if spacing.len() != shape.len() || spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Invalid(format!("spacing {spacing:?} must be positive per axis of {shape:?}")));
        }
        if labels.len() != shape.iter().product::<usize>() {
            return Err(shape_err!("{} labels do not fill {shape:?}", labels.len()));
        }
        Ok(LabelVolume { shape, spacing, labels })
    }

    /// Unit spacing on every axis.
    pub fn unit(shape: Vec<usize>, labels: Vec<u8>) -> Result<Self> {
        let spacing = vec![1.0; shape.len()];
        Self::new(shape, spacing, labels)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn with_spacing(&self, spacing: Vec<f64>) -> Result<Self> {
        Self::new(self.shape.clone(), spacing, self.labels.clone())
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn dsc(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / d as f64
        }
    }

    pub fn iou(&self) -> f64 {
        let d = self.tp + self.fp + self.fn_;
        if d == 0 {
            1.0
        } else {
            self.tp as f64 / d as f64
        }
    }

    pub fn acc(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total().max(1) as f64
    }
}

fn same_grid(a: &LabelVolume, b: &LabelVolume) -> Result<()> {
    if a.shape != b.shape {
        return Err(shape_err!("volumes differ in shape: {:?} vs {:?}", a.shape, b.shape));
    }
    Ok(())
}

pub fn confusion_counts(pred: &LabelVolume, gt: &LabelVolume, class: u8) -> Result<Confusion> {
    same_grid(pred, gt)?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        match (p == class, g == class) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Mean IoU over classes `0..classes`.
pub fn miou(pred: &LabelVolume, gt: &LabelVolume, classes: usize) -> Result<f64> {
    let mut s = 0.0;
    for c in 0..classes {
        s += confusion_counts(pred, gt, c as u8)?.iou();
    }
    Ok(s / classes.max(1) as f64)
}

/// Surface voxels of one class, held as grid coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSet {
    pub points: Vec<[usize; 3]>,
    pub shape: Vec<usize>,
    pub spacing: Vec<f64>,
}

impl SurfaceSet {
    pub fn new(points: Vec<[usize; 3]>, shape: Vec<usize>, spacing: Vec<f64>) -> Self {
        SurfaceSet { points, shape, spacing }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn dist(&self, p: &[usize; 3], q: &[usize; 3]) -> f64 {
        let mut s = 0.0;
        for (a, sp) in self.spacing.iter().enumerate() {
            let d = (p[a] as f64 - q[a] as f64) * sp;
            s += d * d;
        }
        s.sqrt()
    }
}

fn coords(i: usize, shape: &[usize]) -> [usize; 3] {
    let mut c = [0; 3];
    let mut r = i;
    for a in (0..shape.len()).rev() {
        c[a] = r % shape[a];
        r /= shape[a];
    }
    c
}

/// Foreground voxels of `class` with at least one face neighbor that is
/// background or outside the volume.
pub fn extract_surface(v: &LabelVolume, class: u8) -> SurfaceSet {
    let shape = &v.shape;
    let strides = crate::tensor::strides(shape);
    let mut points = Vec::new();
    for (i, &l) in v.labels.iter().enumerate() {
        if l != class {
            continue;
        }
        let c = coords(i, shape);
        let boundary = (0..shape.len()).any(|a| {
            c[a] == 0 || c[a] + 1 == shape[a] || v.labels[i - strides[a]] != class || v.labels[i + strides[a]] != class
        });
        if boundary {
            points.push(c);
        }
    }
    SurfaceSet::new(points, shape.clone(), v.spacing.clone())
}

/// Exact 1D squared distance transform with sample spacing `s`
/// (lower envelope of parabolas).
fn edt_1d(f: &mut [f64], s: f64, v: &mut Vec<usize>, z: &mut Vec<f64>, out: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    out.clear();
    let s2 = s * s;
    let inf = f64::INFINITY;
    for q in 0..n {
        if f[q] == inf {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(-inf);
                    break;
                }
                Some(&p) => {
                    let (qf, pf) = (q as f64, p as f64);
                    let x = ((f[q] + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf));
                    if x <= *z.last().expect("paired") {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(x);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        return;
    }
    let mut k = 0;
    for q in 0..n {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        out.push(s2 * d * d + f[v[k]]);
    }
    f.copy_from_slice(out);
}

/// Euclidean distance from every grid voxel to the nearest point of `b`.
pub fn distance_transform(b: &SurfaceSet) -> Vec<f64> {
    let shape = &b.shape;
    let n: usize = shape.iter().product();
    let mut f = vec![f64::INFINITY; n];
    let strides = crate::tensor::strides(shape);
    for p in &b.points {
        let i: usize = (0..shape.len()).map(|a| p[a] * strides[a]).sum();
        f[i] = 0.0;
    }
    let (mut v, mut z, mut out) = (Vec::new(), Vec::new(), Vec::new());
    for a in 0..shape.len() {
        let len = shape[a];
        let st = strides[a];
        let mut line = vec![0.0; len];
        for start in 0..n {
            if (start / st) % len != 0 {
                continue;
            }
            for (k, l) in line.iter_mut().enumerate() {
                *l = f[start + k * st];
            }
            edt_1d(&mut line, b.spacing[a], &mut v, &mut z, &mut out);
            for (k, l) in line.iter().enumerate() {
                f[start + k * st] = *l;
            }
        }
    }
    f.iter_mut().for_each(|d| *d = d.sqrt());
    f
}

/// `d(p, B)` for every `p ∈ A`.
pub fn point_to_set(a: &SurfaceSet, b: &SurfaceSet) -> Result<Vec<f64>> {
    if a.shape != b.shape || a.spacing != b.spacing {
        return Err(shape_err!("surface sets come from different grids"));
    }
    if b.is_empty() {
        return Err(Error::Undefined("distance to an empty surface".into()));
    }
    if a.len() <= PAIRWISE_LIMIT && b.len() <= PAIRWISE_LIMIT {
        return Ok(a.points.iter().map(|p| b.points.iter().map(|q| a.dist(p, q)).fold(f64::INFINITY, f64::min)).collect());
    }
    let dt = distance_transform(b);
    let strides = crate::tensor::strides(&b.shape);
    Ok(a.points.iter().map(|p| dt[(0..b.shape.len()).map(|ax| p[ax] * strides[ax]).sum::<usize>()]).collect())
}

fn both_nonempty(sp: &SurfaceSet, sg: &SurfaceSet) -> Result<()> {
    match (sp.is_empty(), sg.is_empty()) {
        (false, false) => Ok(()),
        (true, true) => Err(Error::Undefined("both surfaces are empty".into())),
        (true, false) => Err(Error::Undefined("predicted surface is empty".into())),
        (false, true) => Err(Error::Undefined("reference surface is empty".into())),
    }
}

/// Symmetric Hausdorff distance in physical units.
pub fn hausdorff(sp: &SurfaceSet, sg: &SurfaceSet) -> Result<f64> {
    both_nonempty(sp, sg)?;
    let ab = point_to_set(sp, sg)?.into_iter().fold(0.0, f64::max);
    let ba = point_to_set(sg, sp)?.into_iter().fold(0.0, f64::max);
    Ok(ab.max(ba))
}

/// Average symmetric surface distance.
pub fn assd(sp: &SurfaceSet, sg: &SurfaceSet) -> Result<f64> {
    both_nonempty(sp, sg)?;
    let ab: f64 = point_to_set(sp, sg)?.iter().sum();
    let ba: f64 = point_to_set(sg, sp)?.iter().sum();
    Ok((ab + ba) / (sp.len() + sg.len()) as f64)
}

/// Fraction of predicted surface points strictly closer than `theta` to
/// the reference surface.
pub fn surface_overlap(sp: &SurfaceSet, sg: &SurfaceSet, theta: f64) -> Result<f64> {
    if !(theta > 0.0 && theta.is_finite()) {
        return Err(Error::Invalid(format!("theta must be positive, got {theta}")));
    }
    if sp.is_empty() {
        return Err(Error::Undefined("predicted surface is empty".into()));
    }
    if sg.is_empty() {
        return Ok(0.0);
    }
    let d = point_to_set(sp, sg)?;
    Ok(d.iter().filter(|&&x| x < theta).count() as f64 / d.len() as f64)
}

/// All seven metrics for one case. Overlap metrics average the foreground
/// classes; `miou` includes background; surface metrics are `None` when
/// undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub dsc: f64,
    pub iou: f64,
    pub miou: f64,
    pub acc: f64,
    pub hd: Option<f64>,
    pub assd: Option<f64>,
    pub so: Option<f64>,
    pub theta: f64,
}

pub fn evaluate(pred: &LabelVolume, gt: &LabelVolume, classes: usize, theta: f64) -> Result<MetricReport> {
    same_grid(pred, gt)?;
    if classes < 2 {
        return Err(Error::Invalid("evaluation needs at least background and one foreground class".into()));
    }
    if !(theta > 0.0 && theta.is_finite()) {
        return Err(Error::Invalid(format!("theta must be positive, got {theta}")));
    }
    let fg = classes - 1;
    let (mut dsc, mut iou) = (0.0, 0.0);
    let correct = pred.labels.iter().zip(&gt.labels).filter(|(p, g)| p == g).count();
    let mut surf: [Vec<f64>; 3] = Default::default();
    for c in 1..classes as u8 {
        let cc = confusion_counts(pred, gt, c)?;
        dsc += cc.dsc();
        iou += cc.iou();
        let (sp, sg) = (extract_surface(pred, c), extract_surface(gt, c));
        if let Ok(h) = hausdorff(&sp, &sg) {
            surf[0].push(h);
            surf[1].push(assd(&sp, &sg)?);
        }
        if let Ok(s) = surface_overlap(&sp, &sg, theta) {
            surf[2].push(s);
        }
    }
    let mean = |v: &Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(MetricReport {
        dsc: dsc / fg as f64,
        iou: iou / fg as f64,
        miou: miou(pred, gt, classes)?,
        acc: correct as f64 / pred.labels.len() as f64,
        hd: mean(&surf[0]),
        assd: mean(&surf[1]),
        so: mean(&surf[2]),
        theta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_surface() {
        let mut l = vec![0u8; 25];
        for y in 1..4 {
            for x in 1..4 {
                l[y * 5 + x] = 1;
            }
        }
        let s = extract_surface(&LabelVolume::unit(vec![5, 5], l).unwrap(), 1);
        assert_eq!(s.len(), 8);
        assert!(!s.points.contains(&[2, 2, 0]));
    }

    #[test]
    fn two_points() {
        let sh = vec![8, 8];
        let a = SurfaceSet::new(vec![[1, 1, 0]], sh.clone(), vec![1.0, 1.0]);
        let b = SurfaceSet::new(vec![[1, 6, 0]], sh, vec![1.0, 1.0]);
        assert_eq!(hausdorff(&a, &b).unwrap(), 5.0);
        assert_eq!(assd(&a, &b).unwrap(), 5.0);
        assert_eq!(surface_overlap(&a, &b, 1.0).unwrap(), 0.0);
        assert_eq!(surface_overlap(&a, &a, 1.0).unwrap(), 1.0);
    }
}
