//! Central-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of a finite-difference check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `max |a − c| / (|a| + |c| + 1e-12)` over the checked coordinates.
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Checks the gradient of the scalar `f` at `x` over every coordinate.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheck>
where
    F: Fn(&Graph, &Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    check_coords(&f, x, eps, &all)
}

/// As [`finite_diff_check`] on at most `max_coords` coordinates drawn
/// without replacement from a seeded generator.
pub fn finite_diff_check_sampled<F>(f: F, x: &Tensor, eps: f64, max_coords: usize, seed: u64) -> Result<GradCheck>
where
    F: Fn(&Graph, &Var) -> Result<Var>,
{
    if max_coords >= x.numel() {
        return finite_diff_check(f, x, eps);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = sample(&mut rng, x.numel(), max_coords).into_vec();
    coords.sort_unstable();
    check_coords(&f, x, eps, &coords)
}

fn check_coords<F>(f: &F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<GradCheck>
where
    F: Fn(&Graph, &Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Invalid(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    let g = Graph::new();
    let xv = g.leaf(x.clone());
    let out = f(&g, &xv)?;
    let analytic = g.backward(&out)?.wrt(&xv);
    let eval = |t: Tensor| -> Result<f64> {
        let g = Graph::no_grad();
        let v = g.constant(t);
        f(&g, &v)?.value().item()
    };
    let mut report = GradCheck { max_rel_err: 0.0, worst_index: 0, checked: coords.len() };
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let central = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
        if !rel.is_finite() {
            return Err(Error::NonFinite(format!("gradient check at coordinate {i}")));
        }
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
    }
    Ok(report)
}

/// A fixed pseudo-random probe `r` with entries in `[0.5, 1.5]`; reducing an
/// output to `Σ r ⊙ y` keeps every coordinate's gradient away from the
/// cancellations that a plain sum produces after normalization layers.
pub fn probe(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, 0.5, 1.5, &mut rng)
}

/// `Σ probe ⊙ y` as a graph scalar.
pub fn probe_sum(g: &Graph, y: &Var, seed: u64) -> Result<Var> {
    let r = g.constant(probe(y.shape(), seed));
    let prod = g.mul(y, &r)?;
    Ok(g.sum(&prod))
}
