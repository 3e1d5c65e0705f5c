//! Gradient-check targets and attention cost measurements.

use std::fmt::Write as _;

use pmfs_core::cost::{pmfs_attention_macs, quadratic_attention_macs};
use pmfs_core::gradcheck::{finite_diff_check, finite_diff_check_sampled, probe, probe_sum};
use pmfs_core::layers::Ctx;
use pmfs_core::loss::{one_hot, ClassWeights, DEFAULT_EPSILON};
use pmfs_core::model::{PmfsNet, ScalingConfig};
use pmfs_core::params::{ParamId, ParamStore};
use pmfs_core::pmfs::{BranchSet, PmfsBlock, PmfsConfig, QuadraticAttention};
use pmfs_core::{ConvSpec, Error, Graph, Result, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Error bar for every target except the linear one.
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const LINEAR_TOLERANCE: f64 = 1e-9;
/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Truncation error vanishes for a linear map, so the largest step keeps
/// rounding error lowest.
pub const LINEAR_STEP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradRow {
    pub target: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub bar: f64,
}

impl GradRow {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.bar
    }
}

fn signed(shape: &[usize], seed: u64) -> Tensor {
    probe(shape, seed).map(|v| v - 1.0)
}

/// Replaces every parameter by a signed random value so identity
/// initializations cannot hide mistakes.
fn randomize(store: &mut ParamStore, seed: u64) -> Result<()> {
    let ids: Vec<(ParamId, Vec<usize>)> = store.iter().map(|(id, p)| (id, p.value.shape().to_vec())).collect();
    for (i, (id, shape)) in ids.into_iter().enumerate() {
        store.set(id, signed(&shape, seed.wrapping_add(i as u64)).map(|v| 1.6 * v))?;
    }
    Ok(())
}

fn row(target: &str, bar: f64, r: pmfs_core::gradcheck::GradCheck) -> GradRow {
    GradRow { target: target.into(), max_rel_err: r.max_rel_err, checked: r.checked, bar }
}

/// Runs every target. The end-to-end target uses `cfg` at 32 voxels per
/// axis (16 for volumes).
pub fn gradcheck_suite(cfg: &ScalingConfig, seed: u64) -> Result<Vec<GradRow>> {
    let mut rows = Vec::new();

    let spec = ConvSpec::same(2, 3, 3, 2);
    let w = signed(&spec.weight_shape(), seed);
    let lin = finite_diff_check(
        |g, x| {
            let y = g.conv(x, &g.constant(w.clone()), None, &spec.clone().with_bias(false))?;
            let y = g.scale(&g.add(&y, &g.constant(Tensor::full(&[1, 3, 1, 1], 0.25)))?, 3.0);
            probe_sum(g, &y, seed + 1)
        },
        &signed(&[1, 2, 4, 4], seed + 2),
        LINEAR_STEP,
    )?;
    rows.push(row("linear", LINEAR_TOLERANCE, lin));

    let ins = [4, 5, 6];
    let mut store = ParamStore::new();
    let block = PmfsBlock::new(&mut store, "pmfs", PmfsConfig::new(2, 4, ins, 2)?, &mut ChaCha8Rng::seed_from_u64(seed))?;
    randomize(&mut store, seed + 10)?;
    let x1 = signed(&[1, ins[0], 8, 8], seed + 3);
    let x2 = signed(&[1, ins[1], 4, 4], seed + 4);
    let x3 = signed(&[1, ins[2], 2, 2], seed + 5);
    let fused = signed(&[1, 6, 2, 2], seed + 6);
    for (name, part) in [("amff", 0), ("pmcs", 1), ("pmss", 2), ("pmfs_block", 3)] {
        let f = |g: &Graph, v: &Var| -> Result<Var> {
            let bound = store.bind(g);
            let ctx = Ctx::new(g, &bound);
            let set = || BranchSet::new(v.clone(), g.constant(x2.clone()), g.constant(x3.clone()));
            let y = match part {
                0 => block.amff(&ctx, &set()?)?,
                1 => block.pmcs.forward(&ctx, v)?.0,
                2 => block.pmss.forward(&ctx, v)?.0,
                _ => block.forward(&ctx, &set()?)?.a_sp,
            };
            probe_sum(g, &y, seed + 7)
        };
        let input = if part == 1 || part == 2 { &fused } else { &x1 };
        rows.push(row(name, GRAD_TOLERANCE, finite_diff_check(f, input, FD_STEP)?));
    }

    let labels: Vec<u8> = (0..12).map(|i| ((i * 7 + seed as usize) % 3) as u8).collect();
    let target = one_hot(&labels, &[12], 3)?.unsqueeze0();
    let weights = ClassWeights::new(vec![0.2, 0.3, 0.5])?;
    let p = probe(&[1, 3, 12], seed + 8).map(|v| v - 0.5);
    for (name, x) in [("wedl", p), ("wedl_zero", Tensor::zeros(&[1, 3, 12]))] {
        let r = finite_diff_check(|g, x| g.wedl(x, &target, &weights, DEFAULT_EPSILON), &x, FD_STEP)?;
        rows.push(row(name, GRAD_TOLERANCE, r));
    }

    let net = PmfsNet::build(cfg, seed)?;
    let side = if cfg.dims == 2 { 32 } else { 16 };
    let mut shape = vec![1, cfg.in_channels];
    shape.extend(std::iter::repeat(side).take(cfg.dims));
    let r = finite_diff_check_sampled(
        |g, x| {
            let b = net.params.bind(g);
            let out = net.forward(&Ctx::new(g, &b), x)?;
            probe_sum(g, &out.probs, seed + 9)
        },
        &probe(&shape, seed + 11),
        FD_STEP,
        24,
        seed + 12,
    )?;
    rows.push(row(&format!("end_to_end {}-{}d", cfg.name, cfg.dims), GRAD_TOLERANCE, r));
    Ok(rows)
}

pub fn render_gradcheck(rows: &[GradRow]) -> String {
    let mut s = format!("{:<22} {:>12} {:>8} {:>8}  result\n", "target", "max_rel_err", "coords", "bar");
    for r in rows {
        let verdict = if r.pass() { "pass" } else { "FAIL" };
        let _ = writeln!(s, "{:<22} {:>12.3e} {:>8} {:>8.0e}  {verdict}", r.target, r.max_rel_err, r.checked, r.bar);
    }
    s
}

pub const LINEAR_RATIO: (f64, f64) = (1.9, 2.1);
pub const QUADRATIC_RATIO: (f64, f64) = (3.8, 4.2);

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub grid: Vec<usize>,
    pub positions: usize,
    /// Executed attention-product MACs of the block.
    pub pmfs: u64,
    /// Executed MACs of full self-attention over the same fused features.
    pub quadratic: u64,
}

/// Parses `8x8` style extents.
pub fn parse_extent(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|t| t.trim().parse::<usize>().ok().filter(|&v| v > 0))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Invalid(format!("malformed extent `{s}`")))
}

/// Measures both attention forms at one bottleneck grid (2D or 3D).
pub fn measure(grid: &[usize], channels: usize, seed: u64) -> Result<BenchRow> {
    let dims = grid.len();
    if dims != 2 && dims != 3 {
        return Err(Error::Invalid(format!("grid {grid:?} must be 2D or 3D")));
    }
    let ins = [4, 4, 4];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = PmfsBlock::new(&mut store, "pmfs", PmfsConfig::new(channels, 4, ins, dims)?, &mut rng)?;
    let mut qstore = ParamStore::new();
    let quad = QuadraticAttention::new(&mut qstore, "ref", 3 * channels, dims, &mut rng)?;
    let g = Graph::no_grad();
    let mk = |f: usize, s: u64| {
        let mut shape = vec![1, 4];
        shape.extend(grid.iter().map(|e| e * f));
        g.constant(signed(&shape, s))
    };
    let set = BranchSet::new(mk(4, seed + 1), mk(2, seed + 2), mk(1, seed + 3))?;
    let bound = store.bind(&g);
    let out = block.forward(&Ctx::new(&g, &bound), &set)?;
    let pmfs = g.meter().matmul_macs;
    let qb = qstore.bind(&g);
    g.reset_meter();
    quad.forward(&Ctx::new(&g, &qb), &out.a)?;
    let quadratic = g.meter().matmul_macs;
    let positions = grid.iter().product();
    debug_assert_eq!(pmfs, pmfs_attention_macs(3 * channels, positions));
    debug_assert_eq!(quadratic, quadratic_attention_macs(3 * channels, positions));
    Ok(BenchRow { grid: grid.to_vec(), positions, pmfs, quadratic })
}

/// Measures every grid; requires at least three, each doubling the
/// position count of the previous one.
pub fn bench(grids: &[Vec<usize>], channels: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if grids.len() < 3 {
        return Err(Error::Invalid(format!("need at least 3 grid sizes, got {}", grids.len())));
    }
    let rows = grids.iter().map(|g| measure(g, channels, seed)).collect::<Result<Vec<_>>>()?;
    for w in rows.windows(2) {
        if w[1].positions != 2 * w[0].positions {
            return Err(Error::Invalid(format!("grid {:?} does not double {:?}", w[1].grid, w[0].grid)));
        }
    }
    Ok(rows)
}

/// Consecutive (pmfs, quadratic) cost ratios.
pub fn ratios(rows: &[BenchRow]) -> Vec<(f64, f64)> {
    rows.windows(2).map(|w| (w[1].pmfs as f64 / w[0].pmfs as f64, w[1].quadratic as f64 / w[0].quadratic as f64)).collect()
}

pub fn ratios_pass(r: &[(f64, f64)]) -> bool {
    let within = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
    r.iter().all(|&(l, q)| within(l, LINEAR_RATIO) && within(q, QUADRATIC_RATIO))
}

pub fn render_bench(rows: &[BenchRow]) -> String {
    let r = ratios(rows);
    let mut s = format!("{:<10} {:>9} {:>12} {:>14} {:>8} {:>8}\n", "grid", "positions", "pmfs MACs", "full MACs", "pmfs x", "full x");
    for (i, row) in rows.iter().enumerate() {
        let grid = row.grid.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("x");
        let (a, b) = if i == 0 { ("-".into(), "-".into()) } else { (format!("{:.3}", r[i - 1].0), format!("{:.3}", r[i - 1].1)) };
        let _ = writeln!(s, "{grid:<10} {:>9} {:>12} {:>14} {a:>8} {b:>8}", row.positions, row.pmfs, row.quadratic);
    }
    let verdict = if ratios_pass(&r) { "pass" } else { "FAIL" };
    let _ = writeln!(
        s,
        "ratio bounds: pmfs [{}, {}], full [{}, {}]: {verdict}",
        LINEAR_RATIO.0, LINEAR_RATIO.1, QUADRATIC_RATIO.0, QUADRATIC_RATIO.1
    );
    s
}
