//! Acceptance suite: one pass/fail line per criterion, tolerances pinned
//! below. Runs without the libtest harness; exits non-zero on any failure.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use pmfs_cli::args::{GenArgs, Global, TrainArgs};
use pmfs_cli::commands::{cmd_gen, train_from_manifest};
use pmfs_cli::suite::{bench, gradcheck_suite, ratios, LINEAR_RATIO, QUADRATIC_RATIO};
use pmfs_core::cost::{check_flops, check_params, count_flops, count_params, flop_anchor, param_anchor};
use pmfs_core::layers::Ctx;
use pmfs_core::loss::{one_hot, standard_dice, wedl, ClassWeights, DEFAULT_EPSILON};
use pmfs_core::metrics::*;
use pmfs_core::model::{AttentionMode, DecoderMode, PmfsNet, Preset, ScalingConfig};
use pmfs_core::pmfs::BranchSet;
use pmfs_core::{Graph, Tensor};
use rand::Rng;

const PARAM_TOL: f64 = 0.15;
const FLOP_TOL: f64 = 0.25;
const GRAD_BAR: f64 = 1e-4;
const ORACLE_TOL_ATTENTION: f64 = 1e-6;
const ORACLE_TOL_LOSS: f64 = 1e-10;
const IDENTITY_TOL: f64 = 1e-12;
const TRAIN_IOU_BAR: f64 = 0.85;
const TRAIN_EPOCHS: usize = 30;
const TRAIN_BUDGET: Duration = Duration::from_secs(15 * 60);
const BLOB_COUNT: usize = 200;
const BLOB_EXTENT: &str = "32x32";
const BLOB_SEED: u64 = 7;

struct Line {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn global(out: &Path, config: Option<&str>, seed: u64) -> Global {
    Global {
        config: config.map(str::to_string),
        seed,
        out: Some(out.to_path_buf()),
        theta: DEFAULT_THETA_MM,
        weights: None,
        precision: "f64".into(),
    }
}

fn gen_args(count: usize, extent: &str) -> GenArgs {
    GenArgs { dims: 2, extent: extent.into(), count, noise: 0.1, contrast: "0.3,0.6".into(), no_notches: false }
}

fn train_args(manifest: &Path, epochs: usize) -> TrainArgs {
    TrainArgs {
        manifest: manifest.to_path_buf(),
        run: None,
        epochs: Some(epochs),
        lr: None,
        weight_decay: None,
        optimizer: None,
        batch_size: None,
        val_fraction: None,
    }
}

fn c1_params() -> Line {
    let mut pass = true;
    let mut parts = Vec::new();
    for dims in [3, 2] {
        for p in Preset::ALL {
            let t = Instant::now();
            let net = PmfsNet::build(&ScalingConfig::preset(p, dims).unwrap(), 0).unwrap();
            let m = count_params(&net).unwrap().total_params() as f64 / 1e6;
            let target = param_anchor(p, dims).unwrap();
            let c = check_params(m, target);
            let ok = (c.ratio - 1.0).abs() <= PARAM_TOL && t.elapsed() < Duration::from_secs(1);
            pass &= ok;
            parts.push(format!("{}-{dims}d {m:.3}/{target}", p.as_str()));
        }
    }
    Line { id: "1 parameter anchors (±15%, <1 s each)", pass, detail: parts.join(", ") }
}

fn c2_flops() -> Line {
    let mut pass = true;
    let mut parts = Vec::new();
    for (p, dims) in [(Preset::Tiny, 3), (Preset::Basic, 2)] {
        let t = Instant::now();
        let net = PmfsNet::build(&ScalingConfig::preset(p, dims).unwrap(), 0).unwrap();
        let (target, shape) = flop_anchor(p, dims).unwrap();
        let g = count_flops(&net, &shape).unwrap().total_macs() as f64 / 1e9;
        let c = check_flops(g, target);
        pass &= (c.ratio - 1.0).abs() <= FLOP_TOL && t.elapsed() < Duration::from_secs(5);
        let conv = if c.doubled { "2x" } else { "1x" };
        parts.push(format!("{}-{dims}d {:.2} G ({conv} MACs)/{target} ratio {:.3}", p.as_str(), c.measured, c.ratio));
    }
    Line { id: "2 FLOP anchors (±25%, <5 s)", pass, detail: parts.join(", ") }
}

fn c3_linear() -> Line {
    let t = Instant::now();
    let sets = [vec![vec![10, 10], vec![10, 20], vec![20, 20]], vec![vec![4, 4, 4], vec![8, 4, 4], vec![8, 8, 4]]];
    let mut pass = true;
    let mut detail = Vec::new();
    for set in &sets {
        let rows = bench(set, 16, 1).unwrap();
        for (l, q) in ratios(&rows) {
            pass &= (LINEAR_RATIO.0..=LINEAR_RATIO.1).contains(&l) && (QUADRATIC_RATIO.0..=QUADRATIC_RATIO.1).contains(&q);
            detail.push(format!("{l:.3}/{q:.3}"));
        }
    }
    pass &= t.elapsed() < Duration::from_secs(10);
    Line { id: "3 linear vs quadratic attention cost", pass, detail: format!("pmfs/full ratios {}", detail.join(" ")) }
}

fn c4_shapes() -> Line {
    let cfg = ScalingConfig::preset(Preset::Tiny, 3).unwrap();
    let net = PmfsNet::build(&cfg, 0).unwrap();
    let g = Graph::no_grad();
    let b = net.params.bind(&g);
    let ctx = Ctx::new(&g, &b);
    let x = g.constant(Tensor::uniform(&[1, 1, 160, 160, 96], 0.0, 1.0, &mut rng(4)));
    let s1 = net.stages[0].forward(&ctx, &x).unwrap();
    let s2 = net.stages[1].forward(&ctx, &s1).unwrap();
    let s3 = net.stages[2].forward(&ctx, &s2).unwrap();
    drop(x);
    let got_branches = [s1.shape().to_vec(), s2.shape().to_vec(), s3.shape().to_vec()];
    let set = BranchSet::new(s1, s2, s3).unwrap();
    let out = net.block.as_ref().unwrap().forward(&ctx, &set).unwrap();
    let got = vec![
        got_branches[0].clone(),
        got_branches[1].clone(),
        got_branches[2].clone(),
        out.a.shape().to_vec(),
        out.a_ch.shape().to_vec(),
        out.z_ch.shape().to_vec(),
        out.a_sp.shape().to_vec(),
        out.z_sp.shape().to_vec(),
    ];
    let want: Vec<Vec<usize>> = vec![
        vec![1, 36, 80, 80, 48],
        vec![1, 64, 40, 40, 24],
        vec![1, 104, 20, 20, 12],
        vec![1, 144, 20, 20, 12],
        vec![1, 144, 20, 20, 12],
        vec![1, 144, 1, 1, 1],
        vec![1, 104, 20, 20, 12],
        vec![1, 1, 20, 20, 12, 3],
    ];
    let detail = got.iter().map(|s| format!("{:?}", &s[1..])).collect::<Vec<_>>().join(" ");
    Line { id: "4 TINY 3D pipeline shapes", pass: got == want, detail }
}

fn c5_gradients() -> Line {
    let t = Instant::now();
    let rows = gradcheck_suite(&ScalingConfig::preset(Preset::Tiny, 2).unwrap(), 0).unwrap();
    let worst = rows.iter().filter(|r| r.target != "linear").map(|r| r.max_rel_err).fold(0.0, f64::max);
    let pass = rows.iter().all(|r| r.max_rel_err < GRAD_BAR && r.pass()) && t.elapsed() < Duration::from_secs(120);
    let names = rows.iter().map(|r| r.target.as_str()).collect::<Vec<_>>().join(", ");
    Line { id: "5 gradient suite (<1e-4, <2 min)", pass, detail: format!("worst {worst:.2e} over {names}") }
}

fn random_points<R: Rng>(r: &mut R, shape: &[usize]) -> Vec<[usize; 3]> {
    let mut pts: Vec<[usize; 3]> = (0..r.gen_range(1..=30))
        .map(|_| {
            let mut p = [0; 3];
            for (a, &s) in shape.iter().enumerate() {
                p[a] = r.gen_range(0..s);
            }
            p
        })
        .collect();
    pts.sort();
    pts.dedup();
    pts
}

fn c6_oracles() -> Line {
    let mut worst_att = 0.0f64;
    for trial in 0..20u64 {
        let (b, mut store) = block(4, 6, [3, 3, 3], 2, trial);
        randomize(&mut store, 1000 + trial);
        let a = random(&[12, 4, 4], 2000 + trial);
        let g = Graph::no_grad();
        let bound = store.bind(&g);
        let ctx = Ctx::new(&g, &bound);
        let x = g.constant(a.unsqueeze0());
        let (a_ch, z_ch) = b.pmcs.forward(&ctx, &x).unwrap();
        let (v, gate) = pmcs_oracle(&store, &b.pmcs, &a);
        for c in 0..12 {
            worst_att = worst_att.max((z_ch.value().data()[c] - gate[c]).abs());
            for n in 0..16 {
                worst_att = worst_att.max((a_ch.value().data()[c * 16 + n] - v[c][n] * gate[c]).abs());
            }
        }
        let (a_sp, z_sp) = b.pmss.forward(&ctx, &x).unwrap();
        let (gated, z) = pmss_oracle(&store, &b.pmss, &a);
        for n in 0..16 {
            for br in 0..3 {
                worst_att = worst_att.max((z_sp.value().data()[n * 3 + br] - z[br][n]).abs());
            }
        }
        let want = b.pmss.w_out.forward(&ctx, &g.constant(gated.unsqueeze0())).unwrap();
        worst_att = worst_att.max(want.value().max_abs_diff(a_sp.value()));
    }

    let mut r = rng(6);
    let mut surface_exact = true;
    for trial in 0..200 {
        let shape: Vec<usize> = if trial % 2 == 0 { vec![9, 7] } else { vec![5, 6, 4] };
        let spacing: Vec<f64> = shape.iter().map(|_| [1.0, 0.5, 2.0][r.gen_range(0..3)]).collect();
        let a = SurfaceSet::new(random_points(&mut r, &shape), shape.clone(), spacing.clone());
        let b = SurfaceSet::new(random_points(&mut r, &shape), shape.clone(), spacing.clone());
        let vecs = |s: &SurfaceSet| s.points.iter().map(|p| p[..shape.len()].to_vec()).collect::<Vec<_>>();
        let ab = directed_min_dists(&vecs(&a), &vecs(&b), &spacing);
        let ba = directed_min_dists(&vecs(&b), &vecs(&a), &spacing);
        let hd = ab.iter().chain(&ba).fold(0.0f64, |m, &d| m.max(d));
        let asd = (ab.iter().sum::<f64>() + ba.iter().sum::<f64>()) / (ab.len() + ba.len()) as f64;
        let so = ab.iter().filter(|&&d| d < 1.0).count() as f64 / ab.len() as f64;
        surface_exact &= hausdorff(&a, &b).unwrap() == hd && assd(&a, &b).unwrap() == asd && surface_overlap(&a, &b, 1.0).unwrap() == so;
    }

    let mut worst_loss = 0.0f64;
    for trial in 0..200u64 {
        let classes = r.gen_range(2..5);
        let voxels = r.gen_range(1..50);
        let p = Tensor::from_fn(&[classes, voxels], |_| r.gen::<f64>());
        let labels: Vec<u8> = (0..voxels).map(|_| r.gen_range(0..classes as u8)).collect();
        let gt = one_hot(&labels, &[voxels], classes).unwrap();
        let w: Vec<f64> = (0..classes).map(|_| r.gen_range(0.1..1.0)).collect();
        let eps = [DEFAULT_EPSILON, 1e-3][trial as usize % 2];
        let l = wedl(&p, &gt, &ClassWeights::new(w.clone()).unwrap(), eps).unwrap();
        worst_loss = worst_loss.max((l - wedl_loops(&p, &gt, &w, eps)).abs());
        worst_loss = worst_loss.max((standard_dice(&p, &gt, eps).unwrap() - dice_loops(&p, &gt, eps)).abs());
    }
    Line {
        id: "6 oracle equivalence",
        pass: worst_att < ORACLE_TOL_ATTENTION && surface_exact && worst_loss < ORACLE_TOL_LOSS,
        detail: format!(
            "attention max diff {worst_att:.1e}; surface metrics exact: {surface_exact}; loss max diff {worst_loss:.1e}"
        ),
    }
}

fn c7_identities() -> Line {
    let mut r = rng(7);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let c = Confusion { tp: r.gen_range(0..5000), tn: r.gen_range(0..5000), fp: r.gen_range(0..5000), fn_: r.gen_range(0..5000) };
        worst = worst.max((c.dsc() - 2.0 * c.iou() / (1.0 + c.iou())).abs());
    }
    let mask = |r: &mut rand_chacha::ChaCha8Rng, shape: &[usize]| {
        let n = shape.iter().product();
        LabelVolume::unit(shape.to_vec(), (0..n).map(|_| u8::from(r.gen_bool(0.35))).collect()).unwrap()
    };
    let mut dominated = true;
    let mut covariant = true;
    let mut pairs = 0;
    while pairs < 200 {
        let shape = [7, 6, 5];
        let (p, g) = (mask(&mut r, &shape), mask(&mut r, &shape));
        let base = vec![1.0, 0.5, 1.5];
        let surf = |v: &LabelVolume, s: &[f64]| extract_surface(&v.with_spacing(s.to_vec()).unwrap(), 1);
        let (sp, sg) = (surf(&p, &base), surf(&g, &base));
        if sp.is_empty() || sg.is_empty() {
            continue;
        }
        pairs += 1;
        let (hd, asd) = (hausdorff(&sp, &sg).unwrap(), assd(&sp, &sg).unwrap());
        dominated &= hd >= asd;
        let k = [2.0, 4.0][pairs % 2];
        let scaled: Vec<f64> = base.iter().map(|v| v * k).collect();
        let (qp, qg) = (surf(&p, &scaled), surf(&g, &scaled));
        covariant &= hausdorff(&qp, &qg).unwrap() == k * hd && assd(&qp, &qg).unwrap() == k * asd;
        covariant &= surface_overlap(&qp, &qg, k).unwrap() == surface_overlap(&sp, &sg, 1.0).unwrap();
    }
    Line {
        id: "7 metric identities",
        pass: worst < IDENTITY_TOL && dominated && covariant,
        detail: format!("DSC/IoU max dev {worst:.1e}; HD >= ASSD: {dominated}; spacing covariance: {covariant}"),
    }
}

fn c8_training(root: &Path) -> Vec<Line> {
    let data = root.join("blobs");
    cmd_gen(&global(&data, None, BLOB_SEED), &gen_args(BLOB_COUNT, BLOB_EXTENT)).unwrap();
    let manifest = data.join("manifest.txt");

    let t = Instant::now();
    let (full, _) = train_from_manifest(&global(&root.join("full"), Some("tiny-2d"), 0), &train_args(&manifest, TRAIN_EPOCHS)).unwrap();
    let elapsed = t.elapsed();

    let mut ablated = ScalingConfig::preset(Preset::Tiny, 2).unwrap();
    ablated.name = "tiny-ablated".into();
    ablated.attention = AttentionMode::Identity;
    ablated.decoder = DecoderMode::None;
    let cfg_path = root.join("ablated.toml");
    std::fs::write(&cfg_path, ablated.to_toml()).unwrap();
    let (abl, _) = train_from_manifest(
        &global(&root.join("ablated"), Some(cfg_path.to_str().unwrap()), 0),
        &train_args(&manifest, TRAIN_EPOCHS),
    )
    .unwrap();

    let smoothed = full.smoothed_loss(5);
    let decreasing = smoothed.windows(2).all(|w| w[1] < w[0]);
    vec![
        Line {
            id: "8 toy training regression",
            pass: full.best_val_iou >= TRAIN_IOU_BAR && elapsed <= TRAIN_BUDGET && abl.best_val_iou < full.best_val_iou,
            detail: format!(
                "TINY 2D val IoU {:.4} (bar {TRAIN_IOU_BAR}) in {:.0} s; ablated {:.4}",
                full.best_val_iou,
                elapsed.as_secs_f64(),
                abl.best_val_iou
            ),
        },
        Line {
            id: "  invariant: 5-epoch smoothed training loss strictly decreases",
            pass: decreasing,
            detail: format!("{:.4} -> {:.4}", smoothed[0], smoothed[smoothed.len() - 1]),
        },
    ]
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn c9_determinism(root: &Path) -> Line {
    let (a, b) = (root.join("gen_a"), root.join("gen_b"));
    cmd_gen(&global(&a, None, BLOB_SEED), &gen_args(BLOB_COUNT, BLOB_EXTENT)).unwrap();
    cmd_gen(&global(&b, None, BLOB_SEED), &gen_args(BLOB_COUNT, BLOB_EXTENT)).unwrap();
    let same_data = tree_bytes(&a) == tree_bytes(&b);
    let small = root.join("small");
    cmd_gen(&global(&small, None, 3), &gen_args(24, "16x16")).unwrap();
    let args = train_args(&small.join("manifest.txt"), 3);
    train_from_manifest(&global(&root.join("run_a"), Some("tiny-2d"), 11), &args).unwrap();
    train_from_manifest(&global(&root.join("run_b"), Some("tiny-2d"), 11), &args).unwrap();
    let runs = tree_bytes(&root.join("run_a"));
    let same_run = runs == tree_bytes(&root.join("run_b"));
    Line {
        id: "9 determinism",
        pass: same_data && same_run && runs.len() == 4,
        detail: format!("dataset bytes equal: {same_data}; checkpoints and log equal: {same_run}"),
    }
}

fn main() {
    let root = tempfile::tempdir().unwrap();
    let mut lines = vec![c1_params(), c2_flops(), c3_linear(), c4_shapes(), c5_gradients(), c6_oracles(), c7_identities()];
    lines.extend(c8_training(root.path()));
    lines.push(c9_determinism(root.path()));
    let mut failed = 0;
    for l in &lines {
        println!("[{}] {}: {}", if l.pass { "PASS" } else { "FAIL" }, l.id, l.detail);
        failed += usize::from(!l.pass);
    }
    println!("acceptance: {} of {} passed", lines.len() - failed, lines.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
