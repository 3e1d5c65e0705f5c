use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use pmfs_core::cost::{check_flops, check_params, count_flops, count_params, flop_anchor, param_anchor, FLOP_TOLERANCE, PARAM_TOLERANCE};
use pmfs_core::data::{load_cases, read_manifest};
use pmfs_core::metrics::{evaluate, LabelVolume, MetricReport};
use pmfs_core::model::{PmfsNet, ScalingConfig};
use pmfs_core::preprocess::{preprocess_volume, PreprocessSpec, CROP_3D};
use pmfs_core::synthetic::{write_dataset, SyntheticSpec};
use pmfs_core::train::{decode, split, train, Example, OptimizerKind, RunConfig, TrainReport};
use pmfs_core::volume::{load_labels, Volume, VoxelType};
use pmfs_core::{Error, Interp, Precision, Result};

use crate::args::*;
use crate::suite;

/// Text of a finished command and whether its checks held.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub report: String,
    pub passed: bool,
}

impl Outcome {
    fn ok(report: String) -> Self {
        Outcome { report, passed: true }
    }
}

fn write_report(out: Option<&Path>, text: &str) -> Result<()> {
    if let Some(p) = out {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(p, text)?;
    }
    Ok(())
}

fn model_config(g: &Global, default: &str) -> Result<ScalingConfig> {
    ScalingConfig::resolve(g.config.as_deref().unwrap_or(default))
}

fn precision(g: &Global) -> Result<Precision> {
    g.precision.parse()
}

pub fn summarize(g: &Global, a: &SummarizeArgs) -> Result<Outcome> {
    let cfg = model_config(g, "tiny-3d")?;
    let net = PmfsNet::build(&cfg, g.seed)?;
    let params = count_params(&net)?;
    let anchor = cfg.preset_kind().and_then(|p| flop_anchor(p, cfg.dims));
    let input = match (&a.input, &anchor) {
        (Some(s), _) => suite::parse_extent(s)?,
        (None, Some((_, shape))) => shape.clone(),
        (None, None) => cfg.input_shape.clone(),
    };
    let flops = count_flops(&net, &input)?;
    let mut s = format!("model {} ({}D)\n", cfg.name, cfg.dims);
    s.push_str(&flops.render());
    let mut passed = true;
    if let Some(target) = cfg.preset_kind().and_then(|p| param_anchor(p, cfg.dims)) {
        let c = check_params(params.total_params() as f64 / 1e6, target);
        passed &= c.pass;
        let _ = writeln!(
            s,
            "target params {target:.2} M: measured {:.3} M, ratio {:.3} (tolerance {:.0}%): {}",
            c.measured,
            c.ratio,
            PARAM_TOLERANCE * 100.0,
            verdict(c.pass)
        );
    }
    if let Some((target, shape)) = anchor.filter(|(_, shape)| *shape == input) {
        let c = check_flops(flops.total_macs() as f64 / 1e9, target);
        passed &= c.pass;
        let _ = writeln!(
            s,
            "target FLOPs {target:.2} G at {shape:?}: measured {:.3} G ({} convention), ratio {:.3} (tolerance {:.0}%): {}",
            c.measured,
            if c.doubled { "2x" } else { "1x" },
            c.ratio,
            FLOP_TOLERANCE * 100.0,
            verdict(c.pass)
        );
    }
    write_report(g.out.as_deref(), &s)?;
    Ok(Outcome { report: s, passed })
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "pass"
    } else {
        "FAIL"
    }
}

fn load_examples(manifest: &Path, in_channels: usize) -> Result<Vec<Example>> {
    let cases = load_cases(&read_manifest(manifest)?, in_channels)?;
    Ok(cases.into_iter().map(|(image, mask)| Example { image, mask }).collect())
}

pub fn run_config(g: &Global, a: &TrainArgs) -> Result<RunConfig> {
    let mut run = match &a.run {
        Some(p) => RunConfig::from_toml(&std::fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(c) = &g.config {
        run.model = c.clone();
    }
    run.seed = g.seed;
    if let Some(w) = &g.weights {
        run.class_weights = Some(pmfs_core::loss::ClassWeights::parse(w)?.values().to_vec());
    }
    run.epochs = a.epochs.unwrap_or(run.epochs);
    run.lr = a.lr.unwrap_or(run.lr);
    run.weight_decay = a.weight_decay.unwrap_or(run.weight_decay);
    run.batch_size = a.batch_size.unwrap_or(run.batch_size);
    run.val_fraction = a.val_fraction.unwrap_or(run.val_fraction);
    if let Some(o) = &a.optimizer {
        run.optimizer = OptimizerKind::parse(o).ok_or_else(|| Error::Config(format!("unknown optimizer `{o}`")))?;
    }
    run.validate()?;
    Ok(run)
}

/// Trains per the flags and writes artifacts to `--out` (default
/// `runs/train`); returns the report and that directory.
pub fn train_from_manifest(g: &Global, a: &TrainArgs) -> Result<(TrainReport, PathBuf)> {
    let run = run_config(g, a)?;
    let cfg = ScalingConfig::resolve(&run.model)?;
    let examples = load_examples(&a.manifest, cfg.in_channels)?;
    if let Some(e) = examples.first() {
        if e.mask.shape().len() != cfg.dims {
            return Err(Error::Shape(format!("{}D data for a {}D model", e.mask.shape().len(), cfg.dims)));
        }
    }
    let (tr, va) = split(examples, run.val_fraction)?;
    let out = g.out.clone().unwrap_or_else(|| PathBuf::from("runs/train"));
    let report = train(&run, &cfg, &tr, &va, Some(&out))?;
    std::fs::write(out.join("model.toml"), cfg.to_toml())?;
    Ok((report, out))
}

pub fn cmd_train(g: &Global, a: &TrainArgs) -> Result<Outcome> {
    let (report, out) = train_from_manifest(g, a)?;
    let mut s = report.render();
    let _ = writeln!(s, "checkpoints written to {}", out.display());
    Ok(Outcome::ok(s))
}

/// Metrics for every case; work is split over `PMFS_NUM_THREADS` threads
/// and results keep the case order.
pub fn evaluate_all(pairs: &[(LabelVolume, LabelVolume)], classes: usize, theta: f64) -> Result<Vec<MetricReport>> {
    let threads = std::env::var("PMFS_NUM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .min(pairs.len().max(1));
    let chunk = pairs.len().div_ceil(threads).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = pairs
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|(p, g)| evaluate(p, g, classes, theta)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(pairs.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undef".to_string(), |x| format!("{x:.4}"))
}

pub fn render_metrics(names: &[String], reports: &[MetricReport]) -> String {
    let w = names.iter().map(|n| n.len()).max().unwrap_or(4).max(4);
    let mut s = format!("{:<w$} {:>7} {:>7} {:>7} {:>7} {:>8} {:>8} {:>7}\n", "case", "DSC", "IoU", "mIoU", "ACC", "HD", "ASSD", "SO");
    for (n, r) in names.iter().zip(reports) {
        let _ = writeln!(
            s,
            "{n:<w$} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>8} {:>8} {:>7}",
            r.dsc,
            r.iou,
            r.miou,
            r.acc,
            fmt_opt(r.hd),
            fmt_opt(r.assd),
            fmt_opt(r.so)
        );
    }
    let n = reports.len().max(1) as f64;
    let mean = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let defined = |f: &dyn Fn(&MetricReport) -> Option<f64>| {
        let v: Vec<f64> = reports.iter().filter_map(f).collect();
        let m = (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        (fmt_opt(m), v.len())
    };
    let _ = writeln!(
        s,
        "{:<w$} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>8} {:>8} {:>7}",
        "mean",
        mean(&|r| r.dsc),
        mean(&|r| r.iou),
        mean(&|r| r.miou),
        mean(&|r| r.acc),
        defined(&|r| r.hd).0,
        defined(&|r| r.assd).0,
        defined(&|r| r.so).0
    );
    let _ = writeln!(
        s,
        "surface metrics defined in: HD/ASSD {} of {}, SO {} of {} cases",
        defined(&|r| r.hd).1,
        reports.len(),
        defined(&|r| r.so).1,
        reports.len()
    );
    if let Some(r) = reports.first() {
        let _ = writeln!(s, "SO threshold {} mm", r.theta);
    }
    s
}

fn mask_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png" || x == "pmvl"))
        .collect();
    v.sort();
    Ok(v)
}

pub fn cmd_eval(g: &Global, a: &EvalArgs) -> Result<Outcome> {
    let mut names = Vec::new();
    let mut pairs = Vec::new();
    match (&a.pred, &a.gt, &a.checkpoint, &a.manifest) {
        (Some(pred), Some(gt), None, None) => {
            for gp in mask_files(gt)? {
                let name = gp.file_name().expect("file").to_string_lossy().to_string();
                let pp = pred.join(&name);
                if !pp.exists() {
                    return Err(Error::Invalid(format!("no prediction {} for reference {}", pp.display(), gp.display())));
                }
                pairs.push((load_labels(&pp)?, load_labels(&gp)?));
                names.push(name);
            }
        }
        (None, None, Some(ck), Some(manifest)) => {
            let cfg = model_config(g, "tiny-2d")?;
            let mut net = PmfsNet::build(&cfg, g.seed)?;
            net.params.load(ck)?;
            let prec = precision(g)?;
            let cases = read_manifest(manifest)?;
            for (case, (img, mask)) in cases.iter().zip(load_cases(&cases, cfg.in_channels)?) {
                let probs = net.predict(&img.unsqueeze0(), prec)?;
                let labels = decode(&probs).remove(0);
                let pred = LabelVolume::new(mask.shape().to_vec(), mask.spacing().to_vec(), labels)?;
                names.push(case.image.file_name().expect("file").to_string_lossy().to_string());
                pairs.push((pred, mask));
            }
        }
        _ => return Err(Error::Invalid("give either --pred and --gt, or --checkpoint and --manifest".into())),
    }
    let classes = match a.classes {
        Some(c) => c,
        None => pairs.iter().map(|(p, t)| p.max_label().max(t.max_label()) as usize + 1).max().unwrap_or(2).max(2),
    };
    let reports = evaluate_all(&pairs, classes, g.theta)?;
    let s = render_metrics(&names, &reports);
    write_report(g.out.as_deref(), &s)?;
    Ok(Outcome::ok(s))
}

pub fn cmd_bench(g: &Global, a: &BenchArgs) -> Result<Outcome> {
    let grids = a.sizes.split(',').map(suite::parse_extent).collect::<Result<Vec<_>>>()?;
    let rows = suite::bench(&grids, a.channels, g.seed)?;
    let s = suite::render_bench(&rows);
    write_report(g.out.as_deref(), &s)?;
    Ok(Outcome { passed: suite::ratios_pass(&suite::ratios(&rows)), report: s })
}

pub fn cmd_gradcheck(g: &Global) -> Result<Outcome> {
    let cfg = model_config(g, "tiny-2d")?;
    let rows = suite::gradcheck_suite(&cfg, g.seed)?;
    let s = suite::render_gradcheck(&rows);
    write_report(g.out.as_deref(), &s)?;
    Ok(Outcome { passed: rows.iter().all(suite::GradRow::pass), report: s })
}

pub fn cmd_gen(g: &Global, a: &GenArgs) -> Result<Outcome> {
    let contrast: Vec<f64> = a
        .contrast
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| Error::Invalid(format!("malformed contrast `{}`", a.contrast))))
        .collect::<Result<_>>()?;
    if contrast.len() != 2 {
        return Err(Error::Invalid("contrast must be `lo,hi`".into()));
    }
    let spec = SyntheticSpec {
        dims: a.dims,
        extent: suite::parse_extent(&a.extent)?,
        count: a.count,
        notches: !a.no_notches,
        noise_sigma: a.noise,
        contrast: (contrast[0], contrast[1]),
        seed: g.seed,
    };
    let out = g.out.clone().unwrap_or_else(|| PathBuf::from("data/blobs"));
    let manifest = write_dataset(&spec, &out)?;
    Ok(Outcome::ok(format!("{} cases written; manifest {}\n", spec.count, manifest.display())))
}

pub fn cmd_preprocess(g: &Global, a: &PreprocessArgs) -> Result<Outcome> {
    let v = Volume::load(&a.input)?;
    let interp = match a.interp.as_str() {
        "linear" => Interp::Linear,
        "nearest" => Interp::Nearest,
        o => return Err(Error::Invalid(format!("unknown interpolation `{o}`"))),
    };
    let crop = match a.crop.as_deref() {
        Some("none") => None,
        Some(s) => Some(suite::parse_extent(s)?),
        None if v.shape.len() == 3 => Some(CROP_3D.to_vec()),
        None => None,
    };
    let spec = PreprocessSpec { interp, crop, ..PreprocessSpec::default() };
    let (out, log) = preprocess_volume(&v, &spec)?;
    let path = g.out.clone().unwrap_or_else(|| a.input.with_extension("pre.pmvl"));
    out.save(&path, VoxelType::F32)?;
    let mut s = format!("{:?} at {:?} mm -> {:?} at {:?} mm\n", v.shape, v.spacing, out.shape, out.spacing);
    let _ = writeln!(s, "clipped {} voxels{}", log.clipped, if log.constant { "; constant volume normalized to zeros" } else { "" });
    let _ = writeln!(s, "written to {}", path.display());
    Ok(Outcome::ok(s))
}
