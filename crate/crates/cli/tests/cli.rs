use std::path::Path;
use std::process::{Command, Output};

use pmfs_cli::suite::measure;
use pmfs_core::cost::count_params;
use pmfs_core::metrics::{evaluate, LabelVolume};
use pmfs_core::model::{PmfsNet, ScalingConfig};
use pmfs_core::volume::{save_labels, Volume, VoxelType};
use rand::{Rng, SeedableRng};

fn pmfs(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmfs")).args(args).current_dir(cwd).env("RUST_LOG", "warn").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).to_string()
}

#[test]
fn summarize_anchor_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = pmfs(&["summarize", "--config", "tiny-3d"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let s = stdout(&o);
    assert!(s.contains("target params 0.63 M"), "{s}");
    assert!(s.contains("target FLOPs 15.14 G"));
    let o = pmfs(&["summarize", "--config", "basic-2d", "--out", "sum.txt"], dir.path());
    assert!(stdout(&o).contains("target params 0.99 M"));
    assert_eq!(std::fs::read_to_string(dir.path().join("sum.txt")).unwrap(), stdout(&o));

    let mut cfg = ScalingConfig::resolve("small-2d").unwrap();
    cfg.name = "custom".into();
    cfg.pmfs_channel = 24;
    std::fs::write(dir.path().join("custom.toml"), cfg.to_toml()).unwrap();
    let o = pmfs(&["summarize", "--config", "custom.toml"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let s = stdout(&o);
    assert!(!s.contains("target"), "{s}");
    let direct = count_params(&PmfsNet::build(&cfg, 0).unwrap()).unwrap().total_params();
    assert!(s.contains(&format!("total params: {direct} ")), "{s}");

    let o = pmfs(&["summarize", "--config", "huge-2d"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_ratios_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = pmfs(&["bench", "--sizes", "4x4,4x8,8x8"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let s = stdout(&o);
    assert!(s.contains("2.000") && s.contains("4.000") && s.contains(": pass"), "{s}");
    assert_eq!(pmfs(&["bench", "--sizes", "4x4,4x8"], dir.path()).status.code(), Some(2));
    assert_eq!(pmfs(&["bench", "--sizes", "4x4,4x8,4x12"], dir.path()).status.code(), Some(2));
    let one = measure(&[1, 1], 8, 0).unwrap();
    assert_eq!(one.pmfs, one.quadratic);
}

#[test]
fn gradcheck_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = pmfs(&["gradcheck"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let s = stdout(&o);
    for t in ["linear", "amff", "pmcs", "pmss", "pmfs_block", "wedl", "wedl_zero", "end_to_end tiny-2d"] {
        assert!(s.lines().any(|l| l.starts_with(t) && l.ends_with("pass")), "{t}: {s}");
    }
}

#[test]
fn gen_is_deterministic_and_handles_empty() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(pmfs(&["gen", "--count", "0", "--out", "e"], p).status.code(), Some(0));
    assert_eq!(std::fs::read(p.join("e/manifest.txt")).unwrap(), b"");
    for d in ["a", "b"] {
        let o = pmfs(&["gen", "--count", "3", "--dims", "3", "--extent", "8x8x8", "--seed", "4", "--out", d], p);
        assert_eq!(o.status.code(), Some(0));
    }
    for f in ["manifest.txt", "images/0002.pmvl", "masks/0002.pmvl"] {
        assert_eq!(std::fs::read(p.join("a").join(f)).unwrap(), std::fs::read(p.join("b").join(f)).unwrap());
    }
    assert_eq!(pmfs(&["gen", "--extent", "1x1", "--out", "x"], p).status.code(), Some(2));
}

fn random_labels(r: &mut impl Rng, shape: &[usize]) -> LabelVolume {
    let n = shape.iter().product();
    LabelVolume::unit(shape.to_vec(), (0..n).map(|_| r.gen_range(0..3u8) * u8::from(r.gen_bool(0.5))).collect()).unwrap()
}

#[test]
fn eval_matches_library_and_flags_undefined() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::create_dir_all(p.join("pred")).unwrap();
    std::fs::create_dir_all(p.join("gt")).unwrap();
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let mut want = Vec::new();
    for i in 0..4 {
        let shape = [6, 5, 4];
        let (a, b) = (random_labels(&mut r, &shape), random_labels(&mut r, &shape));
        save_labels(&p.join(format!("pred/c{i}.pmvl")), &a).unwrap();
        save_labels(&p.join(format!("gt/c{i}.pmvl")), &b).unwrap();
        want.push(evaluate(&a, &b, 3, 1.5).unwrap());
    }
    let o = pmfs(&["eval", "--pred", "pred", "--gt", "gt", "--theta", "1.5", "--classes", "3"], p);
    assert_eq!(o.status.code(), Some(0));
    let s = stdout(&o);
    for (i, m) in want.iter().enumerate() {
        let line = s.lines().find(|l| l.starts_with(&format!("c{i}.pmvl"))).unwrap();
        let cols: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(cols[1], format!("{:.4}", m.dsc));
        assert_eq!(cols[2], format!("{:.4}", m.iou));
        assert_eq!(cols[5], format!("{:.4}", m.hd.unwrap()));
        assert_eq!(cols[7], format!("{:.4}", m.so.unwrap()));
    }

    let o = pmfs(&["eval", "--pred", "gt", "--gt", "gt"], p);
    let mean = stdout(&o).lines().find(|l| l.starts_with("mean")).unwrap().to_string();
    assert_eq!(mean.split_whitespace().skip(1).collect::<Vec<_>>(), ["1.0000", "1.0000", "1.0000", "1.0000", "0.0000", "0.0000", "1.0000"]);

    std::fs::create_dir_all(p.join("empty")).unwrap();
    std::fs::create_dir_all(p.join("one")).unwrap();
    let gt = LabelVolume::unit(vec![4, 4], (0..16).map(|i| u8::from(i % 5 == 0)).collect()).unwrap();
    save_labels(&p.join("one/x.png"), &gt).unwrap();
    save_labels(&p.join("empty/x.png"), &LabelVolume::unit(vec![4, 4], vec![0; 16]).unwrap()).unwrap();
    let s = stdout(&pmfs(&["eval", "--pred", "empty", "--gt", "one"], p));
    let cols: Vec<String> = s.lines().find(|l| l.starts_with("x.png")).unwrap().split_whitespace().map(String::from).collect();
    assert_eq!((cols[2].as_str(), cols[5].as_str(), cols[6].as_str()), ("0.0000", "undef", "undef"));
    assert!(s.contains("HD/ASSD 0 of 1"));

    std::fs::remove_file(p.join("pred/c3.pmvl")).unwrap();
    assert_eq!(pmfs(&["eval", "--pred", "pred", "--gt", "gt"], p).status.code(), Some(2));
}

#[test]
fn eval_thread_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::create_dir_all(p.join("a")).unwrap();
    std::fs::create_dir_all(p.join("b")).unwrap();
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for i in 0..7 {
        save_labels(&p.join(format!("a/{i}.pmvl")), &random_labels(&mut r, &[5, 5, 5])).unwrap();
        save_labels(&p.join(format!("b/{i}.pmvl")), &random_labels(&mut r, &[5, 5, 5])).unwrap();
    }
    let run = |t: &str| {
        Command::new(env!("CARGO_BIN_EXE_pmfs"))
            .args(["eval", "--pred", "a", "--gt", "b"])
            .current_dir(p)
            .env("PMFS_NUM_THREADS", t)
            .output()
            .unwrap()
            .stdout
    };
    assert_eq!(run("1"), run("3"));
}

#[test]
fn preprocess_saturated_volume() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    Volume::new(vec![4, 4, 2], vec![0.5; 3], vec![20000.0; 32]).unwrap().save(&p.join("v.pmvl"), VoxelType::F32).unwrap();
    let o = pmfs(&["preprocess", "--input", "v.pmvl", "--crop", "none", "--out", "o.pmvl"], p);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("clipped 32 voxels; constant"));
    let out = Volume::load(&p.join("o.pmvl")).unwrap();
    assert!(out.data.iter().all(|&v| v == 0.0));
    let o = pmfs(&["preprocess", "--input", "v.pmvl", "--out", "c.pmvl"], p);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(Volume::load(&p.join("c.pmvl")).unwrap().shape, vec![160, 160, 96]);
    assert_eq!(pmfs(&["preprocess", "--input", "missing.pmvl"], p).status.code(), Some(1));
}

#[test]
fn train_with_zero_learning_rate_keeps_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    pmfs(&["gen", "--count", "5", "--extent", "16x16", "--out", "d"], p);
    let o = pmfs(&["train", "--manifest", "d/manifest.txt", "--epochs", "1", "--lr", "0", "--seed", "2", "--out", "r"], p);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let init = PmfsNet::build(&ScalingConfig::resolve("tiny-2d").unwrap(), 2).unwrap();
    let mut bytes = Vec::new();
    init.params.write_checkpoint(&mut bytes).unwrap();
    assert_eq!(std::fs::read(p.join("r/last.ckpt")).unwrap(), bytes);
    let o = pmfs(&["train", "--manifest", "d/manifest.txt", "--weights", "0.5,0.5", "--out", "w"], p);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(pmfs(&["frobnicate"], p).status.code(), Some(2));
}
