use pmfs_core::metrics::LabelVolume;
use pmfs_core::model::ScalingConfig;
use pmfs_core::params::ParamStore;
use pmfs_core::synthetic::{generate, SyntheticSpec};
use pmfs_core::train::{split, train, Example, OptimizerKind, Optimizer, RunConfig};
use pmfs_core::{Error, Tensor};

fn blobs(count: usize, size: usize, seed: u64) -> Vec<Example> {
    generate(&SyntheticSpec::blobs_2d(count, size, seed))
        .unwrap()
        .into_iter()
        .map(|s| Example {
            image: Tensor::new(vec![1, size, size], s.image).unwrap(),
            mask: LabelVolume::unit(vec![size, size], s.mask).unwrap(),
        })
        .collect()
}

fn tiny() -> ScalingConfig {
    let mut c = ScalingConfig::resolve("tiny-2d").unwrap();
    c.in_channels = 1;
    c
}

fn checkpoint_bytes(p: &ParamStore) -> Vec<u8> {
    let mut b = Vec::new();
    p.write_checkpoint(&mut b).unwrap();
    b
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let (tr, va) = split(blobs(6, 16, 1), 0.34).unwrap();
    for optimizer in [OptimizerKind::AdamW, OptimizerKind::RmsProp] {
        let run = RunConfig { epochs: 1, lr: 0.0, optimizer, ..RunConfig::default() };
        let report = train(&run, &tiny(), &tr, &va, None).unwrap();
        let init = pmfs_core::model::PmfsNet::build(&tiny(), run.seed).unwrap();
        assert_eq!(checkpoint_bytes(&report.best), checkpoint_bytes(&init.params));
    }
}

#[test]
fn same_seed_same_run() {
    let (tr, va) = split(blobs(8, 16, 2), 0.25).unwrap();
    let run = RunConfig { epochs: 2, ..RunConfig::default() };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = train(&run, &tiny(), &tr, &va, Some(a.path())).unwrap();
    let rb = train(&run, &tiny(), &tr, &va, Some(b.path())).unwrap();
    assert_eq!(ra.epochs, rb.epochs);
    for f in ["best.ckpt", "last.ckpt", "train.log"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let other = train(&RunConfig { seed: 9, ..run }, &tiny(), &tr, &va, None).unwrap();
    assert_ne!(other.epochs, ra.epochs);
    let mut loaded = ParamStore::clone(&ra.best);
    loaded.load(&a.path().join("best.ckpt")).unwrap();
    assert_eq!(checkpoint_bytes(&loaded), checkpoint_bytes(&ra.best));
}

#[test]
fn loss_decreases_on_short_run() {
    let (tr, va) = split(blobs(20, 16, 3), 0.2).unwrap();
    let report = train(&RunConfig { epochs: 4, ..RunConfig::default() }, &tiny(), &tr, &va, None).unwrap();
    let l: Vec<f64> = report.epochs.iter().map(|e| e.loss).collect();
    assert!(l[3] < l[0], "{l:?}");
    assert!(report.epochs.iter().all(|e| (0.0..=1.0).contains(&e.val_iou)));
}

#[test]
fn rejects_mismatched_data_and_bad_configs() {
    let (tr, va) = split(blobs(4, 16, 4), 0.5).unwrap();
    let three = ScalingConfig::resolve("tiny-2d").unwrap();
    assert!(matches!(train(&RunConfig::default(), &three, &tr, &va, None), Err(Error::Shape(_))));
    let odd = split(blobs(4, 12, 4), 0.5).unwrap();
    assert!(train(&RunConfig::default(), &tiny(), &odd.0, &odd.1, None).is_err());
    assert!(RunConfig { epochs: 0, ..RunConfig::default() }.validate().is_err());
    assert!(RunConfig { lr: f64::NAN, ..RunConfig::default() }.validate().is_err());
    assert!(RunConfig::from_toml("epochs = 3\nbogus = 1\n").is_err());
    assert_eq!(RunConfig::from_toml("epochs = 3\noptimizer = \"rmsprop\"\n").unwrap().epochs, 3);
    let w = RunConfig { class_weights: Some(vec![0.5, 0.5]), epochs: 1, ..RunConfig::default() };
    assert!(train(&w, &tiny(), &tr, &va, None).is_err());
}

#[test]
fn nan_loss_aborts() {
    let (mut tr, va) = split(blobs(4, 16, 5), 0.5).unwrap();
    tr[0].image.data_mut()[3] = f64::NAN;
    let err = train(&RunConfig { epochs: 1, noise_sigma: 0.0, ..RunConfig::default() }, &tiny(), &tr, &va, None).unwrap_err();
    assert!(matches!(err, Error::NonFinite(ref m) if m.contains("epoch 1")), "{err}");
}

#[test]
fn optimizer_moves_against_gradient() {
    let mut store = ParamStore::new();
    let id = store.add("w", pmfs_core::params::ParamKind::Weight, Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
    let mut opt = Optimizer::new(OptimizerKind::AdamW, 0.0, &store);
    opt.step(&mut store, &[Tensor::new(vec![2], vec![3.0, -0.5]).unwrap()], 0.1).unwrap();
    let v = store.get(id).data();
    assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 0.9).abs() < 1e-6, "{v:?}");
}
