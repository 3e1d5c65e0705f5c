mod common;

use common::*;
use pmfs_core::gradcheck::finite_diff_check;
use pmfs_core::loss::{one_hot, standard_dice, wedl, ClassWeights, DEFAULT_EPSILON};
use pmfs_core::Tensor;
use rand::Rng;

fn probs_and_target(classes: usize, voxels: usize, seed: u64) -> (Tensor, Tensor) {
    let mut r = rng(seed);
    let p = Tensor::from_fn(&[classes, voxels], |_| r.gen::<f64>());
    let labels: Vec<u8> = (0..voxels).map(|_| r.gen_range(0..classes as u8)).collect();
    (p, one_hot(&labels, &[voxels], classes).unwrap())
}

#[test]
fn wedl_and_dice_match_loop_oracles() {
    let mut r = rng(100);
    for trial in 0..200 {
        let classes = r.gen_range(1..5);
        let voxels = r.gen_range(1..60);
        let (p, g) = probs_and_target(classes.max(2), voxels, trial);
        let c = p.shape()[0];
        let raw: Vec<f64> = (0..c).map(|_| r.gen_range(0.1..1.0)).collect();
        let w = ClassWeights::new(raw.clone()).unwrap();
        let eps = [DEFAULT_EPSILON, 1e-3, 1.0][trial as usize % 3];
        let got = wedl(&p, &g, &w, eps).unwrap();
        assert!((got - wedl_loops(&p, &g, &raw, eps)).abs() < 1e-10, "trial {trial}");
        let got = standard_dice(&p, &g, eps).unwrap();
        assert!((got - dice_loops(&p, &g, eps)).abs() < 1e-10, "trial {trial}");
    }
}

#[test]
fn wedl_bounds_and_weights() {
    let (_, g) = probs_and_target(3, 40, 7);
    let w = ClassWeights::uniform(3);
    assert!(wedl(&g, &g, &w, DEFAULT_EPSILON).unwrap() < 1e-6);
    assert_eq!(wedl(&Tensor::zeros(&[3, 40]), &g, &w, DEFAULT_EPSILON).unwrap(), 1.0);
    let parsed = ClassWeights::parse("1,1,2").unwrap();
    assert!(!parsed.is_normalized());
    assert!(parsed.normalize().is_normalized());
    assert!(ClassWeights::parse("1,x").is_err());
    assert!(ClassWeights::new(vec![-1.0, 2.0]).is_err());
    assert!(wedl(&g, &g, &ClassWeights::uniform(2), DEFAULT_EPSILON).is_err());
}

#[test]
fn wedl_gradient_including_zero_prediction() {
    let (p, g) = probs_and_target(3, 8, 11);
    let target = g.unsqueeze0();
    let w = ClassWeights::new(vec![0.2, 0.3, 0.5]).unwrap();
    for (name, x) in [("random", p.unsqueeze0()), ("zero", Tensor::zeros(&[1, 3, 8]))] {
        let r = finite_diff_check(|gr, x| gr.wedl(x, &target, &w, DEFAULT_EPSILON), &x, 1e-6).unwrap();
        assert!(r.max_rel_err < 1e-4, "{name}: {r:?}");
    }
    let r = finite_diff_check(|gr, x| gr.dice(x, &target, DEFAULT_EPSILON), &p.unsqueeze0(), 1e-6).unwrap();
    assert!(r.max_rel_err < 1e-4, "dice: {r:?}");
}
