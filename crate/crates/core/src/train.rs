//! Toy training loop: WEDL minimized with an adaptive per-parameter
//! optimizer, step-decayed learning rate, flip and noise augmentation.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conv::Precision;
use crate::error::{shape_err, Error, Result};
use crate::graph::Graph;
use crate::layers::Ctx;
use crate::loss::{one_hot, ClassWeights, DEFAULT_EPSILON};
use crate::metrics::{confusion_counts, LabelVolume};
use crate::model::{PmfsNet, ScalingConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adam with decoupled weight decay.
    AdamW,
    /// Squared-gradient scaling only, no first moment.
    RmsProp,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adamw" => Some(OptimizerKind::AdamW),
            "rmsprop" => Some(OptimizerKind::RmsProp),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Preset name (`tiny-2d`) or path to a model TOML.
    pub model: String,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Per-class loss weights; uniform when absent.
    pub class_weights: Option<Vec<f64>>,
    pub seed: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Fraction of the manifest held out (from its tail) for validation.
    pub val_fraction: f64,
    pub flip: bool,
    pub noise_sigma: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: "tiny-2d".into(),
            epochs: 30,
            lr: 5e-4,
            weight_decay: 5e-5,
            class_weights: None,
            seed: 0,
            batch_size: 1,
            optimizer: OptimizerKind::AdamW,
            val_fraction: 0.2,
            flip: true,
            noise_sigma: 0.02,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let r: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("lr and weight_decay must be finite and non-negative");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        if let Some(w) = &self.class_weights {
            ClassWeights::new(w.clone())?;
        }
        Ok(())
    }

    /// Learning rate for `epoch`: halved at each third of training.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = (3 * epoch / self.epochs).min(2);
        self.lr * 0.5f64.powi(drops as i32)
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const RMS_DECAY: f64 = 0.99;
const ADAPT_EPS: f64 = 1e-8;

/// Per-parameter optimizer state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        let m = if kind == OptimizerKind::AdamW { zeros.clone() } else { Vec::new() };
        Optimizer { kind, weight_decay, m, v: zeros, t: 0 }
    }

    /// One update with `grads` in store order. Decay is scaled by `lr`, so
    /// a zero rate leaves every parameter untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(shape_err!("{} gradients for {} parameters", grads.len(), store.len()));
        }
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t);
        let bc2 = 1.0 - BETA2.powi(self.t);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let g = grads[k].data();
            let v = &mut self.v[k];
            match self.kind {
                OptimizerKind::AdamW => {
                    let m = &mut self.m[k];
                    for i in 0..p.len() {
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                        let upd = (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAPT_EPS);
                        p[i] -= lr * (upd + self.weight_decay * p[i]);
                    }
                }
                OptimizerKind::RmsProp => {
                    for i in 0..p.len() {
                        v[i] = RMS_DECAY * v[i] + (1.0 - RMS_DECAY) * g[i] * g[i];
                        p[i] -= lr * (g[i] / (v[i].sqrt() + ADAPT_EPS) + self.weight_decay * p[i]);
                    }
                }
            }
        }
        Ok(())
    }
}

/// One image (`channels × spatial`) with its label mask.
#[derive(Debug, Clone)]
pub struct Example {
    pub image: Tensor,
    pub mask: LabelVolume,
}

/// Deterministic tail split: the last `fraction` of cases (at least one)
/// become the validation set.
pub fn split(mut cases: Vec<Example>, fraction: f64) -> Result<(Vec<Example>, Vec<Example>)> {
    if cases.len() < 2 {
        return Err(Error::Invalid(format!("need at least 2 cases to split, got {}", cases.len())));
    }
    let n_val = ((cases.len() as f64 * fraction).round() as usize).clamp(1, cases.len() - 1);
    let val = cases.split_off(cases.len() - n_val);
    Ok((cases, val))
}

/// Hard labels from `N×classes×spatial` probabilities: threshold 0.5 for a
/// single channel, argmax otherwise.
pub fn decode(probs: &Tensor) -> Vec<Vec<u8>> {
    let s = probs.shape();
    let (n, c) = (s[0], s[1]);
    let sp: usize = s[2..].iter().product();
    let d = probs.data();
    (0..n)
        .map(|b| {
            let base = b * c * sp;
            (0..sp)
                .map(|j| {
                    if c == 1 {
                        return u8::from(d[base + j] >= 0.5);
                    }
                    let mut best = 0;
                    for k in 1..c {
                        if d[base + k * sp + j] > d[base + best * sp + j] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect()
}

/// Mean foreground IoU of hard predictions against masks.
fn mean_iou(preds: &[Vec<u8>], masks: &[&LabelVolume], classes: usize) -> Result<f64> {
    let fg: Vec<u8> = if classes == 1 { vec![1] } else { (1..classes as u8).collect() };
    let mut total = 0.0;
    for (p, m) in preds.iter().zip(masks) {
        let pv = LabelVolume::new(m.shape().to_vec(), m.spacing().to_vec(), p.clone())?;
        let mut s = 0.0;
        for &k in &fg {
            s += confusion_counts(&pv, m, k)?.iou();
        }
        total += s / fg.len() as f64;
    }
    Ok(total / preds.len().max(1) as f64)
}

/// Mean foreground IoU of `net` over `cases`, no graph recorded.
pub fn validate(net: &PmfsNet, cases: &[Example], precision: Precision) -> Result<f64> {
    let mut preds = Vec::with_capacity(cases.len());
    for c in cases {
        let probs = net.predict(&c.image.unsqueeze0(), precision)?;
        preds.extend(decode(&probs));
    }
    let masks: Vec<&LabelVolume> = cases.iter().map(|c| &c.mask).collect();
    mean_iou(&preds, &masks, net.cfg.num_classes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_iou: f64,
    pub val_iou: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_iou: f64,
    /// Parameters of the best epoch.
    pub best: ParamStore,
}

impl TrainReport {
    /// The per-epoch log as text; contains no timings so equal runs
    /// produce equal bytes.
    pub fn render(&self) -> String {
        let mut s = String::from("epoch lr loss train_iou val_iou\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{} {:.6e} {:.9} {:.6} {:.6}", e.epoch + 1, e.lr, e.loss, e.train_iou, e.val_iou);
        }
        let _ = writeln!(s, "best epoch {} val_iou {:.6}", self.best_epoch + 1, self.best_val_iou);
        s
    }

    /// Mean training loss over trailing windows of `w` epochs.
    pub fn smoothed_loss(&self, w: usize) -> Vec<f64> {
        let l: Vec<f64> = self.epochs.iter().map(|e| e.loss).collect();
        l.windows(w.max(1)).map(|win| win.iter().sum::<f64>() / win.len() as f64).collect()
    }
}

/// Randomly flips every spatial axis with probability one half and adds
/// Gaussian noise; the mask receives the same flips.
fn augment<R: Rng>(ex: &Example, run: &RunConfig, rng: &mut R) -> (Vec<f64>, Vec<u8>) {
    let sp = ex.mask.shape();
    let n: usize = sp.iter().product();
    let c = ex.image.shape()[0];
    let flips: Vec<bool> = sp.iter().map(|_| run.flip && rng.gen_bool(0.5)).collect();
    let src_index = |j: usize| {
        let mut r = j;
        let mut src = 0;
        let mut stride = 1;
        for a in (0..sp.len()).rev() {
            let i = r % sp[a];
            r /= sp[a];
            src += stride * if flips[a] { sp[a] - 1 - i } else { i };
            stride *= sp[a];
        }
        src
    };
    let map: Vec<usize> = (0..n).map(src_index).collect();
    let mask = map.iter().map(|&s| ex.mask.labels()[s]).collect();
    let noise = Normal::new(0.0, run.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let img = ex.image.data();
    let mut out = Vec::with_capacity(c * n);
    for ch in 0..c {
        for &s in &map {
            let e = if run.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            out.push(img[ch * n + s] + e);
        }
    }
    (out, mask)
}

/// Builds the model from `cfg` with `run.seed` and trains it.
///
/// With `out` set, writes `best.ckpt`, `last.ckpt` and `train.log` there.
pub fn train(
    run: &RunConfig,
    cfg: &ScalingConfig,
    train_set: &[Example],
    val_set: &[Example],
    out: Option<&Path>,
) -> Result<TrainReport> {
    run.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Invalid("training and validation sets must be non-empty".into()));
    }
    for ex in train_set.iter().chain(val_set) {
        let s = ex.image.shape();
        if s.len() != cfg.dims + 1 || s[0] != cfg.in_channels || s[1..] != *ex.mask.shape() {
            return Err(shape_err!(
                "case of shape {s:?} does not fit a {}D network with {} input channels",
                cfg.dims,
                cfg.in_channels
            ));
        }
        cfg.check_input(&s[1..])?;
    }
    let classes = cfg.num_classes;
    let weights = match &run.class_weights {
        Some(w) if w.len() != classes => {
            return Err(Error::Config(format!("{} loss weights for {classes} classes", w.len())));
        }
        Some(w) => ClassWeights::new(w.clone())?,
        None => ClassWeights::uniform(classes),
    };

    let mut net = PmfsNet::build(cfg, run.seed)?;
    let mut opt = Optimizer::new(run.optimizer, run.weight_decay, &net.params);
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0x5eed_da7a);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut logs = Vec::with_capacity(run.epochs);
    let mut best = (0usize, f64::NEG_INFINITY, net.params.clone());

    for epoch in 0..run.epochs {
        let lr = run.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut preds, mut masks) = (0.0, Vec::new(), Vec::new());
        for (step, batch) in order.chunks(run.batch_size).enumerate() {
            let mut images = Vec::new();
            let mut targets = Vec::new();
            let mut batch_masks = Vec::new();
            for &i in batch {
                let (img, mask) = augment(&train_set[i], run, &mut rng);
                images.extend(img);
                targets.extend(one_hot(&mask, train_set[i].mask.shape(), classes)?.into_data());
                batch_masks.push(LabelVolume::new(train_set[i].mask.shape().to_vec(), train_set[i].mask.spacing().to_vec(), mask)?);
            }
            let sp = train_set[batch[0]].mask.shape();
            let mut xs = vec![batch.len(), cfg.in_channels];
            xs.extend_from_slice(sp);
            let mut ts = vec![batch.len(), classes];
            ts.extend_from_slice(sp);

            let g = Graph::new();
            let bound = net.params.bind(&g);
            let ctx = Ctx::new(&g, &bound);
            let fwd = net.forward(&ctx, &g.constant(Tensor::new(xs, images)?))?;
            let loss = g.wedl(&fwd.probs, &Tensor::new(ts, targets)?, &weights, DEFAULT_EPSILON)?;
            let value = loss.value().item()?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("loss is {value} at epoch {} step {}", epoch + 1, step + 1)));
            }
            let grads = bound.gradients(&g.backward(&loss)?);
            preds.extend(decode(fwd.probs.value()));
            drop((fwd, loss, bound, g));
            opt.step(&mut net.params, &grads, lr)?;
            loss_sum += value * batch.len() as f64;
            masks.extend(batch_masks);
        }
        let mask_refs: Vec<&LabelVolume> = masks.iter().collect();
        let train_iou = mean_iou(&preds, &mask_refs, classes)?;
        let val_iou = validate(&net, val_set, Precision::Double)?;
        let entry = EpochLog { epoch, lr, loss: loss_sum / train_set.len() as f64, train_iou, val_iou };
        log::info!(
            "epoch {}/{}: loss {:.6} train IoU {:.4} val IoU {:.4}",
            epoch + 1,
            run.epochs,
            entry.loss,
            train_iou,
            val_iou
        );
        logs.push(entry);
        if val_iou > best.1 {
            best = (epoch, val_iou, net.params.clone());
        }
    }

    let report = TrainReport { epochs: logs, best_epoch: best.0, best_val_iou: best.1, best: best.2 };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        report.best.save(&dir.join("best.ckpt"))?;
        net.params.save(&dir.join("last.ckpt"))?;
        std::fs::write(dir.join("train.log"), report.render())?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_schedule_halves_each_third() {
        let r = RunConfig { epochs: 30, lr: 1.0, ..RunConfig::default() };
        let lrs: Vec<f64> = [0, 9, 10, 19, 20, 29].iter().map(|&e| r.lr_at(e)).collect();
        assert_eq!(lrs, vec![1.0, 1.0, 0.5, 0.5, 0.25, 0.25]);
    }

    #[test]
    fn decode_threshold_and_argmax() {
        let p = Tensor::new(vec![1, 1, 3], vec![0.2, 0.5, 0.9]).unwrap();
        assert_eq!(decode(&p), vec![vec![0, 1, 1]]);
        let p = Tensor::new(vec![1, 3, 2], vec![0.1, 0.6, 0.7, 0.3, 0.2, 0.1]).unwrap();
        assert_eq!(decode(&p), vec![vec![1, 0]]);
    }
}
