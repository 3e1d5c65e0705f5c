//! Parameter and multiply-accumulate accounting.
//!
//! Convolution parameters are `Πk·(in/groups)·out` (+`out` for a bias),
//! normalizations contribute `2·channels`, separable layers are the sum of
//! their depthwise and pointwise parts. MACs are `positions·Πk·(in/groups)·out`
//! per convolution plus the two attention products, each `channels·positions`.
//! One MAC is reported as one FLOP; the doubled convention is printed too.

use std::fmt::Write as _;

use crate::conv::ConvSpec;
use crate::error::Result;
use crate::layers::{ConvBlock, ConvLayer};
use crate::model::{Decoder, PmfsNet, Preset};
use crate::pmfs::{PmfsBlock, BRANCH_POOL};

pub const CONVENTION: &str = "1 MAC = 1 FLOP";
pub const PARAM_TOLERANCE: f64 = 0.15;
pub const FLOP_TOLERANCE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostEntry {
    pub name: String,
    pub kind: &'static str,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub entries: Vec<CostEntry>,
    pub input_shape: Vec<usize>,
    pub convention: &'static str,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.entries.iter().map(|e| e.macs).sum()
    }

    /// MACs of the attention score/aggregation products alone.
    pub fn attention_macs(&self) -> u64 {
        self.entries.iter().filter(|e| e.kind == "attention").map(|e| e.macs).sum()
    }

    pub fn conv_macs(&self) -> u64 {
        self.entries.iter().filter(|e| e.kind != "attention").map(|e| e.macs).sum()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let w = self.entries.iter().map(|e| e.name.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(s, "{:<w$}  {:<9}  {:>10}  {:>14}", "layer", "kind", "params", "MACs");
        for e in &self.entries {
            let _ = writeln!(s, "{:<w$}  {:<9}  {:>10}  {:>14}", e.name, e.kind, e.params, e.macs);
        }
        let macs = self.total_macs() as f64;
        let _ = writeln!(s, "total params: {} ({:.3} M)", self.total_params(), self.total_params() as f64 / 1e6);
        let _ = writeln!(
            s,
            "total MACs at {:?}: {:.3} G ({}); 2x convention: {:.3} G",
            self.input_shape,
            macs / 1e9,
            self.convention,
            2.0 * macs / 1e9
        );
        s
    }
}

/// Published parameter count, in millions, of a scaling version.
pub fn param_anchor(p: Preset, dims: usize) -> Option<f64> {
    Some(match (p, dims) {
        (Preset::Tiny, 3) => 0.63,
        (Preset::Small, 3) => 1.21,
        (Preset::Basic, 3) => 2.27,
        (Preset::Tiny, 2) => 0.33,
        (Preset::Small, 2) => 0.54,
        (Preset::Basic, 2) => 0.99,
        _ => return None,
    })
}

/// Published FLOP count in G at the version's standard input size.
pub fn flop_anchor(p: Preset, dims: usize) -> Option<(f64, Vec<usize>)> {
    match (p, dims) {
        (Preset::Tiny, 3) => Some((15.14, vec![160, 160, 96])),
        (Preset::Basic, 2) => Some((2.21, vec![224, 224])),
        _ => None,
    }
}

/// Comparison of a measured value with a published one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorCheck {
    pub measured: f64,
    pub target: f64,
    pub ratio: f64,
    pub pass: bool,
    /// For FLOPs: whether the doubled convention was the closer reading.
    pub doubled: bool,
}

pub fn check_params(measured_m: f64, target_m: f64) -> AnchorCheck {
    let ratio = measured_m / target_m;
    AnchorCheck { measured: measured_m, target: target_m, ratio, pass: (ratio - 1.0).abs() <= PARAM_TOLERANCE, doubled: false }
}

/// Picks whichever of the 1× and 2× MAC conventions is closer to the target.
pub fn check_flops(macs_g: f64, target_g: f64) -> AnchorCheck {
    let (r1, r2) = (macs_g / target_g, 2.0 * macs_g / target_g);
    let doubled = (r2 - 1.0).abs() < (r1 - 1.0).abs();
    let (measured, ratio) = if doubled { (2.0 * macs_g, r2) } else { (macs_g, r1) };
    AnchorCheck { measured, target: target_g, ratio, pass: (ratio - 1.0).abs() <= FLOP_TOLERANCE, doubled }
}

struct Tracer {
    entries: Vec<CostEntry>,
}

impl Tracer {
    fn spec(&mut self, name: &str, spec: &ConvSpec, input: &[usize]) -> Result<Vec<usize>> {
        let out = spec.output_extent(input)?;
        let positions: usize = out.iter().product();
        self.entries.push(CostEntry { name: name.to_string(), kind: "conv", params: spec.param_count(), macs: spec.macs(positions) });
        Ok(out)
    }

    fn layer(&mut self, l: &ConvLayer, input: &[usize]) -> Result<Vec<usize>> {
        self.spec(&l.name, &l.spec, input)
    }

    fn block(&mut self, b: &ConvBlock, input: &[usize]) -> Result<Vec<usize>> {
        let out = self.layer(&b.conv, input)?;
        self.entries.push(CostEntry { name: format!("{}.norm", b.conv.name.trim_end_matches(".conv")), kind: "norm", params: b.norm.param_count(), macs: 0 });
        Ok(out)
    }

    fn attention(&mut self, name: &str, macs: usize) {
        self.entries.push(CostEntry { name: name.to_string(), kind: "attention", params: 0, macs: macs as u64 });
    }

    fn pmfs(&mut self, block: &PmfsBlock, branch_sp: [&[usize]; 3]) -> Result<Vec<usize>> {
        let mut grid = Vec::new();
        for ((b, sp), k) in block.amff.iter().zip(branch_sp).zip(BRANCH_POOL) {
            let pooled: Vec<usize> = sp.iter().map(|e| e / k).collect();
            grid = self.block(b, &pooled)?;
        }
        let np: usize = grid.iter().product();
        let c = block.cfg.fused_channels();
        let m = &block.pmcs;
        self.layer(&m.wq, &grid)?;
        self.layer(&m.wk, &grid)?;
        self.attention("pmfs.pmcs.qk", c * np);
        let unit = vec![1; grid.len()];
        self.layer(&m.wz, &unit)?;
        self.entries.push(CostEntry { name: "pmfs.pmcs.ln".into(), kind: "norm", params: 2 * c as u64, macs: 0 });
        self.layer(&m.wv, &grid)?;
        let s = &block.pmss;
        self.layer(&s.wq, &grid)?;
        self.layer(&s.wk, &grid)?;
        self.attention("pmfs.pmss.kq", c * np);
        self.layer(&s.wv, &grid)?;
        self.block(&s.w_out, &grid)
    }
}

/// Traces the cost of one forward pass over a single input of spatial
/// shape `input` without executing it.
pub fn trace(net: &PmfsNet, input: &[usize]) -> Result<CostReport> {
    net.cfg.check_input(input)?;
    let mut t = Tracer { entries: Vec::new() };
    let mut sp = input.to_vec();
    let mut stage_sp = Vec::new();
    for stage in &net.stages {
        sp = t.block(&stage.entry, &sp)?;
        for u in &stage.units {
            t.block(u, &sp)?;
        }
        stage_sp.push(sp.clone());
    }
    for (skip, sp) in net.skips.iter().zip(&stage_sp) {
        t.block(skip, sp)?;
    }
    if let Some(block) = &net.block {
        t.pmfs(block, [&stage_sp[0], &stage_sp[1], &stage_sp[2]])?;
    }
    match &net.decoder {
        Decoder::DirectFusion { fuse } => {
            let half = t.block(fuse, &stage_sp[0])?;
            t.layer(&net.head, &half)?;
        }
        Decoder::Progressive { up3, up2, up1, refine } => {
            t.block(up3, &stage_sp[2])?;
            t.block(up2, &stage_sp[1])?;
            t.block(up1, &stage_sp[0])?;
            t.block(refine, input)?;
            t.layer(&net.head, input)?;
        }
        Decoder::None => {
            t.layer(&net.head, &stage_sp[2])?;
        }
    }
    Ok(CostReport { entries: t.entries, input_shape: input.to_vec(), convention: CONVENTION })
}

/// Parameter report (input-independent) at the configured input shape.
pub fn count_params(net: &PmfsNet) -> Result<CostReport> {
    trace(net, &net.cfg.input_shape)
}

pub fn count_flops(net: &PmfsNet, input: &[usize]) -> Result<CostReport> {
    trace(net, input)
}

/// Attention-product MACs of a full position-by-position self-attention
/// over `channels × positions`: scores plus aggregation.
pub fn quadratic_attention_macs(channels: usize, positions: usize) -> u64 {
    2 * (positions as u64) * (positions as u64) * channels as u64
}

/// Attention-product MACs of the block at a bottleneck of `positions`.
pub fn pmfs_attention_macs(fused_channels: usize, positions: usize) -> u64 {
    2 * (fused_channels * positions) as u64
}
