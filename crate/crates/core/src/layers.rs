//! Parameterized building blocks: convolutions (plain or depthwise
//! separable), group normalization and the conv → norm → activation block.

use rand::Rng;

use crate::conv::ConvSpec;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;
const MAX_GROUPS: usize = 8;

/// Graph plus bound parameters: everything a layer needs to run.
pub struct Ctx<'a> {
    pub g: &'a Graph,
    pub p: &'a Bound,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a Graph, p: &'a Bound) -> Self {
        Ctx { g, p }
    }

    pub fn var(&self, id: ParamId) -> &Var {
        self.p.var(id)
    }
}

/// Largest divisor of `channels` not exceeding 8.
pub fn norm_groups(channels: usize) -> usize {
    (1..=MAX_GROUPS.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

fn init_weight<R: Rng + ?Sized>(spec: &ConvSpec, rng: &mut R) -> Tensor {
    let fan_in = (spec.in_channels / spec.groups * spec.kernel_volume()).max(1);
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(&spec.weight_shape(), -bound, bound, rng)
}

#[derive(Debug, Clone)]
struct Plain {
    spec: ConvSpec,
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Plain {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: ConvSpec, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), ParamKind::Weight, init_weight(&spec, rng));
        let bias = spec
            .has_bias
            .then(|| store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[spec.out_channels])));
        Plain { spec, weight, bias }
    }

    fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        ctx.g.conv(x, ctx.var(self.weight), self.bias.map(|b| ctx.var(b)), &self.spec)
    }
}

/// A convolution layer. Separable specs run as a depthwise convolution
/// followed by a pointwise one; only the pointwise part carries a bias.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub name: String,
    pub spec: ConvSpec,
    parts: Vec<Plain>,
}

impl ConvLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: ConvSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let parts = if spec.depthwise_separable {
            vec![
                Plain::new(store, &format!("{name}.dw"), spec.depthwise_part(), rng),
                Plain::new(store, &format!("{name}.pw"), spec.pointwise_part(), rng),
            ]
        } else {
            vec![Plain::new(store, name, spec.clone(), rng)]
        };
        Ok(ConvLayer { name: name.to_string(), spec, parts })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let mut cur = x.clone();
        for p in &self.parts {
            cur = p.forward(ctx, &cur)?;
        }
        Ok(cur)
    }

    /// Parameter ids as `(weight, bias)` per executed part.
    pub fn param_ids(&self) -> Vec<(ParamId, Option<ParamId>)> {
        self.parts.iter().map(|p| (p.weight, p.bias)).collect()
    }
}

/// Group normalization with per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    gamma: ParamId,
    beta: ParamId,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.scale"), ParamKind::Scale, Tensor::ones(&[channels]));
        let beta = store.add(format!("{name}.shift"), ParamKind::Shift, Tensor::zeros(&[channels]));
        GroupNorm { channels, groups: norm_groups(channels), gamma, beta }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        ctx.g.group_norm(x, self.groups, ctx.var(self.gamma), ctx.var(self.beta), NORM_EPS)
    }

    pub fn param_count(&self) -> u64 {
        2 * self.channels as u64
    }
}

/// Convolution (without bias) → group normalization → leaky rectifier.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: ConvLayer,
    pub norm: GroupNorm,
}

impl ConvBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: ConvSpec, rng: &mut R) -> Result<Self> {
        let spec = spec.with_bias(false);
        let cout = spec.out_channels;
        let conv = ConvLayer::new(store, &format!("{name}.conv"), spec, rng)?;
        let norm = GroupNorm::new(store, &format!("{name}.norm"), cout);
        Ok(ConvBlock { conv, norm })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.norm.forward(ctx, &y)?;
        Ok(ctx.g.leaky_relu(&y, LEAKY_SLOPE))
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.conv.spec
    }

    pub fn param_count(&self) -> u64 {
        self.conv.spec.param_count() + self.norm.param_count()
    }
}
