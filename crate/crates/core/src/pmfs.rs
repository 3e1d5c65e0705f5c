//! The polarized multi-scale feature self-attention block: multi-branch
//! fusion, channel attention, then spatial attention, for 2D and 3D maps.
//!
//! All tensors carry a leading batch axis: a 3D branch is `N×C×H×W×D`.

use rand::Rng;

use crate::conv::ConvSpec;
use crate::error::{shape_err, Error, Result};
use crate::graph::Var;
use crate::layers::{ConvBlock, ConvLayer, Ctx};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;
/// Pooling extents applied to the three branches before fusion.
pub const BRANCH_POOL: [usize; 3] = [4, 2, 1];

/// The three encoder outputs consumed by the block.
#[derive(Debug, Clone)]
pub struct BranchSet {
    pub x1: Var,
    pub x2: Var,
    pub x3: Var,
}

impl BranchSet {
    pub fn new(x1: Var, x2: Var, x3: Var) -> Result<Self> {
        let b = BranchSet { x1, x2, x3 };
        b.validate()?;
        Ok(b)
    }

    pub fn branches(&self) -> [&Var; 3] {
        [&self.x1, &self.x2, &self.x3]
    }

    pub fn channels(&self) -> [usize; 3] {
        self.branches().map(|x| x.shape()[1])
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.branches().map(|x| x.shape());
        let rank = s[0].len();
        if !(rank == 4 || rank == 5) || s.iter().any(|v| v.len() != rank) {
            return Err(shape_err!("branches must all be batched 2D or all 3D, got {:?} {:?} {:?}", s[0], s[1], s[2]));
        }
        if s.iter().any(|v| v[0] != s[0][0]) {
            return Err(shape_err!("branches disagree on batch size"));
        }
        for a in 2..rank {
            let (e1, e2, e3) = (s[0][a], s[1][a], s[2][a]);
            if e1 % 4 != 0 || e1 != 2 * e2 || e1 != 4 * e3 {
                return Err(shape_err!(
                    "spatial axis {} must halve per branch with the first divisible by 4, got {e1}/{e2}/{e3}",
                    a - 2
                ));
            }
        }
        Ok(())
    }
}

/// Internal channel configuration of the block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PmfsConfig {
    /// Per-branch channel `c`; the fused map has `3c` channels.
    pub branch_channel: usize,
    pub out_channels: usize,
    pub in_channels: [usize; 3],
    pub dims: usize,
}

impl PmfsConfig {
    pub fn new(branch_channel: usize, out_channels: usize, in_channels: [usize; 3], dims: usize) -> Result<Self> {
        if branch_channel == 0 || out_channels == 0 || in_channels.contains(&0) {
            return Err(Error::Config("block channel counts must be positive".into()));
        }
        if dims != 2 && dims != 3 {
            return Err(Error::Config(format!("dims must be 2 or 3, got {dims}")));
        }
        Ok(PmfsConfig { branch_channel, out_channels, in_channels, dims })
    }

    pub fn fused_channels(&self) -> usize {
        3 * self.branch_channel
    }
}

/// Channel attention: a single global key over positions gates every
/// channel of the value map.
#[derive(Debug, Clone)]
pub struct Pmcs {
    pub channels: usize,
    pub wq: ConvLayer,
    pub wk: ConvLayer,
    pub wv: ConvLayer,
    pub wz: ConvLayer,
    pub ln_scale: ParamId,
    pub ln_shift: ParamId,
}

/// Spatial attention: per branch, a global channel key scores every position.
#[derive(Debug, Clone)]
pub struct Pmss {
    pub branch_channel: usize,
    pub wq: ConvLayer,
    pub wk: ConvLayer,
    pub wv: ConvLayer,
    pub w_out: ConvBlock,
}

/// Every intermediate the block exposes.
#[derive(Debug, Clone)]
pub struct PmfsOutput {
    /// Fused multi-branch map, `N×3c×spatial`.
    pub a: Var,
    pub a_ch: Var,
    /// Channel gate, `N×3c×1×1(×1)`.
    pub z_ch: Var,
    pub a_sp: Var,
    /// Spatial gate, `N×1×spatial×3`.
    pub z_sp: Var,
}

#[derive(Debug, Clone)]
pub struct PmfsBlock {
    pub cfg: PmfsConfig,
    pub amff: [ConvBlock; 3],
    pub pmcs: Pmcs,
    pub pmss: Pmss,
}

fn pointwise(cin: usize, cout: usize, dims: usize) -> ConvSpec {
    ConvSpec::same(cin, cout, 1, dims)
}

impl Pmcs {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, dims: usize, rng: &mut R) -> Result<Self> {
        let c = channels;
        Ok(Pmcs {
            channels,
            wq: ConvLayer::new(store, &format!("{name}.wq"), pointwise(c, c, dims).separable(true), rng)?,
            wk: ConvLayer::new(store, &format!("{name}.wk"), pointwise(c, 1, dims).with_bias(false), rng)?,
            wv: ConvLayer::new(store, &format!("{name}.wv"), pointwise(c, c, dims).separable(true), rng)?,
            wz: ConvLayer::new(store, &format!("{name}.wz"), pointwise(c, c, dims), rng)?,
            ln_scale: store.add(format!("{name}.ln.scale"), ParamKind::Scale, Tensor::ones(&[c])),
            ln_shift: store.add(format!("{name}.ln.shift"), ParamKind::Shift, Tensor::zeros(&[c])),
        })
    }

    /// Returns `(a_ch, z_ch)`.
    pub fn forward(&self, ctx: &Ctx, a: &Var) -> Result<(Var, Var)> {
        let g = ctx.g;
        let s = a.shape().to_vec();
        if s.len() < 3 || s[1] != self.channels {
            return Err(shape_err!("channel attention expects {} channels, got {s:?}", self.channels));
        }
        let (n, c) = (s[0], s[1]);
        let np: usize = s[2..].iter().product();
        let q = g.reshape(&self.wq.forward(ctx, a)?, &[n, c, np])?;
        let k = g.reshape(&self.wk.forward(ctx, a)?, &[n, 1, np])?;
        let k = g.reshape(&g.softmax(&k, 2)?, &[n, np, 1])?;
        let qk = g.matmul(&q, &k)?;
        let mut unit = vec![n, c];
        unit.extend(std::iter::repeat(1).take(s.len() - 2));
        let z = self.wz.forward(ctx, &g.reshape(&qk, &unit)?)?;
        let z = g.layer_norm(
            &g.reshape(&z, &[n, c])?,
            1,
            Some((ctx.var(self.ln_scale), ctx.var(self.ln_shift))),
            LAYER_NORM_EPS,
        )?;
        let z_ch = g.reshape(&g.sigmoid(&z), &unit)?;
        let v = self.wv.forward(ctx, a)?;
        Ok((g.mul(&v, &z_ch)?, z_ch))
    }

    pub fn param_count(&self) -> u64 {
        [&self.wq, &self.wk, &self.wv, &self.wz].iter().map(|l| l.spec.param_count()).sum::<u64>() + 2 * self.channels as u64
    }
}

impl Pmss {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        branch_channel: usize,
        out_channels: usize,
        dims: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let c = 3 * branch_channel;
        Ok(Pmss {
            branch_channel,
            wq: ConvLayer::new(store, &format!("{name}.wq"), pointwise(c, c, dims), rng)?,
            wk: ConvLayer::new(store, &format!("{name}.wk"), pointwise(c, c, dims), rng)?,
            wv: ConvLayer::new(store, &format!("{name}.wv"), pointwise(c, c, dims), rng)?,
            w_out: ConvBlock::new(store, &format!("{name}.out"), ConvSpec::same(c, out_channels, 3, dims).separable(true), rng)?,
        })
    }

    /// Returns `(a_sp, z_sp)`.
    pub fn forward(&self, ctx: &Ctx, a_ch: &Var) -> Result<(Var, Var)> {
        let g = ctx.g;
        let s = a_ch.shape().to_vec();
        let bc = self.branch_channel;
        if s.len() < 3 || s[1] % 3 != 0 || s[1] != 3 * bc {
            return Err(shape_err!("spatial attention expects {} channels in three branches, got {s:?}", 3 * bc));
        }
        let n = s[0];
        let sp = &s[2..];
        let np: usize = sp.iter().product();
        let spatial_axes: Vec<usize> = (2..s.len()).collect();
        let q = g.reshape(&self.wq.forward(ctx, a_ch)?, &[3 * n, bc, np])?;
        let k = g.mean(&self.wk.forward(ctx, a_ch)?, &spatial_axes)?;
        let k = g.softmax(&g.reshape(&k, &[3 * n, 1, bc])?, 2)?;
        let z = g.sigmoid(&g.matmul(&k, &q)?);
        let v = g.reshape(&self.wv.forward(ctx, a_ch)?, &[3 * n, bc, np])?;
        let gated = g.reshape(&g.mul(&v, &z)?, &s)?;
        let a_sp = self.w_out.forward(ctx, &gated)?;

        let mut by_branch = vec![n, 3];
        by_branch.extend_from_slice(sp);
        let mut perm = vec![0];
        perm.extend(2..s.len());
        perm.push(1);
        let z_sp = g.permute(&g.reshape(&z, &by_branch)?, &perm)?;
        let mut gate_shape = vec![n, 1];
        gate_shape.extend_from_slice(sp);
        gate_shape.push(3);
        Ok((a_sp, g.reshape(&z_sp, &gate_shape)?))
    }

    pub fn param_count(&self) -> u64 {
        [&self.wq, &self.wk, &self.wv].iter().map(|l| l.spec.param_count()).sum::<u64>() + self.w_out.param_count()
    }
}

impl PmfsBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: PmfsConfig, rng: &mut R) -> Result<Self> {
        let (c, d) = (cfg.branch_channel, cfg.dims);
        let mut amff = Vec::with_capacity(3);
        for (l, &cin) in cfg.in_channels.iter().enumerate() {
            amff.push(ConvBlock::new(store, &format!("{name}.amff{}", l + 1), ConvSpec::same(cin, c, 3, d), rng)?);
        }
        let pmcs = Pmcs::new(store, &format!("{name}.pmcs"), 3 * c, d, rng)?;
        let pmss = Pmss::new(store, &format!("{name}.pmss"), c, cfg.out_channels, d, rng)?;
        let amff = amff.try_into().expect("three branches");
        Ok(PmfsBlock { cfg, amff, pmcs, pmss })
    }

    /// Pool every branch to the coarsest grid, project to `c` channels and
    /// concatenate.
    pub fn amff(&self, ctx: &Ctx, b: &BranchSet) -> Result<Var> {
        b.validate()?;
        let rank = b.x1.value().rank();
        if rank - 2 != self.cfg.dims {
            return Err(shape_err!("block is {}D but branches have shape {:?}", self.cfg.dims, b.x1.shape()));
        }
        if b.channels() != self.cfg.in_channels {
            return Err(shape_err!("block expects branch channels {:?}, got {:?}", self.cfg.in_channels, b.channels()));
        }
        let mut fused = Vec::with_capacity(3);
        for ((x, block), k) in b.branches().into_iter().zip(&self.amff).zip(BRANCH_POOL) {
            let pooled = ctx.g.max_pool(x, &vec![k; self.cfg.dims])?;
            fused.push(block.forward(ctx, &pooled)?);
        }
        ctx.g.concat(&fused.iter().collect::<Vec<_>>(), 1)
    }

    pub fn forward(&self, ctx: &Ctx, b: &BranchSet) -> Result<PmfsOutput> {
        let a = self.amff(ctx, b)?;
        let (a_ch, z_ch) = self.pmcs.forward(ctx, &a)?;
        let (a_sp, z_sp) = self.pmss.forward(ctx, &a_ch)?;
        Ok(PmfsOutput { a, a_ch, z_ch, a_sp, z_sp })
    }

    pub fn param_count(&self) -> u64 {
        self.amff.iter().map(|b| b.param_count()).sum::<u64>() + self.pmcs.param_count() + self.pmss.param_count()
    }
}

/// Conventional self-attention with a full position-by-position score
/// matrix: `softmax(QᵀK/√C)` applied to `V`. Kept as the quadratic-cost
/// reference for complexity comparisons.
#[derive(Debug, Clone)]
pub struct QuadraticAttention {
    pub channels: usize,
    pub wq: ConvLayer,
    pub wk: ConvLayer,
    pub wv: ConvLayer,
}

impl QuadraticAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, dims: usize, rng: &mut R) -> Result<Self> {
        let c = channels;
        Ok(QuadraticAttention {
            channels,
            wq: ConvLayer::new(store, &format!("{name}.wq"), pointwise(c, c, dims), rng)?,
            wk: ConvLayer::new(store, &format!("{name}.wk"), pointwise(c, c, dims), rng)?,
            wv: ConvLayer::new(store, &format!("{name}.wv"), pointwise(c, c, dims), rng)?,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let g = ctx.g;
        let s = x.shape().to_vec();
        let (n, c) = (s[0], s[1]);
        let np: usize = s[2..].iter().product();
        let q = g.permute(&g.reshape(&self.wq.forward(ctx, x)?, &[n, c, np])?, &[0, 2, 1])?;
        let k = g.reshape(&self.wk.forward(ctx, x)?, &[n, c, np])?;
        let scores = g.scale(&g.matmul(&q, &k)?, 1.0 / (c as f64).sqrt());
        let attn = g.softmax(&scores, 2)?;
        let v = g.permute(&g.reshape(&self.wv.forward(ctx, x)?, &[n, c, np])?, &[0, 2, 1])?;
        let out = g.permute(&g.matmul(&attn, &v)?, &[0, 2, 1])?;
        g.reshape(&out, &s)
    }
}
