//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation whose inputs require gradients.
//! Values are shared through `Arc`, so a graph built with
//! [`Graph::no_grad`] holds nothing and intermediate results are freed as
//! soon as the caller drops them.

use std::cell::RefCell;
use std::sync::Arc;

use crate::conv::{conv_backward, conv_forward, max_pool_forward, ConvGeom, ConvSpec, Precision};
use crate::error::{shape_err, Error, Result};
use crate::loss;
use crate::tensor::{numel, strides, Tensor};

/// A value in a [`Graph`]. Cheap to clone.
#[derive(Clone)]
pub struct Var {
    value: Arc<Tensor>,
    node: Option<usize>,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({:?}, node {:?})", self.value.shape(), self.node)
    }
}

impl Var {
    /// An untracked value outside any graph.
    pub fn constant(value: Arc<Tensor>) -> Var {
        Var { value, node: None }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shared(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// Whether gradients flow through this value.
    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }
}

/// Upsampling interpolation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Nearest,
    /// Linear per axis with half-pixel centers (`align_corners = false`).
    Linear,
}

/// Multiply-accumulate counts observed while executing a graph.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostMeter {
    pub conv_macs: u64,
    /// Dense products between activations, i.e. attention score and
    /// aggregation products.
    pub matmul_macs: u64,
}

enum Op {
    Leaf,
    Conv { spec: ConvSpec, geom: ConvGeom },
    MaxPool { arg: Vec<usize> },
    GroupNorm { groups: usize, xhat: Tensor, inv_std: Vec<f64> },
    LayerNorm { start: usize, xhat: Tensor, inv_std: Vec<f64>, affine: bool },
    Softmax { axis: usize, out: Arc<Tensor> },
    Sigmoid { out: Arc<Tensor> },
    LeakyRelu { slope: f64 },
    Reshape,
    Permute { perm: Vec<usize> },
    Concat { axis: usize },
    Mean,
    Upsample { axis: usize, scale: usize, mode: Interp },
    Add,
    Sub,
    Mul,
    Scale { c: f64 },
    AddScalar,
    Sum,
    MatMul,
    Wedl { target: Arc<Tensor>, weights: Vec<f64>, eps: f64 },
    Dice { target: Arc<Tensor>, eps: f64 },
}

struct Node {
    op: Op,
    inputs: Vec<Var>,
}

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
    precision: Precision,
    meter: RefCell<CostMeter>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A recording graph.
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), recording: true, precision: Precision::Double, meter: Default::default() }
    }

    /// An inference-only graph: nothing is recorded.
    pub fn no_grad() -> Self {
        Graph { recording: false, ..Self::new() }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn meter(&self) -> CostMeter {
        *self.meter.borrow()
    }

    pub fn reset_meter(&self) {
        *self.meter.borrow_mut() = CostMeter::default();
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives a gradient (when recording).
    pub fn leaf(&self, t: Tensor) -> Var {
        self.leaf_shared(Arc::new(t))
    }

    pub fn leaf_shared(&self, value: Arc<Tensor>) -> Var {
        if !self.recording {
            return Var { value, node: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op: Op::Leaf, inputs: Vec::new() });
        Var { value, node: Some(nodes.len() - 1) }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        Var { value: Arc::new(t), node: None }
    }

    fn push(&self, op: Op, inputs: &[&Var], out: Arc<Tensor>) -> Var {
        if !self.recording || !inputs.iter().any(|v| v.is_tracked()) {
            return Var { value: out, node: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, inputs: inputs.iter().map(|&v| v.clone()).collect() });
        Var { value: out, node: Some(nodes.len() - 1) }
    }

    // ---------------------------------------------------------------- layers

    /// Plain (optionally grouped) convolution of a batched input
    /// `N×C×spatial`. Weight `[out, in/groups, k...]`, bias `[out]`.
    pub fn conv(&self, x: &Var, w: &Var, b: Option<&Var>, spec: &ConvSpec) -> Result<Var> {
        let (out, geom) = conv_forward(x.value(), w.value(), b.map(|b| b.value()), spec, self.precision)?;
        self.meter.borrow_mut().conv_macs += geom.macs();
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Op::Conv { spec: spec.clone(), geom }, &inputs, Arc::new(out)))
    }

    /// Non-overlapping max pooling over the spatial axes.
    pub fn max_pool(&self, x: &Var, kernel: &[usize]) -> Result<Var> {
        if kernel.iter().all(|&k| k == 1) && kernel.len() + 2 == x.value().rank() {
            return Ok(x.clone());
        }
        let (out, arg) = max_pool_forward(x.value(), kernel)?;
        Ok(self.push(Op::MaxPool { arg }, &[x], Arc::new(out)))
    }

    /// Group normalization of `N×C×spatial` with per-channel affine
    /// parameters `gamma`, `beta` of shape `[C]`.
    pub fn group_norm(&self, x: &Var, groups: usize, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let xs = x.shape();
        if xs.len() < 3 {
            return Err(shape_err!("group norm expects N×C×spatial, got {xs:?}"));
        }
        let c = xs[1];
        if groups == 0 || c % groups != 0 {
            return Err(shape_err!("{groups} groups do not divide {c} channels"));
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(shape_err!("group norm affine parameters must have shape [{c}]"));
        }
        let sp: usize = xs[2..].iter().product();
        let per = c / groups * sp;
        let xd = x.value().data();
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = Vec::with_capacity(xs[0] * groups);
        for (chunk, hat) in xd.chunks(per).zip(xhat.chunks_mut(per)) {
            let mean = chunk.iter().sum::<f64>() / per as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (h, v) in hat.iter_mut().zip(chunk) {
                *h = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let (gd, bd) = (gamma.value().data(), beta.value().data());
        let mut out = xhat.clone();
        for (i, plane) in out.chunks_mut(sp).enumerate() {
            let ch = i % c;
            plane.iter_mut().for_each(|v| *v = *v * gd[ch] + bd[ch]);
        }
        let out = Tensor::from_parts(xs.to_vec(), out);
        let xhat = Tensor::from_parts(xs.to_vec(), xhat);
        Ok(self.push(Op::GroupNorm { groups, xhat, inv_std }, &[x, gamma, beta], Arc::new(out)))
    }

    /// Layer normalization over axes `start..rank`, independently for each
    /// index of the leading axes. Affine parameters, when given, have the
    /// normalized shape.
    pub fn layer_norm(&self, x: &Var, start: usize, affine: Option<(&Var, &Var)>, eps: f64) -> Result<Var> {
        let xs = x.shape();
        if start >= xs.len() {
            return Err(shape_err!("layer norm start axis {start} is invalid for rank {}", xs.len()));
        }
        let norm_shape = &xs[start..];
        let per = numel(norm_shape);
        if let Some((g, b)) = affine {
            if g.shape() != norm_shape || b.shape() != norm_shape {
                return Err(shape_err!("layer norm parameters must have shape {norm_shape:?}"));
            }
        }
        let xd = x.value().data();
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = Vec::new();
        for (chunk, hat) in xd.chunks(per).zip(xhat.chunks_mut(per)) {
            let mean = chunk.iter().sum::<f64>() / per as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (h, v) in hat.iter_mut().zip(chunk) {
                *h = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let mut out = xhat.clone();
        if let Some((g, b)) = affine {
            let (gd, bd) = (g.value().data(), b.value().data());
            for chunk in out.chunks_mut(per) {
                for (j, v) in chunk.iter_mut().enumerate() {
                    *v = *v * gd[j] + bd[j];
                }
            }
        }
        let out = Tensor::from_parts(xs.to_vec(), out);
        let xhat = Tensor::from_parts(xs.to_vec(), xhat);
        let op = Op::LayerNorm { start, xhat, inv_std, affine: affine.is_some() };
        Ok(match affine {
            Some((g, b)) => self.push(op, &[x, g, b], Arc::new(out)),
            None => self.push(op, &[x], Arc::new(out)),
        })
    }

    // ----------------------------------------------------------- activations

    pub fn softmax(&self, x: &Var, axis: usize) -> Result<Var> {
        let xs = x.shape();
        if axis >= xs.len() {
            return Err(shape_err!("softmax axis {axis} is invalid for rank {}", xs.len()));
        }
        let (outer, n, inner) = split_axis(xs, axis);
        let xd = x.value().data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| xd[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = (xd[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out[at(k)] /= z;
                }
            }
        }
        let out = Arc::new(Tensor::from_parts(xs.to_vec(), out));
        Ok(self.push(Op::Softmax { axis, out: Arc::clone(&out) }, &[x], out))
    }

    pub fn sigmoid(&self, x: &Var) -> Var {
        let out = Arc::new(x.value().map(sigmoid));
        self.push(Op::Sigmoid { out: Arc::clone(&out) }, &[x], out)
    }

    /// Leaky rectifier; `slope = 0` gives the plain rectifier.
    pub fn leaky_relu(&self, x: &Var, slope: f64) -> Var {
        let out = x.value().map(|v| if v > 0.0 { v } else { slope * v });
        self.push(Op::LeakyRelu { slope }, &[x], Arc::new(out))
    }

    // ------------------------------------------------------------ rearrange

    pub fn reshape(&self, x: &Var, shape: &[usize]) -> Result<Var> {
        let out = x.value().reshape(shape)?;
        Ok(self.push(Op::Reshape, &[x], Arc::new(out)))
    }

    pub fn permute(&self, x: &Var, perm: &[usize]) -> Result<Var> {
        let out = x.value().permute(perm)?;
        Ok(self.push(Op::Permute { perm: perm.to_vec() }, &[x], Arc::new(out)))
    }

    pub fn concat(&self, xs: &[&Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?.shape();
        if axis >= first.len() {
            return Err(shape_err!("concat axis {axis} is invalid for rank {}", first.len()));
        }
        for x in xs {
            let s = x.shape();
            if s.len() != first.len() || s.iter().zip(first).enumerate().any(|(a, (p, q))| a != axis && p != q) {
                return Err(shape_err!("cannot concatenate {s:?} with {first:?} on axis {axis}"));
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = xs.iter().map(|x| x.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for x in xs {
                let chunk = x.shape()[axis] * inner;
                data.extend_from_slice(&x.value().data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.to_vec();
        shape[axis] = total;
        Ok(self.push(Op::Concat { axis }, xs, Arc::new(Tensor::from_parts(shape, data))))
    }

    /// Arithmetic mean over `axes`, which keep extent 1.
    pub fn mean(&self, x: &Var, axes: &[usize]) -> Result<Var> {
        let xs = x.shape();
        if axes.iter().any(|&a| a >= xs.len()) {
            return Err(shape_err!("mean axes {axes:?} invalid for rank {}", xs.len()));
        }
        let mut out_shape = xs.to_vec();
        for &a in axes {
            out_shape[a] = 1;
        }
        let count = (numel(xs) / numel(&out_shape)) as f64;
        let mut out = vec![0.0; numel(&out_shape)];
        let xd = x.value().data();
        for_each_broadcast(xs, &out_shape, xs, |i, o, _| out[o] += xd[i]);
        out.iter_mut().for_each(|v| *v /= count);
        Ok(self.push(Op::Mean, &[x], Arc::new(Tensor::from_parts(out_shape, out))))
    }

    /// Upsamples every spatial axis (all axes after the first two) by the
    /// matching factor in `scales`.
    pub fn upsample(&self, x: &Var, scales: &[usize], mode: Interp) -> Result<Var> {
        if scales.len() + 2 != x.value().rank() {
            return Err(shape_err!("upsample factors {scales:?} do not match input {:?}", x.shape()));
        }
        let mut cur = x.clone();
        for (a, &s) in scales.iter().enumerate() {
            if s == 0 {
                return Err(Error::Invalid("upsample factor must be positive".into()));
            }
            if s > 1 {
                cur = self.upsample_axis(&cur, a + 2, s, mode);
            }
        }
        Ok(cur)
    }

    fn upsample_axis(&self, x: &Var, axis: usize, scale: usize, mode: Interp) -> Var {
        let xs = x.shape();
        let (outer, n, inner) = split_axis(xs, axis);
        let m = n * scale;
        let taps = interp_taps(n, scale, mode);
        let xd = x.value().data();
        let mut out = vec![0.0; outer * m * inner];
        for o in 0..outer {
            for (j, &(i0, i1, lam)) in taps.iter().enumerate() {
                let dst = &mut out[(o * m + j) * inner..][..inner];
                let a = &xd[(o * n + i0) * inner..][..inner];
                let b = &xd[(o * n + i1) * inner..][..inner];
                for ((d, &va), &vb) in dst.iter_mut().zip(a).zip(b) {
                    *d = (1.0 - lam) * va + lam * vb;
                }
            }
        }
        let mut shape = xs.to_vec();
        shape[axis] = m;
        self.push(Op::Upsample { axis, scale, mode }, &[x], Arc::new(Tensor::from_parts(shape, out)))
    }

    // ----------------------------------------------------------- arithmetic

    /// Elementwise sum with broadcasting over extent-1 axes.
    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = broadcast_binary(a.value(), b.value(), |x, y| x + y)?;
        Ok(self.push(Op::Add, &[a, b], Arc::new(out)))
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = broadcast_binary(a.value(), b.value(), |x, y| x - y)?;
        Ok(self.push(Op::Sub, &[a, b], Arc::new(out)))
    }

    /// Elementwise product with broadcasting over extent-1 axes.
    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = broadcast_binary(a.value(), b.value(), |x, y| x * y)?;
        Ok(self.push(Op::Mul, &[a, b], Arc::new(out)))
    }

    pub fn scale(&self, x: &Var, c: f64) -> Var {
        self.push(Op::Scale { c }, &[x], Arc::new(x.value().map(|v| c * v)))
    }

    pub fn add_scalar(&self, x: &Var, c: f64) -> Var {
        self.push(Op::AddScalar, &[x], Arc::new(x.value().map(|v| v + c)))
    }

    /// Sum of all entries, as a single-element tensor.
    pub fn sum(&self, x: &Var) -> Var {
        self.push(Op::Sum, &[x], Arc::new(Tensor::scalar(x.value().sum())))
    }

    /// Batched matrix product `[B, M, K] × [B, K, N] → [B, M, N]`.
    pub fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err!("matmul needs [B,M,K]×[B,K,N], got {sa:?}×{sb:?}"));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bt * m * n];
        for i in 0..bt {
            crate::conv::gemm(
                self.precision,
                m,
                k,
                n,
                &a.value().data()[i * m * k..],
                (k, 1),
                &b.value().data()[i * k * n..],
                (n, 1),
                0.0,
                &mut out[i * m * n..],
                (n, 1),
            );
        }
        self.meter.borrow_mut().matmul_macs += (bt * m * k * n) as u64;
        Ok(self.push(Op::MatMul, &[a, b], Arc::new(Tensor::from_parts(vec![bt, m, n], out))))
    }

    // ---------------------------------------------------------------- losses

    /// Weighted extended dice loss of probabilities `p` (`N×classes×spatial`)
    /// against a one-hot `target`, averaged over the batch axis.
    pub fn wedl(&self, p: &Var, target: &Tensor, weights: &loss::ClassWeights, eps: f64) -> Result<Var> {
        let value = loss::wedl_batched(p.value(), target, weights.values(), eps)?;
        let op = Op::Wedl { target: Arc::new(target.clone()), weights: weights.values().to_vec(), eps };
        Ok(self.push(op, &[p], Arc::new(Tensor::scalar(value))))
    }

    /// Standard (linear-denominator) dice loss averaged over classes and batch.
    pub fn dice(&self, p: &Var, target: &Tensor, eps: f64) -> Result<Var> {
        let value = loss::dice_batched(p.value(), target, eps)?;
        Ok(self.push(Op::Dice { target: Arc::new(target.clone()), eps }, &[p], Arc::new(Tensor::scalar(value))))
    }

    // -------------------------------------------------------------- backward

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if !loss.value().is_scalar() {
            return Err(shape_err!("backward needs a scalar loss, got shape {:?}", loss.shape()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root) = loss.node else {
            return Ok(Gradients { grads });
        };
        grads[root] = Some(Tensor::full(loss.shape(), 1.0));
        for id in (0..=root).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let out_shape = g.shape().to_vec();
            let input_grads = self.node_backward(node, g, &out_shape);
            for (inp, ig) in node.inputs.iter().zip(input_grads) {
                if let (Some(nid), Some(ig)) = (inp.node, ig) {
                    match &mut grads[nid] {
                        Some(acc) => acc.data_mut().iter_mut().zip(ig.data()).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node, g: Tensor, out_shape: &[usize]) -> Vec<Option<Tensor>> {
        let need = |i: usize| node.inputs.get(i).is_some_and(|v| v.is_tracked());
        let val = |i: usize| node.inputs[i].value();
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv { spec, geom } => {
                let (gx, gw, gb) =
                    conv_backward(geom, val(0), val(1), &g, (need(0), need(1), spec.has_bias && need(2)), self.precision);
                vec![gx, gw, gb]
            }
            Op::MaxPool { arg } => {
                let mut gx = vec![0.0; val(0).numel()];
                for (&i, &gv) in arg.iter().zip(g.data()) {
                    gx[i] += gv;
                }
                vec![Some(Tensor::from_parts(val(0).shape().to_vec(), gx))]
            }
            Op::GroupNorm { groups, xhat, inv_std } => {
                let xs = val(0).shape();
                let c = xs[1];
                let sp: usize = xs[2..].iter().product();
                let per = c / groups * sp;
                let gamma = val(1).data();
                let (gd, hd) = (g.data(), xhat.data());
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for (i, (gp, hp)) in gd.chunks(sp).zip(hd.chunks(sp)).enumerate() {
                    let ch = i % c;
                    ggamma[ch] += gp.iter().zip(hp).map(|(a, b)| a * b).sum::<f64>();
                    gbeta[ch] += gp.iter().sum::<f64>();
                }
                let gx = need(0).then(|| {
                    let mut gx = vec![0.0; gd.len()];
                    for (blk, &is) in inv_std.iter().enumerate() {
                        let range = blk * per..(blk + 1) * per;
                        // dxhat = g·gamma
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in range.clone() {
                            let dh = gd[j] * gamma[(j / sp) % c];
                            s1 += dh;
                            s2 += dh * hd[j];
                        }
                        let (m1, m2) = (s1 / per as f64, s2 / per as f64);
                        for j in range {
                            let dh = gd[j] * gamma[(j / sp) % c];
                            gx[j] = is * (dh - m1 - hd[j] * m2);
                        }
                    }
                    Tensor::from_parts(xs.to_vec(), gx)
                });
                vec![gx, Some(Tensor::from_parts(vec![c], ggamma)), Some(Tensor::from_parts(vec![c], gbeta))]
            }
            Op::LayerNorm { start, xhat, inv_std, affine } => {
                let xs = val(0).shape();
                let per = numel(&xs[*start..]);
                let (gd, hd) = (g.data(), xhat.data());
                let gamma = affine.then(|| val(1).data());
                let mut gx = vec![0.0; gd.len()];
                let mut ggamma = vec![0.0; per];
                let mut gbeta = vec![0.0; per];
                for (blk, &is) in inv_std.iter().enumerate() {
                    let off = blk * per;
                    let dh = |j: usize| gd[off + j] * gamma.map_or(1.0, |gm| gm[j]);
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..per {
                        s1 += dh(j);
                        s2 += dh(j) * hd[off + j];
                        ggamma[j] += gd[off + j] * hd[off + j];
                        gbeta[j] += gd[off + j];
                    }
                    let (m1, m2) = (s1 / per as f64, s2 / per as f64);
                    for j in 0..per {
                        gx[off + j] = is * (dh(j) - m1 - hd[off + j] * m2);
                    }
                }
                let mut res = vec![Some(Tensor::from_parts(xs.to_vec(), gx))];
                if *affine {
                    let ns = xs[*start..].to_vec();
                    res.push(Some(Tensor::from_parts(ns.clone(), ggamma)));
                    res.push(Some(Tensor::from_parts(ns, gbeta)));
                }
                res
            }
            Op::Softmax { axis, out } => {
                let (outer, n, inner) = split_axis(out_shape, *axis);
                let (y, gd) = (out.data(), g.data());
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let dot: f64 = (0..n).map(|k| gd[at(k)] * y[at(k)]).sum();
                        for k in 0..n {
                            gx[at(k)] = y[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::from_parts(out_shape.to_vec(), gx))]
            }
            Op::Sigmoid { out } => {
                let gx = g.data().iter().zip(out.data()).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                vec![Some(Tensor::from_parts(out_shape.to_vec(), gx))]
            }
            Op::LeakyRelu { slope } => {
                let gx = g
                    .data()
                    .iter()
                    .zip(val(0).data())
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { slope * gv })
                    .collect();
                vec![Some(Tensor::from_parts(out_shape.to_vec(), gx))]
            }
            Op::Reshape => vec![Some(Tensor::from_parts(val(0).shape().to_vec(), g.into_data()))],
            Op::Permute { perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![Some(g.permute(&inv).expect("inverse permutation"))]
            }
            Op::Concat { axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut res = Vec::with_capacity(node.inputs.len());
                let mut off = 0;
                for inp in &node.inputs {
                    let chunk = inp.shape()[*axis] * inner;
                    if inp.is_tracked() {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            d.extend_from_slice(&g.data()[o * total + off..][..chunk]);
                        }
                        res.push(Some(Tensor::from_parts(inp.shape().to_vec(), d)));
                    } else {
                        res.push(None);
                    }
                    off += chunk;
                }
                res
            }
            Op::Mean => {
                let xs = val(0).shape();
                let count = (numel(xs) / numel(out_shape)) as f64;
                let mut gx = vec![0.0; numel(xs)];
                let gd = g.data();
                for_each_broadcast(xs, out_shape, xs, |i, o, _| gx[i] = gd[o] / count);
                vec![Some(Tensor::from_parts(xs.to_vec(), gx))]
            }
            Op::Upsample { axis, scale, mode } => {
                let xs = val(0).shape();
                let (outer, n, inner) = split_axis(xs, *axis);
                let m = n * scale;
                let taps = interp_taps(n, *scale, *mode);
                let gd = g.data();
                let mut gx = vec![0.0; numel(xs)];
                for o in 0..outer {
                    for (j, &(i0, i1, lam)) in taps.iter().enumerate() {
                        let src = &gd[(o * m + j) * inner..][..inner];
                        for (t, &s) in src.iter().enumerate() {
                            gx[(o * n + i0) * inner + t] += (1.0 - lam) * s;
                            gx[(o * n + i1) * inner + t] += lam * s;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(xs.to_vec(), gx))]
            }
            Op::Add | Op::Sub => {
                let sign = if matches!(node.op, Op::Sub) { -1.0 } else { 1.0 };
                let ga = need(0).then(|| reduce_to(&g, val(0).shape()));
                let gb = need(1).then(|| {
                    let mut r = reduce_to(&g, val(1).shape());
                    if sign < 0.0 {
                        r.data_mut().iter_mut().for_each(|v| *v = -*v);
                    }
                    r
                });
                vec![ga, gb]
            }
            Op::Mul => {
                let (a, b) = (val(0), val(1));
                let gd = g.data();
                let grad_for = |mine: &Tensor, other: &Tensor| {
                    let mut acc = vec![0.0; mine.numel()];
                    let od = other.data();
                    for_each_broadcast(out_shape, mine.shape(), other.shape(), |o, m, t| acc[m] += gd[o] * od[t]);
                    Tensor::from_parts(mine.shape().to_vec(), acc)
                };
                vec![need(0).then(|| grad_for(a, b)), need(1).then(|| grad_for(b, a))]
            }
            Op::Scale { c } => vec![Some(g.map(|v| c * v))],
            Op::AddScalar => vec![Some(g)],
            Op::Sum => {
                let gv = g.data()[0];
                vec![Some(Tensor::full(val(0).shape(), gv))]
            }
            Op::MatMul => {
                let (a, b) = (val(0), val(1));
                let (bt, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
                let gd = g.data();
                let ga = need(0).then(|| {
                    let mut ga = vec![0.0; bt * m * k];
                    for i in 0..bt {
                        // gA = gC · Bᵀ
                        crate::conv::gemm(
                            self.precision,
                            m,
                            n,
                            k,
                            &gd[i * m * n..],
                            (n, 1),
                            &b.data()[i * k * n..],
                            (1, n),
                            0.0,
                            &mut ga[i * m * k..],
                            (k, 1),
                        );
                    }
                    Tensor::from_parts(a.shape().to_vec(), ga)
                });
                let gb = need(1).then(|| {
                    let mut gb = vec![0.0; bt * k * n];
                    for i in 0..bt {
                        // gB = Aᵀ · gC
                        crate::conv::gemm(
                            self.precision,
                            k,
                            m,
                            n,
                            &a.data()[i * m * k..],
                            (1, k),
                            &gd[i * m * n..],
                            (n, 1),
                            0.0,
                            &mut gb[i * k * n..],
                            (n, 1),
                        );
                    }
                    Tensor::from_parts(b.shape().to_vec(), gb)
                });
                vec![ga, gb]
            }
            Op::Wedl { target, weights, eps } => {
                let mut gp = loss::wedl_batched_grad(val(0), target, weights, *eps);
                let s = g.data()[0];
                gp.data_mut().iter_mut().for_each(|v| *v *= s);
                vec![Some(gp)]
            }
            Op::Dice { target, eps } => {
                let mut gp = loss::dice_batched_grad(val(0), target, *eps);
                let s = g.data()[0];
                gp.data_mut().iter_mut().for_each(|v| *v *= s);
                vec![Some(gp)]
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`], indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf, `None` when the leaf is not connected to the loss.
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        v.node.and_then(|id| self.grads.get(id)).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zero-filled when disconnected.
    pub fn wrt(&self, v: &Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product())
}

/// Source taps `(i0, i1, weight of i1)` per output index along one axis.
fn interp_taps(n: usize, scale: usize, mode: Interp) -> Vec<(usize, usize, f64)> {
    (0..n * scale)
        .map(|j| match mode {
            Interp::Nearest => (j / scale, j / scale, 0.0),
            Interp::Linear => {
                let src = ((j as f64 + 0.5) / scale as f64 - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n - 1);
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, if i1 == i0 { 0.0 } else { src - i0 as f64 })
            }
        })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` over every position of
/// `out_shape`, where `a_shape` and `b_shape` broadcast to it.
fn for_each_broadcast(out_shape: &[usize], a_shape: &[usize], b_shape: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out_shape.len();
    let bstr = |s: &[usize]| -> Vec<usize> {
        let st = strides(s);
        s.iter().zip(st).map(|(&e, st)| if e == 1 { 0 } else { st }).collect()
    };
    let (sa, sb) = (bstr(a_shape), bstr(b_shape));
    let total = numel(out_shape);
    if rank == 0 || total == 0 {
        return;
    }
    let inner = out_shape[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        for j in 0..inner {
            f(o + j, oa + j * ia, ob + j * ib);
        }
        o += inner;
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            oa -= sa[ax] * out_shape[ax];
            ob -= sb[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(shape_err!("cannot broadcast {a:?} with {b:?}: rank differs"));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(shape_err!("cannot broadcast {a:?} with {b:?}")),
        })
        .collect()
}

fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let mut out = vec![0.0; numel(&shape)];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&shape, a.shape(), b.shape(), |o, i, j| out[o] = f(ad[i], bd[j]));
    Ok(Tensor::from_parts(shape, out))
}

/// Sums `g` down to `shape` over broadcast axes.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let mut acc = vec![0.0; numel(shape)];
    let gd = g.data();
    for_each_broadcast(g.shape(), shape, shape, |o, i, _| acc[i] += gd[o]);
    Tensor::from_parts(shape.to_vec(), acc)
}
