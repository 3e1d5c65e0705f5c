//! Convolution geometry and the im2col/GEMM kernels behind the graph's
//! convolution, pooling and pointwise-product operations.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{numel, Tensor};

/// Arithmetic precision used by the dense products inside convolutions and
/// batched matrix products. Everything else always runs in `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    Double,
    Single,
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f64" | "double" => Ok(Precision::Double),
            "f32" | "single" => Ok(Precision::Single),
            other => Err(Error::Invalid(format!("unknown precision `{other}` (expected f64 or f32)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
    pub dilation: Vec<usize>,
    pub groups: usize,
    pub has_bias: bool,
    /// Realized as a `groups = in_channels` spatial convolution followed by a
    /// pointwise convolution.
    pub depthwise_separable: bool,
}

impl ConvSpec {
    /// Stride-1, unpadded, ungrouped convolution with bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: &[usize]) -> Self {
        let r = kernel.len();
        ConvSpec {
            in_channels,
            out_channels,
            kernel: kernel.to_vec(),
            stride: vec![1; r],
            padding: vec![0; r],
            dilation: vec![1; r],
            groups: 1,
            has_bias: true,
            depthwise_separable: false,
        }
    }

    /// Cubic/square kernel of extent `k` on `dims` spatial axes, padded so
    /// that stride-1 output extents equal input extents (odd `k`).
    pub fn same(in_channels: usize, out_channels: usize, k: usize, dims: usize) -> Self {
        let mut spec = ConvSpec::new(in_channels, out_channels, &vec![k; dims]);
        spec.padding = vec![k / 2; dims];
        spec
    }

    pub fn with_stride(mut self, s: usize) -> Self {
        self.stride = vec![s; self.kernel.len()];
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn separable(mut self, on: bool) -> Self {
        self.depthwise_separable = on;
        self
    }

    pub fn spatial_rank(&self) -> usize {
        self.kernel.len()
    }

    pub fn kernel_volume(&self) -> usize {
        numel(&self.kernel)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.kernel.len();
        if !(1..=3).contains(&r) {
            return Err(Error::Config(format!("convolution must have 1-3 spatial axes, got {r}")));
        }
        if self.stride.len() != r || self.padding.len() != r || self.dilation.len() != r {
            return Err(Error::Config("convolution geometry vectors disagree in length".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.groups == 0 {
            return Err(Error::Config("channel counts and groups must be positive".into()));
        }
        if self.kernel.iter().chain(&self.stride).chain(&self.dilation).any(|&v| v == 0) {
            return Err(Error::Config("kernel, stride and dilation must be positive".into()));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::Config(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        if self.depthwise_separable && self.groups != 1 {
            return Err(Error::Config("a depthwise-separable layer takes groups = 1".into()));
        }
        Ok(())
    }

    /// `floor((in + 2·pad − dilation·(kernel−1) − 1)/stride) + 1` per axis.
    pub fn output_extent(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != self.kernel.len() {
            return Err(shape_err!(
                "convolution with {} spatial axes applied to spatial shape {input:?}",
                self.kernel.len()
            ));
        }
        input
            .iter()
            .enumerate()
            .map(|(a, &n)| {
                let span = self.dilation[a] * (self.kernel[a] - 1) + 1;
                let padded = n + 2 * self.padding[a];
                if padded < span {
                    Err(shape_err!("convolution output would be empty on axis {a} (input {n}, span {span})"))
                } else {
                    Ok((padded - span) / self.stride[a] + 1)
                }
            })
            .collect()
    }

    /// The spatial (per-channel) half of a depthwise-separable layer.
    pub fn depthwise_part(&self) -> ConvSpec {
        ConvSpec {
            out_channels: self.in_channels,
            groups: self.in_channels,
            has_bias: false,
            depthwise_separable: false,
            ..self.clone()
        }
    }

    /// The pointwise (channel-mixing) half of a depthwise-separable layer.
    pub fn pointwise_part(&self) -> ConvSpec {
        let r = self.kernel.len();
        ConvSpec {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: vec![1; r],
            stride: vec![1; r],
            padding: vec![0; r],
            dilation: vec![1; r],
            groups: 1,
            has_bias: self.has_bias,
            depthwise_separable: false,
        }
    }

    /// Weight shape `[out, in/groups, k...]` of a plain convolution.
    pub fn weight_shape(&self) -> Vec<usize> {
        let mut s = vec![self.out_channels, self.in_channels / self.groups];
        s.extend_from_slice(&self.kernel);
        s
    }

    /// Exact parameter count, bias included.
    pub fn param_count(&self) -> u64 {
        if self.depthwise_separable {
            return self.depthwise_part().param_count() + self.pointwise_part().param_count();
        }
        let w = (self.kernel_volume() * (self.in_channels / self.groups) * self.out_channels) as u64;
        w + if self.has_bias { self.out_channels as u64 } else { 0 }
    }

    /// Multiply-accumulates for `positions` output positions.
    pub fn macs(&self, positions: usize) -> u64 {
        if self.depthwise_separable {
            return self.depthwise_part().macs(positions) + self.pointwise_part().macs(positions);
        }
        positions as u64 * (self.kernel_volume() * (self.in_channels / self.groups) * self.out_channels) as u64
    }
}

/// `C = alpha·op(A)·op(B) + beta·C` on strided row-major views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    precision: Precision,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let reach = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs + 1;
    if k == 0 {
        let last = reach(m, n, rsc, csc);
        assert!(c.len() >= last);
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j * csc] *= beta;
            }
        }
        return;
    }
    assert!(a.len() >= reach(m, k, rsa, csa), "gemm: A view out of bounds");
    assert!(b.len() >= reach(k, n, rsb, csb), "gemm: B view out of bounds");
    assert!(c.len() >= reach(m, n, rsc, csc), "gemm: C view out of bounds");
    match precision {
        Precision::Double => unsafe {
            // SAFETY: every view was bounds-checked above against its slice.
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                c.as_mut_ptr(),
                rsc as isize,
                csc as isize,
            );
        },
        Precision::Single => {
            let a32: Vec<f32> = a[..reach(m, k, rsa, csa)].iter().map(|&v| v as f32).collect();
            let b32: Vec<f32> = b[..reach(k, n, rsb, csb)].iter().map(|&v| v as f32).collect();
            let mut c32 = vec![0f32; m * n];
            unsafe {
                // SAFETY: a32/b32 cover the checked views; c32 is a dense m×n buffer.
                matrixmultiply::sgemm(
                    m,
                    k,
                    n,
                    1.0,
                    a32.as_ptr(),
                    rsa as isize,
                    csa as isize,
                    b32.as_ptr(),
                    rsb as isize,
                    csb as isize,
                    0.0,
                    c32.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            for i in 0..m {
                for j in 0..n {
                    let dst = &mut c[i * rsc + j * csc];
                    *dst = beta * *dst + c32[i * n + j] as f64;
                }
            }
        }
    }
}

/// Geometry of one convolution applied to a concrete batched input, padded
/// out to three spatial axes.
#[derive(Debug, Clone)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
    pub in_sp: [usize; 3],
    pub out_sp: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    dil: [usize; 3],
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], spec: &ConvSpec) -> Result<(Self, Vec<usize>)> {
        spec.validate()?;
        if spec.depthwise_separable {
            return Err(Error::Invalid("a separable layer must be split before execution".into()));
        }
        let r = spec.spatial_rank();
        if x_shape.len() != r + 2 {
            return Err(shape_err!(
                "convolution with {r} spatial axes expects a rank-{} batched input, got {x_shape:?}",
                r + 2
            ));
        }
        if x_shape[1] != spec.in_channels {
            return Err(shape_err!(
                "convolution expects {} input channels, input has shape {x_shape:?}",
                spec.in_channels
            ));
        }
        let out = spec.output_extent(&x_shape[2..])?;
        let pad3 = |v: &[usize], fill: usize| {
            let mut a = [fill; 3];
            a[..v.len()].copy_from_slice(v);
            a
        };
        let geom = ConvGeom {
            batch: x_shape[0],
            cin: spec.in_channels,
            cout: spec.out_channels,
            groups: spec.groups,
            in_sp: pad3(&x_shape[2..], 1),
            out_sp: pad3(&out, 1),
            kernel: pad3(&spec.kernel, 1),
            stride: pad3(&spec.stride, 1),
            pad: pad3(&spec.padding, 0),
            dil: pad3(&spec.dilation, 1),
        };
        let mut out_shape = vec![x_shape[0], spec.out_channels];
        out_shape.extend_from_slice(&out);
        Ok((geom, out_shape))
    }

    pub fn in_positions(&self) -> usize {
        self.in_sp.iter().product()
    }

    pub fn out_positions(&self) -> usize {
        self.out_sp.iter().product()
    }

    fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    pub fn macs(&self) -> u64 {
        (self.batch * self.out_positions() * self.kvol() * self.cin_g() * self.cout) as u64
    }

    /// Tile width (in output positions) bounding the im2col buffer.
    fn tile(&self) -> usize {
        let rows = self.cin_g() * self.kvol();
        ((1usize << 20) / rows.max(1)).max(256).min(self.out_positions().max(1))
    }

    /// For output positions `[p0, p0 + t)`, the input offset read by each
    /// kernel tap, or `usize::MAX` when the tap falls in padding.
    fn gather_index(&self, p0: usize, t: usize) -> Vec<usize> {
        let kv = self.kvol();
        let [oh_n, ow_n, od_n] = self.out_sp;
        let _ = oh_n;
        let [ih_n, iw_n, id_n] = self.in_sp;
        let mut idx = vec![usize::MAX; kv * t];
        let mut k = 0;
        for kh in 0..self.kernel[0] {
            for kw in 0..self.kernel[1] {
                for kd in 0..self.kernel[2] {
                    let row = &mut idx[k * t..(k + 1) * t];
                    for (j, slot) in row.iter_mut().enumerate() {
                        let p = p0 + j;
                        let od = p % od_n;
                        let ow = (p / od_n) % ow_n;
                        let oh = p / (od_n * ow_n);
                        let ih = (oh * self.stride[0] + kh * self.dil[0]) as isize - self.pad[0] as isize;
                        let iw = (ow * self.stride[1] + kw * self.dil[1]) as isize - self.pad[1] as isize;
                        let id = (od * self.stride[2] + kd * self.dil[2]) as isize - self.pad[2] as isize;
                        if ih >= 0
                            && iw >= 0
                            && id >= 0
                            && (ih as usize) < ih_n
                            && (iw as usize) < iw_n
                            && (id as usize) < id_n
                        {
                            *slot = (ih as usize * iw_n + iw as usize) * id_n + id as usize;
                        }
                    }
                    k += 1;
                }
            }
        }
        idx
    }
}

pub(crate) fn conv_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    spec: &ConvSpec,
    precision: Precision,
) -> Result<(Tensor, ConvGeom)> {
    let (g, out_shape) = ConvGeom::new(x.shape(), spec)?;
    if w.shape() != spec.weight_shape().as_slice() {
        return Err(shape_err!("conv weight has shape {:?}, spec needs {:?}", w.shape(), spec.weight_shape()));
    }
    if let Some(b) = b {
        if b.shape() != [spec.out_channels] {
            return Err(shape_err!("conv bias has shape {:?}, expected [{}]", b.shape(), spec.out_channels));
        }
    }
    let (pin, pout, kv) = (g.in_positions(), g.out_positions(), g.kvol());
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let rows = cin_g * kv;
    let mut out = vec![0.0; numel(&out_shape)];
    let xd = x.data();
    let wd = w.data();
    let tile = g.tile();
    let mut col = vec![0.0; rows * tile];
    let mut p0 = 0;
    while p0 < pout {
        let t = tile.min(pout - p0);
        let idx = g.gather_index(p0, t);
        for n in 0..g.batch {
            for grp in 0..g.groups {
                for ci in 0..cin_g {
                    let xc = &xd[(n * g.cin + grp * cin_g + ci) * pin..][..pin];
                    for k in 0..kv {
                        let dst = &mut col[(ci * kv + k) * t..][..t];
                        for (d, &i) in dst.iter_mut().zip(&idx[k * t..(k + 1) * t]) {
                            *d = if i == usize::MAX { 0.0 } else { xc[i] };
                        }
                    }
                }
                let c_off = (n * g.cout + grp * cout_g) * pout + p0;
                gemm(
                    precision,
                    cout_g,
                    rows,
                    t,
                    &wd[grp * cout_g * rows..],
                    (rows, 1),
                    &col,
                    (t, 1),
                    0.0,
                    &mut out[c_off..],
                    (pout, 1),
                );
            }
        }
        p0 += t;
    }
    if let Some(b) = b {
        for n in 0..g.batch {
            for (co, &bv) in b.data().iter().enumerate() {
                out[(n * g.cout + co) * pout..][..pout].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok((Tensor::from_parts(out_shape, out), g))
}

/// Gradients of a convolution with respect to input, weight and bias.
pub(crate) fn conv_backward(
    g: &ConvGeom,
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    need: (bool, bool, bool),
    precision: Precision,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (need_x, need_w, need_b) = need;
    let (pin, pout, kv) = (g.in_positions(), g.out_positions(), g.kvol());
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let rows = cin_g * kv;
    let xd = x.data();
    let wd = w.data();
    let gd = gout.data();
    let mut gx = need_x.then(|| vec![0.0; x.numel()]);
    let mut gw = need_w.then(|| vec![0.0; w.numel()]);
    let tile = g.tile();
    let mut col = vec![0.0; rows * tile];
    let mut gcol = vec![0.0; rows * tile];
    if need_x || need_w {
        let mut p0 = 0;
        while p0 < pout {
            let t = tile.min(pout - p0);
            let idx = g.gather_index(p0, t);
            for n in 0..g.batch {
                for grp in 0..g.groups {
                    let go_off = (n * g.cout + grp * cout_g) * pout + p0;
                    if let Some(gw) = gw.as_mut() {
                        for ci in 0..cin_g {
                            let xc = &xd[(n * g.cin + grp * cin_g + ci) * pin..][..pin];
                            for k in 0..kv {
                                let dst = &mut col[(ci * kv + k) * t..][..t];
                                for (d, &i) in dst.iter_mut().zip(&idx[k * t..(k + 1) * t]) {
                                    *d = if i == usize::MAX { 0.0 } else { xc[i] };
                                }
                            }
                        }
                        // gW[cout_g × rows] += gout[cout_g × t] · colᵀ
                        gemm(
                            precision,
                            cout_g,
                            t,
                            rows,
                            &gd[go_off..],
                            (pout, 1),
                            &col,
                            (1, t),
                            1.0,
                            &mut gw[grp * cout_g * rows..],
                            (rows, 1),
                        );
                    }
                    if let Some(gx) = gx.as_mut() {
                        // gcol[rows × t] = Wᵀ · gout
                        gemm(
                            precision,
                            rows,
                            cout_g,
                            t,
                            &wd[grp * cout_g * rows..],
                            (1, rows),
                            &gd[go_off..],
                            (pout, 1),
                            0.0,
                            &mut gcol,
                            (t, 1),
                        );
                        for ci in 0..cin_g {
                            let gxc = &mut gx[(n * g.cin + grp * cin_g + ci) * pin..][..pin];
                            for k in 0..kv {
                                let src = &gcol[(ci * kv + k) * t..][..t];
                                for (&s, &i) in src.iter().zip(&idx[k * t..(k + 1) * t]) {
                                    if i != usize::MAX {
                                        gxc[i] += s;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            p0 += t;
        }
    }
    let gb = need_b.then(|| {
        let mut gb = vec![0.0; g.cout];
        for n in 0..g.batch {
            for (co, acc) in gb.iter_mut().enumerate() {
                *acc += gd[(n * g.cout + co) * pout..][..pout].iter().sum::<f64>();
            }
        }
        Tensor::from_parts(vec![g.cout], gb)
    });
    (
        gx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        gw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
        gb,
    )
}

/// Non-overlapping max pooling (stride = kernel). Returns the pooled tensor
/// and, per output cell, the flat input index of its maximum.
pub(crate) fn max_pool_forward(x: &Tensor, kernel: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let r = kernel.len();
    if x.rank() != r + 2 {
        return Err(shape_err!("max pool with {r} spatial axes applied to {:?}", x.shape()));
    }
    let sp = &x.shape()[2..];
    for (a, (&n, &k)) in sp.iter().zip(kernel).enumerate() {
        if k == 0 || n % k != 0 {
            return Err(shape_err!("max pool kernel {k} does not divide extent {n} on spatial axis {a}"));
        }
    }
    let mut in3 = [1usize; 3];
    in3[..r].copy_from_slice(sp);
    let mut k3 = [1usize; 3];
    k3[..r].copy_from_slice(kernel);
    let o3 = [in3[0] / k3[0], in3[1] / k3[1], in3[2] / k3[2]];
    let (pin, pout) = (in3.iter().product::<usize>(), o3.iter().product::<usize>());
    let planes = x.shape()[0] * x.shape()[1];
    let mut out = Vec::with_capacity(planes * pout);
    let mut arg = Vec::with_capacity(planes * pout);
    let xd = x.data();
    for plane in 0..planes {
        let base = plane * pin;
        for oh in 0..o3[0] {
            for ow in 0..o3[1] {
                for od in 0..o3[2] {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = base;
                    for kh in 0..k3[0] {
                        for kw in 0..k3[1] {
                            for kd in 0..k3[2] {
                                let i = base
                                    + ((oh * k3[0] + kh) * in3[1] + ow * k3[1] + kw) * in3[2]
                                    + od * k3[2]
                                    + kd;
                                if xd[i] > best || (kh == 0 && kw == 0 && kd == 0) {
                                    best = xd[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    let mut shape = x.shape()[..2].to_vec();
    shape.extend(sp.iter().zip(kernel).map(|(n, k)| n / k));
    Ok((Tensor::from_parts(shape, out), arg))
}
