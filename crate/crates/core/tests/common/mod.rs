//! Independent scalar-loop reference implementations shared by the
//! integration tests.
#![allow(dead_code)]

use pmfs_core::layers::ConvLayer;
use pmfs_core::params::{ParamId, ParamStore};
use pmfs_core::pmfs::{PmfsBlock, PmfsConfig, Pmcs, Pmss};
use pmfs_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

/// Direct 2D convolution of one image `C×H×W`, weight `[O, C/groups, kh, kw]`.
pub fn conv2d_loops(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, cg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let og = o / groups;
    assert_eq!(cg * groups, c);
    let mut out = vec![0.0; o * oh * ow];
    for co in 0..o {
        let grp = co / og;
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = b.map_or(0.0, |b| b.data()[co]);
                for ci in 0..cg {
                    for i in 0..kh {
                        for j in 0..kw {
                            let iy = (y * stride + i) as isize - pad as isize;
                            let ix = (xx * stride + j) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += w.get(&[co, ci, i, j]) * x.get(&[grp * cg + ci, iy as usize, ix as usize]);
                        }
                    }
                }
                out[(co * oh + y) * ow + xx] = acc;
            }
        }
    }
    Tensor::new(vec![o, oh, ow], out).unwrap()
}

/// Direct 3D convolution of one volume `C×H×W×D`, stride 1, symmetric padding.
pub fn conv3d_loops(x: &Tensor, w: &Tensor, pad: usize) -> Tensor {
    let s = x.shape();
    let (c, h, wd, d) = (s[0], s[1], s[2], s[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let (oh, ow, od) = (h + 2 * pad + 1 - k, wd + 2 * pad + 1 - k, d + 2 * pad + 1 - k);
    let mut out = Tensor::zeros(&[o, oh, ow, od]);
    for co in 0..o {
        for y in 0..oh {
            for xx in 0..ow {
                for z in 0..od {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for i in 0..k {
                            for j in 0..k {
                                for l in 0..k {
                                    let (iy, ix, iz) = (y + i, xx + j, z + l);
                                    if iy < pad || ix < pad || iz < pad {
                                        continue;
                                    }
                                    let (iy, ix, iz) = (iy - pad, ix - pad, iz - pad);
                                    if iy >= h || ix >= wd || iz >= d {
                                        continue;
                                    }
                                    acc += w.get(&[co, ci, i, j, l]) * x.get(&[ci, iy, ix, iz]);
                                }
                            }
                        }
                    }
                    out.data_mut()[((co * oh + y) * ow + xx) * od + z] = acc;
                }
            }
        }
    }
    out
}

/// Window-scan max pooling of `C×spatial` (2D or 3D) with stride = kernel.
pub fn max_pool_loops(x: &Tensor, k: usize) -> Tensor {
    let s = x.shape();
    let three = s.len() == 4;
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = if three { s[3] } else { 1 };
    let kd = if three { k } else { 1 };
    let (oh, ow, od) = (h / k, w / k, d / kd);
    let mut out = Vec::new();
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                for z in 0..od {
                    let mut m = f64::NEG_INFINITY;
                    for i in 0..k {
                        for j in 0..k {
                            for l in 0..kd {
                                let idx = ((ch * h + y * k + i) * w + xx * k + j) * d + z * kd + l;
                                m = m.max(x.data()[idx]);
                            }
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    let mut shape = vec![c, oh, ow];
    if three {
        shape.push(od);
    }
    Tensor::new(shape, out).unwrap()
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// `out[o][n] = b[o] + Σ_i w[o][i]·x[i][n]` for a pointwise convolution
/// given as a flat `[O, I]` weight.
pub fn pointwise_loops(x: &[Vec<f64>], w: &Tensor, b: Option<&Tensor>) -> Vec<Vec<f64>> {
    let o = w.shape()[0];
    let i_n = w.shape()[1];
    let np = x[0].len();
    (0..o)
        .map(|co| {
            (0..np)
                .map(|n| b.map_or(0.0, |b| b.data()[co]) + (0..i_n).map(|ci| w.data()[co * i_n + ci] * x[ci][n]).sum::<f64>())
                .collect()
        })
        .collect()
}

/// Per-channel `1×1` depthwise scaling.
pub fn depthwise_loops(x: &[Vec<f64>], w: &Tensor) -> Vec<Vec<f64>> {
    x.iter().enumerate().map(|(c, row)| row.iter().map(|v| v * w.data()[c]).collect()).collect()
}

/// Rows of a `C×N` map from an unbatched `C×spatial` tensor.
pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let c = t.shape()[0];
    let n = t.numel() / c;
    (0..c).map(|i| t.data()[i * n..(i + 1) * n].to_vec()).collect()
}

/// Plain double-loop weighted extended dice loss of `classes × voxels`.
pub fn wedl_loops(p: &Tensor, g: &Tensor, w: &[f64], eps: f64) -> f64 {
    let nc = p.shape()[0];
    let nv = p.numel() / nc;
    let mut total = 0.0;
    for i in 0..nc {
        let (mut inter, mut pp, mut gg) = (0.0, 0.0, 0.0);
        for j in 0..nv {
            let (a, b) = (p.data()[i * nv + j], g.data()[i * nv + j]);
            inter += a * b;
            pp += a * a;
            gg += b * b;
        }
        total += w[i] * 2.0 * inter / (pp + gg + eps);
    }
    1.0 - total
}

pub fn dice_loops(p: &Tensor, g: &Tensor, eps: f64) -> f64 {
    let nc = p.shape()[0];
    let nv = p.numel() / nc;
    let mut total = 0.0;
    for i in 0..nc {
        let (mut inter, mut ps, mut gs) = (0.0, 0.0, 0.0);
        for j in 0..nv {
            let (a, b) = (p.data()[i * nv + j], g.data()[i * nv + j]);
            inter += a * b;
            ps += a;
            gs += b;
        }
        total += 1.0 - (2.0 * inter + eps) / (ps + gs + eps);
    }
    total / nc as f64
}

/// Squared distances `min over b` for each `a`, brute force, in physical units.
pub fn directed_min_dists(a: &[Vec<usize>], b: &[Vec<usize>], spacing: &[f64]) -> Vec<f64> {
    a.iter()
        .map(|p| {
            b.iter()
                .map(|q| {
                    p.iter()
                        .zip(q)
                        .zip(spacing)
                        .map(|((&x, &y), s)| ((x as f64 - y as f64) * s).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

// ------------------------------------------------------------- attention

pub fn block(c: usize, out: usize, ins: [usize; 3], dims: usize, seed: u64) -> (PmfsBlock, ParamStore) {
    let mut store = ParamStore::new();
    let cfg = PmfsConfig::new(c, out, ins, dims).unwrap();
    let b = PmfsBlock::new(&mut store, "pmfs", cfg, &mut rng(seed)).unwrap();
    (b, store)
}

/// Replaces every parameter by a random value so that affine identities
/// and zero biases do not hide mistakes.
pub fn randomize(store: &mut ParamStore, seed: u64) {
    let ids: Vec<(ParamId, Vec<usize>)> = store.iter().map(|(id, p)| (id, p.value.shape().to_vec())).collect();
    for (i, (id, shape)) in ids.into_iter().enumerate() {
        let t = Tensor::uniform(&shape, -0.8, 0.8, &mut rng(seed + i as u64));
        store.set(id, t).unwrap();
    }
}

pub fn weights(store: &ParamStore, l: &ConvLayer) -> Vec<(Tensor, Option<Tensor>)> {
    l.param_ids().into_iter().map(|(w, b)| (store.get(w).clone(), b.map(|b| store.get(b).clone()))).collect()
}

/// Applies a pointwise layer (plain or depthwise-separable) by loops.
pub fn apply_pointwise(store: &ParamStore, l: &ConvLayer, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let parts = weights(store, l);
    let mut cur = x.to_vec();
    for (w, b) in &parts {
        if l.spec.depthwise_separable && w.shape()[1] == 1 && w.shape()[0] == cur.len() && parts.len() == 2 && b.is_none() {
            cur = depthwise_loops(&cur, w);
        } else {
            let flat = w.reshape(&[w.shape()[0], w.shape()[1]]).unwrap();
            cur = pointwise_loops(&cur, &flat, b.as_ref());
        }
    }
    cur
}

/// Channel branch by loops on `C × positions` input: returns the value
/// rows and the per-channel gate.
pub fn pmcs_oracle(store: &ParamStore, m: &Pmcs, a: &Tensor) -> (Vec<Vec<f64>>, Vec<f64>) {
    let x = rows(a);
    let c = x.len();
    let q = apply_pointwise(store, &m.wq, &x);
    let k = apply_pointwise(store, &m.wk, &x);
    let v = apply_pointwise(store, &m.wv, &x);
    let key = softmax(&k[0]);
    let prod: Vec<Vec<f64>> = q.iter().map(|row| vec![row.iter().zip(&key).map(|(a, b)| a * b).sum()]).collect();
    let z = apply_pointwise(store, &m.wz, &prod);
    let zc: Vec<f64> = z.iter().map(|r| r[0]).collect();
    let mean = zc.iter().sum::<f64>() / c as f64;
    let var = zc.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
    let (gam, bet) = (store.get(m.ln_scale), store.get(m.ln_shift));
    let gate = (0..c).map(|i| sigmoid((zc[i] - mean) / (var + 1e-6).sqrt() * gam.data()[i] + bet.data()[i])).collect();
    (v, gate)
}

/// Spatial branch by loops up to the output projection: returns the gated
/// values (`C × spatial`) and the gate per branch and position.
pub fn pmss_oracle(store: &ParamStore, m: &Pmss, a: &Tensor) -> (Tensor, Vec<Vec<f64>>) {
    let x = rows(a);
    let cb = m.branch_channel;
    let np = x[0].len();
    let q = apply_pointwise(store, &m.wq, &x);
    let k = apply_pointwise(store, &m.wk, &x);
    let v = apply_pointwise(store, &m.wv, &x);
    let mut gated = vec![0.0; 3 * cb * np];
    let mut gates = vec![vec![0.0; np]; 3];
    for br in 0..3 {
        let means: Vec<f64> = (0..cb).map(|j| k[br * cb + j].iter().sum::<f64>() / np as f64).collect();
        let key = softmax(&means);
        for n in 0..np {
            let s = sigmoid((0..cb).map(|j| key[j] * q[br * cb + j][n]).sum());
            gates[br][n] = s;
            for j in 0..cb {
                gated[(br * cb + j) * np + n] = v[br * cb + j][n] * s;
            }
        }
    }
    (Tensor::new(a.shape().to_vec(), gated).unwrap(), gates)
}
