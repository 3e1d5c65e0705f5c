//! Dense row-major tensors and the `PMTS` binary container.
//!
//! Feature maps are channels-first. A 2D map is `C×H×W`, a 3D map is
//! `C×H×W×D` with depth as the trailing spatial axis; graph operations
//! additionally carry a leading batch axis.

use std::fmt;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};

pub const PMTS_MAGIC: &[u8; 4] = b"PMTS";

/// Element type tag of serialized tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64 = 0,
    F32 = 1,
}

impl DType {
    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F64),
            1 => Ok(DType::F32),
            t => Err(Error::Format(format!("unknown tensor dtype tag {t}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(shape_err!("zero extent in shape {shape:?}"));
        }
        if numel(&shape) != data.len() {
            return Err(shape_err!(
                "shape {shape:?} holds {} values, buffer has {}",
                numel(&shape),
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor without validation; callers guarantee consistency.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; numel(shape)] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    pub fn normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        Self::from_fn(shape, |_| StandardNormal.sample(rng))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(shape_err!("expected a scalar, found shape {:?}", self.shape))
        }
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        let st = strides(&self.shape);
        let off: usize = index.iter().zip(&st).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.iter().any(|&e| e == 0) {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// Adds a leading axis of extent 1.
    pub fn unsqueeze0(&self) -> Tensor {
        let mut shape = vec![1];
        shape.extend_from_slice(&self.shape);
        Tensor { shape, data: self.data.clone() }
    }

    /// Drops a leading axis of extent 1.
    pub fn squeeze0(&self) -> Result<Tensor> {
        if self.shape.len() < 2 || self.shape[0] != 1 {
            return Err(shape_err!("cannot squeeze leading axis of {:?}", self.shape));
        }
        Ok(Tensor { shape: self.shape[1..].to_vec(), data: self.data.clone() })
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err!("{perm:?} is not a permutation of rank {rank}"));
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = Vec::with_capacity(self.numel());
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..self.numel() {
            data.push(self.data[off]);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                off += src_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                off -= src_strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(Tensor { shape: out_shape, data })
    }

    /// Writes the tensor as a `PMTS` record: magic, u32 rank, u32 extents,
    /// u8 dtype tag, little-endian row-major values.
    pub fn write_pmts<W: Write>(&self, w: &mut W, dtype: DType) -> Result<()> {
        w.write_all(PMTS_MAGIC)?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &e in &self.shape {
            let e = u32::try_from(e).map_err(|_| Error::Format(format!("extent {e} exceeds u32")))?;
            w.write_all(&e.to_le_bytes())?;
        }
        w.write_all(&[dtype as u8])?;
        let mut buf = Vec::with_capacity(self.numel() * dtype.size());
        match dtype {
            DType::F64 => self.data.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
            DType::F32 => self.data.iter().for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_pmts<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != PMTS_MAGIC {
            return Err(Error::Format(format!("bad tensor magic {magic:?}")));
        }
        let rank = read_u32(r)? as usize;
        let shape = (0..rank).map(|_| read_u32(r).map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let dtype = DType::from_tag(tag[0])?;
        let n = numel(&shape);
        let mut raw = vec![0u8; n * dtype.size()];
        r.read_exact(&mut raw)?;
        let data = match dtype {
            DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            DType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        };
        Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
