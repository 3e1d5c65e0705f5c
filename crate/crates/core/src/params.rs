//! Named parameter storage, graph binding and checkpoint files.
//!
//! A checkpoint is a plain-text manifest followed by the concatenated PMTS
//! encodings of every tensor:
//!
//! ```text
//! PMCK 1
//! <count>
//! <name> <kind> <d0>x<d1>x... <byte offset>
//! ...
//!
//! <PMTS tensors>
//! ```

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Gradients, Var};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Scale,
    Shift,
}

impl ParamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Scale => "scale",
            ParamKind::Shift => "shift",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "weight" => ParamKind::Weight,
            "bias" => ParamKind::Bias,
            "scale" => ParamKind::Scale,
            "shift" => ParamKind::Shift,
            _ => return Err(Error::Format(format!("unknown parameter kind {s:?}"))),
        })
    }
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Arc<Tensor>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        self.entries.push(Param { name: name.into(), kind, value: Arc::new(value) });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(shape_err!("parameter {} has shape {:?}, got {:?}", e.name, e.value.shape(), value.shape()));
        }
        e.value = Arc::new(value);
        Ok(())
    }

    /// Mutable access; copies the tensor if a graph still shares it.
    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> u64 {
        self.entries.iter().map(|e| e.value.numel() as u64).sum()
    }

    /// Binds every parameter into `g`: as leaves on a recording graph,
    /// as constants otherwise.
    pub fn bind(&self, g: &Graph) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| if g.is_recording() { g.leaf_shared(Arc::clone(&e.value)) } else { Var::constant(Arc::clone(&e.value)) })
            .collect();
        Bound { vars }
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut blob = Vec::new();
        let mut manifest = format!("PMCK 1\n{}\n", self.entries.len());
        for e in &self.entries {
            let shape: Vec<String> = e.value.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("{} {} {} {}\n", e.name, e.kind.as_str(), shape.join("x"), blob.len()));
            e.value.write_pmts(&mut blob, DType::F64)?;
        }
        manifest.push('\n');
        w.write_all(manifest.as_bytes())?;
        w.write_all(&blob)?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut f)?;
        f.flush()?;
        Ok(())
    }

    /// Replaces every parameter from a checkpoint. Names, kinds and shapes
    /// must match this store exactly.
    pub fn read_checkpoint<R: Read>(&mut self, r: &mut R) -> Result<()> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let split = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| Error::Format("checkpoint manifest is not terminated".into()))?;
        let manifest = std::str::from_utf8(&bytes[..split])
            .map_err(|_| Error::Format("checkpoint manifest is not UTF-8".into()))?;
        let blob = &bytes[split + 2..];
        let mut lines = manifest.lines();
        if lines.next() != Some("PMCK 1") {
            return Err(Error::Format("not a checkpoint (missing PMCK header)".into()));
        }
        let count: usize = lines
            .next()
            .and_then(|l| l.trim().parse().ok())
            .ok_or_else(|| Error::Format("checkpoint entry count missing".into()))?;
        if count != self.entries.len() {
            return Err(Error::Format(format!("checkpoint has {count} tensors, model has {}", self.entries.len())));
        }
        let mut fresh = Vec::with_capacity(count);
        for (e, line) in self.entries.iter().zip(lines.by_ref()) {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(Error::Format(format!("bad manifest line {line:?}")));
            }
            if f[0] != e.name || ParamKind::parse(f[1])? != e.kind {
                return Err(Error::Format(format!("checkpoint entry {} {} does not match {}", f[0], f[1], e.name)));
            }
            let offset: usize = f[3].parse().map_err(|_| Error::Format(format!("bad offset in {line:?}")))?;
            let t = Tensor::read_pmts(&mut blob.get(offset..).unwrap_or_default())?;
            if t.shape() != e.value.shape() {
                return Err(shape_err!("checkpoint tensor {} has shape {:?}, expected {:?}", e.name, t.shape(), e.value.shape()));
            }
            fresh.push(t);
        }
        if fresh.len() != count {
            return Err(Error::Format("checkpoint manifest is truncated".into()));
        }
        for (e, t) in self.entries.iter_mut().zip(fresh) {
            e.value = Arc::new(t);
        }
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        self.read_checkpoint(&mut f)
    }
}

/// Parameters bound into one graph.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }

    /// Gradient for every parameter, in store order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.wrt(v)).collect()
    }
}
