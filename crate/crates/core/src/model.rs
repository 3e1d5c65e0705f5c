//! The full segmentation network: a three-stage dense encoder, skip
//! projections, the attention bottleneck, a decoder and a class head.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{ConvSpec, Precision};
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Interp, Var};
use crate::layers::{ConvBlock, ConvLayer, Ctx};
use crate::params::ParamStore;
use crate::pmfs::{BranchSet, PmfsBlock, PmfsConfig, PmfsOutput};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderMode {
    /// Every scale is brought to half input resolution, fused by one block,
    /// classified, then upsampled.
    DirectFusion,
    /// Stage-by-stage upsample, concatenate and convolve.
    Progressive,
    /// Classify the bottleneck and upsample.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Pmfs,
    /// The bottleneck is the last encoder stage, unchanged.
    Identity,
}

/// Named scaling version.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    Basic,
    Small,
    Tiny,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Tiny, Preset::Small, Preset::Basic];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Basic => "basic",
            Preset::Small => "small",
            Preset::Tiny => "tiny",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "basic" => Some(Preset::Basic),
            "small" => Some(Preset::Small),
            "tiny" => Some(Preset::Tiny),
            _ => None,
        }
    }
}

/// Complete hyperparameter record of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingConfig {
    pub name: String,
    pub dims: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_channels: [usize; 3],
    pub dense_units: [usize; 3],
    pub growth: [usize; 3],
    pub skip_channels: [usize; 3],
    pub pmfs_channel: usize,
    pub decoder: DecoderMode,
    pub attention: AttentionMode,
    pub input_shape: Vec<usize>,
}

impl ScalingConfig {
    pub fn preset(p: Preset, dims: usize) -> Result<Self> {
        let text = match (p, dims) {
            (Preset::Basic, 2) => include_str!("../presets/basic-2d.toml"),
            (Preset::Basic, 3) => include_str!("../presets/basic-3d.toml"),
            (Preset::Small, 2) => include_str!("../presets/small-2d.toml"),
            (Preset::Small, 3) => include_str!("../presets/small-3d.toml"),
            (Preset::Tiny, 2) => include_str!("../presets/tiny-2d.toml"),
            (Preset::Tiny, 3) => include_str!("../presets/tiny-3d.toml"),
            _ => return Err(Error::Config(format!("dims must be 2 or 3, got {dims}"))),
        };
        Self::from_toml(text)
    }

    /// Resolves `tiny-3d`-style preset names, falling back to a file path.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if let Some((p, d)) = name_or_path.rsplit_once('-') {
            if let (Some(p), Some(d)) = (Preset::parse(p), d.strip_suffix('d').and_then(|d| d.parse().ok())) {
                return Self::preset(p, d);
            }
        }
        let path = Path::new(name_or_path);
        if !path.exists() {
            return Err(Error::Config(format!(
                "unknown preset or missing file {name_or_path:?} (presets: tiny|small|basic + -2d|-3d)"
            )));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ScalingConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The scaling version, when the name is one of the presets.
    pub fn preset_kind(&self) -> Option<Preset> {
        Preset::parse(&self.name)
    }

    /// `b_l + u_l·g_l` per stage.
    pub fn stage_channels(&self) -> [usize; 3] {
        std::array::from_fn(|l| self.base_channels[l] + self.dense_units[l] * self.growth[l])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims != 2 && self.dims != 3 {
            return Err(Error::Config(format!("dims must be 2 or 3, got {}", self.dims)));
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.pmfs_channel == 0 {
            return Err(Error::Config("channel and class counts must be positive".into()));
        }
        if self.base_channels.contains(&0) || self.skip_channels.contains(&0) {
            return Err(Error::Config("base and skip channels must be positive".into()));
        }
        if self.dense_units.iter().zip(&self.growth).any(|(&u, &g)| u > 0 && g == 0) {
            return Err(Error::Config("growth must be positive for stages with dense units".into()));
        }
        self.check_input(&self.input_shape)
    }

    /// Spatial extents must match `dims` and be divisible by 8.
    pub fn check_input(&self, spatial: &[usize]) -> Result<()> {
        if spatial.len() != self.dims {
            return Err(shape_err!("{}D network given spatial shape {spatial:?}", self.dims));
        }
        const NAMES: [&str; 3] = ["H", "W", "D"];
        for (a, &e) in spatial.iter().enumerate() {
            if e == 0 || e % 8 != 0 {
                return Err(shape_err!("input axis {} has extent {e}, which is not a positive multiple of 8", NAMES[a]));
            }
        }
        Ok(())
    }
}

/// One encoder stage: strided entry block, then densely connected units.
#[derive(Debug, Clone)]
pub struct Stage {
    pub entry: ConvBlock,
    pub units: Vec<ConvBlock>,
}

impl Stage {
    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let mut feats = vec![self.entry.forward(ctx, x)?];
        for unit in &self.units {
            let input = if feats.len() == 1 { feats[0].clone() } else { ctx.g.concat(&feats.iter().collect::<Vec<_>>(), 1)? };
            feats.push(unit.forward(ctx, &input)?);
        }
        if feats.len() == 1 {
            return Ok(feats.pop().expect("entry output"));
        }
        ctx.g.concat(&feats.iter().collect::<Vec<_>>(), 1)
    }

    pub fn out_channels(&self) -> usize {
        self.entry.spec().out_channels + self.units.iter().map(|u| u.spec().out_channels).sum::<usize>()
    }
}

#[derive(Debug, Clone)]
pub enum Decoder {
    DirectFusion { fuse: ConvBlock },
    Progressive { up3: ConvBlock, up2: ConvBlock, up1: ConvBlock, refine: ConvBlock },
    None,
}

/// Everything a forward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Class probabilities, `N×classes×spatial`.
    pub probs: Var,
    pub logits: Var,
    pub branches: BranchSet,
    pub skips: [Var; 3],
    pub bottleneck: Var,
    pub attention: Option<PmfsOutput>,
}

#[derive(Debug, Clone)]
pub struct PmfsNet {
    pub cfg: ScalingConfig,
    pub params: ParamStore,
    pub stages: [Stage; 3],
    pub skips: [ConvBlock; 3],
    pub block: Option<PmfsBlock>,
    pub decoder: Decoder,
    pub head: ConvLayer,
}

impl PmfsNet {
    /// Builds the network with weights drawn from a generator seeded by `seed`.
    pub fn build(cfg: &ScalingConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dims;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = &mut store;
        let mut stages = Vec::with_capacity(3);
        let mut cin = cfg.in_channels;
        for l in 0..3 {
            let b = cfg.base_channels[l];
            let entry = ConvBlock::new(s, &format!("enc{}.entry", l + 1), ConvSpec::same(cin, b, 3, d).with_stride(2), &mut rng)?;
            let mut units = Vec::with_capacity(cfg.dense_units[l]);
            for u in 0..cfg.dense_units[l] {
                let unit_in = b + u * cfg.growth[l];
                let name = format!("enc{}.unit{}", l + 1, u + 1);
                units.push(ConvBlock::new(s, &name, ConvSpec::same(unit_in, cfg.growth[l], 3, d), &mut rng)?);
            }
            let stage = Stage { entry, units };
            cin = stage.out_channels();
            stages.push(stage);
        }
        let stage_ch = cfg.stage_channels();
        let mut skips = Vec::with_capacity(3);
        for l in 0..3 {
            let spec = ConvSpec::same(stage_ch[l], cfg.skip_channels[l], 1, d);
            skips.push(ConvBlock::new(s, &format!("skip{}", l + 1), spec, &mut rng)?);
        }
        let block = match cfg.attention {
            AttentionMode::Pmfs => {
                let pcfg = PmfsConfig::new(cfg.pmfs_channel, stage_ch[2], stage_ch, d)?;
                Some(PmfsBlock::new(s, "pmfs", pcfg, &mut rng)?)
            }
            AttentionMode::Identity => None,
        };
        let [s1, s2, s3] = cfg.skip_channels;
        let bott = stage_ch[2];
        let pw = |cin, cout| ConvSpec::same(cin, cout, 1, d);
        let (decoder, head_in) = match cfg.decoder {
            DecoderMode::DirectFusion => {
                let fuse = ConvBlock::new(s, "dec.fuse", pw(s1 + s2 + s3 + bott, s1), &mut rng)?;
                (Decoder::DirectFusion { fuse }, s1)
            }
            DecoderMode::Progressive => {
                let up3 = ConvBlock::new(s, "dec.up3", pw(bott + s3, s3), &mut rng)?;
                let up2 = ConvBlock::new(s, "dec.up2", pw(s3 + s2, s2), &mut rng)?;
                let up1 = ConvBlock::new(s, "dec.up1", pw(s2 + s1, s1), &mut rng)?;
                let refine = ConvBlock::new(s, "dec.refine", pw(s1, s1), &mut rng)?;
                (Decoder::Progressive { up3, up2, up1, refine }, s1)
            }
            DecoderMode::None => (Decoder::None, bott),
        };
        let head = ConvLayer::new(s, "head", pw(head_in, cfg.num_classes), &mut rng)?;
        Ok(PmfsNet {
            cfg: cfg.clone(),
            params: store,
            stages: stages.try_into().expect("three stages"),
            skips: skips.try_into().expect("three skips"),
            block,
            decoder,
            head,
        })
    }

    pub fn dims(&self) -> usize {
        self.cfg.dims
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<ForwardOutput> {
        let s = x.shape();
        if s.len() != self.dims() + 2 || s[1] != self.cfg.in_channels {
            return Err(shape_err!(
                "network expects N×{}×spatial({}D) input, got {s:?}",
                self.cfg.in_channels,
                self.dims()
            ));
        }
        self.cfg.check_input(&s[2..])?;
        let g = ctx.g;
        let x1 = self.stages[0].forward(ctx, x)?;
        let x2 = self.stages[1].forward(ctx, &x1)?;
        let x3 = self.stages[2].forward(ctx, &x2)?;
        let branches = BranchSet::new(x1, x2, x3)?;
        let skips = [
            self.skips[0].forward(ctx, &branches.x1)?,
            self.skips[1].forward(ctx, &branches.x2)?,
            self.skips[2].forward(ctx, &branches.x3)?,
        ];
        let (bottleneck, attention) = match &self.block {
            Some(block) => {
                let out = block.forward(ctx, &branches)?;
                (out.a_sp.clone(), Some(out))
            }
            None => (branches.x3.clone(), None),
        };
        let d = self.dims();
        let up = |v: &Var, f: usize| g.upsample(v, &vec![f; d], Interp::Linear);
        let logits = match &self.decoder {
            Decoder::DirectFusion { fuse } => {
                let cat = g.concat(&[&skips[0], &up(&skips[1], 2)?, &up(&skips[2], 4)?, &up(&bottleneck, 4)?], 1)?;
                let fused = fuse.forward(ctx, &cat)?;
                up(&self.head.forward(ctx, &fused)?, 2)?
            }
            Decoder::Progressive { up3, up2, up1, refine } => {
                let y = up3.forward(ctx, &g.concat(&[&bottleneck, &skips[2]], 1)?)?;
                let y = up2.forward(ctx, &g.concat(&[&up(&y, 2)?, &skips[1]], 1)?)?;
                let y = up1.forward(ctx, &g.concat(&[&up(&y, 2)?, &skips[0]], 1)?)?;
                let y = refine.forward(ctx, &up(&y, 2)?)?;
                self.head.forward(ctx, &y)?
            }
            Decoder::None => up(&self.head.forward(ctx, &bottleneck)?, 8)?,
        };
        let probs = if self.cfg.num_classes == 1 { g.sigmoid(&logits) } else { g.softmax(&logits, 1)? };
        Ok(ForwardOutput { probs, logits, branches, skips, bottleneck, attention })
    }

    /// Inference on a batched input without recording a graph.
    pub fn predict(&self, x: &Tensor, precision: Precision) -> Result<Tensor> {
        let g = Graph::no_grad().with_precision(precision);
        let bound = self.params.bind(&g);
        let ctx = Ctx::new(&g, &bound);
        let out = self.forward(&ctx, &g.constant(x.clone()))?;
        Ok(out.probs.value().clone())
    }
}
