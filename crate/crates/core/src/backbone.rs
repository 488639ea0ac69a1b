//! Retentive backbone: convolutional stem, four stages of attention blocks, stride-2 merges.
//!
//! The input is the cube laid out as `[D, R, A]`, Doppler bins acting as
//! channels over the range-azimuth plane.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::masa::{masa_out, MasaConfig, MasaWeights};
use crate::nn::{Conv2d, ConvNormAct, Ctx, LayerNorm2d, Linear, ParamBuilder};
use crate::scalar::Scalar;
use crate::tensor::PadMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub stage_dims: Vec<usize>,
    pub stage_blocks: Vec<usize>,
    pub stage_heads: Vec<usize>,
    /// Stages that use axis-decomposed attention.
    pub decomposed_stages: Vec<usize>,
    pub ffn_expansion: f64,
    pub lce_kernel: usize,
    /// Optional per-stage override of the per-head decay rates.
    #[serde(default)]
    pub stage_gammas: Option<Vec<Vec<f64>>>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_channels: 64,
            stage_dims: vec![32, 64, 128, 256],
            stage_blocks: vec![2, 2, 8, 2],
            stage_heads: vec![1, 2, 4, 8],
            decomposed_stages: vec![0, 1, 2],
            ffn_expansion: 4.0,
            lce_kernel: 5,
            stage_gammas: None,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.stage_dims.len();
        if n != 4 || self.stage_blocks.len() != 4 || self.stage_heads.len() != 4 {
            return Err(Error::Config("backbone needs exactly four stages of dims, blocks and heads".into()));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("backbone input needs at least one channel".into()));
        }
        if self.decomposed_stages.iter().any(|&s| s >= 3) {
            return Err(Error::Config("the last stage must use full attention".into()));
        }
        for i in 0..4 {
            let (d, h) = (self.stage_dims[i], self.stage_heads[i]);
            if d == 0 || h == 0 || d % h != 0 {
                return Err(Error::Config(format!("stage {i}: {d} channels not divisible into {h} heads")));
            }
        }
        if self.stage_dims[0] % 2 != 0 {
            return Err(Error::Config("first stage width must be even".into()));
        }
        if !(self.ffn_expansion > 0.0) || self.hidden_dim(0) == 0 {
            return Err(Error::Config(format!("invalid FFN expansion {}", self.ffn_expansion)));
        }
        if self.lce_kernel % 2 == 0 {
            return Err(Error::Config(format!("LCE kernel size {} must be odd", self.lce_kernel)));
        }
        if let Some(g) = &self.stage_gammas {
            if g.len() != 4 {
                return Err(Error::Config("stage_gammas needs one list per stage".into()));
            }
        }
        for i in 0..4 {
            self.masa_config(i).validate()?;
        }
        Ok(())
    }

    pub fn hidden_dim(&self, stage: usize) -> usize {
        (self.stage_dims[stage] as f64 * self.ffn_expansion).round() as usize
    }

    pub fn masa_config(&self, stage: usize) -> MasaConfig {
        let heads = self.stage_heads[stage];
        let gammas = match &self.stage_gammas {
            Some(g) => g[stage].clone(),
            None => MasaConfig::default_gammas(heads),
        };
        MasaConfig {
            num_heads: heads,
            gamma_per_head: gammas,
            head_dim: self.stage_dims[stage] / heads,
            decomposed: self.decomposed_stages.contains(&stage),
        }
    }

    /// Spatial size multiple every input must respect.
    pub const SIZE_MULTIPLE: usize = 32;
}

/// Outputs of the last three stages at strides 8, 16 and 32.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<'t, T: Scalar> {
    pub maps: Vec<Var<'t, T>>,
    pub strides: Vec<usize>,
}

impl<T: Scalar> FeaturePyramid<'_, T> {
    /// `[C, H, W]` of every level.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.maps.iter().map(|m| m.shape()).collect()
    }
}

/// Four 3x3 convolutions, the first and third with stride 2.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub convs: Vec<ConvNormAct>,
}

impl PatchEmbed {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, in_ch: usize, out_ch: usize) -> Self {
        let half = out_ch / 2;
        let plan = [(in_ch, half, 2), (half, half, 1), (half, out_ch, 2), (out_ch, out_ch, 1)];
        let convs = plan
            .iter()
            .enumerate()
            .map(|(i, &(a, b, s))| ConvNormAct::new(pb, &format!("stem.{i}"), a, b, 3, s))
            .collect();
        Self { convs }
    }

    pub fn forward<'t, T: Scalar>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        if s.len() != 3 || s[1] % 4 != 0 || s[2] % 4 != 0 || s[1] == 0 || s[2] == 0 {
            return Err(Error::Config(format!("stem input {s:?} must be [C, H, W] with H, W multiples of 4")));
        }
        if s[0] != self.convs[0].conv.in_ch {
            return Err(Error::Config(format!("stem expects {} input channels, got {}", self.convs[0].conv.in_ch, s[0])));
        }
        Ok(self.convs.iter().fold(x, |h, c| c.forward(cx, h)))
    }
}

/// Attention sublayer weights of one block.
#[derive(Clone, Debug)]
pub struct MasaLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub lce: Conv2d,
    pub config: MasaConfig,
}

impl MasaLayer {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, config: MasaConfig, lce_kernel: usize) -> Self {
        let c = config.channels();
        Self {
            q: Linear::new(pb, &format!("{name}.q"), c, c, false),
            k: Linear::new(pb, &format!("{name}.k"), c, c, false),
            v: Linear::new(pb, &format!("{name}.v"), c, c, false),
            proj: Linear::new(pb, &format!("{name}.proj"), c, c, true),
            lce: Conv2d::new(pb, &format!("{name}.lce"), c, c, lce_kernel, 1, c, true).with_pad_mode(PadMode::Replicate),
            config,
        }
    }

    pub fn weights<'t, T: Scalar>(&self, cx: Ctx<'t, T>) -> MasaWeights<'t, T> {
        MasaWeights {
            w_q: cx.p(self.q.weight),
            w_k: cx.p(self.k.weight),
            w_v: cx.p(self.v.weight),
            w_o: cx.p(self.proj.weight),
            b_o: cx.p(self.proj.bias.expect("projection bias")),
            lce_w: cx.p(self.lce.weight),
            lce_b: cx.p(self.lce.bias.expect("lce bias")),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        masa_out(x, &self.config, &self.weights(cx))
    }
}

/// CPE, attention and FFN, each added residually.
#[derive(Clone, Debug)]
pub struct RmtBlock {
    pub cpe: Conv2d,
    pub norm1: LayerNorm2d,
    pub attn: MasaLayer,
    pub norm2: LayerNorm2d,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl RmtBlock {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, config: MasaConfig, hidden: usize, lce_kernel: usize) -> Self {
        let c = config.channels();
        Self {
            cpe: Conv2d::new(pb, &format!("{name}.cpe"), c, c, 3, 1, c, true),
            norm1: LayerNorm2d::new(pb, &format!("{name}.norm1"), c),
            attn: MasaLayer::new(pb, &format!("{name}.attn"), config, lce_kernel),
            norm2: LayerNorm2d::new(pb, &format!("{name}.norm2"), c),
            fc1: Linear::new(pb, &format!("{name}.ffn.fc1"), c, hidden, true),
            fc2: Linear::new(pb, &format!("{name}.ffn.fc2"), hidden, c, true),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        let x = x.add(self.cpe.forward(cx, x));
        let x = x.add(self.attn.forward(cx, self.norm1.forward(cx, x))?);
        let tokens = self.norm2.forward(cx, x).reshape(&[s[0], s[1] * s[2]]);
        let ffn = self.fc2.forward(cx, self.fc1.forward(cx, tokens).gelu());
        Ok(x.add(ffn.reshape(&s)))
    }
}

/// Stride-2 3x3 convolution followed by channel normalization.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub conv: Conv2d,
    pub norm: LayerNorm2d,
}

impl PatchMerge {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, in_ch: usize, out_ch: usize) -> Self {
        Self {
            conv: Conv2d::new(pb, &format!("{name}.conv"), in_ch, out_ch, 3, 2, 1, false),
            norm: LayerNorm2d::new(pb, &format!("{name}.norm"), out_ch),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::Config(format!("patch merge needs even spatial dims, got {s:?}")));
        }
        Ok(self.norm.forward(cx, self.conv.forward(cx, x)))
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub merge: Option<PatchMerge>,
    pub blocks: Vec<RmtBlock>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stem: PatchEmbed,
    pub stages: Vec<Stage>,
}

impl Backbone {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let stem = PatchEmbed::new(pb, config.input_channels, config.stage_dims[0]);
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let merge = (i > 0).then(|| PatchMerge::new(pb, &format!("stage{i}.merge"), config.stage_dims[i - 1], config.stage_dims[i]));
            let blocks = (0..config.stage_blocks[i])
                .map(|j| RmtBlock::new(pb, &format!("stage{i}.block{j}"), config.masa_config(i), config.hidden_dim(i), config.lce_kernel))
                .collect();
            stages.push(Stage { merge, blocks });
        }
        Ok(Self { config: config.clone(), stem, stages })
    }

    /// Runs the stem and all stages; returns the last three stage outputs.
    pub fn forward<'t, T: Scalar>(&self, cx: Ctx<'t, T>, input: Var<'t, T>) -> Result<FeaturePyramid<'t, T>> {
        let s = input.shape();
        let m = BackboneConfig::SIZE_MULTIPLE;
        if s.len() != 3 || s[1] == 0 || s[2] == 0 || s[1] % m != 0 || s[2] % m != 0 {
            return Err(Error::Config(format!("backbone input {s:?} must be [C, H, W] with H, W multiples of {m}")));
        }
        let mut x = self.stem.forward(cx, input)?;
        let mut maps = Vec::with_capacity(3);
        for (i, stage) in self.stages.iter().enumerate() {
            if let Some(m) = &stage.merge {
                x = m.forward(cx, x)?;
            }
            for b in &stage.blocks {
                x = b.forward(cx, x)?;
            }
            if i > 0 {
                maps.push(x);
            }
        }
        Ok(FeaturePyramid { maps, strides: vec![8, 16, 32] })
    }
}
