//! Top-down feature fusion, the four decoupled heads, and the assembled detector.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::{Backbone, BackboneConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvNormAct, Ctx, ParamBuilder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeckConfig {
    pub out_channels: Vec<usize>,
    pub c2f_depth: usize,
}

impl Default for NeckConfig {
    fn default() -> Self {
        Self { out_channels: vec![64, 128, 256], c2f_depth: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub neck: NeckConfig,
    pub num_classes: usize,
    pub reg_max: usize,
    pub head_width: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            neck: NeckConfig::default(),
            num_classes: 6,
            reg_max: 16,
            head_width: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.neck.out_channels.len() != 3 || self.neck.out_channels.iter().any(|&c| c < 2 || c % 2 != 0) {
            return Err(Error::Config("neck needs three even, positive output widths".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("at least one class is required".into()));
        }
        if self.reg_max < 2 {
            return Err(Error::Config("reg_max must be at least 2".into()));
        }
        if self.head_width == 0 {
            return Err(Error::Config("head width must be positive".into()));
        }
        Ok(())
    }

    /// Doppler bins the model consumes.
    pub fn doppler_bins(&self) -> usize {
        self.backbone.input_channels
    }
}

/// Two 3x3 ConvNormAct without shortcut.
#[derive(Clone, Debug)]
struct Bottleneck {
    a: ConvNormAct,
    b: ConvNormAct,
}

/// Split-transform-concatenate block.
#[derive(Clone, Debug)]
pub struct C2f {
    cv1: ConvNormAct,
    blocks: Vec<Bottleneck>,
    cv2: ConvNormAct,
    hidden: usize,
}

impl C2f {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, in_ch: usize, out_ch: usize, depth: usize) -> Self {
        let hidden = out_ch / 2;
        let blocks = (0..depth)
            .map(|i| Bottleneck {
                a: ConvNormAct::new(pb, &format!("{name}.m{i}.cv1"), hidden, hidden, 3, 1),
                b: ConvNormAct::new(pb, &format!("{name}.m{i}.cv2"), hidden, hidden, 3, 1),
            })
            .collect();
        Self {
            cv1: ConvNormAct::new(pb, &format!("{name}.cv1"), in_ch, 2 * hidden, 1, 1),
            blocks,
            cv2: ConvNormAct::new(pb, &format!("{name}.cv2"), (2 + depth) * hidden, out_ch, 1, 1),
            hidden,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let y = self.cv1.forward(cx, x);
        let mut parts = vec![y.narrow(0, 0, self.hidden), y.narrow(0, self.hidden, self.hidden)];
        for b in &self.blocks {
            let last = *parts.last().expect("non-empty");
            parts.push(b.b.forward(cx, b.a.forward(cx, last)));
        }
        self.cv2.forward(cx, Var::concat(&parts, 0))
    }
}

/// Top-down fusion: `N5 = C2f(P5)`, `N4 = C2f(P4 ++ up(N5))`, `N3 = C2f(P3 ++ up(N4))`.
#[derive(Clone, Debug)]
pub struct Neck {
    n5: C2f,
    n4: C2f,
    n3: C2f,
    in_channels: Vec<usize>,
}

impl Neck {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, in_ch: &[usize], cfg: &NeckConfig) -> Self {
        let o = &cfg.out_channels;
        Self {
            n5: C2f::new(pb, "neck.n5", in_ch[2], o[2], cfg.c2f_depth),
            n4: C2f::new(pb, "neck.n4", in_ch[1] + o[2], o[1], cfg.c2f_depth),
            n3: C2f::new(pb, "neck.n3", in_ch[0] + o[1], o[0], cfg.c2f_depth),
            in_channels: in_ch.to_vec(),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, cx: Ctx<'t, T>, pyr: &FeaturePyramid<'t, T>) -> Result<FeaturePyramid<'t, T>> {
        let shapes = pyr.shapes();
        if shapes.len() != 3 || shapes.iter().zip(&self.in_channels).any(|(s, &c)| s.len() != 3 || s[0] != c) {
            return Err(Error::Config(format!("neck expects channels {:?}, got shapes {shapes:?}", self.in_channels)));
        }
        for l in 0..2 {
            if shapes[l][1] != 2 * shapes[l + 1][1] || shapes[l][2] != 2 * shapes[l + 1][2] {
                return Err(Error::Config(format!("pyramid levels {shapes:?} do not halve")));
            }
        }
        let n5 = self.n5.forward(cx, pyr.maps[2]);
        let n4 = self.n4.forward(cx, Var::concat(&[pyr.maps[1], n5.upsample2()], 0));
        let n3 = self.n3.forward(cx, Var::concat(&[pyr.maps[0], n4.upsample2()], 0));
        Ok(FeaturePyramid { maps: vec![n3, n4, n5], strides: pyr.strides.clone() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Obj,
    Cls,
    Box,
    Dopl,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] = [HeadKind::Obj, HeadKind::Cls, HeadKind::Box, HeadKind::Dopl];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Obj => "obj",
            HeadKind::Cls => "cls",
            HeadKind::Box => "box",
            HeadKind::Dopl => "dopl",
        }
    }
}

/// Prior probability the objectness and class biases start at.
pub const PRIOR_PROB: f64 = 0.01;

/// One head at one level: two 3x3 ConvNormAct and a 1x1 projection.
#[derive(Clone, Debug)]
struct HeadBranch {
    a: ConvNormAct,
    b: ConvNormAct,
    out: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Heads {
    branches: Vec<Vec<HeadBranch>>,
}

impl Heads {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, level_ch: &[usize], cfg: &ModelConfig) -> Self {
        let w = cfg.head_width;
        let prior_bias = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
        let branches = HeadKind::ALL
            .iter()
            .map(|&kind| {
                let out_ch = match kind {
                    HeadKind::Obj => 1,
                    HeadKind::Cls => cfg.num_classes,
                    HeadKind::Box => 4 * cfg.reg_max,
                    HeadKind::Dopl => 2,
                };
                level_ch
                    .iter()
                    .enumerate()
                    .map(|(l, &c)| {
                        let name = format!("head.{}.l{l}", kind.name());
                        let a = ConvNormAct::new(pb, &format!("{name}.cv1"), c, w, 3, 1);
                        let b = ConvNormAct::new(pb, &format!("{name}.cv2"), w, w, 3, 1);
                        let out = if matches!(kind, HeadKind::Obj | HeadKind::Cls) {
                            let weight = pb.uniform(&format!("{name}.pred.weight"), &[out_ch, w, 1, 1], 1.0 / (w as f64).sqrt());
                            let bias = pb.constant(&format!("{name}.pred.bias"), &[out_ch], prior_bias);
                            Conv2d {
                                weight,
                                bias: Some(bias),
                                in_ch: w,
                                out_ch,
                                kernel: 1,
                                stride: 1,
                                groups: 1,
                                pad_mode: crate::tensor::PadMode::Zeros,
                            }
                        } else {
                            Conv2d::new(pb, &format!("{name}.pred"), w, out_ch, 1, 1, 1, true)
                        };
                        HeadBranch { a, b, out }
                    })
                    .collect()
            })
            .collect();
        Self { branches }
    }

    pub fn forward<'t, T: Scalar>(&self, cx: Ctx<'t, T>, fused: &FeaturePyramid<'t, T>) -> RawPredictions<'t, T> {
        let levels = fused
            .maps
            .iter()
            .enumerate()
            .map(|(l, &x)| {
                let run = |k: usize| {
                    let br = &self.branches[k][l];
                    br.out.forward(cx, br.b.forward(cx, br.a.forward(cx, x)))
                };
                let s = x.shape();
                LevelPredictions {
                    obj: run(0),
                    cls: run(1),
                    boxes: run(2),
                    dopl: run(3),
                    stride: fused.strides[l],
                    height: s[1],
                    width: s[2],
                }
            })
            .collect();
        RawPredictions { levels }
    }
}

/// Head outputs at one pyramid level, all `[channels, H, W]`.
#[derive(Clone, Debug)]
pub struct LevelPredictions<'t, T: Scalar> {
    pub obj: Var<'t, T>,
    pub cls: Var<'t, T>,
    /// DFL logits, four distances (left, top, right, bottom) of `reg_max` bins each.
    pub boxes: Var<'t, T>,
    /// Raw values for the normalized Doppler extents `(z1, z2)`.
    pub dopl: Var<'t, T>,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct RawPredictions<'t, T: Scalar> {
    pub levels: Vec<LevelPredictions<'t, T>>,
}

impl<T: Scalar> RawPredictions<'_, T> {
    pub fn num_anchors(&self) -> usize {
        self.levels.iter().map(|l| l.height * l.width).sum()
    }
}

/// Backbone, neck and heads with their parameters.
#[derive(Clone, Debug)]
pub struct DetModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    backbone: Backbone,
    neck: Neck,
    heads: Heads,
}

impl<T: Scalar> DetModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut pb = ParamBuilder::new(config.seed);
        let backbone = Backbone::new(&mut pb, &config.backbone)?;
        let neck = Neck::new(&mut pb, &config.backbone.stage_dims[1..], &config.neck);
        let heads = Heads::new(&mut pb, &config.neck.out_channels, &config);
        Ok(Self { config, params: pb.finish(), backbone, neck, heads })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn ctx<'t>(&'t self, tape: &'t Tape<T>) -> Ctx<'t, T> {
        Ctx::new(tape, &self.params)
    }

    pub fn backbone_forward<'t>(&'t self, tape: &'t Tape<T>, input: Var<'t, T>) -> Result<FeaturePyramid<'t, T>> {
        self.backbone.forward(self.ctx(tape), input)
    }

    pub fn fpn_forward<'t>(&'t self, tape: &'t Tape<T>, pyr: &FeaturePyramid<'t, T>) -> Result<FeaturePyramid<'t, T>> {
        self.neck.forward(self.ctx(tape), pyr)
    }

    pub fn heads_forward<'t>(&'t self, tape: &'t Tape<T>, fused: &FeaturePyramid<'t, T>) -> RawPredictions<'t, T> {
        self.heads.forward(self.ctx(tape), fused)
    }

    /// Full forward pass on a `[D, R, A]` input.
    pub fn forward<'t>(&'t self, tape: &'t Tape<T>, input: Var<'t, T>) -> Result<RawPredictions<'t, T>> {
        let s = input.shape();
        if s.len() != 3 || s[0] != self.config.doppler_bins() {
            return Err(Error::Config(format!(
                "model expects {} Doppler channels, input has shape {s:?}",
                self.config.doppler_bins()
            )));
        }
        let pyr = self.backbone_forward(tape, input)?;
        let fused = self.fpn_forward(tape, &pyr)?;
        Ok(self.heads_forward(tape, &fused))
    }

    /// Same architecture with parameters converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> DetModel<U> {
        DetModel {
            config: self.config.clone(),
            params: self.params.cast(),
            backbone: self.backbone.clone(),
            neck: self.neck.clone(),
            heads: self.heads.clone(),
        }
    }
}

const MAGIC: &[u8; 8] = b"TRCKPT01";

/// Writes the config and every parameter as little-endian f32.
pub fn save_checkpoint<T: Scalar>(model: &DetModel<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let cfg = serde_json::to_vec(&model.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg);
    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (_, name, t) in model.params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Rebuilds a model from a checkpoint, validating every parameter name and shape.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<DetModel<T>> {
    let mut buf = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut buf)).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let n = r.u32()?;
    let config: ModelConfig = serde_json::from_slice(r.take(n)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut model = DetModel::<T>::new(config)?;
    let count = r.u32()?;
    if count != model.params.len() {
        return Err(Error::Checkpoint(format!("checkpoint has {count} tensors, model has {}", model.params.len())));
    }
    for _ in 0..count {
        let nl = r.u32()?;
        let name = std::str::from_utf8(r.take(nl)?).map_err(|e| Error::Checkpoint(e.to_string()))?.to_string();
        let nd = r.u32()?;
        let shape = (0..nd).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect();
        model.params.set(&name, Tensor::new(&shape, data)?)?;
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(model)
}
