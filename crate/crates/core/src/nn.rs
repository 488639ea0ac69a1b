//! Named parameter storage and the small set of layers the detector is built from.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{PadMode, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Insertion-ordered map from hierarchical names to parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name `{name}`");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Replaces a parameter, checking that the shape is unchanged.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.id_of(name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        let cur = &self.values[id.0];
        if cur.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}`: expected shape {:?}, found {:?}",
                cur.shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), values: self.values.iter().map(|v| v.cast()).collect(), index: self.index.clone() }
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for (name, v) in self.names.iter().zip(self.values.iter_mut()) {
            if name.starts_with(prefix) {
                v.data_mut().iter_mut().for_each(|x| *x = T::zero());
                n += 1;
            }
        }
        n
    }
}

/// Creates parameters with deterministic initial values.
pub struct ParamBuilder<T> {
    store: ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> ParamBuilder<T> {
    pub fn new(seed: u64) -> Self {
        Self { store: ParamStore::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)));
        self.store.add(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, T::lit(v)))
    }

    pub fn finish(self) -> ParamStore<T> {
        self.store
    }
}

/// Tape plus the parameter values a forward pass reads.
#[derive(Clone, Copy)]
pub struct Ctx<'t, T: Scalar> {
    pub tape: &'t Tape<T>,
    pub store: &'t ParamStore<T>,
}

impl<'t, T: Scalar> Ctx<'t, T> {
    pub fn new(tape: &'t Tape<T>, store: &'t ParamStore<T>) -> Self {
        Self { tape, store }
    }

    pub fn p(&self, id: ParamId) -> Var<'t, T> {
        self.tape.param(self.store, id)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub pad_mode: PadMode,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        assert!(in_ch % groups == 0 && out_ch % groups == 0, "{name}: channels not divisible by groups");
        let fan_in = (in_ch / groups) * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = pb.uniform(&format!("{name}.weight"), &[out_ch, in_ch / groups, kernel, kernel], bound);
        let bias = bias.then(|| pb.uniform(&format!("{name}.bias"), &[out_ch], bound));
        Self { weight, bias, in_ch, out_ch, kernel, stride, groups, pad_mode: PadMode::Zeros }
    }

    pub fn with_pad_mode(mut self, mode: PadMode) -> Self {
        self.pad_mode = mode;
        self
    }

    pub fn forward<'t, T: Scalar>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let w = cx.p(self.weight);
        let b = self.bias.map(|b| cx.p(b));
        x.conv2d(w, b, self.stride, self.kernel / 2, self.groups, self.pad_mode)
    }
}

/// Normalization over channels at every spatial position of a `[C, ...]` map.
#[derive(Clone, Debug)]
pub struct LayerNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm2d {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, ch: usize) -> Self {
        Self {
            gamma: pb.constant(&format!("{name}.weight"), &[ch], 1.0),
            beta: pb.constant(&format!("{name}.bias"), &[ch], 0.0),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.layer_norm_channels(cx.p(self.gamma), cx.p(self.beta), Self::EPS)
    }
}

/// Convolution, channel normalization, SiLU.
#[derive(Clone, Debug)]
pub struct ConvNormAct {
    pub conv: Conv2d,
    pub norm: LayerNorm2d,
    pub act: bool,
}

impl ConvNormAct {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Self {
            conv: Conv2d::new(pb, &format!("{name}.conv"), in_ch, out_ch, kernel, stride, 1, false),
            norm: LayerNorm2d::new(pb, &format!("{name}.norm"), out_ch),
            act: true,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let y = self.norm.forward(cx, self.conv.forward(cx, x));
        if self.act {
            y.silu()
        } else {
            y
        }
    }
}

/// Token-wise affine map on `[in, N]` token matrices.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self {
            weight: pb.uniform(&format!("{name}.weight"), &[out_dim, in_dim], bound),
            bias: bias.then(|| pb.uniform(&format!("{name}.bias"), &[out_dim], bound)),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let y = cx.p(self.weight).matmul(x);
        match self.bias {
            Some(b) => y.add_channel_bias(cx.p(b)),
            None => y,
        }
    }
}
