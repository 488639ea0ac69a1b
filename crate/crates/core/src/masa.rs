//! Retention and Manhattan self-attention.
//!
//! Attention scores are computed with softmax first and then multiplied
//! elementwise by an explicit decay matrix `D`, so rows of the decayed score
//! matrix do not sum to one. Feature maps are `[C, H, W]`; token `n` of an
//! `H x W` grid is `n = y * W + x` (row-major), with `y` the row and `x` the
//! column.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{PadMode, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecayForm {
    /// Causal `gamma^(n-m)` for `n >= m`, zero above the diagonal.
    Temporal,
    Bidirectional1d,
    /// `gamma^(|x_n - x_m| + |y_n - y_m|)` over a token grid.
    Manhattan2d,
    /// Row-coordinate decay `gamma^|y_n - y_m|` (H x H).
    AxialH,
    /// Column-coordinate decay `gamma^|x_n - x_m|` (W x W).
    AxialW,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecayMatrix<T> {
    pub values: Tensor<T>,
    pub form: DecayForm,
    pub gamma: T,
}

impl<T: Scalar> DecayMatrix<T> {
    pub fn size(&self) -> usize {
        self.values.dim(0)
    }

    pub fn at(&self, n: usize, m: usize) -> T {
        self.values.data()[n * self.size() + m]
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("decay gamma {gamma} outside (0, 1]")))
    }
}

fn build<T: Scalar>(n: usize, gamma: f64, form: DecayForm, dist: impl Fn(usize, usize) -> Option<usize>) -> Result<DecayMatrix<T>> {
    check_gamma(gamma)?;
    if n == 0 {
        return Err(Error::InvalidArgument("decay matrix needs at least one token".into()));
    }
    let g = T::lit(gamma);
    let values = Tensor::from_fn(&[n, n], |i| match dist(i / n, i % n) {
        Some(k) => g.powi(k as i32),
        None => T::zero(),
    });
    Ok(DecayMatrix { values, form, gamma: g })
}

pub fn temporal_decay_matrix<T: Scalar>(length: usize, gamma: f64) -> Result<DecayMatrix<T>> {
    build(length, gamma, DecayForm::Temporal, |n, m| (n >= m).then(|| n - m))
}

pub fn bidirectional_decay_matrix<T: Scalar>(length: usize, gamma: f64) -> Result<DecayMatrix<T>> {
    build(length, gamma, DecayForm::Bidirectional1d, |n, m| Some(n.abs_diff(m)))
}

/// Manhattan decay over a row-major `h x w` token grid.
pub fn spatial_decay_matrix<T: Scalar>(h: usize, w: usize, gamma: f64) -> Result<DecayMatrix<T>> {
    if w == 0 {
        return Err(Error::InvalidArgument("grid width must be positive".into()));
    }
    build(h * w, gamma, DecayForm::Manhattan2d, |n, m| {
        let (yn, xn) = (n / w, n % w);
        let (ym, xm) = (m / w, m % w);
        Some(yn.abs_diff(ym) + xn.abs_diff(xm))
    })
}

/// `(D^H, D^W)` for decomposed attention over an `h x w` grid.
pub fn axial_decay_matrices<T: Scalar>(h: usize, w: usize, gamma: f64) -> Result<(DecayMatrix<T>, DecayMatrix<T>)> {
    let dh = build(h, gamma, DecayForm::AxialH, |a, b| Some(a.abs_diff(b)))?;
    let dw = build(w, gamma, DecayForm::AxialW, |a, b| Some(a.abs_diff(b)))?;
    Ok((dh, dw))
}

/// Projections and decay of one retention head over a 1D sequence.
#[derive(Clone, Debug)]
pub struct RetentionParams<T> {
    /// `[model_dim, head_dim]`
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    /// `[model_dim, value_dim]`
    pub w_v: Tensor<T>,
    /// One rotation frequency per feature pair (`head_dim / 2` entries).
    pub theta: Vec<f64>,
    pub gamma: f64,
}

/// Parallel retention `(Q K^T ⊙ D) V` over a sequence `x` of shape `[len, model_dim]`.
///
/// `Q = (X W_Q) ⊙ Θ` and `K = (X W_K) ⊙ conj(Θ)` are realized by rotating each
/// feature pair of row `n` by `n * theta_j`, so `q_n · k_m` is the real part of
/// the complex product in the recurrent definition.
pub fn retention_1d<'t, T: Scalar>(
    x: Var<'t, T>,
    w_q: Var<'t, T>,
    w_k: Var<'t, T>,
    w_v: Var<'t, T>,
    theta: &[f64],
    gamma: f64,
) -> Result<Var<'t, T>> {
    let xs = x.shape();
    let (qs, ks, vs) = (w_q.shape(), w_k.shape(), w_v.shape());
    if xs.len() != 2 || xs[0] == 0 {
        return Err(Error::InvalidArgument(format!("retention input must be [len >= 1, dim], got {xs:?}")));
    }
    if qs.len() != 2 || qs != ks || qs[0] != xs[1] || vs.len() != 2 || vs[0] != xs[1] {
        return Err(Error::InvalidArgument(format!("retention projection shapes {qs:?}/{ks:?}/{vs:?} do not fit input {xs:?}")));
    }
    let (len, hd) = (xs[0], qs[1]);
    if hd % 2 != 0 || theta.len() != hd / 2 {
        return Err(Error::InvalidArgument(format!("head dim {hd} needs even size and {} thetas, got {}", hd / 2, theta.len())));
    }
    let angles = Rc::new(Tensor::from_fn(&[len, hd / 2], |i| T::lit((i / (hd / 2)) as f64 * theta[i % (hd / 2)])));
    let q = x.matmul(w_q).rotate_pairs(angles.clone());
    let k = x.matmul(w_k).rotate_pairs(angles);
    let v = x.matmul(w_v);
    let d = Rc::new(temporal_decay_matrix::<T>(len, gamma)?.values);
    Ok(q.matmul(k.t()).mul_const(d).matmul(v))
}

/// Head layout and decay rates of one MaSA layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MasaConfig {
    pub num_heads: usize,
    pub gamma_per_head: Vec<f64>,
    pub head_dim: usize,
    pub decomposed: bool,
}

impl MasaConfig {
    /// Per-head decay `gamma_i = 1 - 2^-(3 + i)`.
    pub fn default_gammas(num_heads: usize) -> Vec<f64> {
        (0..num_heads).map(|i| 1.0 - 2f64.powi(-(3 + i as i32))).collect()
    }

    pub fn new(channels: usize, num_heads: usize, decomposed: bool) -> Result<Self> {
        if num_heads == 0 || channels % num_heads != 0 {
            return Err(Error::Config(format!("{channels} channels not divisible into {num_heads} heads")));
        }
        Ok(Self { num_heads, gamma_per_head: Self::default_gammas(num_heads), head_dim: channels / num_heads, decomposed })
    }

    pub fn channels(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.head_dim == 0 {
            return Err(Error::Config("MaSA needs at least one head of non-zero width".into()));
        }
        if self.gamma_per_head.len() != self.num_heads {
            return Err(Error::Config(format!("{} gammas for {} heads", self.gamma_per_head.len(), self.num_heads)));
        }
        for &g in &self.gamma_per_head {
            if !(g > 0.0 && g <= 1.0) {
                return Err(Error::Config(format!("head gamma {g} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Learnable tensors of one MaSA layer, already on a tape.
#[derive(Clone, Copy, Debug)]
pub struct MasaWeights<'t, T: Scalar> {
    /// `[C, C]` query/key/value projections (out x in).
    pub w_q: Var<'t, T>,
    pub w_k: Var<'t, T>,
    pub w_v: Var<'t, T>,
    /// `[C, C]` output projection and its `[C]` bias.
    pub w_o: Var<'t, T>,
    pub b_o: Var<'t, T>,
    /// Depthwise `[C, 1, k, k]` kernel of the local-context branch and its bias.
    pub lce_w: Var<'t, T>,
    pub lce_b: Var<'t, T>,
}

fn check_map<T: Scalar>(x: Var<'_, T>, cfg: &MasaConfig) -> Result<(usize, usize, usize)> {
    cfg.validate()?;
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("MaSA expects a [C, H, W] map, got {s:?}")));
    }
    if s[0] % cfg.num_heads != 0 {
        return Err(Error::Config(format!("{} channels not divisible into {} heads", s[0], cfg.num_heads)));
    }
    if s[0] != cfg.channels() {
        return Err(Error::Config(format!("map has {} channels, config expects {}", s[0], cfg.channels())));
    }
    Ok((s[0], s[1], s[2]))
}

fn project<'t, T: Scalar>(w: Var<'t, T>, tokens: Var<'t, T>) -> Var<'t, T> {
    w.matmul(tokens)
}

/// Full MaSA over explicit per-head decay matrices `decay` of shape `[heads, N, N]`.
///
/// `tokens` is `[C, N]`. Returns the output-projected `[C, N]` tokens.
pub fn masa_tokens<'t, T: Scalar>(tokens: Var<'t, T>, decay: Rc<Tensor<T>>, cfg: &MasaConfig, w: &MasaWeights<'t, T>) -> Var<'t, T> {
    let (c, n) = {
        let s = tokens.shape();
        (s[0], s[1])
    };
    let (h, d) = (cfg.num_heads, cfg.head_dim);
    let q = project(w.w_q, tokens).reshape(&[h, d, n]).permute(&[0, 2, 1]);
    let k = project(w.w_k, tokens).reshape(&[h, d, n]);
    let v = project(w.w_v, tokens).reshape(&[h, d, n]).permute(&[0, 2, 1]);
    let scores = q.matmul(k).scale(1.0 / (d as f64).sqrt()).softmax_last().mul_const(decay);
    let heads = scores.matmul(v).permute(&[0, 2, 1]).reshape(&[c, n]);
    w.w_o.matmul(heads).add_channel_bias(w.b_o)
}

/// Per-head Manhattan decay stacked to `[heads, H*W, H*W]`.
pub fn stacked_spatial_decay<T: Scalar>(cfg: &MasaConfig, h: usize, w: usize) -> Result<Tensor<T>> {
    let n = h * w;
    let mut data = Vec::with_capacity(cfg.num_heads * n * n);
    for &g in &cfg.gamma_per_head {
        data.extend_from_slice(spatial_decay_matrix::<T>(h, w, g)?.values.data());
    }
    Tensor::new(&[cfg.num_heads, n, n], data)
}

/// `MaSA(X) = (Softmax(Q K^T) ⊙ D^{2d}) V`, heads concatenated and projected.
pub fn masa_core<'t, T: Scalar>(x: Var<'t, T>, cfg: &MasaConfig, w: &MasaWeights<'t, T>) -> Result<Var<'t, T>> {
    let (c, h, wd) = check_map(x, cfg)?;
    if cfg.decomposed {
        return Err(Error::Config("masa_core called with a decomposed config".into()));
    }
    let decay = Rc::new(stacked_spatial_decay(cfg, h, wd)?);
    Ok(masa_tokens(x.reshape(&[c, h * wd]), decay, cfg, w).reshape(&[c, h, wd]))
}

/// Decomposed MaSA: decayed attention within each row (`D^W`), then within
/// each column (`D^H`) applied to the row output, `MaSA_H (MaSA_W V)^T`.
pub fn masa_decomposed<'t, T: Scalar>(x: Var<'t, T>, cfg: &MasaConfig, w: &MasaWeights<'t, T>) -> Result<Var<'t, T>> {
    let (c, h, wd) = check_map(x, cfg)?;
    if !cfg.decomposed {
        return Err(Error::Config("masa_decomposed called with a full-attention config".into()));
    }
    let (nh, d) = (cfg.num_heads, cfg.head_dim);
    let scale = 1.0 / (d as f64).sqrt();
    let tokens = x.reshape(&[c, h * wd]);
    let q = project(w.w_q, tokens).reshape(&[nh, d, h, wd]);
    let k = project(w.w_k, tokens).reshape(&[nh, d, h, wd]);
    let v = project(w.w_v, tokens).reshape(&[nh, d, h, wd]);

    let mut dw_all = Vec::with_capacity(nh * h * wd * wd);
    let mut dh_all = Vec::with_capacity(nh * wd * h * h);
    for &g in &cfg.gamma_per_head {
        let (dh, dw) = axial_decay_matrices::<T>(h, wd, g)?;
        for _ in 0..h {
            dw_all.extend_from_slice(dw.values.data());
        }
        for _ in 0..wd {
            dh_all.extend_from_slice(dh.values.data());
        }
    }
    let dw_all = Rc::new(Tensor::new(&[nh * h, wd, wd], dw_all)?);
    let dh_all = Rc::new(Tensor::new(&[nh * wd, h, h], dh_all)?);

    // along W inside every row
    let q_w = q.permute(&[0, 2, 3, 1]).reshape(&[nh * h, wd, d]);
    let k_w = k.permute(&[0, 2, 1, 3]).reshape(&[nh * h, d, wd]);
    let v_w = v.permute(&[0, 2, 3, 1]).reshape(&[nh * h, wd, d]);
    let a_w = q_w.matmul(k_w).scale(scale).softmax_last().mul_const(dw_all);
    let row_out = a_w.matmul(v_w).reshape(&[nh, h, wd, d]);

    // along H inside every column
    let q_h = q.permute(&[0, 3, 2, 1]).reshape(&[nh * wd, h, d]);
    let k_h = k.permute(&[0, 3, 1, 2]).reshape(&[nh * wd, d, h]);
    let a_h = q_h.matmul(k_h).scale(scale).softmax_last().mul_const(dh_all);
    let col_in = row_out.permute(&[0, 2, 1, 3]).reshape(&[nh * wd, h, d]);
    let out = a_h.matmul(col_in).reshape(&[nh, wd, h, d]).permute(&[0, 3, 2, 1]).reshape(&[c, h * wd]);
    Ok(w.w_o.matmul(out).add_channel_bias(w.b_o).reshape(&[c, h, wd]))
}

/// Local context enhancement: depthwise convolution with replicate padding.
pub fn lce<'t, T: Scalar>(v: Var<'t, T>, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
    let vs = v.shape();
    let ws = weight.shape();
    if vs.len() != 3 || ws.len() != 4 || ws[0] != vs[0] || ws[1] != 1 || ws[2] != ws[3] {
        return Err(Error::Shape(format!("LCE kernel {ws:?} does not fit map {vs:?}")));
    }
    if ws[2] % 2 == 0 {
        return Err(Error::Config(format!("LCE kernel size {} must be odd", ws[2])));
    }
    Ok(v.conv2d(weight, bias, 1, ws[2] / 2, vs[0], PadMode::Replicate))
}

/// `MaSA(X) + LCE(V)` with `V` the value projection of `X`.
pub fn masa_out<'t, T: Scalar>(x: Var<'t, T>, cfg: &MasaConfig, w: &MasaWeights<'t, T>) -> Result<Var<'t, T>> {
    let (c, h, wd) = check_map(x, cfg)?;
    let attn = if cfg.decomposed { masa_decomposed(x, cfg, w)? } else { masa_core(x, cfg, w)? };
    let v = project(w.w_v, x.reshape(&[c, h * wd])).reshape(&[c, h, wd]);
    Ok(attn.add(lce(v, w.lce_w, Some(w.lce_b))?))
}
