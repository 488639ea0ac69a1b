//! Dense row-major tensors and the numeric kernels the autograd tape is built on.
//!
//! Feature maps are stored channel-first `[C, H, W]`; token matrices used by
//! attention are `[C, N]` with `N = H * W` (tokens as columns), so a linear
//! layer is a left multiplication by its `[out, in]` weight.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Work size (in multiply-adds) below which kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {:?}", self.shape, shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Element conversion between scalar types.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| U::lit(x.f64())).collect() }
    }

    /// Axis permutation; `axes[i]` names the source axis placed at position `i`.
    pub fn permute(&self, axes: &[usize]) -> Self {
        let rank = self.shape.len();
        assert_eq!(axes.len(), rank, "permutation rank mismatch");
        let new_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides = strides(&self.shape);
        let perm_strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
        let n = self.data.len();
        let mut out = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        let mut src = 0usize;
        for _ in 0..n {
            out.push(self.data[src]);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                src += perm_strides[ax];
                if idx[ax] < new_shape[ax] {
                    break;
                }
                src -= perm_strides[ax] * new_shape[ax];
                idx[ax] = 0;
            }
        }
        Self { shape: new_shape, data: out }
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// `out[b] = op(a[b]) · op(c[b])` for `batch` stacked row-major matrices.
///
/// `a` is `m×k` (or `k×m` when `trans_a`), `c` is `k×n` (or `n×k` when `trans_c`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn batched_matmul<T: Scalar>(
    a: &[T],
    c: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_c: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    let work = batch * m * k * n;
    let kernel = |(bi, ob): (usize, &mut [T])| {
        let a = &a[bi * m * k..(bi + 1) * m * k];
        let c = &c[bi * k * n..(bi + 1) * k * n];
        matmul_into(a, c, ob, m, k, n, trans_a, trans_c);
    };
    if work >= PAR_THRESHOLD && batch > 1 {
        out.par_chunks_mut(m * n).enumerate().for_each(kernel);
    } else if work >= PAR_THRESHOLD && m > 1 {
        // single large matrix: split rows
        let rows_per = (m / rayon::current_num_threads().max(1)).max(1);
        out.par_chunks_mut(rows_per * n).enumerate().for_each(|(ci, ob)| {
            let r0 = ci * rows_per;
            let rows = ob.len() / n;
            matmul_rows(a, c, ob, r0, rows, m, k, n, trans_a, trans_c);
        });
    } else {
        out.chunks_mut(m * n).enumerate().for_each(kernel);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn matmul_into<T: Scalar>(
    a: &[T],
    c: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_c: bool,
) {
    matmul_rows(a, c, out, 0, m, m, k, n, trans_a, trans_c)
}

#[allow(clippy::too_many_arguments)]
fn matmul_rows<T: Scalar>(
    a: &[T],
    c: &[T],
    out: &mut [T],
    r0: usize,
    rows: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_c: bool,
) {
    for ri in 0..rows {
        let i = r0 + ri;
        let orow = &mut out[ri * n..(ri + 1) * n];
        if trans_c {
            for (j, o) in orow.iter_mut().enumerate() {
                let crow = &c[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for p in 0..k {
                    let av = if trans_a { a[p * m + i] } else { a[i * k + p] };
                    acc = acc + av * crow[p];
                }
                *o = acc;
            }
        } else {
            for p in 0..k {
                let av = if trans_a { a[p * m + i] } else { a[i * k + p] };
                if av == T::zero() {
                    continue;
                }
                let crow = &c[p * n..(p + 1) * n];
                for (o, &cv) in orow.iter_mut().zip(crow) {
                    *o = *o + av * cv;
                }
            }
        }
    }
}

/// Border handling for spatial convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PadMode {
    Zeros,
    Replicate,
}

/// Geometry of a 2D convolution over a `[C, H, W]` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub pad_mode: PadMode,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let oh = (self.height + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (self.width + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn in_per_group(&self) -> usize {
        self.in_ch / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_ch / self.groups
    }

    /// For each kernel offset, the source index of every output position along one axis.
    fn index_table(&self, len: usize, out_len: usize) -> Vec<Vec<Option<usize>>> {
        (0..self.kernel)
            .map(|kk| {
                (0..out_len)
                    .map(|o| {
                        let pos = (o * self.stride + kk) as isize - self.pad as isize;
                        if pos >= 0 && (pos as usize) < len {
                            Some(pos as usize)
                        } else {
                            match self.pad_mode {
                                PadMode::Zeros => None,
                                PadMode::Replicate => Some(pos.clamp(0, len as isize - 1) as usize),
                            }
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let rows = g.index_table(g.height, oh);
    let cols = g.index_table(g.width, ow);
    let k = g.kernel;
    let cin_g = g.in_per_group();
    let cout_g = g.out_per_group();
    let plane = g.height * g.width;
    let mut out = vec![T::zero(); g.out_ch * oh * ow];
    let work = g.out_ch * oh * ow * cin_g * k * k;
    let kernel = |(o, ob): (usize, &mut [T])| {
        let grp = o / cout_g;
        if let Some(b) = bias {
            ob.iter_mut().for_each(|v| *v = b[o]);
        }
        for ci in 0..cin_g {
            let c = grp * cin_g + ci;
            let xp = &x[c * plane..(c + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((o * cin_g + ci) * k + ky) * k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let ct = &cols[kx];
                    for (oy, ry) in rows[ky].iter().enumerate() {
                        let Some(iy) = *ry else { continue };
                        let xrow = &xp[iy * g.width..(iy + 1) * g.width];
                        let orow = &mut ob[oy * ow..(oy + 1) * ow];
                        for (ov, cx) in orow.iter_mut().zip(ct) {
                            if let Some(ix) = *cx {
                                *ov = *ov + wv * xrow[ix];
                            }
                        }
                    }
                }
            }
        }
    };
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(oh * ow).enumerate().for_each(kernel);
    } else {
        out.chunks_mut(oh * ow).enumerate().for_each(kernel);
    }
    out
}

/// Gradients of a convolution with respect to input, weight and bias.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (oh, ow) = g.out_hw();
    let rows = g.index_table(g.height, oh);
    let cols = g.index_table(g.width, ow);
    let k = g.kernel;
    let cin_g = g.in_per_group();
    let cout_g = g.out_per_group();
    let plane = g.height * g.width;
    let oplane = oh * ow;
    let work = g.out_ch * oplane * cin_g * k * k;
    let par = work >= PAR_THRESHOLD;

    let gb: Vec<T> = (0..g.out_ch).map(|o| gout[o * oplane..(o + 1) * oplane].iter().copied().sum()).collect();

    // weight gradient: one output channel per task
    let mut gw = vec![T::zero(); w.len()];
    let wk = |(o, gwo): (usize, &mut [T])| {
        let grp = o / cout_g;
        let go = &gout[o * oplane..(o + 1) * oplane];
        for ci in 0..cin_g {
            let c = grp * cin_g + ci;
            let xp = &x[c * plane..(c + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let ct = &cols[kx];
                    let mut acc = T::zero();
                    for (oy, ry) in rows[ky].iter().enumerate() {
                        let Some(iy) = *ry else { continue };
                        let xrow = &xp[iy * g.width..(iy + 1) * g.width];
                        let grow = &go[oy * ow..(oy + 1) * ow];
                        for (gv, cx) in grow.iter().zip(ct) {
                            if let Some(ix) = *cx {
                                acc = acc + *gv * xrow[ix];
                            }
                        }
                    }
                    gwo[(ci * k + ky) * k + kx] = acc;
                }
            }
        }
    };
    if par {
        gw.par_chunks_mut(cin_g * k * k).enumerate().for_each(wk);
    } else {
        gw.chunks_mut(cin_g * k * k).enumerate().for_each(wk);
    }

    // input gradient: one input channel per task
    let mut gx = vec![T::zero(); x.len()];
    let xk = |(c, gxc): (usize, &mut [T])| {
        let grp = c / cin_g;
        let ci = c % cin_g;
        for oo in 0..cout_g {
            let o = grp * cout_g + oo;
            let go = &gout[o * oplane..(o + 1) * oplane];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((o * cin_g + ci) * k + ky) * k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let ct = &cols[kx];
                    for (oy, ry) in rows[ky].iter().enumerate() {
                        let Some(iy) = *ry else { continue };
                        let grow = &go[oy * ow..(oy + 1) * ow];
                        let base = iy * g.width;
                        for (gv, cx) in grow.iter().zip(ct) {
                            if let Some(ix) = *cx {
                                gxc[base + ix] = gxc[base + ix] + wv * *gv;
                            }
                        }
                    }
                }
            }
        }
    };
    if par {
        gx.par_chunks_mut(plane).enumerate().for_each(xk);
    } else {
        gx.chunks_mut(plane).enumerate().for_each(xk);
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_formula() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let p = t.permute(&[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(p.data()[(c * 2 + a) * 3 + b], t.data()[(a * 3 + b) * 4 + c]);
                }
            }
        }
        let back = p.permute(&inverse_permutation(&[2, 0, 1]));
        assert_eq!(back, t);
    }

    #[test]
    fn matmul_transposes_agree() {
        let a = Tensor::<f64>::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin());
        let c = Tensor::<f64>::from_fn(&[4, 5], |i| (i as f64 * 0.11).cos());
        let plain = batched_matmul(a.data(), c.data(), 1, 3, 4, 5, false, false);
        let at = a.permute(&[1, 0]);
        let ct = c.permute(&[1, 0]);
        let both = batched_matmul(at.data(), ct.data(), 1, 3, 4, 5, true, true);
        for (x, y) in plain.iter().zip(&both) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut naive = vec![0.0; 15];
        for i in 0..3 {
            for j in 0..5 {
                for p in 0..4 {
                    naive[i * 5 + j] += a.data()[i * 4 + p] * c.data()[p * 5 + j];
                }
            }
        }
        for (x, y) in plain.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_out_shape_stride_two() {
        let g = ConvGeom {
            in_ch: 1,
            out_ch: 1,
            height: 64,
            width: 64,
            kernel: 3,
            stride: 2,
            pad: 1,
            groups: 1,
            pad_mode: PadMode::Zeros,
        };
        assert_eq!(g.out_hw(), (32, 32));
    }
}
