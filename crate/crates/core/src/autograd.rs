//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Each recorded node
//! owns its value and a closure mapping the upstream gradient to gradients of
//! its parents. [`Tape::backward`] walks the tape in reverse creation order,
//! which is a valid topological order because parents always precede children.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::nn::{ParamId, ParamStore};
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::tensor::{batched_matmul, conv2d_backward, conv2d_forward, inverse_permutation, ConvGeom, PadMode, Tensor};

type BackFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Tensor<T>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackFn<T>>,
}

/// Records one forward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<usize, usize>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), params: RefCell::new(HashMap::new()), grad_enabled: true }
    }

    /// A tape that records values only; [`Tape::backward`] yields no gradients.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds a differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Vec::new(), None)
    }

    /// Adds a value that never receives a gradient (masks, decay matrices).
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Vec::new(), None)
    }

    /// Leaf for a stored parameter; repeated calls within one tape share the node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.params.borrow().get(&id.0) {
            return Var { tape: self, id: node };
        }
        let v = self.leaf(store.get(id).clone());
        self.params.borrow_mut().insert(id.0, v.id);
        v
    }

    fn push(&self, value: Tensor<T>, parents: Vec<usize>, backward: Option<BackFn<T>>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let backward = if self.grad_enabled { backward } else { None };
        let parents = if self.grad_enabled { parents } else { Vec::new() };
        nodes.push(Node { value: Rc::new(value), parents, backward });
        Var { tape: self, id }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Back-propagates from `root`, seeding its gradient with ones.
    pub fn backward(&self, root: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Tensor::ones(nodes[root.id].value.shape()));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(back) = &node.backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            let pg = back(&g);
            debug_assert_eq!(pg.len(), node.parents.len());
            for (&p, gp) in node.parents.iter().zip(pg) {
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&gp),
                    slot @ None => *slot = Some(gp),
                }
            }
        }
        Gradients { grads, params: self.params.borrow().clone() }
    }
}

/// Gradients of one backward pass, indexed by variable or parameter.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<usize, usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id.0).and_then(|&n| self.grads[n].as_ref())
    }

    /// Moves parameter gradients out, one slot per parameter of `store`.
    pub fn into_param_grads(mut self, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        (0..store.len())
            .map(|i| self.params.get(&i).and_then(|&n| self.grads[n].take()))
            .collect()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: operand shapes differ");
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// First element; convenient for scalar losses.
    pub fn item(&self) -> T {
        self.value().data()[0]
    }

    fn unary(self, value: Tensor<T>, back: impl Fn(&Tensor<T>) -> Tensor<T> + 'static) -> Self {
        self.tape.push(value, vec![self.id], Some(Box::new(move |g| vec![back(g)])))
    }

    fn binary(self, other: Self, value: Tensor<T>, back: impl Fn(&Tensor<T>) -> (Tensor<T>, Tensor<T>) + 'static) -> Self {
        self.tape.push(
            value,
            vec![self.id, other.id],
            Some(Box::new(move |g| {
                let (a, b) = back(g);
                vec![a, b]
            })),
        )
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    pub fn map(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Self {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let yc = y.clone();
        self.tape.push(
            (*y).clone(),
            vec![self.id],
            Some(Box::new(move |g| {
                let d = Tensor::from_fn(x.shape(), |i| g.data()[i] * df(x.data()[i], yc.data()[i]));
                vec![d]
            })),
        )
    }

    pub fn add(self, o: Self) -> Self {
        let (a, b) = (self.value(), o.value());
        same_shape(&a, &b, "add");
        self.binary(o, a.zip_map(&b, |x, y| x + y), |g| (g.clone(), g.clone()))
    }

    pub fn sub(self, o: Self) -> Self {
        let (a, b) = (self.value(), o.value());
        same_shape(&a, &b, "sub");
        self.binary(o, a.zip_map(&b, |x, y| x - y), |g| (g.clone(), g.map(|v| -v)))
    }

    pub fn mul(self, o: Self) -> Self {
        let (a, b) = (self.value(), o.value());
        same_shape(&a, &b, "mul");
        let v = a.zip_map(&b, |x, y| x * y);
        self.binary(o, v, move |g| (g.zip_map(&b, |g, y| g * y), g.zip_map(&a, |g, x| g * x)))
    }

    pub fn div(self, o: Self) -> Self {
        let (a, b) = (self.value(), o.value());
        same_shape(&a, &b, "div");
        let v = a.zip_map(&b, |x, y| x / y);
        self.binary(o, v, move |g| {
            let ga = g.zip_map(&b, |g, y| g / y);
            let gb = Tensor::from_fn(g.shape(), |i| {
                let y = b.data()[i];
                -g.data()[i] * a.data()[i] / (y * y)
            });
            (ga, gb)
        })
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(self, o: Self) -> Self {
        let (a, b) = (self.value(), o.value());
        same_shape(&a, &b, "maximum");
        let v = a.zip_map(&b, |x, y| if x >= y { x } else { y });
        self.binary(o, v, move |g| {
            let ga = Tensor::from_fn(g.shape(), |i| if a.data()[i] >= b.data()[i] { g.data()[i] } else { T::zero() });
            let gb = Tensor::from_fn(g.shape(), |i| if a.data()[i] >= b.data()[i] { T::zero() } else { g.data()[i] });
            (ga, gb)
        })
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn minimum(self, o: Self) -> Self {
        let (a, b) = (self.value(), o.value());
        same_shape(&a, &b, "minimum");
        let v = a.zip_map(&b, |x, y| if x <= y { x } else { y });
        self.binary(o, v, move |g| {
            let ga = Tensor::from_fn(g.shape(), |i| if a.data()[i] <= b.data()[i] { g.data()[i] } else { T::zero() });
            let gb = Tensor::from_fn(g.shape(), |i| if a.data()[i] <= b.data()[i] { T::zero() } else { g.data()[i] });
            (ga, gb)
        })
    }

    /// Picks `self` where `mask` is true and `other` elsewhere.
    pub fn select(self, mask: Rc<Vec<bool>>, other: Self) -> Self {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "select");
        assert_eq!(mask.len(), a.len(), "select: mask length");
        let v = Tensor::from_fn(a.shape(), |i| if mask[i] { a.data()[i] } else { b.data()[i] });
        self.binary(other, v, move |g| {
            let ga = Tensor::from_fn(g.shape(), |i| if mask[i] { g.data()[i] } else { T::zero() });
            let gb = Tensor::from_fn(g.shape(), |i| if mask[i] { T::zero() } else { g.data()[i] });
            (ga, gb)
        })
    }

    pub fn neg(self) -> Self {
        self.scale(-1.0)
    }

    pub fn scale(self, c: f64) -> Self {
        let c = T::lit(c);
        let v = self.value().map(|x| x * c);
        self.unary(v, move |g| g.map(|v| v * c))
    }

    pub fn add_scalar(self, c: f64) -> Self {
        let c = T::lit(c);
        let v = self.value().map(|x| x + c);
        self.unary(v, |g| g.clone())
    }

    pub fn mul_const(self, k: Rc<Tensor<T>>) -> Self {
        let a = self.value();
        same_shape(&a, &k, "mul_const");
        let v = a.zip_map(&k, |x, y| x * y);
        self.unary(v, move |g| g.zip_map(&k, |g, y| g * y))
    }

    pub fn add_const(self, k: Rc<Tensor<T>>) -> Self {
        let a = self.value();
        same_shape(&a, &k, "add_const");
        self.unary(a.zip_map(&k, |x, y| x + y), |g| g.clone())
    }

    pub fn sigmoid(self) -> Self {
        self.map(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn silu(self) -> Self {
        self.map(|x| x * sigmoid(x), |x, _| {
            let s = sigmoid(x);
            s * (T::one() + x * (T::one() - s))
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Self {
        let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
        let c = T::lit(0.044715);
        let half = T::lit(0.5);
        self.map(
            move |x| half * x * (T::one() + (k * (x + c * x * x * x)).tanh()),
            move |x, _| {
                let u = k * (x + c * x * x * x);
                let th = u.tanh();
                let du = k * (T::one() + T::lit(3.0) * c * x * x);
                half * (T::one() + th) + half * x * (T::one() - th * th) * du
            },
        )
    }

    pub fn exp(self) -> Self {
        self.map(|x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Self {
        self.map(|x| x.ln(), |x, _| T::one() / x)
    }

    pub fn atan(self) -> Self {
        self.map(|x| x.atan(), |x, _| T::one() / (T::one() + x * x))
    }

    pub fn square(self) -> Self {
        self.map(|x| x * x, |x, _| T::lit(2.0) * x)
    }

    pub fn abs(self) -> Self {
        self.map(|x| x.abs(), |x, _| if x >= T::zero() { T::one() } else { -T::one() })
    }

    pub fn relu(self) -> Self {
        self.map(|x| x.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn softplus(self) -> Self {
        self.map(softplus, |x, _| sigmoid(x))
    }

    /// Clamps to `[lo, hi]`; gradient is zero outside.
    pub fn clamp(self, lo: f64, hi: f64) -> Self {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        self.map(move |x| x.max(lo).min(hi), move |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() })
    }

    pub fn sum(self) -> Self {
        let a = self.value();
        let shape = a.shape().to_vec();
        self.unary(Tensor::scalar(a.sum()), move |g| Tensor::full(&shape, g.data()[0]))
    }

    pub fn mean(self) -> Self {
        let n = self.value().len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Sum over the last axis; the axis is removed (rank-1 inputs give `[1]`).
    pub fn sum_last(self) -> Self {
        let a = self.value();
        let shape = a.shape().to_vec();
        let k = *shape.last().expect("sum_last of rank-0");
        let rows = a.len() / k.max(1);
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let v = Tensor::from_fn(&out_shape, |r| a.data()[r * k..(r + 1) * k].iter().copied().sum());
        debug_assert_eq!(v.len(), rows);
        self.unary(v, move |g| Tensor::from_fn(&shape, |i| g.data()[i / k]))
    }

    pub fn reshape(self, shape: &[usize]) -> Self {
        let a = self.value();
        let old = a.shape().to_vec();
        if old == shape {
            return self;
        }
        let v = (*a).clone().reshape(shape).expect("reshape: element count");
        self.unary(v, move |g| g.clone().reshape(&old).expect("reshape back"))
    }

    pub fn permute(self, axes: &[usize]) -> Self {
        let v = self.value().permute(axes);
        let inv = inverse_permutation(axes);
        self.unary(v, move |g| g.permute(&inv))
    }

    /// Transpose of a rank-2 variable.
    pub fn t(self) -> Self {
        self.permute(&[1, 0])
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Self {
        let a = self.value();
        let shape = a.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut v = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            v.extend_from_slice(&a.data()[base..base + len * inner]);
        }
        let v = Tensor::new(&out_shape, v).expect("narrow");
        self.unary(v, move |g| {
            let mut full = Tensor::zeros(&shape);
            for o in 0..outer {
                let base = (o * shape[axis] + start) * inner;
                full.data_mut()[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            full
        })
    }

    /// Concatenation along `axis`.
    pub fn concat(parts: &[Self], axis: usize) -> Self {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        for v in &values {
            assert_eq!(v.shape().len(), base.len(), "concat rank");
            for (d, (&x, &y)) in v.shape().iter().zip(&base).enumerate() {
                assert!(d == axis || x == y, "concat: incompatible shapes");
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &s) in values.iter().zip(&sizes) {
                data.extend_from_slice(&v.data()[o * s * inner..(o + 1) * s * inner]);
            }
        }
        let value = Tensor::new(&out_shape, data).expect("concat");
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        tape.push(
            value,
            parts.iter().map(|p| p.id).collect(),
            Some(Box::new(move |g| {
                let mut grads: Vec<Vec<T>> = sizes.iter().map(|&s| Vec::with_capacity(outer * s * inner)).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gv, &s) in grads.iter_mut().zip(&sizes) {
                        gv.extend_from_slice(&g.data()[off..off + s * inner]);
                        off += s * inner;
                    }
                }
                grads.into_iter().zip(&shapes).map(|(d, s)| Tensor::new(s, d).expect("concat grad")).collect()
            })),
        )
    }

    /// Rows of a rank-2 variable picked by index (repeats allowed).
    pub fn gather_rows(self, idx: &[usize]) -> Self {
        let a = self.value();
        assert_eq!(a.shape().len(), 2, "gather_rows needs rank 2");
        let (n, k) = (a.dim(0), a.dim(1));
        let idx: Vec<usize> = idx.to_vec();
        let mut data = Vec::with_capacity(idx.len() * k);
        for &r in &idx {
            assert!(r < n, "gather_rows index out of range");
            data.extend_from_slice(&a.data()[r * k..(r + 1) * k]);
        }
        let v = Tensor::new(&[idx.len(), k], data).expect("gather");
        self.unary(v, move |g| {
            let mut full = Tensor::zeros(&[n, k]);
            for (i, &r) in idx.iter().enumerate() {
                for j in 0..k {
                    full.data_mut()[r * k + j] = full.data()[r * k + j] + g.data()[i * k + j];
                }
            }
            full
        })
    }

    /// Batched matrix product `[B, M, K] x [B, K, N] -> [B, M, N]`; rank-2 operands are one batch.
    pub fn matmul(self, o: Self) -> Self {
        let (a, b) = (self.value(), o.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let (batch, m, k, n, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) => {
                assert_eq!(sa[1], sb[0], "matmul inner dims");
                (1, sa[0], sa[1], sb[1], vec![sa[0], sb[1]])
            }
            (3, 3) => {
                assert_eq!(sa[0], sb[0], "matmul batch dims");
                assert_eq!(sa[2], sb[1], "matmul inner dims");
                (sa[0], sa[1], sa[2], sb[2], vec![sa[0], sa[1], sb[2]])
            }
            _ => panic!("matmul expects rank-2 or rank-3 operands, got {sa:?} x {sb:?}"),
        };
        let v = batched_matmul(a.data(), b.data(), batch, m, k, n, false, false);
        let v = Tensor::new(&out_shape, v).expect("matmul");
        self.binary(o, v, move |g| {
            // dA = G B^T, dB = A^T G
            let ga = batched_matmul(g.data(), b.data(), batch, m, n, k, false, true);
            let gb = batched_matmul(a.data(), g.data(), batch, k, m, n, true, false);
            (Tensor::new(&sa, ga).expect("matmul ga"), Tensor::new(&sb, gb).expect("matmul gb"))
        })
    }

    pub fn softmax_last(self) -> Self {
        let a = self.value();
        let k = *a.shape().last().expect("softmax of rank-0");
        let mut y = (*a).clone();
        for row in y.data_mut().chunks_mut(k) {
            let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let yc = Rc::new(y.clone());
        self.unary(y, move |g| {
            let mut out = g.clone();
            for (orow, yrow) in out.data_mut().chunks_mut(k).zip(yc.data().chunks(k)) {
                let dot: T = orow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                for (o, &y) in orow.iter_mut().zip(yrow) {
                    *o = y * (*o - dot);
                }
            }
            out
        })
    }

    pub fn log_softmax_last(self) -> Self {
        let a = self.value();
        let k = *a.shape().last().expect("log_softmax of rank-0");
        let mut y = (*a).clone();
        for row in y.data_mut().chunks_mut(k) {
            let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let yc = Rc::new(y.clone());
        self.unary(y, move |g| {
            let mut out = g.clone();
            for (orow, yrow) in out.data_mut().chunks_mut(k).zip(yc.data().chunks(k)) {
                let s: T = orow.iter().copied().sum();
                for (o, &y) in orow.iter_mut().zip(yrow) {
                    *o = *o - y.exp() * s;
                }
            }
            out
        })
    }

    /// 2D convolution of a `[C, H, W]` map with `[O, C/groups, k, k]` weights.
    pub fn conv2d(self, weight: Self, bias: Option<Self>, stride: usize, pad: usize, groups: usize, pad_mode: PadMode) -> Self {
        let x = self.value();
        let w = weight.value();
        let (xs, ws) = (x.shape().to_vec(), w.shape().to_vec());
        assert_eq!(xs.len(), 3, "conv2d input must be [C, H, W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [O, C/g, k, k]");
        assert_eq!(ws[2], ws[3], "square kernels only");
        assert_eq!(xs[0] % groups, 0, "channels not divisible by groups");
        assert_eq!(ws[1] * groups, xs[0], "conv2d channel mismatch");
        let geom = ConvGeom {
            in_ch: xs[0],
            out_ch: ws[0],
            height: xs[1],
            width: xs[2],
            kernel: ws[2],
            stride,
            pad,
            groups,
            pad_mode,
        };
        let (oh, ow) = geom.out_hw();
        let bvals = bias.map(|b| b.value());
        let out = conv2d_forward(&geom, x.data(), w.data(), bvals.as_deref().map(|b| b.data()));
        let value = Tensor::new(&[geom.out_ch, oh, ow], out).expect("conv2d");
        let mut parents = vec![self.id, weight.id];
        if let Some(b) = bias {
            parents.push(b.id);
        }
        let has_bias = bias.is_some();
        self.tape.push(
            value,
            parents,
            Some(Box::new(move |g| {
                let (gx, gw, gb) = conv2d_backward(&geom, x.data(), w.data(), g.data());
                let mut out = vec![Tensor::new(&xs, gx).expect("gx"), Tensor::new(&ws, gw).expect("gw")];
                if has_bias {
                    out.push(Tensor::new(&[geom.out_ch], gb).expect("gb"));
                }
                out
            })),
        )
    }

    /// Adds a per-channel bias `[C]` to a `[C, ...]` variable.
    pub fn add_channel_bias(self, bias: Self) -> Self {
        let (x, b) = (self.value(), bias.value());
        let c = x.dim(0);
        assert_eq!(b.shape(), &[c], "channel bias length");
        let inner = x.len() / c;
        let v = Tensor::from_fn(x.shape(), |i| x.data()[i] + b.data()[i / inner]);
        self.binary(bias, v, move |g| {
            let gb = Tensor::from_fn(&[c], |ch| g.data()[ch * inner..(ch + 1) * inner].iter().copied().sum());
            (g.clone(), gb)
        })
    }

    /// Normalizes every position of a `[C, ...]` variable over its channels.
    pub fn layer_norm_channels(self, gamma: Self, beta: Self, eps: f64) -> Self {
        let x = self.value();
        let c = x.dim(0);
        let n = x.len() / c;
        let eps = T::lit(eps);
        let cf = T::from_usize_lossy(c);
        let (gv, bv) = (gamma.value(), beta.value());
        assert_eq!(gv.shape(), &[c], "layer norm gamma");
        assert_eq!(bv.shape(), &[c], "layer norm beta");
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); n];
        for p in 0..n {
            let mean = (0..c).map(|ch| x.data()[ch * n + p]).sum::<T>() / cf;
            let var = (0..c).map(|ch| (x.data()[ch * n + p] - mean).powi(2)).sum::<T>() / cf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[p] = is;
            for ch in 0..c {
                xhat[ch * n + p] = (x.data()[ch * n + p] - mean) * is;
            }
        }
        let y = Tensor::from_fn(x.shape(), |i| xhat[i] * gv.data()[i / n] + bv.data()[i / n]);
        let shape = x.shape().to_vec();
        self.tape.push(
            y,
            vec![self.id, gamma.id, beta.id],
            Some(Box::new(move |g| {
                let gd = g.data();
                let mut gx = vec![T::zero(); gd.len()];
                let mut ggamma = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                for p in 0..n {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for ch in 0..c {
                        let i = ch * n + p;
                        let dxh = gd[i] * gv.data()[ch];
                        s1 = s1 + dxh;
                        s2 = s2 + dxh * xhat[i];
                        ggamma[ch] = ggamma[ch] + gd[i] * xhat[i];
                        gbeta[ch] = gbeta[ch] + gd[i];
                    }
                    for ch in 0..c {
                        let i = ch * n + p;
                        let dxh = gd[i] * gv.data()[ch];
                        gx[i] = inv_std[p] * (dxh - s1 / cf - xhat[i] * s2 / cf);
                    }
                }
                vec![
                    Tensor::new(&shape, gx).expect("ln gx"),
                    Tensor::new(&[c], ggamma).expect("ln gg"),
                    Tensor::new(&[c], gbeta).expect("ln gb"),
                ]
            })),
        )
    }

    /// Nearest-neighbour 2x upsampling of a `[C, H, W]` map.
    pub fn upsample2(self) -> Self {
        let x = self.value();
        let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
        let v = Tensor::from_fn(&[c, 2 * h, 2 * w], |i| {
            let ch = i / (4 * h * w);
            let r = (i / (2 * w)) % (2 * h);
            let col = i % (2 * w);
            x.data()[(ch * h + r / 2) * w + col / 2]
        });
        self.unary(v, move |g| {
            let mut out = Tensor::zeros(&[c, h, w]);
            for ch in 0..c {
                for r in 0..2 * h {
                    for col in 0..2 * w {
                        let o = (ch * h + r / 2) * w + col / 2;
                        out.data_mut()[o] = out.data()[o] + g.data()[(ch * 2 * h + r) * 2 * w + col];
                    }
                }
            }
            out
        })
    }

    /// Rotates consecutive feature pairs of an `[N, d]` variable: row `n`, pair `j` turns by `angles[n][j]`.
    pub fn rotate_pairs(self, angles: Rc<Tensor<T>>) -> Self {
        let x = self.value();
        let (n, d) = (x.dim(0), x.dim(1));
        assert_eq!(d % 2, 0, "rotate_pairs needs an even feature dim");
        assert_eq!(angles.shape(), &[n, d / 2], "rotate_pairs angle table");
        let rot = move |src: &Tensor<T>, sign: T| {
            let mut out = src.clone();
            for r in 0..n {
                for j in 0..d / 2 {
                    let th = angles.data()[r * (d / 2) + j] * sign;
                    let (s, c) = th.sin_cos();
                    let a = src.data()[r * d + 2 * j];
                    let b = src.data()[r * d + 2 * j + 1];
                    out.data_mut()[r * d + 2 * j] = a * c - b * s;
                    out.data_mut()[r * d + 2 * j + 1] = a * s + b * c;
                }
            }
            out
        };
        let v = rot(&x, T::one());
        self.unary(v, move |g| rot(g, -T::one()))
    }
}
