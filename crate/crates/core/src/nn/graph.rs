//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied during one forward pass. Parameter
//! leaves borrow their values from a [`ParamSet`]; everything else is owned
//! by the tape. [`Graph::backward`] walks the tape once in reverse.

use std::collections::HashMap;

use super::kernels;
use super::params::{ParamId, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Epsilon added to the variance in layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Lower bound of the norm in L2 normalization.
pub const L2_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    AddRows(Var, Var),
    MulRows(Var, Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool, m: usize, n: usize, k: usize },
    Conv1x1 { x: Var, w: Var },
    DwConv3 { x: Var, w: Var },
    Conv3 { x: Var, w: Var, stride: usize },
    Upsample2(Var),
    PixelShuffle(Var),
    PixelUnshuffle(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Reshape(Var),
    Transpose(Var),
    Softmax(Var),
    LogSoftmax(Var),
    L2NormRows { x: Var, norms: Vec<T> },
    LayerNormCols { x: Var, rstd: Vec<T> },
    Gelu(Var),
    Exp(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    MeanCols(Var),
    L1 { a: Var, b: Var },
    Pick { x: Var, cols: Vec<usize> },
    SoftThreshold { x: Var, t: T },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    by_node: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a trainable parameter, `None` if it did not take part.
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(&id).and_then(|&n| self.by_node[n].as_deref())
    }

    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.by_node.get(v.0).and_then(|g| g.as_deref())
    }
}

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    kinks: Vec<bool>,
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Graph { params, nodes: Vec::new(), param_vars: HashMap::new(), kinks: Vec::new() }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Which side of each non-differentiable point (|r| in L1, the
    /// threshold in soft-thresholding) every element landed on, in op order.
    pub fn kink_signature(&self) -> &[bool] {
        &self.kinks
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.tensor(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: Some(t), op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient without being a parameter.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: Some(t), op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let trainable = self.params.get(id).trainable;
        self.nodes.push(Node { value: None, op: Op::Param(id), needs_grad: trainable });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let ta = self.value(a);
        Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| f(*x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.map(a, |x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    /// `s · a` where `s` holds exactly one value.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err(format!("mul_scalar: factor has shape {:?}", self.shape(s))));
        }
        let sv = self.value(s).item();
        let v = self.map(a, |x| x * sv);
        Ok(self.push(v, Op::MulScalar(a, s), &[a, s]))
    }

    fn row_broadcast_check(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(b).len() != self.value(a).rows() {
            return Err(shape_err(format!(
                "{what}: {} row values for leading axis {:?}",
                self.value(b).len(),
                self.shape(a)
            )));
        }
        Ok(())
    }

    /// `a[r, ..] + b[r]`: per-channel bias for `[C,H,W]`, per-row for matrices.
    pub fn add_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast_check(a, b, "add_rows")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let cols = ta.cols();
        let data = ta.data().iter().enumerate().map(|(i, x)| *x + tb.data()[i / cols]).collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(v, Op::AddRows(a, b), &[a, b]))
    }

    /// `a[r, ..] · b[r]`.
    pub fn mul_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast_check(a, b, "mul_rows")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let cols = ta.cols();
        let data = ta.data().iter().enumerate().map(|(i, x)| *x * tb.data()[i / cols]).collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(v, Op::MulRows(a, b), &[a, b]))
    }

    /// `op(a) · op(b)`, both viewed as `[rows, cols]` matrices.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (ar, ac) = (va.rows(), va.cols());
        let (br, bc) = (vb.rows(), vb.cols());
        let (m, ka) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        if ka != kb {
            return Err(shape_err(format!("matmul: {:?}{} x {:?}{}", va.shape(), if ta { "ᵀ" } else { "" }, vb.shape(), if tb { "ᵀ" } else { "" })));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(m, n, ka, va.data(), ta, vb.data(), tb, &mut out, false);
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push(v, Op::MatMul { a, b, ta, tb, m, n, k: ka }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    fn feature_dims(&self, x: Var, what: &str) -> Result<(usize, usize, usize)> {
        match *self.shape(x) {
            [c, h, w] => Ok((c, h, w)),
            ref s => Err(shape_err(format!("{what}: expected [C,H,W], got {s:?}"))),
        }
    }

    /// Pointwise convolution: `w` is `[Cout, Cin]`, `x` is `[Cin,H,W]`.
    pub fn conv1x1(&mut self, x: Var, w: Var) -> Result<Var> {
        let (c, h, wd) = self.feature_dims(x, "conv1x1")?;
        let wt = self.value(w);
        if wt.shape().len() != 2 || wt.shape()[1] != c {
            return Err(shape_err(format!("conv1x1: weight {:?} for {c} input channels", wt.shape())));
        }
        let co = wt.shape()[0];
        let mut out = vec![T::zero(); co * h * wd];
        kernels::gemm(co, h * wd, c, wt.data(), false, self.value(x).data(), false, &mut out, false);
        let v = Tensor::new(vec![co, h, wd], out)?;
        Ok(self.push(v, Op::Conv1x1 { x, w }, &[x, w]))
    }

    /// 3×3 depth-wise convolution, `w` is `[C,3,3]`.
    pub fn dwconv3(&mut self, x: Var, w: Var) -> Result<Var> {
        let (c, h, wd) = self.feature_dims(x, "dwconv3")?;
        if self.shape(w) != [c, 3, 3] {
            return Err(shape_err(format!("dwconv3: weight {:?} for {c} channels", self.shape(w))));
        }
        let mut out = vec![T::zero(); c * h * wd];
        kernels::dwconv3(self.value(x).data(), self.value(w).data(), c, h, wd, &mut out);
        let v = Tensor::new(vec![c, h, wd], out)?;
        Ok(self.push(v, Op::DwConv3 { x, w }, &[x, w]))
    }

    /// Dense 3×3 convolution with zero padding 1, `w` is `[Cout,Cin,3,3]`.
    pub fn conv3(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (c, h, wd) = self.feature_dims(x, "conv3")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != c || ws[2] != 3 || ws[3] != 3 {
            return Err(shape_err(format!("conv3: weight {ws:?} for {c} input channels")));
        }
        if stride == 0 {
            return Err(shape_err("conv3: zero stride".into()));
        }
        let (ho, wo) = (kernels::conv_out_dim(h, stride), kernels::conv_out_dim(wd, stride));
        let cols = kernels::im2col3(self.value(x).data(), c, h, wd, stride);
        let mut out = vec![T::zero(); ws[0] * ho * wo];
        kernels::gemm(ws[0], ho * wo, c * 9, self.value(w).data(), false, &cols, false, &mut out, false);
        let v = Tensor::new(vec![ws[0], ho, wo], out)?;
        Ok(self.push(v, Op::Conv3 { x, w, stride }, &[x, w]))
    }

    /// Nearest-neighbour upsampling by 2.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.feature_dims(x, "upsample2")?;
        let src = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[ch * h2 * w2 + y * w2 + xx] = src[ch * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let v = Tensor::new(vec![c, h2, w2], out)?;
        Ok(self.push(v, Op::Upsample2(x), &[x]))
    }

    /// `[4C,H,W] → [C,2H,2W]`.
    pub fn pixel_shuffle(&mut self, x: Var) -> Result<Var> {
        let (c4, h, w) = self.feature_dims(x, "pixel_shuffle")?;
        if c4 % 4 != 0 {
            return Err(shape_err(format!("pixel_shuffle: {c4} channels not divisible by 4")));
        }
        let c = c4 / 4;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c4 * h * w];
        for (o, s) in shuffle_index(c, h, w) {
            out[o] = src[s];
        }
        let v = Tensor::new(vec![c, 2 * h, 2 * w], out)?;
        Ok(self.push(v, Op::PixelShuffle(x), &[x]))
    }

    /// `[C,2H,2W] → [4C,H,W]`.
    pub fn pixel_unshuffle(&mut self, x: Var) -> Result<Var> {
        let (c, h2, w2) = self.feature_dims(x, "pixel_unshuffle")?;
        if h2 % 2 != 0 || w2 % 2 != 0 {
            return Err(shape_err(format!("pixel_unshuffle: odd extent {h2}x{w2}")));
        }
        let (h, w) = (h2 / 2, w2 / 2);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c * h2 * w2];
        for (o, s) in shuffle_index(c, h, w) {
            out[s] = src[o];
        }
        let v = Tensor::new(vec![4 * c, h, w], out)?;
        Ok(self.push(v, Op::PixelUnshuffle(x), &[x]))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s[1..] != first[1..] {
                return Err(shape_err(format!("concat: {:?} vs {:?}", s, first)));
            }
            rows += s[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = first;
        shape[0] = rows;
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::Concat(xs.to_vec()), xs))
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.rows() || len == 0 {
            return Err(shape_err(format!("slice {start}..{} of {:?}", start + len, t.shape())));
        }
        let cols = t.cols();
        let data = t.data()[start * cols..(start + len) * cols].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::Slice { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// `[R, C] → [C, R]`.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let v = Tensor::new(vec![c, r], (0..r * c).map(|i| t.data()[(i % r) * c + i / r]).collect())?;
        Ok(self.push(v, Op::Transpose(x), &[x]))
    }

    /// Softmax over the trailing axes of each row.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cols = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let v = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(v, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cols = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|v| (*v - m).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let v = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(v, Op::LogSoftmax(x), &[x])
    }

    /// Divides each row by its L2 norm (floored at [`L2_NORM_EPS`]).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cols = t.cols();
        let eps = T::of(L2_NORM_EPS);
        let mut out = t.data().to_vec();
        let mut norms = Vec::with_capacity(t.rows());
        for row in out.chunks_mut(cols) {
            let n = row.iter().map(|v| *v * *v).sum::<T>().sqrt().max(eps);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let v = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(v, Op::L2NormRows { x, norms }, &[x])
    }

    /// Normalizes every column over the leading axis (zero mean, unit
    /// variance, no affine). For `[C,H,W]` this is per-pixel channel norm.
    pub fn layer_norm_cols(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, n) = (t.rows(), t.cols());
        let src = t.data();
        let rf = T::of(r as f64);
        let eps = T::of(LAYER_NORM_EPS);
        let mut mean = vec![T::zero(); n];
        for row in src.chunks(n) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += *v);
        }
        mean.iter_mut().for_each(|m| *m /= rf);
        let mut var = vec![T::zero(); n];
        for row in src.chunks(n) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                let d = *v - *m;
                *s += d * d;
            }
        }
        let rstd: Vec<T> = var.iter().map(|s| T::one() / (*s / rf + eps).sqrt()).collect();
        let mut out = src.to_vec();
        for row in out.chunks_mut(n) {
            for ((v, m), rs) in row.iter_mut().zip(&mean).zip(&rstd) {
                *v = (*v - *m) * *rs;
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(v, Op::LayerNormCols { x, rstd }, &[x])
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let r2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
        let half = T::of(0.5);
        let v = self.map(x, |a| half * a * (T::one() + (a * r2).erf()));
        self.push(v, Op::Gelu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| a.exp());
        self.push(v, Op::Exp(x), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.map(x, softplus);
        self.push(v, Op::Softplus(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::of(t.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean over trailing axes: `[C,H,W] → [C,1]` (global average pool).
    pub fn mean_cols(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, n) = (t.rows(), t.cols());
        let nf = T::of(n as f64);
        let data = t.data().chunks(n).map(|row| row.iter().copied().sum::<T>() / nf).collect();
        let v = Tensor::new(vec![r, 1], data).expect("rows");
        self.push(v, Op::MeanCols(x), &[x])
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "l1_loss")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n = T::of(ta.len() as f64);
        let mut s = T::zero();
        let mut signs = Vec::with_capacity(ta.len());
        for (x, y) in ta.data().iter().zip(tb.data()) {
            s += (*x - *y).abs();
            signs.push(*x > *y);
        }
        self.kinks.extend(signs);
        Ok(self.push(Tensor::scalar(s / n), Op::L1 { a, b }, &[a, b]))
    }

    /// `x[r, cols[r]]` for each row: `[R, C] → [R, 1]`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if cols.len() != r || cols.iter().any(|&j| j >= c) {
            return Err(shape_err(format!("pick: {} indices into {:?}", cols.len(), t.shape())));
        }
        let data = cols.iter().enumerate().map(|(i, &j)| t.data()[i * c + j]).collect();
        let v = Tensor::new(vec![r, 1], data)?;
        Ok(self.push(v, Op::Pick { x, cols: cols.to_vec() }, &[x]))
    }

    /// `sign(x)·max(|x| − t, 0)` elementwise.
    pub fn soft_threshold(&mut self, x: Var, t: T) -> Var {
        let v = self.map(x, |a| soft_threshold(a, t));
        let kinks: Vec<bool> = self.value(x).data().iter().map(|a| a.abs() > t).collect();
        self.kinks.extend(kinks);
        self.push(v, Op::SoftThreshold { x, t }, &[x])
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(format!("backward from non-scalar {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .param_vars
            .iter()
            .filter(|(_, v)| self.nodes[v.0].needs_grad)
            .map(|(id, v)| (*id, v.0))
            .collect();
        Ok(Gradients { by_node: grads, params })
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = self.nodes[idx].value.as_ref();
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.grad_buf(grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += *g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.grad_buf(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += *g);
                }
                if let Some(d) = self.grad_buf(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= *g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.grad_buf(grads, *a) {
                    for i in 0..d.len() {
                        d[i] += g[i] * vb[i];
                    }
                }
                if let Some(d) = self.grad_buf(grads, *b) {
                    for i in 0..d.len() {
                        d[i] += g[i] * va[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(d) = self.grad_buf(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += *g * *s);
                }
            }
            Op::MulScalar(a, s) => {
                let sv = self.value(*s).item();
                let va = self.value(*a).data();
                if let Some(d) = self.grad_buf(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += *g * sv);
                }
                if let Some(d) = self.grad_buf(grads, *s) {
                    d[0] += g.iter().zip(va).map(|(g, x)| *g * *x).sum::<T>();
                }
            }
            Op::AddRows(a, b) => {
                let cols = self.value(*a).cols();
                if let Some(d) = self.grad_buf(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += *g);
                }
                if let Some(d) = self.grad_buf(grads, *b) {
                    for (r, row) in g.chunks(cols).enumerate() {
                        d[r] += row.iter().copied().sum::<T>();
                    }
                }
            }
            Op::MulRows(a, b) => {
                let cols = self.value(*a).cols();
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.grad_buf(grads, *a) {
                    for i in 0..d.len() {
                        d[i] += g[i] * vb[i / cols];
                    }
                }
                if let Some(d) = self.grad_buf(grads, *b) {
                    for (r, (grow, arow)) in g.chunks(cols).zip(va.chunks(cols)).enumerate() {
                        d[r] += grow.iter().zip(arow).map(|(x, y)| *x * *y).sum::<T>();
                    }
                }
            }
            Op::MatMul { a, b, ta, tb, m, n, k } => {
                let (m, n, k) = (*m, *n, *k);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.grad_buf(grads, *a) {
                    // d has the stored layout of a.
                    match (*ta, *tb) {
                        (false, false) => kernels::gemm(m, k, n, g, false, vb, true, d, true),
                        (false, true) => kernels::gemm(m, k, n, g, false, vb, false, d, true),
                        (true, false) => kernels::gemm(k, m, n, vb, false, g, true, d, true),
                        (true, true) => kernels::gemm(k, m, n, vb, true, g, true, d, true),
                    }
                }
                if let Some(d) = self.grad_buf(grads, *b) {
                    match (*ta, *tb) {
                        (false, false) => kernels::gemm(k, n, m, va, true, g, false, d, true),
                        (false, true) => kernels::gemm(n, k, m, g, true, va, false, d, true),
                        (true, false) => kernels::gemm(k, n, m, va, false, g, false, d, true),
                        (true, true) => kernels::gemm(n, k, m, g, true, va, true, d, true),
                    }
                }
            }
            Op::Conv1x1 { x, w } => {
                let wt = self.value(*w);
                let (co, ci) = (wt.shape()[0], wt.shape()[1]);
                let xs = self.value(*x);
                let hw = xs.cols();
                if let Some(d) = self.grad_buf(grads, *x) {
                    kernels::gemm(ci, hw, co, wt.data(), true, g, false, d, true);
                }
                if let Some(d) = self.grad_buf(grads, *w) {
                    kernels::gemm(co, ci, hw, g, false, xs.data(), true, d, true);
                }
            }
            Op::DwConv3 { x, w } => {
                let xs = self.value(*x);
                let (c, h, wd) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
                let wv = self.value(*w).data();
                let need_x = self.nodes[x.0].needs_grad;
                let need_w = self.nodes[w.0].needs_grad;
                let mut dx = need_x.then(|| vec![T::zero(); xs.len()]);
                let mut dw = need_w.then(|| vec![T::zero(); wv.len()]);
                kernels::dwconv3_backward(xs.data(), wv, g, c, h, wd, dx.as_deref_mut(), dw.as_deref_mut());
                if let (Some(d), Some(src)) = (self.grad_buf(grads, *x), dx) {
                    d.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
                if let (Some(d), Some(src)) = (self.grad_buf(grads, *w), dw) {
                    d.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
            Op::Conv3 { x, w, stride } => {
                let xs = self.value(*x);
                let (c, h, wd) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
                let wt = self.value(*w);
                let co = wt.shape()[0];
                let npix = g.len() / co;
                if self.nodes[w.0].needs_grad {
                    let cols = kernels::im2col3(xs.data(), c, h, wd, *stride);
                    let d = self.grad_buf(grads, *w).expect("needs grad");
                    kernels::gemm(co, c * 9, npix, g, false, &cols, true, d, true);
                }
                if self.nodes[x.0].needs_grad {
                    let mut dcols = vec![T::zero(); c * 9 * npix];
                    kernels::gemm(c * 9, npix, co, wt.data(), true, g, false, &mut dcols, false);
                    let d = self.grad_buf(grads, *x).expect("needs grad");
                    kernels::col2im3(&dcols, c, h, wd, *stride, d);
                }
            }
            Op::Upsample2(x) => {
                let xs = self.value(*x);
                let (c, h, w) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
                if let Some(d) = self.grad_buf(grads, *x) {
                    let (h2, w2) = (2 * h, 2 * w);
                    for ch in 0..c {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                d[ch * h * w + (y / 2) * w + xx / 2] += g[ch * h2 * w2 + y * w2 + xx];
                            }
                        }
                    }
                }
            }
            Op::PixelShuffle(x) => {
                let s = self.value(*x).shape().to_vec();
                if let Some(d) = self.grad_buf(grads, *x) {
                    for (o, src) in shuffle_index(s[0] / 4, s[1], s[2]) {
                        d[src] += g[o];
                    }
                }
            }
            Op::PixelUnshuffle(x) => {
                let s = out.expect("owned").shape().to_vec();
                if let Some(d) = self.grad_buf(grads, *x) {
                    for (o, src) in shuffle_index(s[0] / 4, s[1], s[2]) {
                        d[o] += g[src];
                    }
                }
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    if let Some(d) = self.grad_buf(grads, x) {
                        d.iter_mut().zip(&g[off..off + n]).for_each(|(d, g)| *d += *g);
                    }
                    off += n;
                }
            }
            Op::Slice { x, start } => {
                let cols = self.value(*x).cols();
                if let Some(d) = self.grad_buf(grads, *x) {
                    let off = start * cols;
                    d[off..off + g.len()].iter_mut().zip(g).for_each(|(d, g)| *d += *g);
                }
            }
            Op::Transpose(x) => {
                let t = self.value(*x);
                let (r, c) = (t.rows(), t.cols());
                if let Some(d) = self.grad_buf(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = self.grad_buf(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += *g);
                }
            }
            Op::Softmax(x) => {
                let y = out.expect("owned");
                let cols = y.cols();
                if let Some(d) = self.grad_buf(grads, *x) {
                    for ((drow, grow), yrow) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.data().chunks(cols)) {
                        let dot: T = grow.iter().zip(yrow).map(|(a, b)| *a * *b).sum();
                        for j in 0..cols {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let y = out.expect("owned");
                let cols = y.cols();
                if let Some(d) = self.grad_buf(grads, *x) {
                    for ((drow, grow), yrow) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.data().chunks(cols)) {
                        let gs: T = grow.iter().copied().sum();
                        for j in 0..cols {
                            drow[j] += grow[j] - yrow[j].exp() * gs;
                        }
                    }
                }
            }
            Op::L2NormRows { x, norms } => {
                let y = out.expect("owned");
                let cols = y.cols();
                let eps = T::of(L2_NORM_EPS);
                if let Some(d) = self.grad_buf(grads, *x) {
                    for (r, ((drow, grow), yrow)) in
                        d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.data().chunks(cols)).enumerate()
                    {
                        let n = norms[r];
                        if n <= eps {
                            drow.iter_mut().zip(grow).for_each(|(d, g)| *d += *g / n);
                            continue;
                        }
                        let dot: T = grow.iter().zip(yrow).map(|(a, b)| *a * *b).sum();
                        for j in 0..cols {
                            drow[j] += (grow[j] - yrow[j] * dot) / n;
                        }
                    }
                }
            }
            Op::LayerNormCols { x, rstd } => {
                let y = out.expect("owned");
                let (r, n) = (y.rows(), y.cols());
                let rf = T::of(r as f64);
                if let Some(d) = self.grad_buf(grads, *x) {
                    let mut gsum = vec![T::zero(); n];
                    let mut gy = vec![T::zero(); n];
                    for (grow, yrow) in g.chunks(n).zip(y.data().chunks(n)) {
                        for j in 0..n {
                            gsum[j] += grow[j];
                            gy[j] += grow[j] * yrow[j];
                        }
                    }
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.data().chunks(n)) {
                        for j in 0..n {
                            drow[j] += rstd[j] / rf * (rf * grow[j] - gsum[j] - yrow[j] * gy[j]);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xs = self.value(*x).data();
                let r2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let half = T::of(0.5);
                if let Some(d) = self.grad_buf(grads, *x) {
                    for i in 0..d.len() {
                        let a = xs[i];
                        let cdf = half * (T::one() + (a * r2).erf());
                        let pdf = inv_sqrt_2pi * (-half * a * a).exp();
                        d[i] += g[i] * (cdf + a * pdf);
                    }
                }
            }
            Op::Exp(x) => {
                let y = out.expect("owned").data();
                if let Some(d) = self.grad_buf(grads, *x) {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i];
                    }
                }
            }
            Op::Softplus(x) => {
                let xs = self.value(*x).data();
                if let Some(d) = self.grad_buf(grads, *x) {
                    for i in 0..d.len() {
                        d[i] += g[i] * sigmoid(xs[i]);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.grad_buf(grads, *x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = T::of(self.value(*x).len() as f64);
                if let Some(d) = self.grad_buf(grads, *x) {
                    d.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::MeanCols(x) => {
                let n = self.value(*x).cols();
                let nf = T::of(n as f64);
                if let Some(d) = self.grad_buf(grads, *x) {
                    for (r, row) in d.chunks_mut(n).enumerate() {
                        row.iter_mut().for_each(|d| *d += g[r] / nf);
                    }
                }
            }
            Op::L1 { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let n = T::of(va.len() as f64);
                let sign = |i: usize| {
                    let r = va[i] - vb[i];
                    if r > T::zero() {
                        T::one()
                    } else if r < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                };
                if let Some(d) = self.grad_buf(grads, *a) {
                    for i in 0..d.len() {
                        d[i] += g[0] * sign(i) / n;
                    }
                }
                if let Some(d) = self.grad_buf(grads, *b) {
                    for i in 0..d.len() {
                        d[i] -= g[0] * sign(i) / n;
                    }
                }
            }
            Op::Pick { x, cols } => {
                let c = self.value(*x).cols();
                if let Some(d) = self.grad_buf(grads, *x) {
                    for (i, &j) in cols.iter().enumerate() {
                        d[i * c + j] += g[i];
                    }
                }
            }
            Op::SoftThreshold { x, t } => {
                let xs = self.value(*x).data();
                if let Some(d) = self.grad_buf(grads, *x) {
                    for i in 0..d.len() {
                        if xs[i].abs() > *t {
                            d[i] += g[i];
                        }
                    }
                }
            }
        }
    }
}

/// `(output index, input index)` pairs of a factor-2 pixel shuffle from
/// `[4C,H,W]` to `[C,2H,2W]`.
fn shuffle_index(c: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let (h2, w2) = (2 * h, 2 * w);
    (0..c).flat_map(move |ch| {
        (0..h2).flat_map(move |y| {
            (0..w2).map(move |x| {
                let sub = (y % 2) * 2 + x % 2;
                let src = (ch * 4 + sub) * h * w + (y / 2) * w + x / 2;
                (ch * h2 * w2 + y * w2 + x, src)
            })
        })
    })
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (T::one() + (-x.abs()).exp()).ln()
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn soft_threshold<T: Scalar>(x: T, t: T) -> T {
    let m = x.abs() - t;
    if m > T::zero() {
        x.signum() * m
    } else {
        T::zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph_with_input(params: &ParamSet<f64>) -> Graph<'_, f64> {
        Graph::new(params)
    }

    #[test]
    fn gelu_at_zero_is_zero() {
        let p = ParamSet::new();
        let mut g = graph_with_input(&p);
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.gelu(x);
        assert_eq!(g.value(y).item(), 0.0);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let p = ParamSet::new();
        let mut g = graph_with_input(&p);
        let x = g.constant(Tensor::full(&[6, 1], 3.25));
        let y = g.layer_norm_cols(x);
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let p = ParamSet::new();
        let mut g = graph_with_input(&p);
        let x = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn pixel_shuffle_inverts_unshuffle() {
        let p = ParamSet::new();
        let mut g = graph_with_input(&p);
        let t = Tensor::from_fn(&[2, 4, 6], |i| i as f64);
        let x = g.constant(t.clone());
        let u = g.pixel_unshuffle(x).unwrap();
        assert_eq!(g.shape(u), &[8, 2, 3]);
        let s = g.pixel_shuffle(u).unwrap();
        assert_eq!(g.value(s), &t);
    }

    #[test]
    fn upsample_repeats_pixels() {
        let p = ParamSet::new();
        let mut g = graph_with_input(&p);
        let x = g.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap());
        let y = g.upsample2(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn strided_conv_halves_extent() {
        let mut p = ParamSet::new();
        let w = p.add("w", Tensor::full(&[3, 2, 3, 3], 0.1)).unwrap();
        let mut g = graph_with_input(&p);
        let x = g.constant(Tensor::full(&[2, 8, 6], 1.0));
        let wv = g.param(w);
        let y = g.conv3(x, wv, 2).unwrap();
        assert_eq!(g.shape(y), &[3, 4, 3]);
    }

    #[test]
    fn shape_errors_are_reported() {
        let p = ParamSet::new();
        let mut g = graph_with_input(&p);
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.add(a, b).is_err());
        assert!(g.matmul(a, a).is_err());
        assert!(g.matmul(a, b).is_ok());
    }

    #[test]
    fn transpose_swaps_axes() {
        let p = ParamSet::new();
        let mut g = graph_with_input(&p);
        let x = g.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let t = g.transpose(x).unwrap();
        assert_eq!(g.shape(t), &[3, 2]);
        assert_eq!(g.value(t).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn soft_threshold_definition() {
        assert_eq!(soft_threshold(1.5, 1.0), 0.5);
        assert_eq!(soft_threshold(-0.3, 1.0), 0.0);
        assert_eq!(soft_threshold(-2.0, 0.5), -1.5);
    }
}
