//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly: each call computes its
//! output immediately and pushes a node onto the tape. [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients. A graph is built
//! for one forward pass and then dropped.
//!
//! Shapes follow a small set of conventions: most ops treat tensors as
//! row-major matrices whose last axis is the feature axis; broadcasting is
//! limited to a row vector over rows ([`Graph::add_row`]), a column vector
//! over columns ([`Graph::mul_col`]) and a single-element tensor
//! ([`Graph::add_scalar`]).

use alloc::vec;
use alloc::vec::Vec;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Epsilon for guarded normalizations (`max(norm, EPS)` denominators).
pub const NORM_EPS: f64 = 1e-8;
/// Variance epsilon inside layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// 2-D convolution geometry for NHWC activations and `[kh, kw, cin, cout]`
/// kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dSpec {
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        if h + 2 * ph < kh || w + 2 * pw < kw || sh == 0 || sw == 0 {
            return None;
        }
        Some(((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1))
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    AddScalar { x: Var, s: Var },
    MulCol { x: Var, w: Var },
    Scale(Var, T),
    Sigmoid(Var),
    Relu(Var),
    Silu(Var),
    Tanh(Var),
    Square(Var),
    SoftmaxRows(Var),
    RmsNorm { x: Var, gain: Var, denom: Vec<T>, guarded: Vec<bool> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    L2NormRows { x: Var, denom: Vec<T>, guarded: Vec<bool> },
    Conv2d { x: Var, w: Var, b: Var, spec: Conv2dSpec, cols: Vec<T> },
    DwConv1d { x: Var, w: Var, b: Var },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SelectRows { x: Var, idx: Vec<usize> },
    SelectCols { x: Var, idx: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    BceLogits { z: Var, target: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when nothing reached `v`.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(shape, g).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

/// Computation tape.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    op_count: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Dimension {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Rows and width of a tensor viewed as `[len / last, last]`.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let c = *shape.last().unwrap_or(&1);
    let n: usize = shape.iter().product();
    (if c == 0 { 0 } else { n / c }, c)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            op_count: 0,
        }
    }

    /// Multiply-accumulate plus elementwise operation count recorded so far.
    pub fn op_count(&self) -> u64 {
        self.op_count
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Shapes of every node on the tape, in creation order.
    pub fn node_shapes(&self) -> impl Iterator<Item = &[usize]> {
        self.nodes.iter().map(|n| n.value.shape())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.op_count += value.len() as u64;
        self.nodes.push(Node { value, op, grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf node. Rejects non-finite data and zero-size dimensions.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if t.shape().contains(&0) || t.rank() == 0 {
            return Err(Error::EmptyDimension {
                op: "leaf",
                shape: t.shape().to_vec(),
            });
        }
        self.push("leaf", t, Op::Leaf, requires_grad)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, t: Tensor<T>) -> Result<Var> {
        self.leaf(t, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.leaf(t, false)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(Error::Rank {
                op,
                expected: 2,
                shape: s.to_vec(),
            }),
        }
    }

    // ---- linear algebra -------------------------------------------------

    /// `a · b` for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, true)
    }

    /// `aᵀ · b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, true, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims2("matmul", a)?;
        let (br, bc) = self.dims2("matmul", b)?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.data(a), ta, self.data(b), tb, &mut out, T::zero());
        self.op_count += (m * k * n) as u64;
        let grad = self.needs(a) || self.needs(b);
        self.push(
            "matmul",
            Tensor::new(&[m, n], out)?,
            Op::MatMul { a, b, ta, tb },
            grad,
        )
    }

    // ---- elementwise ----------------------------------------------------

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        let grad = self.needs(a) || self.needs(b);
        self.push(name, t, op, grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of `x` (`[.., n]`).
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = rows_cols(self.shape(x));
        if self.value(bias).len() != c {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bb)| v + bb))
            .collect();
        let t = Tensor::new(self.shape(x), data)?;
        let grad = self.needs(x) || self.needs(bias);
        self.push("add_row", t, Op::AddRow { x, bias }, grad)
    }

    /// Adds a single-element tensor to every element of `x`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Dimension {
                op: "add_scalar",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let sv = self.data(s)[0];
        let t = self.value(x).map(|v| v + sv);
        let grad = self.needs(x) || self.needs(s);
        self.push("add_scalar", t, Op::AddScalar { x, s }, grad)
    }

    /// Scales row `i` of `x` (`[m, n]`) by `w[i]` (`w` is `[m, 1]`).
    pub fn mul_col(&mut self, x: Var, w: Var) -> Result<Var> {
        let (r, c) = self.dims2("mul_col", x)?;
        if self.shape(w) != [r, 1] {
            return Err(Error::Dimension {
                op: "mul_col",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        let wd = self.data(w);
        let data = self
            .data(x)
            .chunks(c)
            .zip(wd)
            .flat_map(|(row, &s)| row.iter().map(move |&v| v * s))
            .collect();
        let t = Tensor::new(&[r, c], data)?;
        let grad = self.needs(x) || self.needs(w);
        self.push("mul_col", t, Op::MulCol { x, w }, grad)
    }

    pub fn scale(&mut self, x: Var, k: T) -> Result<Var> {
        let t = self.value(x).map(|v| v * k);
        let grad = self.needs(x);
        self.push("scale", t, Op::Scale(x, k), grad)
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let t = self.value(x).map(f);
        let grad = self.needs(x);
        self.push(name, t, op, grad)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(T::zero()), Op::Relu(x))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary("silu", x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, Op::Square(x))
    }

    // ---- normalizations -------------------------------------------------

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = rows_cols(self.shape(x));
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        let grad = self.needs(x);
        self.push("softmax", t, Op::SoftmaxRows(x), grad)
    }

    /// `x / max(rms(x), ε) · gain` along the last axis.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (_, c) = rows_cols(self.shape(x));
        if self.value(gain).len() != c {
            return Err(Error::Dimension {
                op: "rms_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let eps = T::from_f64(NORM_EPS);
        let nf = T::from_f64(c as f64);
        let g = self.data(gain);
        let mut out = Vec::with_capacity(self.value(x).len());
        let mut denom = Vec::new();
        let mut guarded = Vec::new();
        for row in self.data(x).chunks(c) {
            let rms = (row.iter().map(|&v| v * v).sum::<T>() / nf).sqrt();
            let d = rms.max(eps);
            denom.push(d);
            guarded.push(rms <= eps);
            out.extend(row.iter().zip(g).map(|(&v, &gg)| v / d * gg));
        }
        let t = Tensor::new(self.shape(x), out)?;
        let grad = self.needs(x) || self.needs(gain);
        self.push("rms_norm", t, Op::RmsNorm { x, gain, denom, guarded }, grad)
    }

    /// Layer norm along the last axis with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (_, c) = rows_cols(self.shape(x));
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let eps = T::from_f64(LAYER_NORM_EPS);
        let nf = T::from_f64(c as f64);
        let (g, b) = (self.data(gain), self.data(bias));
        let mut out = Vec::with_capacity(self.value(x).len());
        let mut xhat = Vec::with_capacity(self.value(x).len());
        let mut inv_std = Vec::new();
        for row in self.data(x).chunks(c) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        let grad = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            grad,
        )
    }

    /// Rows divided by `max(‖row‖₂, ε)`.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = rows_cols(self.shape(x));
        let eps = T::from_f64(NORM_EPS);
        let mut out = Vec::with_capacity(self.value(x).len());
        let mut denom = Vec::new();
        let mut guarded = Vec::new();
        for row in self.data(x).chunks(c) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let d = norm.max(eps);
            denom.push(d);
            guarded.push(norm <= eps);
            out.extend(row.iter().map(|&v| v / d));
        }
        let t = Tensor::new(self.shape(x), out)?;
        let grad = self.needs(x);
        self.push("l2_normalize", t, Op::L2NormRows { x, denom, guarded }, grad)
    }

    // ---- convolutions ---------------------------------------------------

    /// 2-D convolution. `x` is `[n, h, w, cin]`, `w` is `[kh, kw, cin, cout]`,
    /// `b` has `cout` elements. Zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: Conv2dSpec) -> Result<Var> {
        let (n, h, wd, cin) = match self.shape(x) {
            &[n, h, w, c] => (n, h, w, c),
            s => {
                return Err(Error::Rank {
                    op: "conv2d",
                    expected: 4,
                    shape: s.to_vec(),
                })
            }
        };
        let (kh, kw) = spec.kernel;
        let cout = match self.shape(w) {
            &[a, b2, c, o] if a == kh && b2 == kw && c == cin => o,
            s => {
                return Err(Error::Dimension {
                    op: "conv2d",
                    lhs: self.shape(x).to_vec(),
                    rhs: s.to_vec(),
                })
            }
        };
        if self.value(b).len() != cout {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: self.shape(w).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let (ho, wo) = spec.output_hw(h, wd).ok_or_else(|| Error::Dimension {
            op: "conv2d",
            lhs: self.shape(x).to_vec(),
            rhs: self.shape(w).to_vec(),
        })?;
        let patch = kh * kw * cin;
        let rows = n * ho * wo;
        let mut cols = vec![T::zero(); rows * patch];
        let xd = self.data(x);
        im2col(xd, (n, h, wd, cin), spec, (ho, wo), &mut cols);
        let mut out = vec![T::zero(); rows * cout];
        T::gemm(rows, patch, cout, &cols, false, self.data(w), false, &mut out, T::zero());
        let bd = self.data(b);
        for row in out.chunks_mut(cout) {
            for (v, &bb) in row.iter_mut().zip(bd) {
                *v = *v + bb;
            }
        }
        self.op_count += (rows * patch * cout) as u64;
        let grad = self.needs(x) || self.needs(w) || self.needs(b);
        let t = Tensor::new(&[n, ho, wo, cout], out)?;
        self.push("conv2d", t, Op::Conv2d { x, w, b, spec, cols }, grad)
    }

    /// Depthwise 1-D convolution along rows with same padding.
    /// `x` is `[t, c]`, `w` is `[k, c]` with odd `k`, `b` has `c` elements.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (t, c) = self.dims2("depthwise_conv1d", x)?;
        let (k, wc) = self.dims2("depthwise_conv1d", w)?;
        if wc != c || k % 2 == 0 || self.value(b).len() != c {
            return Err(Error::Dimension {
                op: "depthwise_conv1d",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        let pad = k / 2;
        let (xd, wdat, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = Vec::with_capacity(t * c);
        for _ in 0..t {
            out.extend_from_slice(bd);
        }
        for ti in 0..t {
            let orow = &mut out[ti * c..(ti + 1) * c];
            for ki in 0..k {
                let src = ti + ki;
                if src < pad || src - pad >= t {
                    continue;
                }
                let xrow = &xd[(src - pad) * c..(src - pad + 1) * c];
                let wrow = &wdat[ki * c..(ki + 1) * c];
                for ((o, &xv), &wv) in orow.iter_mut().zip(xrow).zip(wrow) {
                    *o = *o + xv * wv;
                }
            }
        }
        self.op_count += (t * k * c) as u64;
        let grad = self.needs(x) || self.needs(w) || self.needs(b);
        let tt = Tensor::new(&[t, c], out)?;
        self.push("depthwise_conv1d", tt, Op::DwConv1d { x, w, b }, grad)
    }

    // ---- structural -----------------------------------------------------

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice_cols", x)?;
        if len == 0 || start + len > c {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: self.shape(x).to_vec(),
                rhs: vec![start, len],
            });
        }
        let data = self
            .data(x)
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let t = Tensor::new(&[r, len], data)?;
        let grad = self.needs(x);
        self.push("slice_cols", t, Op::SliceCols { x, start }, grad)
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::EmptyDimension {
            op: "concat_cols",
            shape: vec![0],
        })?;
        let (r, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let (rr, cc) = self.dims2("concat_cols", v)?;
            if rr != r {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(v).to_vec(),
                });
            }
            widths.push(cc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&v, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.data(v)[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(&[r, total], data)?;
        let grad = xs.iter().any(|&v| self.needs(v));
        self.push("concat_cols", t, Op::ConcatCols(xs.to_vec()), grad)
    }

    /// Gathers rows of a 2-D tensor (repeats allowed).
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2("select_rows", x)?;
        if idx.is_empty() || idx.iter().any(|&i| i >= r) {
            return Err(Error::Dimension {
                op: "select_rows",
                lhs: self.shape(x).to_vec(),
                rhs: idx.to_vec(),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&self.data(x)[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(&[idx.len(), c], data)?;
        let grad = self.needs(x);
        self.push("select_rows", t, Op::SelectRows { x, idx: idx.to_vec() }, grad)
    }

    /// Gathers columns of a 2-D tensor (repeats allowed).
    pub fn select_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2("select_cols", x)?;
        if idx.is_empty() || idx.iter().any(|&j| j >= c) {
            return Err(Error::Dimension {
                op: "select_cols",
                lhs: self.shape(x).to_vec(),
                rhs: idx.to_vec(),
            });
        }
        let xd = self.data(x);
        let mut data = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            data.extend(idx.iter().map(|&j| xd[i * c + j]));
        }
        let t = Tensor::new(&[r, idx.len()], data)?;
        let grad = self.needs(x);
        self.push("select_cols", t, Op::SelectCols { x, idx: idx.to_vec() }, grad)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let grad = self.needs(x);
        self.push("reshape", t, Op::Reshape(x), grad)
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().copied().sum();
        let grad = self.needs(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), grad)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::from_f64(self.value(x).len() as f64);
        let s = self.data(x).iter().copied().sum::<T>() / n;
        let grad = self.needs(x);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), grad)
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mse", self.shape(a), self.shape(b))?;
        let n = T::from_f64(self.value(a).len() as f64);
        let s = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / n;
        let grad = self.needs(a) || self.needs(b);
        self.push("mse", Tensor::scalar(s), Op::Mse(a, b), grad)
    }

    /// Mean binary cross-entropy of `sigmoid(z)` against fixed targets in
    /// `[0, 1]`, evaluated in the numerically stable logit form.
    pub fn bce_with_logits(&mut self, z: Var, target: &Tensor<T>) -> Result<Var> {
        same_shape("bce_with_logits", self.shape(z), target.shape())?;
        let n = T::from_f64(target.len() as f64);
        let s = self
            .data(z)
            .iter()
            .zip(target.data())
            .map(|(&zz, &y)| bce_logit(zz, y))
            .sum::<T>()
            / n;
        let grad = self.needs(z);
        self.push(
            "bce_with_logits",
            Tensor::scalar(s),
            Op::BceLogits {
                z,
                target: target.data().to_vec(),
            },
            grad,
        )
    }

    // ---- reverse pass ---------------------------------------------------

    /// Back-propagates from a single-element output.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Grads {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = self.value(a).dims2().unwrap();
                let (br, bc) = self.value(b).dims2().unwrap();
                let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
                let n = if tb { br } else { bc };
                if self.needs(a) {
                    let ga = acc(grads, a, ar * ac);
                    if ta {
                        // A is [k, m]: dA = op(B) · dYᵀ
                        T::gemm(k, n, m, self.data(b), tb, dy, true, ga, T::one());
                    } else {
                        // dA = dY · op(B)ᵀ
                        T::gemm(m, n, k, dy, false, self.data(b), !tb, ga, T::one());
                    }
                }
                if self.needs(b) {
                    let gb = acc(grads, b, br * bc);
                    if tb {
                        // B is [n, k]: dB = dYᵀ · op(A)
                        T::gemm(n, m, k, dy, true, self.data(a), ta, gb, T::one());
                    } else {
                        // dB = op(A)ᵀ · dY
                        T::gemm(k, m, n, self.data(a), !ta, dy, false, gb, T::one());
                    }
                }
            }
            &Op::Add(a, b) => {
                add_into(grads, self, a, dy.iter().copied());
                add_into(grads, self, b, dy.iter().copied());
            }
            &Op::Sub(a, b) => {
                add_into(grads, self, a, dy.iter().copied());
                add_into(grads, self, b, dy.iter().map(|&g| -g));
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.data(a), self.data(b));
                add_into(grads, self, a, dy.iter().zip(bd).map(|(&g, &v)| g * v));
                add_into(grads, self, b, dy.iter().zip(ad).map(|(&g, &v)| g * v));
            }
            &Op::AddRow { x, bias } => {
                add_into(grads, self, x, dy.iter().copied());
                if self.needs(bias) {
                    let c = self.value(bias).len();
                    let gb = acc(grads, bias, c);
                    for row in dy.chunks(c) {
                        for (g, &d) in gb.iter_mut().zip(row) {
                            *g = *g + d;
                        }
                    }
                }
            }
            &Op::AddScalar { x, s } => {
                add_into(grads, self, x, dy.iter().copied());
                if self.needs(s) {
                    let tot: T = dy.iter().copied().sum();
                    let gs = acc(grads, s, 1);
                    gs[0] = gs[0] + tot;
                }
            }
            &Op::MulCol { x, w } => {
                let (r, c) = self.value(x).dims2().unwrap();
                let wd = self.data(w);
                if self.needs(x) {
                    let gx = acc(grads, x, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] = gx[i * c + j] + dy[i * c + j] * wd[i];
                        }
                    }
                }
                if self.needs(w) {
                    let xd = self.data(x);
                    let gw = acc(grads, w, r);
                    for i in 0..r {
                        let s: T = (0..c).map(|j| dy[i * c + j] * xd[i * c + j]).sum();
                        gw[i] = gw[i] + s;
                    }
                }
            }
            &Op::Scale(x, k) => add_into(grads, self, x, dy.iter().map(|&g| g * k)),
            &Op::Sigmoid(x) => {
                add_into(grads, self, x, dy.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)))
            }
            &Op::Relu(x) => {
                let xd = self.data(x);
                add_into(
                    grads,
                    self,
                    x,
                    dy.iter()
                        .zip(xd)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }),
                )
            }
            &Op::Silu(x) => {
                let xd = self.data(x);
                add_into(
                    grads,
                    self,
                    x,
                    dy.iter().zip(xd).map(|(&g, &v)| {
                        let s = sigmoid(v);
                        g * (s + v * s * (T::one() - s))
                    }),
                )
            }
            &Op::Tanh(x) => {
                add_into(grads, self, x, dy.iter().zip(y).map(|(&g, &t)| g * (T::one() - t * t)))
            }
            &Op::Square(x) => {
                let two = T::from_f64(2.0);
                let xd = self.data(x);
                add_into(grads, self, x, dy.iter().zip(xd).map(|(&g, &v)| g * two * v))
            }
            &Op::SoftmaxRows(x) => {
                let (_, c) = rows_cols(node.value.shape());
                let mut gx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(c).zip(dy.chunks(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    gx.extend(yr.iter().zip(gr).map(|(&yy, &g)| yy * (g - dot)));
                }
                add_into(grads, self, x, gx.into_iter());
            }
            Op::RmsNorm {
                x,
                gain,
                denom,
                guarded,
            } => {
                let (x, gain) = (*x, *gain);
                let (_, c) = rows_cols(self.shape(x));
                let nf = T::from_f64(c as f64);
                let (xd, g) = (self.data(x), self.data(gain));
                if self.needs(x) {
                    let gx = acc(grads, x, xd.len());
                    for (r, (xr, dr)) in xd.chunks(c).zip(dy.chunks(c)).enumerate() {
                        let d = denom[r];
                        let dot: T = (0..c).map(|j| dr[j] * g[j] * xr[j]).sum();
                        for j in 0..c {
                            let mut v = dr[j] * g[j] / d;
                            if !guarded[r] {
                                v = v - dot * xr[j] / (d * d * d * nf);
                            }
                            gx[r * c + j] = gx[r * c + j] + v;
                        }
                    }
                }
                if self.needs(gain) {
                    let gg = acc(grads, gain, c);
                    for (r, (xr, dr)) in xd.chunks(c).zip(dy.chunks(c)).enumerate() {
                        for j in 0..c {
                            gg[j] = gg[j] + dr[j] * xr[j] / denom[r];
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let (_, c) = rows_cols(self.shape(x));
                let nf = T::from_f64(c as f64);
                let g = self.data(gain);
                if self.needs(x) {
                    let gx = acc(grads, x, xhat.len());
                    for (r, (hr, dr)) in xhat.chunks(c).zip(dy.chunks(c)).enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..c {
                            let dh = dr[j] * g[j];
                            s1 = s1 + dh;
                            s2 = s2 + dh * hr[j];
                        }
                        for j in 0..c {
                            let dh = dr[j] * g[j];
                            let v = inv_std[r] / nf * (nf * dh - s1 - hr[j] * s2);
                            gx[r * c + j] = gx[r * c + j] + v;
                        }
                    }
                }
                if self.needs(gain) {
                    let gg = acc(grads, gain, c);
                    for (hr, dr) in xhat.chunks(c).zip(dy.chunks(c)) {
                        for j in 0..c {
                            gg[j] = gg[j] + dr[j] * hr[j];
                        }
                    }
                }
                if self.needs(bias) {
                    let gb = acc(grads, bias, c);
                    for dr in dy.chunks(c) {
                        for j in 0..c {
                            gb[j] = gb[j] + dr[j];
                        }
                    }
                }
            }
            Op::L2NormRows { x, denom, guarded } => {
                let x = *x;
                let (_, c) = rows_cols(self.shape(x));
                let mut gx = Vec::with_capacity(y.len());
                for (r, (yr, dr)) in y.chunks(c).zip(dy.chunks(c)).enumerate() {
                    let d = denom[r];
                    if guarded[r] {
                        gx.extend(dr.iter().map(|&g| g / d));
                    } else {
                        let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                        gx.extend(yr.iter().zip(dr).map(|(&yy, &g)| (g - yy * dot) / d));
                    }
                }
                add_into(grads, self, x, gx.into_iter());
            }
            Op::Conv2d { x, w, b, spec, cols } => {
                let (x, w, b, spec) = (*x, *w, *b, *spec);
                let xs = self.shape(x);
                let (n, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3]);
                let os = node.value.shape();
                let (ho, wo, cout) = (os[1], os[2], os[3]);
                let patch = spec.kernel.0 * spec.kernel.1 * cin;
                let rows = n * ho * wo;
                if self.needs(w) {
                    let gw = acc(grads, w, patch * cout);
                    T::gemm(patch, rows, cout, cols, true, dy, false, gw, T::one());
                }
                if self.needs(b) {
                    let gb = acc(grads, b, cout);
                    for row in dy.chunks(cout) {
                        for (g, &d) in gb.iter_mut().zip(row) {
                            *g = *g + d;
                        }
                    }
                }
                if self.needs(x) {
                    let mut dcols = vec![T::zero(); rows * patch];
                    T::gemm(rows, cout, patch, dy, false, self.data(w), true, &mut dcols, T::zero());
                    let gx = acc(grads, x, n * h * wd * cin);
                    col2im(&dcols, (n, h, wd, cin), spec, (ho, wo), gx);
                }
            }
            &Op::DwConv1d { x, w, b } => {
                let (t, c) = self.value(x).dims2().unwrap();
                let (k, _) = self.value(w).dims2().unwrap();
                let pad = k / 2;
                if self.needs(b) {
                    let gb = acc(grads, b, c);
                    for row in dy.chunks(c) {
                        for (g, &d) in gb.iter_mut().zip(row) {
                            *g = *g + d;
                        }
                    }
                }
                if self.needs(w) {
                    let xd = self.data(x);
                    let gw = acc(grads, w, k * c);
                    for ti in 0..t {
                        for ki in 0..k {
                            let src = ti + ki;
                            if src < pad || src - pad >= t {
                                continue;
                            }
                            let s = src - pad;
                            for ci in 0..c {
                                gw[ki * c + ci] = gw[ki * c + ci] + dy[ti * c + ci] * xd[s * c + ci];
                            }
                        }
                    }
                }
                if self.needs(x) {
                    let wdat = self.data(w);
                    let gx = acc(grads, x, t * c);
                    for ti in 0..t {
                        for ki in 0..k {
                            let src = ti + ki;
                            if src < pad || src - pad >= t {
                                continue;
                            }
                            let s = src - pad;
                            for ci in 0..c {
                                gx[s * c + ci] = gx[s * c + ci] + dy[ti * c + ci] * wdat[ki * c + ci];
                            }
                        }
                    }
                }
            }
            &Op::SliceCols { x, start } => {
                if self.needs(x) {
                    let (r, c) = self.value(x).dims2().unwrap();
                    let len = node.value.shape()[1];
                    let gx = acc(grads, x, r * c);
                    for i in 0..r {
                        for j in 0..len {
                            gx[i * c + start + j] = gx[i * c + start + j] + dy[i * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols(xs) => {
                let (r, total) = node.value.dims2().unwrap();
                let mut off = 0;
                for &v in xs {
                    let w = self.shape(v)[1];
                    if self.needs(v) {
                        let gv = acc(grads, v, r * w);
                        for i in 0..r {
                            for j in 0..w {
                                gv[i * w + j] = gv[i * w + j] + dy[i * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SelectRows { x, idx } => {
                let x = *x;
                if self.needs(x) {
                    let (r, c) = self.value(x).dims2().unwrap();
                    let gx = acc(grads, x, r * c);
                    for (o, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[i * c + j] = gx[i * c + j] + dy[o * c + j];
                        }
                    }
                }
            }
            Op::SelectCols { x, idx } => {
                let x = *x;
                if self.needs(x) {
                    let (r, c) = self.value(x).dims2().unwrap();
                    let w = idx.len();
                    let gx = acc(grads, x, r * c);
                    for i in 0..r {
                        for (o, &j) in idx.iter().enumerate() {
                            gx[i * c + j] = gx[i * c + j] + dy[i * w + o];
                        }
                    }
                }
            }
            &Op::Reshape(x) => add_into(grads, self, x, dy.iter().copied()),
            &Op::Sum(x) => {
                let n = self.value(x).len();
                add_into(grads, self, x, core::iter::repeat_n(dy[0], n))
            }
            &Op::Mean(x) => {
                let n = self.value(x).len();
                let g = dy[0] / T::from_f64(n as f64);
                add_into(grads, self, x, core::iter::repeat_n(g, n))
            }
            &Op::Mse(a, b) => {
                let n = T::from_f64(self.value(a).len() as f64);
                let k = T::from_f64(2.0) * dy[0] / n;
                let diff: Vec<T> = self
                    .data(a)
                    .iter()
                    .zip(self.data(b))
                    .map(|(&x, &y)| (x - y) * k)
                    .collect();
                add_into(grads, self, a, diff.iter().copied());
                add_into(grads, self, b, diff.iter().map(|&d| -d));
            }
            Op::BceLogits { z, target } => {
                let z = *z;
                let n = T::from_f64(target.len() as f64);
                let k = dy[0] / n;
                let zd = self.data(z);
                add_into(
                    grads,
                    self,
                    z,
                    zd.iter().zip(target).map(|(&zz, &t)| (sigmoid(zz) - t) * k),
                );
            }
        }
    }
}

/// Stable `BCE(sigmoid(z), y)`.
pub fn bce_logit<T: Scalar>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln()
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(grads: &mut [Option<Vec<T>>], g: &Graph<T>, v: Var, vals: impl Iterator<Item = T>) {
    if !g.needs(v) {
        return;
    }
    let len = g.value(v).len();
    let gv = acc(grads, v, len);
    for (slot, d) in gv.iter_mut().zip(vals) {
        *slot = *slot + d;
    }
}

fn im2col<T: Scalar>(
    x: &[T],
    (n, h, w, c): (usize, usize, usize, usize),
    spec: Conv2dSpec,
    (ho, wo): (usize, usize),
    cols: &mut [T],
) {
    let (kh, kw) = spec.kernel;
    let patch = kh * kw * c;
    let mut row = 0;
    for ni in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for ky in 0..kh {
                    let iy = (oy * spec.stride.0 + ky) as isize - spec.padding.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * spec.stride.1 + kx) as isize - spec.padding.1 as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((ni * h + iy as usize) * w + ix as usize) * c;
                        let d = (ky * kw + kx) * c;
                        dst[d..d + c].copy_from_slice(&x[src..src + c]);
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Scalar>(
    cols: &[T],
    (n, h, w, c): (usize, usize, usize, usize),
    spec: Conv2dSpec,
    (ho, wo): (usize, usize),
    gx: &mut [T],
) {
    let (kh, kw) = spec.kernel;
    let patch = kh * kw * c;
    let mut row = 0;
    for ni in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let src = &cols[row * patch..(row + 1) * patch];
                for ky in 0..kh {
                    let iy = (oy * spec.stride.0 + ky) as isize - spec.padding.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * spec.stride.1 + kx) as isize - spec.padding.1 as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((ni * h + iy as usize) * w + ix as usize) * c;
                        let s = (ky * kw + kx) * c;
                        for ci in 0..c {
                            gx[dst + ci] = gx[dst + ci] + src[s + ci];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}
