//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node to the tape, so creation order is already a
//! topological order. `backward` walks the tape once in reverse and adds each
//! node's contribution into its parents' gradient buffers.

use rand::Rng;

use super::tensor::{log_sum_exp, matmul_into, matmul_nt_into, matmul_tn_into, sigmoid, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Right-hand operand of [`Graph::elementwise`].
#[derive(Clone, Copy, Debug)]
pub enum Operand {
    Var(Var),
    Scalar(f64),
}

impl From<Var> for Operand {
    fn from(v: Var) -> Self {
        Operand::Var(v)
    }
}

impl From<f64> for Operand {
    fn from(v: f64) -> Self {
        Operand::Scalar(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvPadding {
    /// `K-1` zeros on the left only; output `t` sees inputs `t-K+1..=t`.
    Causal,
    /// `(K-1)/2` zeros on each side, `K` odd.
    Same,
    /// No padding, output length `T-K+1`.
    Valid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryOp,
        a: Var,
        b: Var,
        /// `b` holds a single value broadcast over `a`.
        broadcast: bool,
    },
    ScalarRhs {
        kind: BinaryOp,
        a: Var,
        s: f64,
    },
    MatMul(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    Softmax {
        x: Var,
        dims: (usize, usize, usize),
    },
    LogSoftmax {
        x: Var,
        dims: (usize, usize, usize),
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Swish(Var),
    Sigmoid(Var),
    Relu(Var),
    Glu(Var),
    DepthwiseConv {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        left_pad: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterRows {
        parts: Vec<(Var, Vec<usize>)>,
    },
    PickColumns {
        x: Var,
        idx: Vec<usize>,
    },
    ScaleRows {
        x: Var,
        s: Var,
    },
    Unfold {
        x: Var,
        kernel: usize,
        stride: usize,
    },
    SuppliedGrad {
        x: Var,
        grad: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Record of executed operations supporting one reverse pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Clears every gradient buffer so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).dims2(op)
    }

    // ---- elementwise -------------------------------------------------------

    /// `a ∘ b` where `b` is a same-shape tensor, a one-element tensor, or a constant.
    pub fn elementwise(&mut self, kind: BinaryOp, a: Var, b: impl Into<Operand>) -> Result<Var> {
        let f = |x: f64, y: f64| match kind {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        };
        match b.into() {
            Operand::Scalar(s) => {
                let av = self.value(a);
                let data = av.data().iter().map(|&x| f(x, s)).collect();
                let out = Tensor::new(av.shape().to_vec(), data)?;
                let rg = self.rg(&[a]);
                Ok(self.push(out, rg, Op::ScalarRhs { kind, a, s }))
            }
            Operand::Var(b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let broadcast = if av.shape() == bv.shape() {
                    false
                } else if bv.len() == 1 {
                    true
                } else {
                    return Err(Error::shape("elementwise", av.shape(), bv.shape()));
                };
                let data = if broadcast {
                    let s = bv.data()[0];
                    av.data().iter().map(|&x| f(x, s)).collect()
                } else {
                    av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
                };
                let out = Tensor::new(av.shape().to_vec(), data)?;
                let rg = self.rg(&[a, b]);
                Ok(self.push(
                    out,
                    rg,
                    Op::Binary {
                        kind,
                        a,
                        b,
                        broadcast,
                    },
                ))
            }
        }
    }

    pub fn add(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.elementwise(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.elementwise(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.elementwise(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.elementwise(BinaryOp::Div, a, b)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, rg, op)
    }

    pub fn swish(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Swish(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Gated linear unit over the last axis: first half times sigmoid of the second.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = *xv.shape().last().unwrap_or(&0);
        if c == 0 || c % 2 != 0 {
            return Err(Error::invalid("glu", format!("last axis {c} must be even and non-zero")));
        }
        let h = c / 2;
        let rows = xv.len() / c;
        let mut data = Vec::with_capacity(rows * h);
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            for j in 0..h {
                data.push(row[j] * sigmoid(row[h + j]));
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = h;
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::Glu(x)))
    }

    /// Multiplies by a freshly drawn keep-mask scaled by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let shape = self.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
            .collect();
        let m = self.constant(Tensor::new(shape, mask)?);
        self.mul(x, m)
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.dims2(x, "transpose")?;
        let out = self.value(x).transpose2();
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::Transpose(x)))
    }

    /// Adds a `[N]` bias to every row of an `[M×N]` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_bias")?;
        if self.shape(b) != [n] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(b)));
        }
        let bv = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for r in 0..m {
            for (o, bb) in data[r * n..(r + 1) * n].iter_mut().zip(&bv) {
                *o += bb;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, rg, Op::AddBias(x, b)))
    }

    /// `x·w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    // ---- normalisation -----------------------------------------------------

    fn axis_dims(&self, x: Var, axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::EmptyAxis {
                op,
                axis,
                shape: shape.to_vec(),
            });
        }
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        Ok((outer, shape[axis], inner))
    }

    fn softmax_impl(&self, x: Var, dims: (usize, usize, usize), log: bool) -> Tensor {
        let (outer, n, inner) = dims;
        let xv = self.value(x);
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        let mut buf = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = src[(o * n + j) * inner + i];
                }
                let lse = log_sum_exp(&buf);
                for j in 0..n {
                    let lp = buf[j] - lse;
                    out[(o * n + j) * inner + i] = if log { lp } else { lp.exp() };
                }
            }
        }
        Tensor::new(xv.shape().to_vec(), out).expect("same shape")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let dims = self.axis_dims(x, axis, "softmax")?;
        let out = self.softmax_impl(x, dims, false);
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::Softmax { x, dims }))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let dims = self.axis_dims(x, axis, "log_softmax")?;
        let out = self.softmax_impl(x, dims, true);
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::LogSoftmax { x, dims }))
    }

    /// Normalises the last axis to zero mean and unit variance, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap_or(&0);
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", xv.shape(), self.shape(gamma)));
        }
        let rows = xv.len() / d;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    // ---- convolution & attention -------------------------------------------

    /// Per-channel 1-D convolution of `x: [T×D]` with `kernel: [K×D]`.
    pub fn depthwise_conv1d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: ConvPadding,
    ) -> Result<Var> {
        let (t, d) = self.dims2(x, "depthwise_conv1d")?;
        let (k, d2) = self.dims2(kernel, "depthwise_conv1d")?;
        if d != d2 || k == 0 {
            return Err(Error::shape("depthwise_conv1d", self.shape(x), self.shape(kernel)));
        }
        if let Some(b) = bias {
            if self.shape(b) != [d] {
                return Err(Error::shape("depthwise_conv1d", self.shape(x), self.shape(b)));
            }
        }
        let (left_pad, out_len) = match padding {
            ConvPadding::Causal => (k - 1, t),
            ConvPadding::Same => {
                if k % 2 == 0 {
                    return Err(Error::invalid("depthwise_conv1d", "same padding needs an odd kernel"));
                }
                ((k - 1) / 2, t)
            }
            ConvPadding::Valid => {
                if k > t {
                    return Err(Error::invalid(
                        "depthwise_conv1d",
                        format!("kernel {k} longer than input {t} without padding"),
                    ));
                }
                (0, t - k + 1)
            }
        };
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let mut out = vec![0.0; out_len * d];
        for o in 0..out_len {
            for j in 0..k {
                let src = o + j;
                if src < left_pad || src - left_pad >= t {
                    continue;
                }
                let s = src - left_pad;
                for c in 0..d {
                    out[o * d + c] += kv[j * d + c] * xv[s * d + c];
                }
            }
        }
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for o in 0..out_len {
                for c in 0..d {
                    out[o * d + c] += bv[c];
                }
            }
        }
        let mut deps = vec![x, kernel];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            Tensor::new(vec![out_len, d], out)?,
            rg,
            Op::DepthwiseConv {
                x,
                kernel,
                bias,
                left_pad,
            },
        ))
    }

    /// Multi-head scaled dot-product attention. `mask[i*Tk + j]` is true when
    /// query `i` may attend key `j`.
    pub fn masked_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: &[bool],
        heads: usize,
    ) -> Result<Var> {
        let (tq, d) = self.dims2(q, "attention")?;
        let (tk, dk) = self.dims2(k, "attention")?;
        if dk != d || self.shape(v) != [tk, d] {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid("attention", format!("{d} not divisible into {heads} heads")));
        }
        if mask.len() != tq * tk {
            return Err(Error::shape("attention", &[tq, tk], &[mask.len()]));
        }
        if let Some(row) = (0..tq).find(|&i| !mask[i * tk..(i + 1) * tk].iter().any(|&m| m)) {
            return Err(Error::FullyMaskedRow { row });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; heads * tq * tk];
        let mut out = vec![0.0; tq * d];
        let mut scores = vec![0.0; tk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let qi = &qv[i * d + off..i * d + off + dh];
                let mrow = &mask[i * tk..(i + 1) * tk];
                let mut max = f64::NEG_INFINITY;
                for j in 0..tk {
                    if mrow[j] {
                        let kj = &kv[j * d + off..j * d + off + dh];
                        let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                }
                let mut z = 0.0;
                for j in 0..tk {
                    if mrow[j] {
                        z += (scores[j] - max).exp();
                    }
                }
                let prow = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                for j in 0..tk {
                    if mrow[j] {
                        let p = (scores[j] - max).exp() / z;
                        prow[j] = p;
                        let vj = &vv[j * d + off..j * d + off + dh];
                        for (o, &x) in out[i * d + off..i * d + off + dh].iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::new(vec![tq, d], out)?,
            rg,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    // ---- reductions & indexing ---------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let s = self.value(x).data().iter().sum::<f64>() / n as f64;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), rg, Op::Mean(x)))
    }

    /// Rows `idx` of `x`, in order (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::invalid("gather_rows", format!("row {bad} out of {r}")));
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), c], data)?,
            rg,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Assembles a `[rows×C]` matrix; row `r` of part `p` lands at `p.1[r]`.
    /// Rows claimed by no part are zero.
    pub fn scatter_rows(&mut self, parts: Vec<(Var, Vec<usize>)>, rows: usize, cols: usize) -> Result<Var> {
        let mut data = vec![0.0; rows * cols];
        let mut seen = vec![false; rows];
        for (v, idx) in &parts {
            let (r, c) = self.dims2(*v, "scatter_rows")?;
            if c != cols || r != idx.len() {
                return Err(Error::shape("scatter_rows", self.shape(*v), &[idx.len(), cols]));
            }
            let src = self.value(*v).data();
            for (k, &dst) in idx.iter().enumerate() {
                if dst >= rows || seen[dst] {
                    return Err(Error::invalid("scatter_rows", format!("bad destination row {dst}")));
                }
                seen[dst] = true;
                data[dst * cols..(dst + 1) * cols].copy_from_slice(&src[k * cols..(k + 1) * cols]);
            }
        }
        let deps: Vec<Var> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::new(vec![rows, cols], data)?, rg, Op::ScatterRows { parts }))
    }

    /// `out[t] = x[t, idx[t]]`, shape `[T]`.
    pub fn pick_columns(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x, "pick_columns")?;
        if idx.len() != r || idx.iter().any(|&j| j >= c) {
            return Err(Error::shape("pick_columns", self.shape(x), &[idx.len()]));
        }
        let xv = self.value(x);
        let data = idx.iter().enumerate().map(|(t, &j)| xv.at(t, j)).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::vector(data),
            rg,
            Op::PickColumns {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// `out[t, :] = s[t] * x[t, :]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "scale_rows")?;
        if self.shape(s) != [r] {
            return Err(Error::shape("scale_rows", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).data();
        let mut data = self.value(x).data().to_vec();
        for t in 0..r {
            for o in &mut data[t * c..(t + 1) * c] {
                *o *= sv[t];
            }
        }
        let rg = self.rg(&[x, s]);
        Ok(self.push(Tensor::new(vec![r, c], data)?, rg, Op::ScaleRows { x, s }))
    }

    /// Stacks `kernel` consecutive rows every `stride` rows: `[T×C] -> [T'×(kernel·C)]`
    /// with `T' = (T - kernel)/stride + 1`.
    pub fn unfold_rows(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (t, c) = self.dims2(x, "unfold_rows")?;
        if kernel == 0 || stride == 0 || t < kernel {
            return Err(Error::invalid(
                "unfold_rows",
                format!("{t} rows cannot hold a window of {kernel}"),
            ));
        }
        let out_t = (t - kernel) / stride + 1;
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(out_t * kernel * c);
        for o in 0..out_t {
            let s = o * stride;
            data.extend_from_slice(&xv[s * c..(s + kernel) * c]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![out_t, kernel * c], data)?,
            rg,
            Op::Unfold { x, kernel, stride },
        ))
    }

    /// A scalar node with value `value` whose gradient with respect to `input`
    /// is `grad` (same shape as `input`). Used by fused loss kernels.
    pub fn scalar_with_grad(&mut self, input: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.shape(input) {
            return Err(Error::shape("scalar_with_grad", self.shape(input), grad.shape()));
        }
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::scalar(value), rg, Op::SuppliedGrad { x: input, grad }))
    }

    // ---- reverse pass ------------------------------------------------------

    /// Accumulates d`loss`/d`v` into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::DetachedGraph);
        }
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = lv.shape().to_vec();
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(Tensor::ones(&shape));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.node_vjp(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, t) in contributions {
                let node = &mut self.nodes[v.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&t),
                    None => node.grad = Some(t),
                }
            }
        }
        Ok(())
    }

    fn node_vjp(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let y = &node.value;
        let gd = g.data();
        let like = |v: Var, data: Vec<f64>| (v, Tensor::new(self.shape(v).to_vec(), data).expect("vjp shape"));
        let val = |v: Var| self.value(v).data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Binary {
                kind,
                a,
                b,
                broadcast,
            } => {
                let (av, bv) = (val(*a), val(*b));
                let bval = |j: usize| if *broadcast { bv[0] } else { bv[j] };
                let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                    BinaryOp::Add => (gd.to_vec(), gd.to_vec()),
                    BinaryOp::Sub => (gd.to_vec(), gd.iter().map(|x| -x).collect()),
                    BinaryOp::Mul => (
                        gd.iter().enumerate().map(|(j, x)| x * bval(j)).collect(),
                        gd.iter().zip(av).map(|(x, a)| x * a).collect(),
                    ),
                    BinaryOp::Div => (
                        gd.iter().enumerate().map(|(j, x)| x / bval(j)).collect(),
                        gd.iter()
                            .enumerate()
                            .map(|(j, x)| -x * av[j] / (bval(j) * bval(j)))
                            .collect(),
                    ),
                };
                let gb = if *broadcast {
                    vec![gb.iter().sum()]
                } else {
                    gb
                };
                vec![like(*a, ga), like(*b, gb)]
            }
            Op::ScalarRhs { kind, a, s } => {
                let ga = match kind {
                    BinaryOp::Add | BinaryOp::Sub => gd.to_vec(),
                    BinaryOp::Mul => gd.iter().map(|x| x * s).collect(),
                    BinaryOp::Div => gd.iter().map(|x| x / s).collect(),
                };
                vec![like(*a, ga)]
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let mut da = vec![0.0; m * k];
                matmul_nt_into(gd, val(*b), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                matmul_tn_into(val(*a), gd, &mut db, m, k, n);
                vec![like(*a, da), like(*b, db)]
            }
            Op::Transpose(x) => vec![(*x, g.transpose2())],
            Op::AddBias(x, b) => {
                let n = self.shape(*b)[0];
                let mut db = vec![0.0; n];
                for row in gd.chunks(n) {
                    for (o, v) in db.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                vec![like(*x, gd.to_vec()), like(*b, db)]
            }
            Op::Softmax { x, dims } => {
                let (outer, n, inner) = *dims;
                let yd = y.data();
                let mut dx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + ii;
                        let dot: f64 = (0..n).map(|j| gd[at(j)] * yd[at(j)]).sum();
                        for j in 0..n {
                            dx[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                vec![like(*x, dx)]
            }
            Op::LogSoftmax { x, dims } => {
                let (outer, n, inner) = *dims;
                let yd = y.data();
                let mut dx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + ii;
                        let total: f64 = (0..n).map(|j| gd[at(j)]).sum();
                        for j in 0..n {
                            dx[at(j)] = gd[at(j)] - yd[at(j)].exp() * total;
                        }
                    }
                }
                vec![like(*x, dx)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gamma)[0];
                let gam = val(*gamma);
                let mut dx = vec![0.0; gd.len()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &gd[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        dg[j] += gr[j] * hr[j];
                        db[j] += gr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        dx[r * d + j] = rs * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                vec![like(*x, dx), like(*gamma, dg), like(*beta, db)]
            }
            Op::Swish(x) => {
                let dx = gd
                    .iter()
                    .zip(val(*x))
                    .map(|(g, &v)| {
                        let s = sigmoid(v);
                        g * (s + v * s * (1.0 - s))
                    })
                    .collect();
                vec![like(*x, dx)]
            }
            Op::Sigmoid(x) => {
                let dx = gd.iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                vec![like(*x, dx)]
            }
            Op::Relu(x) => {
                let dx = gd
                    .iter()
                    .zip(val(*x))
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![like(*x, dx)]
            }
            Op::Glu(x) => {
                let xv = val(*x);
                let c = *self.shape(*x).last().unwrap();
                let h = c / 2;
                let mut dx = vec![0.0; xv.len()];
                for r in 0..xv.len() / c {
                    for j in 0..h {
                        let a = xv[r * c + j];
                        let s = sigmoid(xv[r * c + h + j]);
                        let gg = gd[r * h + j];
                        dx[r * c + j] = gg * s;
                        dx[r * c + h + j] = gg * a * s * (1.0 - s);
                    }
                }
                vec![like(*x, dx)]
            }
            Op::DepthwiseConv {
                x,
                kernel,
                bias,
                left_pad,
            } => {
                let (t, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let k = self.shape(*kernel)[0];
                let out_len = y.shape()[0];
                let (xv, kv) = (val(*x), val(*kernel));
                let mut dx = vec![0.0; t * d];
                let mut dk = vec![0.0; k * d];
                for o in 0..out_len {
                    for j in 0..k {
                        let src = o + j;
                        if src < *left_pad || src - left_pad >= t {
                            continue;
                        }
                        let s = src - left_pad;
                        for c in 0..d {
                            let gg = gd[o * d + c];
                            dx[s * d + c] += kv[j * d + c] * gg;
                            dk[j * d + c] += xv[s * d + c] * gg;
                        }
                    }
                }
                let mut out = vec![like(*x, dx), like(*kernel, dk)];
                if let Some(b) = bias {
                    let mut db = vec![0.0; d];
                    for row in gd.chunks(d) {
                        for (o, v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    out.push(like(*b, db));
                }
                out
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (tq, d) = (self.shape(*q)[0], self.shape(*q)[1]);
                let tk = self.shape(*k)[0];
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let mut dq = vec![0.0; tq * d];
                let mut dk = vec![0.0; tk * d];
                let mut dv = vec![0.0; tk * d];
                let mut dp = vec![0.0; tk];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..tq {
                        let prow = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                        let gi = &gd[i * d + off..i * d + off + dh];
                        let mut dot = 0.0;
                        for j in 0..tk {
                            if prow[j] == 0.0 {
                                dp[j] = 0.0;
                                continue;
                            }
                            let vj = &vv[j * d + off..j * d + off + dh];
                            dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                            dot += prow[j] * dp[j];
                            for (o, &gg) in dv[j * d + off..j * d + off + dh].iter_mut().zip(gi) {
                                *o += prow[j] * gg;
                            }
                        }
                        for j in 0..tk {
                            if prow[j] == 0.0 {
                                continue;
                            }
                            let ds = prow[j] * (dp[j] - dot) * scale;
                            for c in 0..dh {
                                dq[i * d + off + c] += ds * kv[j * d + off + c];
                                dk[j * d + off + c] += ds * qv[i * d + off + c];
                            }
                        }
                    }
                }
                vec![like(*q, dq), like(*k, dk), like(*v, dv)]
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                vec![like(*x, vec![gd[0]; n])]
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                vec![like(*x, vec![gd[0] / n as f64; n])]
            }
            Op::GatherRows { x, idx } => {
                let c = self.shape(*x)[1];
                let mut dx = vec![0.0; self.value(*x).len()];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[src * c + j] += gd[r * c + j];
                    }
                }
                vec![like(*x, dx)]
            }
            Op::ScatterRows { parts } => {
                let c = y.shape()[1];
                parts
                    .iter()
                    .map(|(v, idx)| {
                        let mut dv = Vec::with_capacity(idx.len() * c);
                        for &dst in idx {
                            dv.extend_from_slice(&gd[dst * c..(dst + 1) * c]);
                        }
                        like(*v, dv)
                    })
                    .collect()
            }
            Op::PickColumns { x, idx } => {
                let c = self.shape(*x)[1];
                let mut dx = vec![0.0; self.value(*x).len()];
                for (t, &j) in idx.iter().enumerate() {
                    dx[t * c + j] += gd[t];
                }
                vec![like(*x, dx)]
            }
            Op::ScaleRows { x, s } => {
                let c = self.shape(*x)[1];
                let (xv, sv) = (val(*x), val(*s));
                let mut dx = vec![0.0; xv.len()];
                let mut ds = vec![0.0; sv.len()];
                for t in 0..sv.len() {
                    for j in 0..c {
                        dx[t * c + j] = gd[t * c + j] * sv[t];
                        ds[t] += gd[t * c + j] * xv[t * c + j];
                    }
                }
                vec![like(*x, dx), like(*s, ds)]
            }
            Op::Unfold { x, kernel, stride } => {
                let c = self.shape(*x)[1];
                let mut dx = vec![0.0; self.value(*x).len()];
                let w = kernel * c;
                for o in 0..y.shape()[0] {
                    let s = o * stride;
                    for j in 0..w {
                        dx[s * c + j] += gd[o * w + j];
                    }
                }
                vec![like(*x, dx)]
            }
            Op::SuppliedGrad { x, grad } => {
                let dx = grad.data().iter().map(|v| v * gd[0]).collect();
                vec![like(*x, dx)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(g: &mut Graph, xs: &[f64]) -> Var {
        g.leaf(Tensor::vector(xs.to_vec()), true)
    }

    #[test]
    fn add_and_scalar_mul() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, &[1.0, 2.0]);
        let b = vec_leaf(&mut g, &[3.0, 4.0]);
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);
        let z = g.mul(a, 0.0).unwrap();
        assert_eq!(g.value(z).data(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, &[1.0, 2.0]);
        let b = vec_leaf(&mut g, &[1.0, 2.0, 3.0]);
        match g.add(a, b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2]);
                assert_eq!(right, vec![3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let i2 = g.constant(Tensor::eye(2));
        let y = g.matmul(i2, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let ones = g.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let z = g.matmul(x, ones).unwrap();
        assert_eq!(g.value(z).data(), &[3.0, 7.0]);
        assert!(g.matmul(ones, ones).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let p = g.softmax(x, 0).unwrap();
        for v in g.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let p = g.softmax(x, 0).unwrap();
        let want = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (a, b) in g.value(p).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let big = g.constant(Tensor::vector(vec![1000.0, 1001.0, 1002.0]));
        let pb = g.softmax(big, 0).unwrap();
        assert!(g.value(pb).max_abs_diff(g.value(p)) < 1e-12);
        let empty = g.constant(Tensor::zeros(&[2, 0]));
        assert!(matches!(g.softmax(empty, 1), Err(Error::EmptyAxis { .. })));
        assert!(g.softmax(x, 3).is_err());
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.0, 5.0], vec![0.0, -5.0]]).unwrap());
        let p = g.softmax(x, 0).unwrap();
        let pv = g.value(p);
        assert!((pv.at(0, 0) - 0.5).abs() < 1e-15);
        assert!((pv.at(0, 1) + pv.at(1, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_degenerate_cases() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[2, 4], 3.0), true);
        let gamma = g.constant(Tensor::ones(&[4]));
        let beta = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));

        let xr = g.constant(Tensor::from_rows(&[vec![1.0, -2.0, 0.5, 7.0]]).unwrap());
        let zero = g.constant(Tensor::zeros(&[4]));
        let b2 = g.constant(Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]));
        let y2 = g.layer_norm(xr, zero, b2).unwrap();
        assert_eq!(g.value(y2).data(), &[0.1, 0.2, 0.3, 0.4]);

        let wrong = g.constant(Tensor::ones(&[3]));
        assert!(g.layer_norm(xr, wrong, b2).is_err());
    }

    #[test]
    fn conv_identity_kernel_and_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let k = g.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap());
        let y = g.depthwise_conv1d(x, k, None, ConvPadding::Same).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let long = g.constant(Tensor::ones(&[4, 2]));
        assert!(g.depthwise_conv1d(x, long, None, ConvPadding::Valid).is_err());
        let valid = g.depthwise_conv1d(x, k, None, ConvPadding::Valid).unwrap();
        assert_eq!(g.shape(valid), &[1, 2]);
    }

    #[test]
    fn attention_single_frame_returns_value() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_rows(&[vec![0.3, -1.0, 2.0, 0.1]]).unwrap());
        let v = g.constant(Tensor::from_rows(&[vec![5.0, 6.0, 7.0, 8.0]]).unwrap());
        let y = g.masked_attention(q, q, v, &[true], 2).unwrap();
        assert_eq!(g.value(y), g.value(v));
        assert!(matches!(
            g.masked_attention(q, q, v, &[false], 2),
            Err(Error::FullyMaskedRow { row: 0 })
        ));
    }

    #[test]
    fn backward_basic_rules() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[1.0, 2.0]);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
        assert!(matches!(g.backward(s), Err(Error::BackwardTwice)));
        g.reset_grads();

        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
        let c = g.constant(Tensor::vector(vec![1.0]));
        let s = g.sum(c);
        assert!(matches!(g.backward(s), Err(Error::DetachedGraph)));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[3.0]);
        let a = g.mul(x, 2.0).unwrap();
        let b = g.add(a, x).unwrap();
        let c = g.add(b, x).unwrap();
        let l = g.sum(c);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0]);
    }
}
