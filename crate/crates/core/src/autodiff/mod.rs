//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a tape: every op appends a node holding its value and the
//! references needed to push gradients back to its inputs. Nodes are only
//! ever appended, so the tape order is already a topological order and
//! [`Graph::backward`] walks it once from the loss towards the leaves.

mod gradcheck;
pub(crate) mod kernels;

pub use gradcheck::{finite_diff_check, select_probes, GradCheckReport, Probe};

use crate::error::{Error, Result};
use crate::fourier::centered_transform;
use crate::real::{gemm, Layout, Real};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRowBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        means: Vec<T>,
        rstds: Vec<T>,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Var,
        cols: Vec<T>,
    },
    Fourier {
        x: Var,
        inverse: bool,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Sum(Var),
    L2Norm(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// One multi-head attention evaluation observed on the tape.
#[derive(Clone, Debug)]
pub struct AttentionEntry<T> {
    pub label: String,
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
    /// `[heads, queries, keys]` row-stochastic weights; only kept when
    /// recording is enabled.
    pub probs: Option<Vec<T>>,
}

impl<T> AttentionEntry<T> {
    /// Score-matrix elements per head (`queries * keys`).
    pub fn score_elements(&self) -> u64 {
        (self.queries * self.keys) as u64
    }
}

/// Instrumentation for every attention op on a graph.
#[derive(Clone, Debug, Default)]
pub struct AttentionLog<T> {
    pub entries: Vec<AttentionEntry<T>>,
    record_probs: bool,
}

impl<T> AttentionLog<T> {
    pub fn is_recording(&self) -> bool {
        self.record_probs
    }

    pub fn total_score_elements(&self) -> u64 {
        self.entries.iter().map(|e| e.score_elements()).sum()
    }

    /// Largest single score matrix (per head) allocated.
    pub fn peak_score_elements(&self) -> u64 {
        self.entries
            .iter()
            .map(|e| e.score_elements())
            .max()
            .unwrap_or(0)
    }

    /// Sum of score elements over entries whose label starts with `prefix`.
    pub fn score_elements_with_prefix(&self, prefix: &str) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.label.starts_with(prefix))
            .map(|e| e.score_elements())
            .sum()
    }

    pub fn find(&self, label: &str) -> Option<&AttentionEntry<T>> {
        self.entries.iter().find(|e| e.label == label)
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// The computation tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    attention: AttentionLog<T>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{}: shapes {:?} and {:?} differ",
            op,
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            attention: AttentionLog::default(),
        }
    }

    /// A graph whose attention ops keep their probability matrices.
    pub fn recording() -> Self {
        let mut g = Self::new();
        g.attention.record_probs = true;
        g
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn attention_log(&self) -> &AttentionLog<T> {
        &self.attention
    }

    pub fn take_attention_log(&mut self) -> AttentionLog<T> {
        let recording = self.attention.record_probs;
        let log = std::mem::take(&mut self.attention);
        self.attention.record_probs = recording;
        log
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Same value, cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// `x[.., j] + b[j]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = tx.last_dim();
        if tb.rank() != 1 || tb.numel() != n || tx.rank() == 0 {
            return Err(Error::dim(format!(
                "add_row_bias: bias {:?} does not match last dim of {:?}",
                tb.shape(),
                tx.shape()
            )));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRowBias(x, b), &[x, b]))
    }

    /// Batched matrix product `[.., M, K] x [.., K, N]`. Batch dims must be
    /// equal, or one operand must be a plain matrix (broadcast).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.value(a).shape(), self.value(b).shape())?;
        let mut out = Tensor::zeros(plan.out_shape.clone());
        {
            let (ta, tb) = (self.value(a), self.value(b));
            plan.forward(ta.data(), tb.data(), out.data_mut());
        }
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `x W + b` for `x: [.., in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    /// Two-layer perceptron: linear, ReLU, linear.
    pub fn mlp2(&mut self, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
        let h = self.linear(x, w1, Some(b1))?;
        let h = self.relu(h);
        self.linear(h, w2, Some(b2))
    }

    /// 2D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = match *tx.shape() {
            [m, n] => (m, n),
            ref s => return Err(Error::dim(format!("transpose needs a matrix, got {:?}", s))),
        };
        let src = tx.data();
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let out = Tensor::new([n, m], data)?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        self.push(out, Op::LeakyRelu(x, slope), &[x])
    }

    /// Softmax over the last dimension, stabilized by the row maximum.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.last_dim();
        if tx.rank() == 0 || n == 0 {
            return Err(Error::dim(format!(
                "softmax over empty last dimension of {:?}",
                tx.shape()
            )));
        }
        let mut out = tx.clone();
        kernels::softmax_rows(out.data_mut(), n);
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// Normalize over the last dimension, then apply `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = tx.last_dim();
        if tx.rank() == 0 || tg.shape() != [n] || tb.shape() != [n] {
            return Err(Error::dim(format!(
                "layer_norm: gain {:?} / bias {:?} must be [{}] for input {:?}",
                tg.shape(),
                tb.shape(),
                n,
                tx.shape()
            )));
        }
        let (y, means, rstds) = kernels::layer_norm(tx.data(), tg.data(), tb.data(), n);
        let out = Tensor::new(tx.shape(), y)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                means,
                rstds,
            },
            &[x, gain, bias],
        ))
    }

    /// Same-size 3x3 cross-correlation: `x: [C_in, H, W]`,
    /// `kernel: [C_out, C_in, 3, 3]`, `bias: [C_out]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (tx, tk, tb) = (self.value(x), self.value(kernel), self.value(bias));
        let (c_in, h, w) = match *tx.shape() {
            [c, h, w] => (c, h, w),
            ref s => return Err(Error::dim(format!("conv2d input must be [C, H, W], got {:?}", s))),
        };
        let c_out = match *tk.shape() {
            [co, ci, 3, 3] if ci == c_in => co,
            [_, ci, 3, 3] => {
                return Err(Error::dim(format!(
                    "conv2d kernel expects {} input channels, input has {}",
                    ci, c_in
                )))
            }
            ref s => {
                return Err(Error::dim(format!(
                    "conv2d supports only [C_out, C_in, 3, 3] kernels, got {:?}",
                    s
                )))
            }
        };
        if tb.shape() != [c_out] {
            return Err(Error::dim(format!(
                "conv2d bias must be [{}], got {:?}",
                c_out,
                tb.shape()
            )));
        }
        let hw = h * w;
        let cols = kernels::im2col3(tx.data(), c_in, h, w);
        let mut out = vec![T::zero(); c_out * hw];
        for (co, plane) in out.chunks_mut(hw).enumerate() {
            plane.fill(tb.data()[co]);
        }
        gemm(
            c_out,
            c_in * 9,
            hw,
            T::one(),
            tk.data(),
            Layout::row_major(c_in * 9),
            &cols,
            Layout::row_major(hw),
            T::one(),
            &mut out,
            Layout::row_major(hw),
        );
        let out = Tensor::new([c_out, h, w], out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                kernel,
                bias,
                cols,
            },
            &[x, kernel, bias],
        ))
    }

    fn fourier(&mut self, x: Var, inverse: bool) -> Result<Var> {
        let tx = self.value(x);
        let (h, w) = match *tx.shape() {
            [2, h, w] => (h, w),
            ref s => {
                return Err(Error::dim(format!(
                    "Fourier op needs a [2, H, W] tensor, got {:?}",
                    s
                )))
            }
        };
        let mut out = tx.clone();
        {
            let (re, im) = out.data_mut().split_at_mut(h * w);
            centered_transform(re, im, h, w, inverse)?;
        }
        Ok(self.push(out, Op::Fourier { x, inverse }, &[x]))
    }

    /// Centered orthonormal 2D FFT of a `[2, H, W]` tensor.
    pub fn fft2(&mut self, x: Var) -> Result<Var> {
        self.fourier(x, false)
    }

    /// Centered orthonormal inverse 2D FFT of a `[2, H, W]` tensor.
    pub fn ifft2(&mut self, x: Var) -> Result<Var> {
        self.fourier(x, true)
    }

    /// Multi-head scaled dot-product attention, `softmax(Q K^T / sqrt(d_h)) V`
    /// per head. `q: [Lq, d]`, `k, v: [Lk, d]`. No masking.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, label: &str) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (lq, d) = match *tq.shape() {
            [lq, d] => (lq, d),
            ref s => return Err(Error::dim(format!("attention query must be [L, d], got {:?}", s))),
        };
        let lk = tk.shape().first().copied().unwrap_or(0);
        if tk.shape() != [lk, d] || tv.shape() != [lk, d] {
            return Err(Error::dim(format!(
                "attention key {:?} / value {:?} must be [Lk, {}]",
                tk.shape(),
                tv.shape(),
                d
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim(format!("width {} not divisible by {} heads", d, heads)));
        }
        if lk == 0 {
            return Err(Error::dim("attention over an empty key set"));
        }
        let (out, probs) = kernels::attention(tq.data(), tk.data(), tv.data(), lq, lk, d, heads);
        let out = Tensor::new([lq, d], out)?;
        self.attention.entries.push(AttentionEntry {
            label: label.to_string(),
            heads,
            queries: lq,
            keys: lk,
            probs: self.attention.record_probs.then(|| probs.clone()),
        });
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Euclidean norm of all entries.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().map(|&v| v * v).sum();
        self.push(Tensor::scalar(s.sqrt()), Op::L2Norm(x), &[x])
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape; the attention
    /// log survives.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::arg("backward on an empty tape"));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), T::one()));
        }
        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

/// Adds `delta` (computed lazily) into the gradient slot of `v` when it
/// participates in differentiation.
fn accumulate<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    v: Var,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()));
    f(slot.data_mut());
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backprop_node<T: Real>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let gd = g.data();
    let val = |v: Var| nodes[v.0].value.data();
    let needs = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, gd));
            accumulate(nodes, grads, *b, |d| add_into(d, gd));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, gd));
            accumulate(nodes, grads, *b, |d| {
                d.iter_mut().zip(gd).for_each(|(x, &y)| *x -= y)
            });
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |d| {
                for i in 0..d.len() {
                    d[i] += gd[i] * vb[i];
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for i in 0..d.len() {
                    d[i] += gd[i] * va[i];
                }
            });
        }
        Op::Scale(x, s) => {
            let s = *s;
            accumulate(nodes, grads, *x, |d| {
                d.iter_mut().zip(gd).for_each(|(x, &y)| *x += y * s)
            });
        }
        Op::AddRowBias(x, b) => {
            accumulate(nodes, grads, *x, |d| add_into(d, gd));
            let n = nodes[b.0].value.numel();
            accumulate(nodes, grads, *b, |d| {
                for row in gd.chunks(n) {
                    add_into(d, row);
                }
            });
        }
        Op::MatMul(a, b) => {
            let plan = MatmulPlan::new(nodes[a.0].value.shape(), nodes[b.0].value.shape())
                .expect("shapes validated in forward");
            if needs(*a) {
                let vb = val(*b);
                accumulate(nodes, grads, *a, |d| plan.grad_a(gd, vb, d));
            }
            if needs(*b) {
                let va = val(*a);
                accumulate(nodes, grads, *b, |d| plan.grad_b(gd, va, d));
            }
        }
        Op::Transpose(x) => {
            let (m, n) = (node.value.shape()[1], node.value.shape()[0]);
            // node value is [n, m]; input is [m, n].
            accumulate(nodes, grads, *x, |d| {
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] += gd[j * m + i];
                    }
                }
            });
        }
        Op::Reshape(x) => accumulate(nodes, grads, *x, |d| add_into(d, gd)),
        Op::Relu(x) => {
            let vx = val(*x);
            accumulate(nodes, grads, *x, |d| {
                for i in 0..d.len() {
                    if vx[i] > T::zero() {
                        d[i] += gd[i];
                    }
                }
            });
        }
        Op::LeakyRelu(x, slope) => {
            let vx = val(*x);
            let slope = *slope;
            accumulate(nodes, grads, *x, |d| {
                for i in 0..d.len() {
                    d[i] += if vx[i] > T::zero() { gd[i] } else { gd[i] * slope };
                }
            });
        }
        Op::Softmax(x) => {
            let n = node.value.last_dim();
            let mut dx = gd.to_vec();
            kernels::softmax_rows_backward(node.value.data(), &mut dx, n);
            accumulate(nodes, grads, *x, |d| add_into(d, &dx));
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            means,
            rstds,
        } => {
            let n = node.value.last_dim();
            let mut dx = needs(*x).then(|| vec![T::zero(); node.value.numel()]);
            let mut dg = needs(*gain).then(|| vec![T::zero(); n]);
            let mut db = needs(*bias).then(|| vec![T::zero(); n]);
            kernels::layer_norm_backward(
                val(*x),
                val(*gain),
                means,
                rstds,
                gd,
                n,
                dx.as_deref_mut(),
                dg.as_deref_mut(),
                db.as_deref_mut(),
            );
            if let Some(dx) = dx {
                accumulate(nodes, grads, *x, |d| add_into(d, &dx));
            }
            if let Some(dg) = dg {
                accumulate(nodes, grads, *gain, |d| add_into(d, &dg));
            }
            if let Some(db) = db {
                accumulate(nodes, grads, *bias, |d| add_into(d, &db));
            }
        }
        Op::Conv2d {
            x,
            kernel,
            bias,
            cols,
        } => {
            let (c_in, h, w) = {
                let s = nodes[x.0].value.shape();
                (s[0], s[1], s[2])
            };
            let c_out = node.value.shape()[0];
            let hw = h * w;
            let k9 = c_in * 9;
            accumulate(nodes, grads, *bias, |d| {
                for (co, plane) in gd.chunks(hw).enumerate() {
                    d[co] += plane.iter().copied().sum::<T>();
                }
            });
            accumulate(nodes, grads, *kernel, |d| {
                // dK += dY cols^T
                gemm(
                    c_out,
                    hw,
                    k9,
                    T::one(),
                    gd,
                    Layout::row_major(hw),
                    cols,
                    Layout::row_major(hw).t(),
                    T::one(),
                    d,
                    Layout::row_major(k9),
                );
            });
            if needs(*x) {
                let mut dcols = vec![T::zero(); k9 * hw];
                gemm(
                    k9,
                    c_out,
                    hw,
                    T::one(),
                    val(*kernel),
                    Layout::row_major(k9).t(),
                    gd,
                    Layout::row_major(hw),
                    T::zero(),
                    &mut dcols,
                    Layout::row_major(hw),
                );
                accumulate(nodes, grads, *x, |d| kernels::col2im3(&dcols, c_in, h, w, d));
            }
        }
        Op::Fourier { x, inverse } => {
            let (h, w) = (node.value.shape()[1], node.value.shape()[2]);
            // Unitary map: the adjoint is the opposite-direction transform.
            let mut dx = gd.to_vec();
            {
                let (re, im) = dx.split_at_mut(h * w);
                centered_transform(re, im, h, w, !*inverse).expect("dims validated in forward");
            }
            accumulate(nodes, grads, *x, |d| add_into(d, &dx));
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            probs,
        } => {
            let (lq, d) = (node.value.shape()[0], node.value.shape()[1]);
            let lk = nodes[k.0].value.shape()[0];
            let mut dq = needs(*q).then(|| vec![T::zero(); lq * d]);
            let mut dk = needs(*k).then(|| vec![T::zero(); lk * d]);
            let mut dv = needs(*v).then(|| vec![T::zero(); lk * d]);
            kernels::attention_backward(
                val(*q),
                val(*k),
                val(*v),
                probs,
                gd,
                lq,
                lk,
                d,
                *heads,
                dq.as_deref_mut(),
                dk.as_deref_mut(),
                dv.as_deref_mut(),
            );
            if let Some(dq) = dq {
                accumulate(nodes, grads, *q, |t| add_into(t, &dq));
            }
            if let Some(dk) = dk {
                accumulate(nodes, grads, *k, |t| add_into(t, &dk));
            }
            if let Some(dv) = dv {
                accumulate(nodes, grads, *v, |t| add_into(t, &dv));
            }
        }
        Op::Sum(x) => {
            let s = gd[0];
            accumulate(nodes, grads, *x, |d| d.iter_mut().for_each(|v| *v += s));
        }
        Op::L2Norm(x) => {
            let norm = node.value.data()[0];
            if norm > T::zero() {
                let s = gd[0] / norm;
                let vx = val(*x);
                accumulate(nodes, grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += s * vx[i];
                    }
                });
            }
        }
    }
}

/// Shape bookkeeping for batched matmul.
struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    out_shape: Vec<usize>,
}

impl MatmulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        let err = || {
            Error::dim(format!(
                "matmul shape mismatch: {:?} x {:?}",
                sa, sb
            ))
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (batch_dims, a_batched, b_batched) = if ba == bb {
            (ba.to_vec(), !ba.is_empty(), !bb.is_empty())
        } else if bb.is_empty() {
            (ba.to_vec(), true, false)
        } else if ba.is_empty() {
            (bb.to_vec(), false, true)
        } else {
            return Err(err());
        };
        let batch = batch_dims.iter().product();
        let mut out_shape = batch_dims;
        out_shape.extend([m, n]);
        Ok(MatmulPlan {
            m,
            k,
            n,
            batch,
            a_batched,
            b_batched,
            out_shape,
        })
    }

    fn offsets(&self, i: usize) -> (usize, usize, usize) {
        let oa = if self.a_batched { i * self.m * self.k } else { 0 };
        let ob = if self.b_batched { i * self.k * self.n } else { 0 };
        (oa, ob, i * self.m * self.n)
    }

    fn forward<T: Real>(&self, a: &[T], b: &[T], c: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if !self.b_batched {
            // Fold the batch into the row dimension.
            let rows = if self.a_batched { self.batch * m } else { m };
            gemm(rows, k, n, T::one(), a, Layout::row_major(k), b, Layout::row_major(n), T::zero(), c, Layout::row_major(n));
            return;
        }
        for i in 0..self.batch {
            let (oa, ob, oc) = self.offsets(i);
            gemm(m, k, n, T::one(), a, Layout::row_major(k).at(oa), b, Layout::row_major(n).at(ob), T::zero(), c, Layout::row_major(n).at(oc));
        }
    }

    /// `dA += G B^T`
    fn grad_a<T: Real>(&self, g: &[T], b: &[T], da: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if !self.b_batched {
            let rows = if self.a_batched { self.batch * m } else { m };
            gemm(rows, n, k, T::one(), g, Layout::row_major(n), b, Layout::row_major(n).t(), T::one(), da, Layout::row_major(k));
            return;
        }
        for i in 0..self.batch {
            let (oa, ob, oc) = self.offsets(i);
            gemm(m, n, k, T::one(), g, Layout::row_major(n).at(oc), b, Layout::row_major(n).at(ob).t(), T::one(), da, Layout::row_major(k).at(oa));
        }
    }

    /// `dB += A^T G`
    fn grad_b<T: Real>(&self, g: &[T], a: &[T], db: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if !self.b_batched {
            let rows = if self.a_batched { self.batch * m } else { m };
            gemm(k, rows, n, T::one(), a, Layout::row_major(k).t(), g, Layout::row_major(n), T::one(), db, Layout::row_major(n));
            return;
        }
        for i in 0..self.batch {
            let (oa, ob, oc) = self.offsets(i);
            gemm(k, m, n, T::one(), a, Layout::row_major(k).at(oa).t(), g, Layout::row_major(n).at(oc), T::one(), db, Layout::row_major(n).at(ob));
        }
    }
}
