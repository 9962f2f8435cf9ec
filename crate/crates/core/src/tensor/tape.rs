//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its value and the handles of its inputs.
//! A node requires grad when any input does. [`Tape::backward`] walks the
//! tape once in reverse and *adds* the resulting adjoints into the per-node
//! gradient slots, so calling it twice without [`Tape::zero_grad`] doubles
//! every gradient.

use super::{kernels, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Relu(Var),
    Sum(Var),
    BceWithLogits {
        logits: Var,
        labels: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Logit clamp bound matching probabilities clamped to `[eps, 1 - eps]`.
pub(crate) fn logit_clamp<T: Scalar>(eps: f64) -> T {
    T::lit(((1.0 - eps) / eps).ln())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor.detached(), Op::Leaf, rg)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    /// Forces gradient tracking on `v` and everything recorded after it
    /// that depends on it. Must be called before the dependents are built.
    pub fn watch(&mut self, v: Var) {
        self.nodes[v.0].requires_grad = true;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[v.0].value.matrix_dims(op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul")?;
        let (k2, n) = self.mat(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds a `[d]` bias to every row of `x[..., d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, d) = self.value(x).rows_cols();
        if self.shape(bias) != [d] {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let t = self.value(x).scale(k);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, k), rg)
    }

    /// Rows `start..start + count` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (r, c) = self.mat(x, "slice_rows")?;
        if count == 0 || start + count > r {
            return Err(Error::dim("slice_rows", self.shape(x), &[start, count]));
        }
        let data = self.data(x)[start * c..(start + count) * c].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![count, c], data)?, Op::SliceRows(x, start), rg))
    }

    /// Columns `start..start + count` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (r, c) = self.mat(x, "slice_cols")?;
        if count == 0 || start + count > c {
            return Err(Error::dim("slice_cols", self.shape(x), &[start, count]));
        }
        let src = self.data(x);
        let data = (0..r)
            .flat_map(|i| src[i * c + start..i * c + start + count].iter().copied())
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![r, count], data)?, Op::SliceCols(x, start), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let (_, c) = self.mat(parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c2) = self.mat(p, "concat_rows")?;
            if c2 != c {
                return Err(Error::dim("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.data(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![rows, c], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let (r, _) = self.mat(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r2, c) = self.mat(p, "concat_cols")?;
            if r2 != r {
                return Err(Error::dim("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![r, total], data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x).softmax();
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (_, d) = self.value(x).rows_cols();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        if eps <= T::zero() {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let (out, xhat, inv_std) =
            kernels::layer_norm_rows(self.data(x), self.data(gamma), self.data(beta), d, eps);
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).gelu();
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).sigmoid();
        let rg = self.rg(&[x]);
        self.push(t, Op::Sigmoid(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(t, Op::Sum(x), rg)
    }

    /// Binary cross-entropy on logits `[N×C]` (or `[C]` for one sample),
    /// summed over classes and averaged over samples.
    ///
    /// Logits are clamped to the range that corresponds to probabilities in
    /// `[eps, 1 - eps]` when computing the value. The backward pass uses
    /// `(sigmoid(z) - y) / N` everywhere, which is the exact derivative inside
    /// the clamp and keeps saturated wrong predictions trainable.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[T], eps: f64) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if labels.len() != self.data(logits).len() {
            return Err(Error::Contract(format!(
                "bce: {} labels for logits of shape {shape:?}",
                labels.len()
            )));
        }
        let n = if shape.len() == 2 { shape[0] } else { 1 };
        let bound: T = logit_clamp(eps);
        let total = self
            .data(logits)
            .iter()
            .zip(labels)
            .map(|(&z, &y)| {
                let z = z.max(-bound).min(bound);
                // -[y ln s(z) + (1-y) ln(1-s(z))] = y softplus(-z) + (1-y) softplus(z)
                y * kernels::softplus(-z) + (T::one() - y) * kernels::softplus(z)
            })
            .fold(T::zero(), |a, b| a + b);
        let loss = total / T::from_usize_lossy(n);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`, accumulating into gradient slots.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &b)| *a = *a + b),
                slot => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.nodes[a.0].requires_grad {
                    send(*a, kernels::matmul_bt(g, self.data(*b), m, n, k));
                }
                if self.nodes[b.0].requires_grad {
                    send(*b, kernels::matmul_at(self.data(*a), g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                send(*a, kernels::transpose(g, c, r));
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let ga = g.iter().zip(self.data(*b)).map(|(&x, &y)| x * y).collect();
                let gb = g.iter().zip(self.data(*a)).map(|(&x, &y)| x * y).collect();
                send(*a, ga);
                send(*b, gb);
            }
            Op::AddBias(x, bias) => {
                let d = self.shape(*bias)[0];
                let mut gb = vec![T::zero(); d];
                for row in g.chunks(d) {
                    gb.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                }
                send(*x, g.to_vec());
                send(*bias, gb);
            }
            Op::Scale(x, k) => send(*x, g.iter().map(|&v| v * *k).collect()),
            Op::SliceRows(x, start) => {
                let c = self.shape(*x)[1];
                let mut gx = vec![T::zero(); self.data(*x).len()];
                gx[start * c..start * c + g.len()].copy_from_slice(g);
                send(*x, gx);
            }
            Op::SliceCols(x, start) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let w = g.len() / r;
                let mut gx = vec![T::zero(); r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                send(*x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.data(p).len();
                    send(p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let r = self.shape(parts[0])[0];
                let total = g.len() / r;
                let mut col = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    let gp = (0..r)
                        .flat_map(|i| g[i * total + col..i * total + col + w].iter().copied())
                        .collect();
                    send(p, gp);
                    col += w;
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let (_, c) = node.value.rows_cols();
                let mut gx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(c).zip(g.chunks(c)) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    gx.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - dot)));
                }
                send(*x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.data(*gamma);
                let d = gam.len();
                let nd = T::from_usize_lossy(d);
                if self.nodes[x.0].requires_grad {
                    let mut gx = Vec::with_capacity(g.len());
                    for ((gr, hr), &inv) in g.chunks(d).zip(xhat.chunks(d)).zip(inv_std) {
                        let dh: Vec<T> = gr.iter().zip(gam).map(|(&a, &b)| a * b).collect();
                        let mean_dh = kernels::sum(&dh) / nd;
                        let mean_dh_h = dh
                            .iter()
                            .zip(hr)
                            .fold(T::zero(), |a, (&p, &q)| a + p * q)
                            / nd;
                        gx.extend(
                            dh.iter()
                                .zip(hr)
                                .map(|(&p, &q)| inv * (p - mean_dh - q * mean_dh_h)),
                        );
                    }
                    send(*x, gx);
                }
                let mut gg = vec![T::zero(); d];
                let mut gbeta = vec![T::zero(); d];
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] = gg[j] + gr[j] * hr[j];
                        gbeta[j] = gbeta[j] + gr[j];
                    }
                }
                send(*gamma, gg);
                send(*beta, gbeta);
            }
            Op::Gelu(x) => {
                let gx = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(&a, &v)| a * kernels::gelu_grad(v))
                    .collect();
                send(*x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(&a, &s)| a * s * (T::one() - s))
                    .collect();
                send(*x, gx);
            }
            Op::Relu(x) => {
                let gx = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(&a, &v)| if v > T::zero() { a } else { T::zero() })
                    .collect();
                send(*x, gx);
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.data(*x).len()]),
            Op::BceWithLogits { logits, labels } => {
                let shape = self.shape(*logits);
                let n = if shape.len() == 2 { shape[0] } else { 1 };
                let scale = g[0] / T::from_usize_lossy(n);
                let gx = self
                    .data(*logits)
                    .iter()
                    .zip(labels)
                    .map(|(&z, &y)| scale * (kernels::sigmoid(z) - y))
                    .collect();
                send(*logits, gx);
            }
        }
    }
}
