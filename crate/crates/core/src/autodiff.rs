//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and the inputs it
//! needs for the backward rule. [`Tape::backward`] walks the tape in reverse
//! recorded order and accumulates gradients additively, so a value used twice
//! receives the sum of both contributions. Leaves borrow their tensors for the
//! lifetime of the tape; drop the tape before mutating parameters.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    Relu(Var),
    Transpose(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    MeanRows(Var, Vec<f64>),
    ConcatRows(Var, Var),
    SelectRow(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node<'p> {
    shape: Vec<usize>,
    value: Cow<'p, [f64]>,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation. One tape per forward pass; clear between steps.
#[derive(Debug, Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    grads: Vec<Option<Vec<f64>>>,
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        2 => (shape[0], shape[1]),
        1 => (1, shape[0]),
        _ => (1, numel(shape)),
    }
}

/// `out[r×c] += a[r×k] · b[k×c]`
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * c..(p + 1) * c];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[r×k] += a[r×c] · b[k×c]ᵀ`
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], r: usize, c: usize, k: usize) {
    for i in 0..r {
        let arow = &a[i * c..(i + 1) * c];
        for j in 0..k {
            let brow = &b[j * c..(j + 1) * c];
            out[i * k + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×c] += a[r×k]ᵀ · b[r×c]`
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let brow = &b[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * c..(p + 1) * c];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Row-wise softmax with max subtraction. `mask` entries of 0 are excluded
/// and come out exactly 0.
pub fn softmax_rows_values(
    x: &[f64],
    rows: usize,
    cols: usize,
    mask: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let keep = |j: usize| mask.is_none_or(|m| m[i * cols + j] != 0.0);
        let max = (0..cols)
            .filter(|&j| keep(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::EmptyAttentionRow { row: i });
        }
        let orow = &mut out[i * cols..(i + 1) * cols];
        let mut total = 0.0;
        for j in 0..cols {
            if keep(j) {
                let e = (row[j] - max).exp();
                orow[j] = e;
                total += e;
            }
        }
        orow.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a borrowed tensor. Gradients flow to it iff it requires grad.
    pub fn leaf(&mut self, t: &'p Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            requires_grad: t.requires_grad(),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an owned tensor as a leaf.
    pub fn leaf_owned(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), requires_grad, Op::Leaf)
    }

    /// Records a constant that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(self.push(shape, data, false, Op::Leaf))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(
            self.nodes[v.0].shape.clone(),
            self.nodes[v.0].value.to_vec(),
        )
        .expect("tape nodes keep shape and data consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (r, k, c) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; r * c];
        gemm_nn(self.value(a), self.value(b), &mut out, r, k, c);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![r, c], out, rg, Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Add(a, b)))
    }

    /// Adds a length-`c` bias to every row of an `r×c` matrix (or to a vector).
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(a).last().unwrap_or(&1);
        if numel(self.shape(bias)) != c {
            return Err(Error::shape("add_bias", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + b[i % c])
            .collect();
        let rg = self.rg(&[a, bias]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::AddBias(a, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Mul(a, b)))
    }

    /// Elementwise product with a constant buffer (dropout masks).
    pub fn mul_const(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        if factors.len() != self.value(a).len() {
            return Err(Error::shape("mul_const", self.shape(a), &[factors.len()]));
        }
        let out = self
            .value(a)
            .iter()
            .zip(&factors)
            .map(|(x, f)| x * f)
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::MulConst(a, factors)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, rg, Op::Scale(a, s))
    }

    /// ReLU with subgradient 0 at 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, rg, Op::Relu(a))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let v = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![c, r], out, rg, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), out, rg, Op::Reshape(a)))
    }

    /// Row-wise softmax. Masked-out entries (mask value 0) are exactly 0 in
    /// the output and receive no gradient; a row with no unmasked entry is an
    /// error.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[f64]>) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("softmax_rows", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::shape("softmax_rows", s, &[m.len()]));
            }
        }
        let out = softmax_rows_values(self.value(x), r, c, mask)?;
        let rg = self.rg(&[x]);
        Ok(self.push(vec![r, c], out, rg, Op::SoftmaxRows(x)))
    }

    /// Weighted mean over rows of an `r×c` matrix: `Σ wᵢ·xᵢ / Σ wᵢ`.
    /// With 0/1 weights this is the mean over the selected rows. Weights must
    /// be non-negative.
    pub fn mean_rows(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let (r, c) = dims2(self.shape(x));
        if weights.len() != r {
            return Err(Error::shape("mean_rows", self.shape(x), &[weights.len()]));
        }
        let total: f64 = weights.iter().sum();
        if total == 0.0 {
            return Err(Error::EmptyAttentionRow { row: 0 });
        }
        let norm: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let v = self.value(x);
        // Running mean: a block of identical rows averages to that row exactly.
        let mut out = vec![0.0; c];
        let mut seen = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            seen += w;
            let frac = w / seen;
            for (o, xv) in out.iter_mut().zip(&v[i * c..(i + 1) * c]) {
                *o += frac * (xv - *o);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![c], out, rg, Op::MeanRows(x, norm)))
    }

    /// Stacks `a` above `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("concat_rows", sa, sb));
        }
        let shape = vec![sa[0] + sb[0], sa[1]];
        let mut out = self.value(a).to_vec();
        out.extend_from_slice(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, rg, Op::ConcatRows(a, b)))
    }

    pub fn select_row(&mut self, a: Var, row: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || row >= s[0] {
            return Err(Error::shape("select_row", s, &[row]));
        }
        let c = s[1];
        let out = self.value(a)[row * c..(row + 1) * c].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(vec![c], out, rg, Op::SelectRow(a, row)))
    }

    /// Columns `start..start + width` of an `r×c` matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || start + width > s[1] {
            return Err(Error::shape("slice_cols", s, &[start, width]));
        }
        let (r, c) = (s[0], s[1]);
        let v = self.value(a);
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + width]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![r, width], out, rg, Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptySequence)?;
        let r = self.shape(first)[0];
        let mut c = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != r {
                return Err(Error::shape("concat_cols", self.shape(first), s));
            }
            c += s[1];
        }
        let mut out = vec![0.0; r * c];
        let mut offset = 0;
        for &p in parts {
            let w = self.shape(p)[1];
            let v = self.value(p);
            for i in 0..r {
                out[i * c + offset..i * c + offset + w].copy_from_slice(&v[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![r, c], out, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Per-row layer normalisation with affine `gamma`, `beta` of length `c`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = dims2(self.shape(x));
        if numel(self.shape(gamma)) != c || numel(self.shape(beta)) != c {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let v = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
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

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![], vec![s], rg, Op::Sum(a))
    }

    /// `-log softmax(logits)[label]`, computed through log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let v = self.value(logits);
        if label >= v.len() {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("cross_entropy logits"));
        }
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let probs: Vec<f64> = v.iter().map(|x| (x - lse).exp()).collect();
        let loss = lse - v[label];
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![],
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
        ))
    }

    /// Gradient of the last `backward` call's loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Backpropagates from a scalar `loss`. Every requires-grad node reachable
    /// from the loss gets a gradient, summed over all of its uses.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, delta: Vec<f64>| match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
            slot @ None => *slot = Some(delta),
        };
        let node = &nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (r, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let c = nodes[b.0].shape[1];
                if wants(*a) {
                    let mut da = vec![0.0; r * k];
                    gemm_nt(g, &nodes[b.0].value, &mut da, r, c, k);
                    acc(*a, da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * c];
                    gemm_tn(&nodes[a.0].value, g, &mut db, r, k, c);
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(*a, g.to_vec());
                }
                if wants(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::AddBias(a, bias) => {
                if wants(*a) {
                    acc(*a, g.to_vec());
                }
                if wants(*bias) {
                    let c = nodes[bias.0].value.len();
                    let mut db = vec![0.0; c];
                    for (i, gv) in g.iter().enumerate() {
                        db[i % c] += gv;
                    }
                    acc(*bias, db);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(
                        *a,
                        g.iter()
                            .zip(nodes[b.0].value.iter())
                            .map(|(x, y)| x * y)
                            .collect(),
                    );
                }
                if wants(*b) {
                    acc(
                        *b,
                        g.iter()
                            .zip(nodes[a.0].value.iter())
                            .map(|(x, y)| x * y)
                            .collect(),
                    );
                }
            }
            Op::MulConst(a, f) => {
                acc(*a, g.iter().zip(f).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|x| x * s).collect()),
            Op::Relu(a) => {
                let d = g
                    .iter()
                    .zip(nodes[a.0].value.iter())
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect();
                acc(*a, d);
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                acc(*a, d);
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::SoftmaxRows(x) => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let y = &node.value;
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, d);
            }
            Op::MeanRows(x, w) => {
                let c = node.shape[0];
                let mut d = vec![0.0; w.len() * c];
                for (i, wi) in w.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] = wi * g[j];
                    }
                }
                acc(*x, d);
            }
            Op::ConcatRows(a, b) => {
                let na = nodes[a.0].value.len();
                if wants(*a) {
                    acc(*a, g[..na].to_vec());
                }
                if wants(*b) {
                    acc(*b, g[na..].to_vec());
                }
            }
            Op::SelectRow(a, row) => {
                let c = node.shape[0];
                let mut d = vec![0.0; nodes[a.0].value.len()];
                d[row * c..(row + 1) * c].copy_from_slice(g);
                acc(*a, d);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let w = node.shape[1];
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].shape[1];
                    if wants(p) {
                        let mut d = Vec::with_capacity(r * w);
                        for i in 0..r {
                            d.extend_from_slice(&g[i * c + offset..i * c + offset + w]);
                        }
                        acc(p, d);
                    }
                    offset += w;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = nodes[gamma.0].value.len();
                let r = rstd.len();
                let gam = &nodes[gamma.0].value;
                if wants(*gamma) {
                    let mut dg = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                    acc(*gamma, dg);
                }
                if wants(*beta) {
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += g[i * c + j];
                        }
                    }
                    acc(*beta, db);
                }
                if wants(*x) {
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let dxhat: Vec<f64> = (0..c).map(|j| g[i * c + j] * gam[j]).collect();
                        let hrow = &xhat[i * c..(i + 1) * c];
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dh =
                            dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dx[i * c + j] = rstd[i] * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Sum(a) => acc(*a, vec![g[0]; nodes[a.0].value.len()]),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let mut d: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                d[*label] -= g[0];
                acc(*logits, d);
            }
        }
    }
}

/// Central-difference gradient check.
///
/// `f` builds a scalar on a fresh tape from the leaf holding `x`. Returns
/// `max_i |aᵢ − nᵢ| / max(‖a‖∞, ‖n‖∞, 1e-8)`: each element's error relative
/// to the gradient's scale, so entries that nearly cancel to zero are not
/// judged against differencing noise alone.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::Config(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }
    let analytic = {
        let input = x.clone().with_requires_grad(true);
        let mut tape = Tape::new();
        let xv = tape.leaf(&input);
        let out = f(&mut tape, xv)?;
        if !tape.scalar(out).is_finite() {
            return Err(Error::NonFinite("finite_diff_check objective"));
        }
        tape.backward(out)?;
        tape.grad(xv)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.len()])
    };
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.leaf(t);
        let out = f(&mut tape, xv)?;
        let v = tape.scalar(out);
        if !v.is_finite() {
            return Err(Error::NonFinite("finite_diff_check objective"));
        }
        Ok(v)
    };
    let mut probe = x.clone();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * step));
    }
    let inf_norm = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scale = inf_norm(&analytic).max(inf_norm(&numeric)).max(1e-8);
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / scale)
        .fold(0.0, f64::max))
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut rng = rng();
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let id = Tensor::identity(3);
        let mut tape = Tape::new();
        let (iv, xv) = (tape.leaf(&id), tape.leaf(&x));
        let out = tape.matmul(iv, xv).unwrap();
        assert_eq!(tape.value(out), x.data());

        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]);
        let (av, bv) = (tape.leaf(&a), tape.leaf(&b));
        let out = tape.matmul(av, bv).unwrap();
        assert_eq!(tape.shape(out), &[2, 1]);
        assert_eq!(tape.value(out), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let mut tape = Tape::new();
        let (av, bv) = (tape.leaf(&a), tape.leaf(&b));
        let msg = tape.matmul(av, bv).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_hand_cases() {
        let mut tape = Tape::new();
        let x = tape
            .constant(
                vec![3, 3],
                vec![0.0, 0.0, 0.0, 1000.0, 0.0, 0.0, 1.0, 2.0, 3.0],
            )
            .unwrap();
        let y = tape.softmax_rows(x, None).unwrap();
        let v = tape.value(y).to_vec();
        assert!(v.iter().all(|p| p.is_finite()));
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((v[3] - 1.0).abs() < 1e-12 && v[4] < 1e-300);
        for (got, want) in v[6..].iter().zip([0.0900, 0.2447, 0.6652]) {
            assert!((got - want).abs() < 1e-4);
        }

        let two = tape.constant(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let y = tape.softmax_rows(two, None).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_mask_zeros_and_empty_row() {
        let mut tape = Tape::new();
        let x = tape
            .constant(vec![2, 3], vec![1.0, 5.0, 2.0, 0.3, 0.1, 0.2])
            .unwrap();
        let mask = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let y = tape.softmax_rows(x, Some(&mask)).unwrap();
        let v = tape.value(y);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[3], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);

        let bad = [1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        let err = tape.softmax_rows(x, Some(&bad)).unwrap_err();
        assert!(err.to_string().contains("empty attention row"));
    }

    #[test]
    fn backward_sum_and_square() {
        let mut rng = rng();
        let x = Tensor::randn(&[2, 3], 1.0, &mut rng).with_requires_grad(true);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let s = tape.sum(xv);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(xv).unwrap(), &[1.0; 6]);

        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let sq = tape.mul(xv, xv).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        let want: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.grad(xv).unwrap(), want.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::zeros(&[2]).with_requires_grad(true);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        assert!(matches!(tape.backward(xv), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let a = Tensor::full(&[2, 2], 1.0);
        let b = Tensor::full(&[2, 2], 2.0).with_requires_grad(true);
        let mut tape = Tape::new();
        let (av, bv) = (tape.leaf(&a), tape.leaf(&b));
        let p = tape.matmul(av, bv).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert!(tape.grad(av).is_none());
        assert!(tape.grad(bv).is_some());
    }

    #[test]
    fn finite_diff_sum_is_exact() {
        let mut rng = rng();
        let x = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let err = finite_diff_check(|t, v| Ok(t.sum(v)), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn finite_diff_quadratic_form() {
        let mut rng = rng();
        let a = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let x = Tensor::randn(&[4, 1], 1.0, &mut rng);
        // xᵀ A x
        let err = finite_diff_check(
            |t, v| {
                let av = t.leaf_owned(a.clone());
                let ax = t.matmul(av, v)?;
                let xt = t.transpose(v)?;
                let q = t.matmul(xt, ax)?;
                Ok(t.sum(q))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn finite_diff_rejects_bad_step_and_nonfinite() {
        let x = Tensor::full(&[2], 1.0);
        assert!(finite_diff_check(|t, v| Ok(t.sum(v)), &x, 0.0).is_err());
        let err = finite_diff_check(
            |t, v| Ok(t.scale(v, f64::INFINITY)).map(|s| t.sum(s)),
            &x,
            1e-5,
        );
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }
}
