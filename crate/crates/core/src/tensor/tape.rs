//! Reverse-mode differentiation over a linear record of executed operations.
//!
//! A [`Tape`] owns every intermediate value. Parameters enter as leaves
//! (copied from their [`Tensor`]); after [`Tape::backward`] the caller moves
//! leaf gradients back into the parameter tensors. Nodes are appended in
//! execution order, so the tape is topologically sorted by construction.

use super::kernels::{gelu_derivative, gelu_scalar, matmul_into};
use super::Tensor;
use crate::error::{Error, Result};

/// Additive offset applied to masked-out logits.
pub const MASK_OFFSET: f64 = -1e9;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    AddScalar(Var),
    MulRows {
        x: Var,
        weights: Vec<f64>,
    },
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        inputs: Vec<Var>,
        index: Vec<(u32, u32)>,
    },
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    CosineRows {
        a: Var,
        b: Var,
        norms_a: Vec<f64>,
        norms_b: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Accumulates the gradient of `var` (if any reached it) into `target`.
    pub fn accumulate_into(&self, var: Var, target: &mut Tensor) -> Result<()> {
        match self.get(var) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops all recorded nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Records a copy of `t`; it participates in gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(Error::dim("constant", format!("{shape:?} vs {}", value.len())));
        }
        Ok(self.push(shape, value, false, Op::Leaf))
    }

    /// A gradient-free copy of `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, false, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = match self.shape(a) {
            [m, k] => (*m, *k),
            s => return Err(Error::dim("matmul", format!("lhs shape {s:?}"))),
        };
        let (k2, n) = match self.shape(b) {
            [k2, n] => (*k2, *n),
            s => return Err(Error::dim("matmul", format!("rhs shape {s:?}"))),
        };
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b, m, k, n }))
    }

    /// Per-group product of `[g, m, k]` and `[g, k, n]` (or `[g, n, k]` when `trans_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (g, m, k) = match self.shape(a) {
            [g, m, k] => (*g, *m, *k),
            s => return Err(Error::dim("batch_matmul", format!("lhs shape {s:?}"))),
        };
        let (g2, k2, n) = match (self.shape(b), trans_b) {
            ([g2, k2, n], false) => (*g2, *k2, *n),
            ([g2, n, k2], true) => (*g2, *k2, *n),
            (s, _) => return Err(Error::dim("batch_matmul", format!("rhs shape {s:?}"))),
        };
        if g != g2 || k != k2 {
            return Err(Error::dim(
                "batch_matmul",
                format!("{:?} x {:?} (trans_b={trans_b})", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; g * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for i in 0..g {
                matmul_into(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            vec![g, m, n],
            out,
            rg,
            Op::BatchMatMul {
                a,
                b,
                groups: g,
                m,
                k,
                n,
                trans_b,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "mul",
                format!("{:?} * {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, rg, Op::Mul(a, b)))
    }

    /// `x[i] + bias[i % bias.len()]`: a bias vector on rows, or a position
    /// table on every sequence of a batch.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let nb = self.value(bias).len();
        let nx = self.value(x).len();
        if nb == 0 || !nx.is_multiple_of(nb) {
            return Err(Error::dim(
                "add_bias",
                format!("{:?} + broadcast {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let bv = self.value(bias);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % nb])
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(shape, out, rg, Op::AddBias { x, bias }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, out, rg, Op::Scale { x, factor })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v + c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, out, rg, Op::AddScalar(x))
    }

    /// Multiplies each row of `x` (rows = `weights.len()`) by a constant weight.
    pub fn mul_rows(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let nx = self.value(x).len();
        let rows = weights.len();
        if rows == 0 || !nx.is_multiple_of(rows) {
            return Err(Error::dim(
                "mul_rows",
                format!("{} weights for shape {:?}", rows, self.shape(x)),
            ));
        }
        let width = nx / rows;
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * weights[i / width])
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, rg, Op::MulRows { x, weights }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, out, rg, Op::Gelu(x))
    }

    /// Softmax over the last dimension with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::dim("softmax_rows", "scalar input"))?;
        let xv = self.value(x);
        if xv.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        let mut out = vec![0.0; xv.len()];
        if n > 0 {
            for (row, dst) in xv.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
                softmax_row(row, dst);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, rg, Op::SoftmaxRows(x)))
    }

    /// Normalizes each last-dimension vector to zero mean and unit variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim("layer_norm", "scalar input"))?;
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::dim(
                "layer_norm",
                format!("last dim {d}, gain {:?}, bias {:?}", self.shape(gain), self.shape(bias)),
            ));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let rows = xv.len() / d.max(1);
        let mut normalized = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            if !is.is_finite() {
                return Err(Error::NonFinite { op: "layer_norm" });
            }
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                normalized[r * d + j] = h;
                out[r * d + j] = gv[j] * h + bv[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        ))
    }

    /// Builds a tensor of `shape` whose element `i` is element `index[i].1`
    /// of input `index[i].0`. Concatenation, row selection and head
    /// reshuffles are all expressed through this.
    pub fn gather(&mut self, inputs: &[Var], index: Vec<(u32, u32)>, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != index.len() {
            return Err(Error::dim("gather", format!("{shape:?} vs {} indices", index.len())));
        }
        let mut out = Vec::with_capacity(index.len());
        for &(src, off) in &index {
            let v = inputs
                .get(src as usize)
                .map(|&var| self.value(var))
                .and_then(|vals| vals.get(off as usize))
                .ok_or_else(|| Error::dim("gather", format!("index ({src}, {off}) out of range")))?;
            out.push(*v);
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::Gather {
                inputs: inputs.to_vec(),
                index,
            },
        ))
    }

    /// Stacks 2-D parts with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first().map(|&p| self.shape(p).to_vec()) {
            Some(s) if s.len() == 2 => s[1],
            _ => return Err(Error::dim("concat_rows", "parts must be matrices")),
        };
        let mut index = Vec::new();
        let mut rows = 0;
        for (i, &p) in parts.iter().enumerate() {
            match self.shape(p) {
                [r, c] if *c == cols => {
                    rows += r;
                    index.extend((0..r * c).map(|o| (i as u32, o as u32)));
                }
                s => return Err(Error::dim("concat_rows", format!("part shape {s:?}, cols {cols}"))),
            }
        }
        self.gather(parts, index, vec![rows, cols])
    }

    /// Picks rows of a 2-D tensor in the given order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = match self.shape(x) {
            [r, c] => (*r, *c),
            s => return Err(Error::dim("select_rows", format!("shape {s:?}"))),
        };
        if let Some(bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::dim("select_rows", format!("row {bad} of {r}")));
        }
        let index = rows
            .iter()
            .flat_map(|&i| (0..c).map(move |j| (0u32, (i * c + j) as u32)))
            .collect();
        self.gather(&[x], index, vec![rows.len(), c])
    }

    /// `[batch*seq, heads*d]` to `[batch*heads, seq, d]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let dim = self.value(x).len() / (batch * seq).max(1);
        if batch * seq * dim != self.value(x).len() || heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::dim("split_heads", format!("shape {:?}", self.shape(x))));
        }
        let d = dim / heads;
        let mut index = Vec::with_capacity(batch * seq * dim);
        for b in 0..batch {
            for h in 0..heads {
                for l in 0..seq {
                    for j in 0..d {
                        index.push((0, ((b * seq + l) * dim + h * d + j) as u32));
                    }
                }
            }
        }
        self.gather(&[x], index, vec![batch * heads, seq, d])
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let d = match self.shape(x) {
            [g, l, d] if *g == batch * heads && *l == seq => *d,
            s => return Err(Error::dim("merge_heads", format!("shape {s:?}"))),
        };
        let dim = heads * d;
        let mut index = Vec::with_capacity(batch * seq * dim);
        for b in 0..batch {
            for l in 0..seq {
                for h in 0..heads {
                    for j in 0..d {
                        index.push((0, (((b * heads + h) * seq + l) * d + j) as u32));
                    }
                }
            }
        }
        self.gather(&[x], index, vec![batch * seq, dim])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() {
            return Err(Error::dim("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, rg, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![], vec![s], rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean negative log-likelihood over a batch of logits `[batch, classes]`.
    ///
    /// Logits of classes with `mask[c] == false` are shifted by
    /// [`MASK_OFFSET`] before the softmax. A label whose class is masked out
    /// is a contract violation.
    pub fn cross_entropy_masked(&mut self, logits: Var, labels: &[usize], mask: &[bool]) -> Result<Var> {
        let (batch, classes) = match self.shape(logits) {
            [b, c] => (*b, *c),
            s => return Err(Error::dim("cross_entropy_masked", format!("logits shape {s:?}"))),
        };
        if labels.len() != batch || mask.len() != classes {
            return Err(Error::dim(
                "cross_entropy_masked",
                format!("{batch}x{classes} logits, {} labels, {} mask", labels.len(), mask.len()),
            ));
        }
        if batch == 0 {
            return Err(Error::Contract("cross entropy over an empty batch".into()));
        }
        for &y in labels {
            if y >= classes || !mask[y] {
                return Err(Error::Contract(format!("label {y} is masked out or out of range")));
            }
        }
        let lv = self.value(logits);
        if lv.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "cross_entropy_masked" });
        }
        let mut probs = vec![0.0; batch * classes];
        let mut total = 0.0;
        let mut shifted = vec![0.0; classes];
        for b in 0..batch {
            for c in 0..classes {
                let off = if mask[c] { 0.0 } else { MASK_OFFSET };
                shifted[c] = lv[b * classes + c] + off;
            }
            let max = shifted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = shifted.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
            total += lse - shifted[labels[b]];
            for c in 0..classes {
                probs[b * classes + c] = (shifted[c] - lse).exp();
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![],
            vec![total / batch as f64],
            rg,
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Row-wise cosine similarity of two `[n, d]` tensors, giving `[n]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = match self.shape(a) {
            [n, d] => (*n, *d),
            s => return Err(Error::dim("cosine_rows", format!("shape {s:?}"))),
        };
        if self.shape(b) != [n, d] {
            return Err(Error::dim("cosine_rows", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; n];
        let mut norms_a = vec![0.0; n];
        let mut norms_b = vec![0.0; n];
        for i in 0..n {
            let (ra, rb) = (&av[i * d..(i + 1) * d], &bv[i * d..(i + 1) * d]);
            let na = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(Error::NonFinite { op: "cosine_rows" });
            }
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            out[i] = dot / (na * nb);
            norms_a[i] = na;
            norms_b[i] = nb;
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            vec![n],
            out,
            rg,
            Op::CosineRows {
                a,
                b,
                norms_a,
                norms_b,
            },
        ))
    }

    /// Computes d`loss`/d`v` for every node that requires a gradient.
    ///
    /// A tape can be differentiated once; call [`Tape::reset`] before reuse.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if wants(*a) {
                    let da = slot(grads, *a, m * k);
                    matmul_into(m, n, k, g, false, self.value(*b), true, da, true);
                }
                if wants(*b) {
                    let db = slot(grads, *b, k * n);
                    matmul_into(k, m, n, self.value(*a), true, g, false, db, true);
                }
            }
            Op::BatchMatMul {
                a,
                b,
                groups,
                m,
                k,
                n,
                trans_b,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    let da = slot(grads, *a, groups * m * k);
                    for i in 0..*groups {
                        matmul_into(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &bv[i * k * n..(i + 1) * k * n],
                            !*trans_b,
                            &mut da[i * m * k..(i + 1) * m * k],
                            true,
                        );
                    }
                }
                if wants(*b) {
                    let db = slot(grads, *b, groups * k * n);
                    for i in 0..*groups {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            matmul_into(n, m, k, gi, true, ai, false, dbi, true);
                        } else {
                            matmul_into(k, m, n, ai, true, gi, false, dbi, true);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = self.value(*b);
                    let da = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                if wants(*b) {
                    let av = self.value(*a);
                    let db = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if wants(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if wants(*bias) {
                    let nb = self.value(*bias).len();
                    let db = slot(grads, *bias, nb);
                    for (i, gi) in g.iter().enumerate() {
                        db[i % nb] += gi;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if wants(*x) {
                    let dx = slot(grads, *x, g.len());
                    for i in 0..g.len() {
                        dx[i] += g[i] * factor;
                    }
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if wants(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
            }
            Op::MulRows { x, weights } => {
                if wants(*x) {
                    let width = g.len() / weights.len();
                    let dx = slot(grads, *x, g.len());
                    for i in 0..g.len() {
                        dx[i] += g[i] * weights[i / width];
                    }
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let xv = self.value(*x);
                    let dx = slot(grads, *x, g.len());
                    for i in 0..g.len() {
                        dx[i] += g[i] * gelu_derivative(xv[i]);
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if wants(*x) {
                    let n = *node.shape.last().unwrap_or(&1);
                    let y = &node.value;
                    let dx = slot(grads, *x, g.len());
                    if n > 0 {
                        for r in 0..g.len() / n {
                            let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                dx[r * n + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let d = *node.shape.last().unwrap_or(&1);
                let rows = inv_std.len();
                if wants(*gain) {
                    let dg = slot(grads, *gain, d);
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * normalized[r * d + j];
                        }
                    }
                }
                if wants(*bias) {
                    let db = slot(grads, *bias, d);
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                }
                if wants(*x) {
                    let gv = self.value(*gain);
                    let dx = slot(grads, *x, g.len());
                    let mut dh = vec![0.0; d];
                    for r in 0..rows {
                        let h = &normalized[r * d..(r + 1) * d];
                        for j in 0..d {
                            dh[j] = g[r * d + j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] += inv_std[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gather { inputs, index } => {
                for (slot_idx, &input) in inputs.iter().enumerate() {
                    if !wants(input) {
                        continue;
                    }
                    let len = self.value(input).len();
                    let dx = slot(grads, input, len);
                    for (gi, &(src, off)) in g.iter().zip(index) {
                        if src as usize == slot_idx {
                            dx[off as usize] += gi;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let dx = slot(grads, *x, self.value(*x).len());
                    dx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
            } => {
                if wants(*logits) {
                    let batch = labels.len();
                    let classes = probs.len() / batch;
                    let scale = g[0] / batch as f64;
                    let dl = slot(grads, *logits, probs.len());
                    for b in 0..batch {
                        for c in 0..classes {
                            let target = if c == labels[b] { 1.0 } else { 0.0 };
                            dl[b * classes + c] += scale * (probs[b * classes + c] - target);
                        }
                    }
                }
            }
            Op::CosineRows {
                a,
                b,
                norms_a,
                norms_b,
            } => {
                let n = norms_a.len();
                let d = self.value(*a).len() / n.max(1);
                let (av, bv) = (self.value(*a), self.value(*b));
                let cos = &node.value;
                for (target, other, own_norms, other_norms) in
                    [(*a, bv, norms_a, norms_b), (*b, av, norms_b, norms_a)]
                {
                    if !wants(target) {
                        continue;
                    }
                    let tv = self.value(target);
                    let dt = slot(grads, target, n * d);
                    for i in 0..n {
                        let (nt, no) = (own_norms[i], other_norms[i]);
                        for j in 0..d {
                            let t = tv[i * d + j];
                            let o = other[i * d + j];
                            dt[i * d + j] += g[i] * (o / (nt * no) - cos[i] * t / (nt * nt));
                        }
                    }
                }
            }
        }
    }
}

fn softmax_row(row: &[f64], dst: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &v) in dst.iter_mut().zip(row) {
        *d = (v - max).exp();
        total += *d;
    }
    dst.iter_mut().for_each(|d| *d /= total);
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
