//! A small reverse-mode autodiff tape over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the reverse of the node list is
//! a valid topological order for the backward pass. Operators that appear in
//! the encoder and the losses (layer norm, masked attention, softmax
//! cross-entropy, thresholded log-sum-exp) are fused so their backward passes
//! stay cheap and numerically stable.

use crate::tensor::{gemm, matmul, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of the sequences fed to [`Graph::attention`].
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub heads: usize,
    pub seq_len: usize,
    /// First non-padding position of every sequence (left padding).
    pub starts: Vec<usize>,
}

/// Per-anchor row selection for [`Graph::masked_lse`].
#[derive(Clone, Debug)]
pub struct LseSelection {
    /// Columns entering the log-sum-exp of each row. Must be non-empty.
    pub include: Vec<Vec<usize>>,
    /// Columns whose membership is decided by the threshold of the row; they
    /// receive the straight-through surrogate gradient.
    pub gated: Vec<Vec<usize>>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Tensor),
    AddRow(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    BroadcastRows(Var),
    Gelu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        drop: Option<Tensor>,
        probs: Vec<f64>,
    },
    RowNormalize {
        x: Var,
        norms: Vec<f64>,
    },
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
    MaskedLse {
        x: Var,
        k: Option<Var>,
        sel: LseSelection,
        inv_tau: f64,
        gain: Vec<f64>,
    },
    GatherEntries {
        x: Var,
        entries: Vec<Vec<(usize, f64)>>,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn grad_buf<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: (usize, usize)) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` cut off from the backward pass.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let mut value = self.value(a).clone();
        for (x, y) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *x -= y;
        }
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let mut value = self.value(a).clone();
        for (x, y) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().for_each(|x| *x *= s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().for_each(|x| *x += s);
        self.push(value, Op::AddScalar(a), &[a])
    }

    /// Element-wise product with a constant (dropout masks, padding masks).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Var {
        assert_eq!(self.shape(a), c.shape(), "mul_const shape mismatch");
        let mut value = self.value(a).clone();
        for (x, y) in value.data_mut().iter_mut().zip(c.data()) {
            *x *= y;
        }
        self.push(value, Op::MulConst(a, c), &[a])
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row expects a 1x{c} row");
        let mut value = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for i in 0..r {
            for (x, b) in value.row_mut(i).iter_mut().zip(&bias) {
                *x += b;
            }
        }
        self.push(value, Op::AddRow(a, row), &[a, row])
    }

    pub fn matmul(&mut self, a: Var, trans_a: bool, b: Var, trans_b: bool) -> Var {
        let value = matmul(self.value(a), trans_a, self.value(b), trans_b);
        self.push(
            value,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            &[a, b],
        )
    }

    /// `x W + b` for a `1 × out` bias row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, false, w, false);
        self.add_row(h, b)
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = self.value(table);
        let cols = t.cols();
        let mut value = Tensor::zeros(idx.len(), cols);
        for (r, &i) in idx.iter().enumerate() {
            value.row_mut(r).copy_from_slice(t.row(i));
        }
        self.push(
            value,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let t = self.value(x);
        assert!(start <= end && end <= t.rows(), "slice_rows out of range");
        let cols = t.cols();
        let value = Tensor::from_vec(
            end - start,
            cols,
            t.data()[start * cols..end * cols].to_vec(),
        );
        self.push(value, Op::SliceRows { x, start }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let value = Tensor::from_vec(rows, cols, data);
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[offset..offset + t.cols()].copy_from_slice(t.row(r));
            }
            offset += t.cols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Column means as a `1 × cols` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = t.shape();
        let mut value = Tensor::zeros(1, c);
        for i in 0..r {
            for (m, v) in value.data_mut().iter_mut().zip(t.row(i)) {
                *m += v;
            }
        }
        value.data_mut().iter_mut().for_each(|m| *m /= r as f64);
        self.push(value, Op::MeanRows(x), &[x])
    }

    pub fn broadcast_rows(&mut self, row: Var, n: usize) -> Var {
        let t = self.value(row);
        assert_eq!(t.rows(), 1, "broadcast_rows expects a single row");
        let mut data = Vec::with_capacity(n * t.cols());
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        let value = Tensor::from_vec(n, t.cols(), data);
        self.push(value, Op::BroadcastRows(row), &[row])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v = gelu(*v).0);
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        self.push(value, Op::Tanh(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let t = self.value(x);
        let (r, c) = t.shape();
        assert_eq!(self.shape(gamma), (1, c));
        assert_eq!(self.shape(beta), (1, c));
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Tensor::zeros(r, c);
        let mut value = Tensor::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = t.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat.set(i, j, h);
                value.set(i, j, g[j] * h + b[j]);
            }
        }
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Causal multi-head scaled dot-product attention over left-padded
    /// sequences stacked as `(n · seq_len) × dim` rows.
    ///
    /// Query position `i` of a sequence attends to key positions
    /// `start ≤ j ≤ i`; padded query rows produce zeros. `drop` is an
    /// optional pre-scaled mask over the attention probabilities laid out as
    /// `[sequence][head][i][j]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        drop: Option<Tensor>,
    ) -> Var {
        let (rows, dim) = self.shape(q);
        let l = layout.seq_len;
        let h = layout.heads;
        assert_eq!(rows, layout.starts.len() * l, "attention row count mismatch");
        assert_eq!(dim % h, 0, "heads must divide the model dimension");
        assert_eq!(self.shape(k), (rows, dim));
        assert_eq!(self.shape(v), (rows, dim));
        let dh = dim / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; layout.starts.len() * h * l * l];
        let mut out = Tensor::zeros(rows, dim);
        let mut scores = vec![0.0; l];
        for (n, &start) in layout.starts.iter().enumerate() {
            let base = n * l;
            for head in 0..h {
                let c0 = head * dh;
                for i in start..l {
                    let qi = &qt.row(base + i)[c0..c0 + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in start..=i {
                        let kj = &kt.row(base + j)[c0..c0 + dh];
                        let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for s in &mut scores[start..=i] {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let pbase = ((n * h + head) * l + i) * l;
                    for j in start..=i {
                        let p = scores[j] / z;
                        probs[pbase + j] = p;
                        let pd = match &drop {
                            Some(m) => p * m.data()[pbase + j],
                            None => p,
                        };
                        if pd != 0.0 {
                            let vj = &vt.row(base + j)[c0..c0 + dh];
                            let o = &mut out.row_mut(base + i)[c0..c0 + dh];
                            for (oo, vv) in o.iter_mut().zip(vj) {
                                *oo += pd * vv;
                            }
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                drop,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Scales every row to unit L2 norm. Rows must have non-zero norm.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut value = t.clone();
        let mut norms = Vec::with_capacity(t.rows());
        for i in 0..t.rows() {
            let n = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            value.row_mut(i).iter_mut().for_each(|v| *v /= n);
        }
        self.push(value, Op::RowNormalize { x, norms }, &[x])
    }

    /// Mean over rows of `-log softmax(logits_row)[target_row]`.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Var {
        let t = self.value(logits);
        assert_eq!(t.rows(), targets.len(), "one target per logits row");
        let mut probs = t.clone();
        let mut loss = 0.0;
        for (i, &target) in targets.iter().enumerate() {
            let row = probs.row_mut(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            let lse = max + z.ln();
            loss += lse - t.get(i, target);
            row.iter_mut().for_each(|v| *v /= z);
        }
        let value = Tensor::scalar(loss / targets.len() as f64);
        self.push(
            value,
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Row-wise `log Σ_{j ∈ include[i]} exp(x[i][j] · inv_tau)` as an `n × 1`
    /// column.
    ///
    /// The selection is a constant of the step. When `k` is given, the
    /// backward pass also routes a straight-through surrogate to `k[i]`:
    /// `gain[i]` times the softmax mass of the gated columns, normalized over
    /// `include[i] ∪ gated[i]`. It lies in `[0, gain[i]]` whatever the current
    /// selection. An empty `gain` disables the surrogate.
    pub fn masked_lse(
        &mut self,
        x: Var,
        k: Option<Var>,
        sel: LseSelection,
        inv_tau: f64,
        gain: Vec<f64>,
    ) -> Var {
        let t = self.value(x);
        let n = t.rows();
        assert_eq!(sel.include.len(), n);
        assert_eq!(sel.gated.len(), n);
        if let Some(k) = k {
            assert_eq!(self.shape(k), (n, 1), "threshold vector must be n x 1");
        }
        assert!(gain.is_empty() || gain.len() == n, "one gain per row");
        let mut value = Tensor::zeros(n, 1);
        for i in 0..n {
            let cols = &sel.include[i];
            assert!(!cols.is_empty(), "log-sum-exp over an empty set");
            let max = cols
                .iter()
                .map(|&j| t.get(i, j) * inv_tau)
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = cols.iter().map(|&j| (t.get(i, j) * inv_tau - max).exp()).sum();
            value.set(i, 0, max + z.ln());
        }
        let inputs: Vec<Var> = std::iter::once(x).chain(k).collect();
        self.push(
            value,
            Op::MaskedLse {
                x,
                k,
                sel,
                inv_tau,
                gain,
            },
            &inputs,
        )
    }

    /// `out[i] = Σ_{(j, w) ∈ entries[i]} w · x[i][j]` as an `n × 1` column.
    pub fn gather_entries(&mut self, x: Var, entries: Vec<Vec<(usize, f64)>>) -> Var {
        let t = self.value(x);
        assert_eq!(entries.len(), t.rows());
        let value = Tensor::column(
            entries
                .iter()
                .enumerate()
                .map(|(i, row)| row.iter().map(|&(j, w)| w * t.get(i, j)).sum())
                .collect(),
        );
        self.push(value, Op::GatherEntries { x, entries }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.backprop(&node.op, &node.value, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if self.wants(v) {
                        grad_buf(grads, v, g.shape()).add_assign(g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    grad_buf(grads, *a, g.shape()).add_assign(g);
                }
                if self.wants(*b) {
                    let gb = grad_buf(grads, *b, g.shape());
                    for (x, y) in gb.data_mut().iter_mut().zip(g.data()) {
                        *x -= y;
                    }
                }
            }
            Op::Mul(a, b) => {
                for (this, other) in [(a, b), (b, a)] {
                    if self.wants(*this) {
                        let ov = self.value(*other).data();
                        let gt = grad_buf(grads, *this, g.shape());
                        for ((x, y), o) in gt.data_mut().iter_mut().zip(g.data()).zip(ov) {
                            *x += y * o;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    let ga = grad_buf(grads, *a, g.shape());
                    for (x, y) in ga.data_mut().iter_mut().zip(g.data()) {
                        *x += s * y;
                    }
                }
            }
            Op::AddScalar(a) => {
                if self.wants(*a) {
                    grad_buf(grads, *a, g.shape()).add_assign(g);
                }
            }
            Op::MulConst(a, c) => {
                if self.wants(*a) {
                    let ga = grad_buf(grads, *a, g.shape());
                    for ((x, y), m) in ga.data_mut().iter_mut().zip(g.data()).zip(c.data()) {
                        *x += y * m;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    grad_buf(grads, *a, g.shape()).add_assign(g);
                }
                if self.wants(*row) {
                    let gr = grad_buf(grads, *row, (1, g.cols()));
                    for i in 0..g.rows() {
                        for (x, y) in gr.data_mut().iter_mut().zip(g.row(i)) {
                            *x += y;
                        }
                    }
                }
            }
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let ga = grad_buf(grads, *a, av.shape());
                    if *trans_a {
                        gemm(1.0, bv, *trans_b, g, true, 1.0, ga);
                    } else {
                        gemm(1.0, g, false, bv, !*trans_b, 1.0, ga);
                    }
                }
                if self.wants(*b) {
                    let gb = grad_buf(grads, *b, bv.shape());
                    if *trans_b {
                        gemm(1.0, g, true, av, *trans_a, 1.0, gb);
                    } else {
                        gemm(1.0, av, !*trans_a, g, false, 1.0, gb);
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                if self.wants(*table) {
                    let gt = grad_buf(grads, *table, self.shape(*table));
                    for (r, &i) in idx.iter().enumerate() {
                        for (x, y) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if self.wants(*x) {
                    let gx = grad_buf(grads, *x, self.shape(*x));
                    let c = g.cols();
                    for (dst, src) in gx.data_mut()[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g.data())
                    {
                        *dst += src;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p);
                    let n = shape.0 * shape.1;
                    if self.wants(p) {
                        let gp = grad_buf(grads, p, shape);
                        for (dst, src) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + n])
                        {
                            *dst += src;
                        }
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p);
                    if self.wants(p) {
                        let gp = grad_buf(grads, p, shape);
                        for r in 0..shape.0 {
                            for (dst, src) in gp
                                .row_mut(r)
                                .iter_mut()
                                .zip(&g.row(r)[offset..offset + shape.1])
                            {
                                *dst += src;
                            }
                        }
                    }
                    offset += shape.1;
                }
            }
            Op::MeanRows(x) => {
                if self.wants(*x) {
                    let shape = self.shape(*x);
                    let inv = 1.0 / shape.0 as f64;
                    let gx = grad_buf(grads, *x, shape);
                    for r in 0..shape.0 {
                        for (dst, src) in gx.row_mut(r).iter_mut().zip(g.data()) {
                            *dst += src * inv;
                        }
                    }
                }
            }
            Op::BroadcastRows(row) => {
                if self.wants(*row) {
                    let gr = grad_buf(grads, *row, (1, g.cols()));
                    for r in 0..g.rows() {
                        for (dst, src) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *dst += src;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    let gx = grad_buf(grads, *x, g.shape());
                    for ((dst, src), &xi) in gx.data_mut().iter_mut().zip(g.data()).zip(xv) {
                        *dst += src * gelu(xi).1;
                    }
                }
            }
            Op::Tanh(x) => {
                if self.wants(*x) {
                    let gx = grad_buf(grads, *x, g.shape());
                    for ((dst, src), y) in gx.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        *dst += src * (1.0 - y * y);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = xhat.shape();
                if self.wants(*gamma) {
                    let gg = grad_buf(grads, *gamma, (1, c));
                    for i in 0..r {
                        for j in 0..c {
                            gg.data_mut()[j] += g.get(i, j) * xhat.get(i, j);
                        }
                    }
                }
                if self.wants(*beta) {
                    let gb = grad_buf(grads, *beta, (1, c));
                    for i in 0..r {
                        for (dst, src) in gb.data_mut().iter_mut().zip(g.row(i)) {
                            *dst += src;
                        }
                    }
                }
                if self.wants(*x) {
                    let gamma_v = self.value(*gamma).data().to_vec();
                    let gx = grad_buf(grads, *x, (r, c));
                    let mut dxhat = vec![0.0; c];
                    for i in 0..r {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            dxhat[j] = g.get(i, j) * gamma_v[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xhat.get(i, j);
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        let row = gx.row_mut(i);
                        for j in 0..c {
                            row[j] += inv_std[i] * (dxhat[j] - mean_d - xhat.get(i, j) * mean_dx);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                drop,
                probs,
            } => self.attention_backward(*q, *k, *v, layout, drop.as_ref(), probs, g, grads),
            Op::RowNormalize { x, norms } => {
                if self.wants(*x) {
                    let gx = grad_buf(grads, *x, g.shape());
                    for i in 0..g.rows() {
                        let y = out.row(i);
                        let gy = g.row(i);
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for ((dst, &gyj), &yj) in gx.row_mut(i).iter_mut().zip(gy).zip(y) {
                            *dst += (gyj - yj * dot) / norms[i];
                        }
                    }
                }
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                if self.wants(*logits) {
                    let scale = g.item() / targets.len() as f64;
                    let gl = grad_buf(grads, *logits, probs.shape());
                    for (i, &t) in targets.iter().enumerate() {
                        let row = gl.row_mut(i);
                        for (dst, p) in row.iter_mut().zip(probs.row(i)) {
                            *dst += scale * p;
                        }
                        row[t] -= scale;
                    }
                }
            }
            Op::MaskedLse {
                x,
                k,
                sel,
                inv_tau,
                gain,
            } => {
                let xv = self.value(*x);
                let n = xv.rows();
                if self.wants(*x) {
                    let gx = grad_buf(grads, *x, xv.shape());
                    for i in 0..n {
                        let gi = g.get(i, 0);
                        if gi == 0.0 {
                            continue;
                        }
                        let lse = out.get(i, 0);
                        for &j in &sel.include[i] {
                            let p = (xv.get(i, j) * inv_tau - lse).exp();
                            let cur = gx.get(i, j);
                            gx.set(i, j, cur + gi * p * inv_tau);
                        }
                    }
                }
                if let Some(k) = k {
                    if self.wants(*k) && gain.iter().any(|&v| v != 0.0) {
                        let gk = grad_buf(grads, *k, (n, 1));
                        for i in 0..n {
                            if gain[i] == 0.0 {
                                continue;
                            }
                            let mut cols: Vec<usize> = sel.include[i].iter().chain(&sel.gated[i]).copied().collect();
                            cols.sort_unstable();
                            cols.dedup();
                            let logits: Vec<f64> = cols.iter().map(|&j| xv.get(i, j) * inv_tau).collect();
                            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
                            let s: f64 = sel.gated[i]
                                .iter()
                                .map(|&j| (xv.get(i, j) * inv_tau - max).exp())
                                .sum::<f64>()
                                / z;
                            gk.data_mut()[i] += g.get(i, 0) * gain[i] * s;
                        }
                    }
                }
            }
            Op::GatherEntries { x, entries } => {
                if self.wants(*x) {
                    let gx = grad_buf(grads, *x, self.shape(*x));
                    for (i, row) in entries.iter().enumerate() {
                        let gi = g.get(i, 0);
                        for &(j, w) in row {
                            let cur = gx.get(i, j);
                            gx.set(i, j, cur + gi * w);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let s = g.item();
                    let gx = grad_buf(grads, *x, self.shape(*x));
                    gx.data_mut().iter_mut().for_each(|v| *v += s);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        drop: Option<&Tensor>,
        probs: &[f64],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (rows, dim) = self.shape(q);
        let l = layout.seq_len;
        let h = layout.heads;
        let dh = dim / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let mut dq = Tensor::zeros(rows, dim);
        let mut dk = Tensor::zeros(rows, dim);
        let mut dv = Tensor::zeros(rows, dim);
        let mut dp = vec![0.0; l];
        for (n, &start) in layout.starts.iter().enumerate() {
            let base = n * l;
            for head in 0..h {
                let c0 = head * dh;
                for i in start..l {
                    let pbase = ((n * h + head) * l + i) * l;
                    let go = &g.row(base + i)[c0..c0 + dh];
                    let mut dot = 0.0;
                    for j in start..=i {
                        let m = drop.map_or(1.0, |d| d.data()[pbase + j]);
                        let p = probs[pbase + j];
                        let vj = &vt.row(base + j)[c0..c0 + dh];
                        let dpd: f64 = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                        dp[j] = dpd * m;
                        dot += p * dp[j];
                        let pd = p * m;
                        if pd != 0.0 {
                            for (dst, gg) in dv.row_mut(base + j)[c0..c0 + dh].iter_mut().zip(go) {
                                *dst += pd * gg;
                            }
                        }
                    }
                    for j in start..=i {
                        let ds = probs[pbase + j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &kt.row(base + j)[c0..c0 + dh];
                        for (dst, kk) in dq.row_mut(base + i)[c0..c0 + dh].iter_mut().zip(kj) {
                            *dst += ds * kk;
                        }
                        let qi = &qt.row(base + i)[c0..c0 + dh];
                        for (dst, qq) in dk.row_mut(base + j)[c0..c0 + dh].iter_mut().zip(qi) {
                            *dst += ds * qq;
                        }
                    }
                }
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if self.wants(var) {
                grad_buf(grads, var, (rows, dim)).add_assign(&d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Checks the tape gradient of `build` w.r.t. every input against central
    /// differences.
    fn check<F>(inputs: Vec<Tensor>, build: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let eval = |vals: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
            let out = build(&mut g, &vars);
            (g, vars, out)
        };
        let (g, vars, out) = eval(&inputs);
        let grads = g.backward(out);
        let h = 1e-6;
        for (p, var) in vars.iter().enumerate() {
            let analytic = grads
                .get(*var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[p].rows(), inputs[p].cols()));
            for e in 0..inputs[p].len() {
                let mut plus = inputs.clone();
                plus[p].data_mut()[e] += h;
                let mut minus = inputs.clone();
                minus[p].data_mut()[e] -= h;
                let (gp, _, op) = eval(&plus);
                let (gm, _, om) = eval(&minus);
                let fd = (gp.value(op).item() - gm.value(om).item()) / (2.0 * h);
                let a = analytic.data()[e];
                assert!(
                    (a - fd).abs() <= 1e-6 * (1.0 + a.abs().max(fd.abs())),
                    "input {p} element {e}: analytic {a} vs numeric {fd}"
                );
            }
        }
    }

    /// Reduces any tensor to a scalar with fixed random weights so every
    /// output element contributes a distinct upstream gradient.
    fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
        let (r, c) = g.value(x).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random(&mut rng, r, c);
        let y = g.mul_const(x, w);
        g.sum(y)
    }

    #[test]
    fn elementwise_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 3, 4);
        let row = random(&mut rng, 1, 4);
        check(vec![a, b, row], |g, v| {
            let s = g.add(v[0], v[1]);
            let d = g.sub(s, v[1]);
            let m = g.mul(d, v[1]);
            let m = g.scale(m, 1.7);
            let m = g.add_scalar(m, 0.3);
            let m = g.add_row(m, v[2]);
            let t = g.tanh(m);
            let ge = g.gelu(t);
            weighted_sum(g, ge, 9)
        });
    }

    #[test]
    fn matmul_gradcheck_all_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta { random(&mut rng, 4, 3) } else { random(&mut rng, 3, 4) };
            let b = if tb { random(&mut rng, 2, 4) } else { random(&mut rng, 4, 2) };
            check(vec![a, b], move |g, v| {
                let c = g.matmul(v[0], ta, v[1], tb);
                weighted_sum(g, c, 3)
            });
        }
    }

    #[test]
    fn structural_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let table = random(&mut rng, 5, 3);
        let other = random(&mut rng, 2, 3);
        check(vec![table, other], |g, v| {
            let gathered = g.gather_rows(v[0], &[4, 1, 1, 0]);
            let sliced = g.slice_rows(v[0], 1, 3);
            let stacked = g.concat_rows(&[gathered, sliced, v[1]]);
            let mean = g.mean_rows(stacked);
            let wide = g.broadcast_rows(mean, 8);
            let both = g.concat_cols(&[stacked, wide]);
            weighted_sum(g, both, 4)
        });
    }

    #[test]
    fn layer_norm_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 3, 5);
        let gamma = random(&mut rng, 1, 5);
        let beta = random(&mut rng, 1, 5);
        check(vec![x, gamma, beta], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]);
            weighted_sum(g, y, 5)
        });
    }

    #[test]
    fn attention_gradcheck_with_padding_and_dropout() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, l, d, h) = (2, 4, 6, 2);
        let q = random(&mut rng, n * l, d);
        let k = random(&mut rng, n * l, d);
        let v = random(&mut rng, n * l, d);
        let mask = Tensor::from_vec(
            1,
            n * h * l * l,
            (0..n * h * l * l)
                .map(|_| if rng.gen_bool(0.8) { 1.25 } else { 0.0 })
                .collect(),
        );
        check(vec![q, k, v], move |g, vars| {
            let layout = AttentionLayout {
                heads: h,
                seq_len: l,
                starts: vec![0, 2],
            };
            let out = g.attention(vars[0], vars[1], vars[2], layout, Some(mask.clone()));
            weighted_sum(g, out, 6)
        });
    }

    #[test]
    fn padded_queries_produce_zero_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::new();
        let q = g.param(random(&mut rng, 4, 2));
        let out = g.attention(
            q,
            q,
            q,
            AttentionLayout {
                heads: 1,
                seq_len: 4,
                starts: vec![2],
            },
            None,
        );
        let t = g.value(out);
        assert_eq!(t.row(0), &[0.0, 0.0]);
        assert_eq!(t.row(1), &[0.0, 0.0]);
        // First valid position attends only to itself.
        assert_eq!(t.row(2), g.value(q).row(2));
    }

    #[test]
    fn normalize_and_xent_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, 3, 4);
        check(vec![x], |g, v| {
            let u = g.row_normalize(v[0]);
            let s = g.matmul(u, false, u, true);
            let l = g.softmax_xent(s, &[0, 2, 1]);
            let w = weighted_sum(g, u, 8);
            g.add(l, w)
        });
    }

    #[test]
    fn masked_lse_and_gather_entries_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&mut rng, 3, 3);
        check(vec![x], |g, v| {
            let sel = LseSelection {
                include: vec![vec![0, 2], vec![1], vec![0, 1, 2]],
                gated: vec![vec![], vec![], vec![]],
            };
            let lse = g.masked_lse(v[0], None, sel, 2.0, Vec::new());
            let picked = g.gather_entries(v[0], vec![vec![(1, 0.5)], vec![], vec![(0, 1.0), (2, -2.0)]]);
            let d = g.sub(lse, picked);
            weighted_sum(g, d, 10)
        });
    }

    #[test]
    fn masked_lse_surrogate_routes_inclusion_weight_to_threshold() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(1, 3, vec![0.5, 0.2, -0.1]));
        let k = g.param(Tensor::column(vec![0.0]));
        let sel = LseSelection {
            include: vec![vec![0, 2]],
            gated: vec![vec![1, 2]],
        };
        let lse = g.masked_lse(x, Some(k), sel, 1.0, vec![0.5]);
        let s = g.sum(lse);
        let grads = g.backward(s);
        let z = 0.5f64.exp() + 0.2f64.exp() + (-0.1f64).exp();
        let expect = 0.5 * (0.2f64.exp() + (-0.1f64).exp()) / z;
        let got = grads.get(k).unwrap().item();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }
}
