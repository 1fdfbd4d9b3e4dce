use super::kernels::{dot, gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{contract, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    MatMulT(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SlotScores {
        h: Var,
        labels: Var,
    },
    MarginLoss {
        scores: Var,
        targets: Vec<usize>,
        margin: f64,
        per_row_scale: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
    GroupedPick {
        x: Var,
        groups: Vec<Vec<(usize, usize)>>,
    },
    Sum(Var),
}

/// A node of the computation: value, gradient slot, and the op that
/// produced it.
#[derive(Debug)]
pub struct DiffTensor {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

impl DiffTensor {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

/// Wengert list. Nodes are appended in evaluation order, so reverse
/// index order is a valid backward schedule.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<DiffTensor>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// GeLU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
///
/// Evaluated as `x·σ(2u)`, since `(1 + tanh u) / 2 = σ(2u)`; one `exp` is
/// much cheaper than `tanh`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * gelu_gate(x)
}

fn gelu_gate(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    1.0 / (1.0 + (-2.0 * u).exp())
}

fn gelu_derivative(x: f64) -> f64 {
    let s = gelu_gate(x);
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    s + 2.0 * x * s * (1.0 - s) * du
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::Shape {
            op,
            left: other.to_vec(),
            right: vec![],
        }),
    }
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

    /// Total number of value elements held by the graph.
    pub fn element_count(&self) -> usize {
        self.nodes.iter().map(|n| n.value.numel()).sum()
    }

    pub fn node(&self, v: Var) -> &DiffTensor {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let n = &self.nodes[v.0];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.value.shape().to_vec(), g.clone()).expect("grad matches value"))
    }

    /// Zeroes every gradient slot on the graph.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(DiffTensor {
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

    /// `a[n×k] · b[k×m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = matrix_dims(self.value(a), "matmul")?;
        let (k2, m) = matrix_dims(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; n * m];
        gemm_nn(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            n,
            k,
            m,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, rg, Op::MatMul(a, b)))
    }

    /// `a[n×k] · b[m×k]ᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = matrix_dims(self.value(a), "matmul_t")?;
        let (m, k2) = matrix_dims(self.value(b), "matmul_t")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_t",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; n * m];
        gemm_nt(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            n,
            k,
            m,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, rg, Op::MatMulT(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape {
                op,
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Mul(a, b)))
    }

    /// Adds a length-`m` vector to every row of `x[n×m]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let m = self.value(x).cols();
        if self.value(bias).numel() != m || self.value(x).shape().is_empty() {
            return Err(Error::Shape {
                op: "add_bias",
                left: self.value(x).shape().to_vec(),
                right: self.value(bias).shape().to_vec(),
            });
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(m)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Scale(x, factor))
    }

    /// Elementwise GeLU (tanh approximation).
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| gelu_scalar(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Gelu(x))
    }

    /// Per-row normalization over the last axis, then `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let m = self.value(x).cols();
        for p in [gain, bias] {
            if self.value(p).numel() != m {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: self.value(x).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
        }
        let xs = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xs.rows();
        let mut out = Vec::with_capacity(xs.numel());
        let mut xhat = Vec::with_capacity(xs.numel());
        let mut rstd = Vec::with_capacity(rows);
        for row in xs.data().chunks(m) {
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for j in 0..m {
                let xh = (row[j] - mean) * r;
                xhat.push(xh);
                out.push(g[j] * xh + b[j]);
            }
        }
        let value = Tensor::new(xs.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.cols();
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(m) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut z = 0.0;
            for &v in row {
                let e = (v - mx).exp();
                z += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e /= z;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::SoftmaxRows(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.cols();
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(m) {
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|v| v - lse));
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::LogSoftmaxRows(x))
    }

    /// Selects rows of a matrix (embedding lookup, mask gathering).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = matrix_dims(t, "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Input(format!(
                "row index {bad} out of range for {r} rows"
            )));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![rows.len(), c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::GatherRows(x, rows.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return contract("concat_rows of nothing");
        };
        let c = matrix_dims(self.value(first), "concat_rows")?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = matrix_dims(self.value(p), "concat_rows")?;
            if pc != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: self.value(first).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, c], out)?;
        let rg = self.rg(parts);
        Ok(self.push(value, rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return contract("concat_cols of nothing");
        };
        let r = matrix_dims(self.value(first), "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = matrix_dims(self.value(p), "concat_cols")?;
            if pr != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.value(first).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![r, total], out)?;
        let rg = self.rg(parts);
        Ok(self.push(value, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = matrix_dims(t, "slice_cols")?;
        if start + len > c {
            return Err(Error::Shape {
                op: "slice_cols",
                left: t.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let value = Tensor::new(vec![r, len], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::SliceCols { x, start }))
    }

    /// Per-slot class scores: `out[i][k] = Σ_h labels[k][i][h] · h[i][h]`
    /// for `h[M×H]` and `labels[K×M×H]`.
    pub fn slot_scores(&mut self, h: Var, labels: Var) -> Result<Var> {
        let hv = self.value(h);
        let lv = self.value(labels);
        let (m, hd) = matrix_dims(hv, "slot_scores")?;
        let [k, lm, lh] = *lv.shape() else {
            return Err(Error::Shape {
                op: "slot_scores",
                left: hv.shape().to_vec(),
                right: lv.shape().to_vec(),
            });
        };
        if lm != m || lh != hd {
            return Err(Error::Shape {
                op: "slot_scores",
                left: hv.shape().to_vec(),
                right: lv.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * k];
        for i in 0..m {
            let hi = hv.row(i);
            for c in 0..k {
                let li = &lv.data()[(c * m + i) * hd..(c * m + i + 1) * hd];
                out[i * k + c] = dot(li, hi);
            }
        }
        let value = Tensor::new(vec![m, k], out)?;
        let rg = self.rg(&[h, labels]);
        Ok(self.push(value, rg, Op::SlotScores { h, labels }))
    }

    /// Multi-class margin loss summed over rows:
    /// `Σ_r per_row_scale · Σ_{k≠y_r} max(0, margin − s[r][y_r] + s[r][k])`.
    pub fn margin_loss(
        &mut self,
        scores: Var,
        targets: &[usize],
        margin: f64,
        per_row_scale: f64,
    ) -> Result<Var> {
        let t = self.value(scores);
        let (r, k) = matrix_dims(t, "margin_loss")?;
        check_targets("margin_loss", r, k, targets)?;
        let mut total = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            let row = t.row(i);
            let mut s = 0.0;
            for (c, &v) in row.iter().enumerate() {
                if c != y {
                    s += (margin - row[y] + v).max(0.0);
                }
            }
            total += per_row_scale * s;
        }
        let rg = self.rg(&[scores]);
        Ok(self.push(
            Tensor::scalar(total),
            rg,
            Op::MarginLoss {
                scores,
                targets: targets.to_vec(),
                margin,
                per_row_scale,
            },
        ))
    }

    /// Softmax cross-entropy summed over rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (r, k) = matrix_dims(t, "cross_entropy")?;
        check_targets("cross_entropy", r, k, targets)?;
        let total = targets
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let row = t.row(i);
                log_sum_exp(row) - row[y]
            })
            .sum();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Sums selected `(row, col)` entries of a matrix per group; output is
    /// `1×G`.
    pub fn grouped_pick(&mut self, x: Var, groups: &[Vec<(usize, usize)>]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = matrix_dims(t, "grouped_pick")?;
        let mut out = Vec::with_capacity(groups.len());
        for g in groups {
            let mut s = 0.0;
            for &(i, j) in g {
                if i >= r || j >= c {
                    return Err(Error::Input(format!(
                        "pick ({i},{j}) outside {r}×{c} matrix"
                    )));
                }
                s += t.data()[i * c + j];
            }
            out.push(s);
        }
        let value = Tensor::new(vec![1, groups.len()], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            rg,
            Op::GroupedPick {
                x,
                groups: groups.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    /// Populates gradients of every `requires_grad` ancestor of `loss`.
    /// Gradients accumulate additively into existing slots.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        // Only leaves accumulate across calls; interior slots are per-pass.
        for n in &mut self.nodes[..=loss.0] {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        self.nodes[loss.0].grad.get_or_insert_with(|| vec![0.0])[0] += 1.0;

        for idx in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[idx].grad.take() else {
                continue;
            };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &grad);
            }
            self.nodes[idx].grad = Some(grad);
        }
        Ok(())
    }

    /// Adds `delta` into the gradient slot of `v` if it requires grad.
    fn accumulate(&mut self, v: Var, delta: impl FnOnce(&mut [f64], &Tensor)) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let n = node.value.numel();
        let mut g = node.grad.take().unwrap_or_else(|| vec![0.0; n]);
        delta(&mut g, &node.value);
        node.grad = Some(g);
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        // Move the op out so the node list can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = matrix_dims(self.value(*a), "matmul").unwrap();
                let m = self.value(*b).cols();
                if self.wants(*a) {
                    let mut da = vec![0.0; n * k];
                    gemm_nt(g, self.value(*b).data(), &mut da, n, m, k);
                    self.accumulate(*a, |acc, _| add_into(acc, &da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * m];
                    gemm_tn(self.value(*a).data(), g, &mut db, n, k, m);
                    self.accumulate(*b, |acc, _| add_into(acc, &db));
                }
            }
            Op::MatMulT(a, b) => {
                // out[n×m] = a[n×k] · b[m×k]ᵀ
                let (n, k) = matrix_dims(self.value(*a), "matmul_t").unwrap();
                let m = self.value(*b).rows();
                if self.wants(*a) {
                    let mut da = vec![0.0; n * k];
                    gemm_nn(g, self.value(*b).data(), &mut da, n, m, k);
                    self.accumulate(*a, |acc, _| add_into(acc, &da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; m * k];
                    gemm_tn(g, self.value(*a).data(), &mut db, n, m, k);
                    self.accumulate(*b, |acc, _| add_into(acc, &db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, |acc, _| add_into(acc, g));
                self.accumulate(*b, |acc, _| add_into(acc, g));
            }
            Op::AddBias(x, b) => {
                self.accumulate(*x, |acc, _| add_into(acc, g));
                self.accumulate(*b, |acc, bv| {
                    let m = bv.numel();
                    for row in g.chunks(m) {
                        add_into(acc, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(gi, bi)| gi * bi)
                        .collect();
                    self.accumulate(*a, |acc, _| add_into(acc, &d));
                }
                if self.wants(*b) {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(gi, ai)| gi * ai)
                        .collect();
                    self.accumulate(*b, |acc, _| add_into(acc, &d));
                }
            }
            Op::Scale(x, f) => {
                let f = *f;
                self.accumulate(*x, |acc, _| {
                    for (a, gi) in acc.iter_mut().zip(g) {
                        *a += f * gi;
                    }
                });
            }
            Op::Gelu(x) => {
                self.accumulate(*x, |acc, xv| {
                    for ((a, gi), &xi) in acc.iter_mut().zip(g).zip(xv.data()) {
                        *a += gi * gelu_derivative(xi);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let m = self.value(*gain).numel();
                if self.wants(*x) {
                    let gv = self.value(*gain).data();
                    let mut dx = vec![0.0; g.len()];
                    for (r, (grow, xrow)) in g.chunks(m).zip(xhat.chunks(m)).enumerate() {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..m {
                            let d = grow[j] * gv[j];
                            mean_d += d;
                            mean_dx += d * xrow[j];
                        }
                        mean_d /= m as f64;
                        mean_dx /= m as f64;
                        for j in 0..m {
                            let d = grow[j] * gv[j];
                            dx[r * m + j] = rstd[r] * (d - mean_d - xrow[j] * mean_dx);
                        }
                    }
                    self.accumulate(*x, |acc, _| add_into(acc, &dx));
                }
                self.accumulate(*gain, |acc, _| {
                    for (grow, xrow) in g.chunks(m).zip(xhat.chunks(m)) {
                        for j in 0..m {
                            acc[j] += grow[j] * xrow[j];
                        }
                    }
                });
                self.accumulate(*bias, |acc, _| {
                    for grow in g.chunks(m) {
                        add_into(acc, grow);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let m = self.value(*x).cols();
                let y = self.nodes[idx].value.data().to_vec();
                self.accumulate(*x, |acc, _| {
                    for ((arow, grow), yrow) in acc.chunks_mut(m).zip(g.chunks(m)).zip(y.chunks(m))
                    {
                        let s: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            arow[j] += yrow[j] * (grow[j] - s);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                let m = self.value(*x).cols();
                let y = self.nodes[idx].value.data().to_vec();
                self.accumulate(*x, |acc, _| {
                    for ((arow, grow), yrow) in acc.chunks_mut(m).zip(g.chunks(m)).zip(y.chunks(m))
                    {
                        let s: f64 = grow.iter().sum();
                        for j in 0..m {
                            arow[j] += grow[j] - yrow[j].exp() * s;
                        }
                    }
                });
            }
            Op::GatherRows(x, rows) => {
                self.accumulate(*x, |acc, xv| {
                    let c = xv.cols();
                    for (r, &i) in rows.iter().enumerate() {
                        add_into(&mut acc[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.accumulate(p, |acc, _| add_into(acc, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[idx].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accumulate(p, |acc, _| {
                        for (arow, grow) in acc.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(arow, &grow[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let start = *start;
                let w = self.nodes[idx].value.cols();
                self.accumulate(*x, |acc, xv| {
                    let c = xv.cols();
                    for (arow, grow) in acc.chunks_mut(c).zip(g.chunks(w)) {
                        add_into(&mut arow[start..start + w], grow);
                    }
                });
            }
            Op::SlotScores { h, labels } => {
                let (m, hd) = matrix_dims(self.value(*h), "slot_scores").unwrap();
                let k = self.value(*labels).shape()[0];
                if self.wants(*h) {
                    let lv = self.value(*labels).data();
                    let mut dh = vec![0.0; m * hd];
                    for i in 0..m {
                        for c in 0..k {
                            let gi = g[i * k + c];
                            let li = &lv[(c * m + i) * hd..(c * m + i + 1) * hd];
                            for (d, l) in dh[i * hd..(i + 1) * hd].iter_mut().zip(li) {
                                *d += gi * l;
                            }
                        }
                    }
                    self.accumulate(*h, |acc, _| add_into(acc, &dh));
                }
                if self.wants(*labels) {
                    let hv = self.value(*h).data().to_vec();
                    self.accumulate(*labels, |acc, _| {
                        for i in 0..m {
                            let hi = &hv[i * hd..(i + 1) * hd];
                            for c in 0..k {
                                let gi = g[i * k + c];
                                let a = &mut acc[(c * m + i) * hd..(c * m + i + 1) * hd];
                                for (x, y) in a.iter_mut().zip(hi) {
                                    *x += gi * y;
                                }
                            }
                        }
                    });
                }
            }
            Op::MarginLoss {
                scores,
                targets,
                margin,
                per_row_scale,
            } => {
                let g0 = g[0] * per_row_scale;
                let margin = *margin;
                self.accumulate(*scores, |acc, sv| {
                    let k = sv.cols();
                    for (i, &y) in targets.iter().enumerate() {
                        let row = sv.row(i);
                        for c in 0..k {
                            if c != y && margin - row[y] + row[c] > 0.0 {
                                acc[i * k + c] += g0;
                                acc[i * k + y] -= g0;
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets } => {
                let g0 = g[0];
                self.accumulate(*logits, |acc, lv| {
                    let k = lv.cols();
                    for (i, &y) in targets.iter().enumerate() {
                        let row = lv.row(i);
                        let lse = log_sum_exp(row);
                        for c in 0..k {
                            acc[i * k + c] += g0 * (row[c] - lse).exp();
                        }
                        acc[i * k + y] -= g0;
                    }
                });
            }
            Op::GroupedPick { x, groups } => {
                self.accumulate(*x, |acc, xv| {
                    let c = xv.cols();
                    for (gi, grp) in g.iter().zip(groups) {
                        for &(i, j) in grp {
                            acc[i * c + j] += gi;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.accumulate(*x, |acc, _| {
                    for a in acc {
                        *a += g0;
                    }
                });
            }
        }
        self.nodes[idx].op = op;
    }
}

fn check_targets(op: &'static str, rows: usize, k: usize, targets: &[usize]) -> Result<()> {
    if targets.len() != rows {
        return Err(Error::Shape {
            op,
            left: vec![rows, k],
            right: vec![targets.len()],
        });
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= k) {
        return Err(Error::Input(format!("{op}: target {bad} not below {k}")));
    }
    Ok(())
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::identity(2));
        let a = g.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let c = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = g.constant(m(&[&[1.0, 0.0], &[0.0, 0.0]]));
        let b = g.constant(m(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let c = g.matmul(p, b).unwrap();
        assert_eq!(g.value(c).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        match err {
            Error::Shape { left, right, .. } => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gelu_matches_tanh_form() {
        for i in -80..=80 {
            let x = i as f64 / 8.0;
            let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
            assert!(
                (gelu_scalar(x) - 0.5 * x * (1.0 + u.tanh())).abs() < 1e-14,
                "{x}"
            );
        }
    }

    #[test]
    fn gelu_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-12);
        assert!(gelu_scalar(-10.0).abs() < 1e-12);
        let h = 1e-6;
        let fd = (gelu_scalar(h) - gelu_scalar(-h)) / (2.0 * h);
        assert!((fd - 0.5).abs() < 1e-9);
        assert!((gelu_derivative(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::full(&[3], 1.0));
        let bias = g.constant(Tensor::zeros(&[3]));
        let x = g.constant(m(&[&[2.0, 2.0, 2.0]]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));

        let gain = g.constant(Tensor::full(&[2], 1.0));
        let bias = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(m(&[&[1.0, -1.0]]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-10 && (v[1] + 1.0).abs() < 1e-10);
    }

    #[test]
    fn backward_square_and_fan_out() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let a = g.sum(x);
        let b = g.sum(x);
        let loss = g.add(a, b).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_leaves_get_no_grad() {
        let mut g = Graph::new();
        let w = g.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let x = g.param(m(&[&[1.0, 1.0]]));
        let y = g.matmul(x, w).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert!(g.grad(w).is_none());
        assert_eq!(g.grad(x).unwrap(), &[3.0, 7.0]);
    }

    #[test]
    fn softmax_rows_normalize() {
        let mut g = Graph::new();
        let x = g.constant(m(&[&[1.0, 2.0, 3.0], &[-1.0, 0.0, 1000.0]]));
        let y = g.softmax_rows(x);
        for r in 0..2 {
            let s: f64 = g.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0]));
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }
}
