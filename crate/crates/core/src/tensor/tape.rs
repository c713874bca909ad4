use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, gelu, gelu_grad};
use super::{as_matrix, axis_split, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for operations implemented outside this module.
///
/// `in_grads[i]` arrives zeroed with the length of input `i`; the rule adds
/// its contribution into it.
pub(crate) trait CustomOp: Send + Sync {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, out_grad: &[f64], in_grads: &mut [Vec<f64>]);
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow { x: Var, bias: Var },
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Dropout { x: Var, mask: Vec<f64> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax { x: Var, axis: usize },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    BinaryCrossEntropy { logits: Var, targets: Vec<f64> },
    Sum(Var),
    Row { x: Var, index: usize },
    Reshape(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records a computation for reverse-mode differentiation.
///
/// A tape belongs to one worker. Nodes are appended in evaluation order, so
/// the node list is already a topological order of the graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input; no gradient is tracked through it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = ta.matmul(tb)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension(format!(
                "add shapes differ: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `x + bias` with a 1-D `bias` broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.rank() != 1 || tb.len() != tx.last_dim() {
            return Err(Error::Dimension(format!(
                "bias {:?} does not match last axis of {:?}",
                tb.shape(),
                tx.shape()
            )));
        }
        let c = tb.len();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[i % c])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.needs(&[x, bias]);
        Ok(self.push(out, Op::AddRow { x, bias }, rg))
    }

    /// `x·w + b` for `x: [m,k]`, `w: [k,n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension(format!(
                "mul shapes differ: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let tx = self.value(x);
        let out = Tensor {
            shape: tx.shape().to_vec(),
            data: tx.data().iter().map(|v| v * s).collect(),
        };
        let rg = self.needs(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = Tensor {
            shape: tx.shape().to_vec(),
            data: tx.data().iter().map(|&v| v.max(0.0)).collect(),
        };
        let rg = self.needs(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = Tensor {
            shape: tx.shape().to_vec(),
            data: tx.data().iter().map(|&v| gelu(v)).collect(),
        };
        let rg = self.needs(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`.
    ///
    /// The keep mask is a pure function of `seed`. `p == 0` returns `x` itself.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} not in [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let tx = self.value(x);
        let mask: Vec<f64> = (0..tx.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = Tensor {
            shape: tx.shape().to_vec(),
            data: tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect(),
        };
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = tx.last_dim();
        if tg.len() != c || tb.len() != c || tg.rank() != 1 || tb.rank() != 1 {
            return Err(Error::Dimension(format!(
                "layer norm gain {:?} / bias {:?} must match last axis of {:?}",
                tg.shape(),
                tb.shape(),
                tx.shape()
            )));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Max-subtracted softmax along `axis`. An all-`-inf` lane maps to zeros.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).softmax(axis)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// Gathers rows of `table: [n, d]` into `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (n, d) = as_matrix(tt)?;
        if ids.is_empty() {
            return Err(Error::Contract("embedding lookup with no ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::Label(format!("id {id} outside table of {n} rows")));
            }
            data.extend_from_slice(tt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.needs(&[table]);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits: [n, C]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, c) = as_matrix(tl)?;
        if targets.len() != n {
            return Err(Error::Dimension(format!(
                "{} targets for {n} logit rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Label(format!("target {bad} outside {c} classes")));
        }
        let mut probs = tl.data().to_vec();
        kernels::softmax_strided(&mut probs, n, c, 1);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            // log-sum-exp form keeps the loss finite for saturated rows.
            let row = tl.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        let out = Tensor::scalar(loss / n as f64);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean sigmoid cross-entropy of `logits` against targets in `[0, 1]`.
    pub fn binary_cross_entropy(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let tl = self.value(logits);
        if targets.len() != tl.len() {
            return Err(Error::Dimension(format!(
                "{} targets for {} logits",
                targets.len(),
                tl.len()
            )));
        }
        if let Some(bad) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Label(format!("binary target {bad} outside [0, 1]")));
        }
        let loss: f64 = tl
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::scalar(loss / tl.len() as f64);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            out,
            Op::BinaryCrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Row `index` of a matrix, as `[1, cols]`.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = as_matrix(tx)?;
        if index >= m {
            return Err(Error::Dimension(format!("row {index} of {m}-row matrix")));
        }
        let out = Tensor::new(vec![1, n], tx.row(index).to_vec())?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Row { x, index }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub(crate) fn custom(&mut self, inputs: Vec<Var>, output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.needs(&inputs);
        self.push(output, Op::Custom { inputs, op }, rg)
    }

    /// Populates gradients of the scalar `loss` for every node it depends on.
    ///
    /// Earlier gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Split borrows: nodes are read, grads are written.
        let nodes = std::mem::take(&mut self.nodes);
        let node = &nodes[i];
        let val = |v: Var| &nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                self.accumulate_with(&nodes, *a, |ga| kernels::matmul_a_bt(g, tb.data(), m, k, n, ga));
                self.accumulate_with(&nodes, *b, |gb| kernels::matmul_at_b(ta.data(), g, m, k, n, gb));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate_with(&nodes, v, |ga| add_into(ga, g));
                }
            }
            Op::AddRow { x, bias } => {
                self.accumulate_with(&nodes, *x, |gx| add_into(gx, g));
                let c = val(*bias).len();
                self.accumulate_with(&nodes, *bias, |gb| {
                    for (j, gv) in g.iter().enumerate() {
                        gb[j % c] += gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                self.accumulate_with(&nodes, *a, |ga| {
                    for ((o, gv), bv) in ga.iter_mut().zip(g).zip(tb.data()) {
                        *o += gv * bv;
                    }
                });
                self.accumulate_with(&nodes, *b, |gb| {
                    for ((o, gv), av) in gb.iter_mut().zip(g).zip(ta.data()) {
                        *o += gv * av;
                    }
                });
            }
            Op::Scale(x, s) => {
                self.accumulate_with(&nodes, *x, |gx| {
                    for (o, gv) in gx.iter_mut().zip(g) {
                        *o += gv * s;
                    }
                });
            }
            Op::Relu(x) => {
                let tx = val(*x);
                self.accumulate_with(&nodes, *x, |gx| {
                    for ((o, gv), xv) in gx.iter_mut().zip(g).zip(tx.data()) {
                        if *xv > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let tx = val(*x);
                self.accumulate_with(&nodes, *x, |gx| {
                    for ((o, gv), xv) in gx.iter_mut().zip(g).zip(tx.data()) {
                        *o += gv * gelu_grad(*xv);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accumulate_with(&nodes, *x, |gx| {
                    for ((o, gv), m) in gx.iter_mut().zip(g).zip(mask) {
                        *o += gv * m;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let tg = val(*gain);
                let c = tg.len();
                let rows = inv_std.len();
                self.accumulate_with(&nodes, *x, |gx| {
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..c {
                            let dh = gr[j] * tg.data()[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        let k = inv_std[r] / c as f64;
                        for j in 0..c {
                            let dh = gr[j] * tg.data()[j];
                            gx[r * c + j] += k * (c as f64 * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                });
                self.accumulate_with(&nodes, *gain, |gg| {
                    for (j, (gv, hv)) in g.iter().zip(xhat).enumerate() {
                        gg[j % c] += gv * hv;
                    }
                });
                self.accumulate_with(&nodes, *bias, |gb| {
                    for (j, gv) in g.iter().enumerate() {
                        gb[j % c] += gv;
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) =
                    axis_split(y.shape(), *axis).expect("axis validated at record time");
                self.accumulate_with(&nodes, *x, |gx| {
                    for o in 0..outer {
                        for k in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + k;
                            let dot: f64 = (0..len).map(|j| y.data()[at(j)] * g[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += y.data()[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = val(*table).shape()[1];
                self.accumulate_with(&nodes, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let c = probs.len() / n;
                let s = g[0] / n as f64;
                self.accumulate_with(&nodes, *logits, |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let ind = if j == t { 1.0 } else { 0.0 };
                            gl[r * c + j] += s * (probs[r * c + j] - ind);
                        }
                    }
                });
            }
            Op::BinaryCrossEntropy { logits, targets } => {
                let tl = val(*logits);
                let s = g[0] / targets.len() as f64;
                self.accumulate_with(&nodes, *logits, |gl| {
                    for ((o, &z), &y) in gl.iter_mut().zip(tl.data()).zip(targets) {
                        *o += s * (sigmoid(z) - y);
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate_with(&nodes, *x, |gx| {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                });
            }
            Op::Row { x, index } => {
                let n = g.len();
                self.accumulate_with(&nodes, *x, |gx| add_into(&mut gx[index * n..(index + 1) * n], g));
            }
            Op::Reshape(x) => {
                self.accumulate_with(&nodes, *x, |gx| add_into(gx, g));
            }
            Op::Custom { inputs, op } => {
                if inputs.iter().any(|v| nodes[v.0].requires_grad) {
                    let ins: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.0].value).collect();
                    let mut in_grads: Vec<Vec<f64>> = ins.iter().map(|t| vec![0.0; t.len()]).collect();
                    op.backward(&ins, &node.value, g, &mut in_grads);
                    for (v, contrib) in inputs.iter().zip(in_grads) {
                        self.accumulate_with(&nodes, *v, |gv| add_into(gv, &contrib));
                    }
                }
            }
        }
        self.nodes = nodes;
    }

    // Variant of `accumulate` usable while `self.nodes` is moved out.
    fn accumulate_with(&mut self, nodes: &[Node], v: Var, contribution: impl FnOnce(&mut [f64])) {
        if !nodes[v.0].requires_grad {
            return;
        }
        let n = nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        contribution(slot);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
