//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of a forward pass as a node. Nodes are
//! appended in evaluation order, so node ids are already a topological order
//! and the backward sweep is a single reverse pass over the node list.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{matmul_a_bt, matmul_at_b, ParamSet, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Relu(NodeId),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CePos {
        logits: NodeId,
        labels: Vec<usize>,
    },
    CeNeg {
        logits: NodeId,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Node handles produced by [`Tape::cross_entropy_split`].
///
/// `loss = pos + neg` is the mean softmax cross-entropy; `pos` is the negated
/// mean correct-class logit and `neg` the mean log-partition.
#[derive(Debug, Clone, Copy)]
pub struct CrossEntropySplit {
    pub logits: NodeId,
    pub loss: NodeId,
    pub pos: NodeId,
    pub neg: NodeId,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Records a constant input (no gradient is propagated to the caller).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Records the current value of parameter `index` of `params`.
    pub fn param(&mut self, params: &ParamSet, index: usize) -> Result<NodeId> {
        let p = params
            .get(index)
            .ok_or_else(|| shape_err("param", format!("no parameter {index}")))?;
        Ok(self.push(p.value.clone(), Op::Param(index)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Adds a length-`n` bias vector to every row of a `b×n` matrix.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.value(x).dims2("add_row")?;
        let bv = self.value(bias);
        if bv.shape() != [cols] {
            return Err(shape_err(
                "add_row",
                format!("bias shape {:?} for {cols} columns", bv.shape()),
            ));
        }
        let mut data = self.value(x).data().to_vec();
        for r in 0..rows {
            for (o, b) in data[r * cols..(r + 1) * cols].iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![rows, cols], data), Op::AddRow(x, bias)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        va.check_same_shape(vb, "mul")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    /// Training-mode batch normalization of a `b×d` matrix over its rows.
    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (b, d) = self.value(x).dims2("batch_norm")?;
        if b < 2 {
            return Err(Error::BatchTooSmall(b));
        }
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.value(id).shape() != [d] {
                return Err(shape_err(
                    "batch_norm",
                    format!("{name} shape {:?} for {d} features", self.value(id).shape()),
                ));
            }
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut mean = vec![0.0; d];
        for r in 0..b {
            for (m, v) in mean.iter_mut().zip(&xv[r * d..(r + 1) * d]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= b as f64);
        let mut var = vec![0.0; d];
        for r in 0..b {
            for j in 0..d {
                let c = xv[r * d + j] - mean[j];
                var[j] += c * c;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / b as f64 + eps).sqrt()).collect();
        let mut xhat = vec![0.0; b * d];
        let mut out = vec![0.0; b * d];
        for r in 0..b {
            for j in 0..d {
                let i = r * d + j;
                xhat[i] = (xv[i] - mean[j]) * inv_std[j];
                out[i] = gv[j] * xhat[i] + bv[j];
            }
        }
        let value = Tensor::from_parts(vec![b, d], out);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Mean softmax cross-entropy split into its correct-class and log-partition parts.
    pub fn cross_entropy_split(&mut self, logits: NodeId, labels: &[usize]) -> Result<CrossEntropySplit> {
        let (b, c) = self.value(logits).dims2("cross_entropy_split")?;
        if labels.len() != b {
            return Err(shape_err(
                "cross_entropy_split",
                format!("{} labels for {b} rows", labels.len()),
            ));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::LabelOutOfRange {
                index,
                label: label as i64,
                classes: c,
            });
        }
        let x = self.value(logits).data();
        let bf = b as f64;
        let pos = -labels.iter().enumerate().map(|(i, &l)| x[i * c + l]).sum::<f64>() / bf;
        let mut probs = vec![0.0; b * c];
        let mut lse_total = 0.0;
        for i in 0..b {
            let row = &x[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            lse_total += max + z.ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - max).exp() / z;
            }
        }
        let neg = lse_total / bf;
        if !pos.is_finite() || !neg.is_finite() {
            return Err(Error::NonFinite {
                context: "cross entropy".into(),
            });
        }
        let pos_id = self.push(
            Tensor::scalar(pos),
            Op::CePos {
                logits,
                labels: labels.to_vec(),
            },
        );
        let neg_id = self.push(Tensor::scalar(neg), Op::CeNeg { logits, probs });
        let loss = self.add(pos_id, neg_id)?;
        Ok(CrossEntropySplit {
            logits,
            loss,
            pos: pos_id,
            neg: neg_id,
        })
    }

    /// Adjoints of every node with respect to the scalar `root`.
    pub fn gradients(&self, root: NodeId) -> Result<Gradients> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::NonScalarLoss(root_value.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            self.propagate(id, &g, &mut adj);
            adj[id] = Some(g);
        }
        Ok(Gradients { adj })
    }

    /// Adds `∂root/∂w` into the gradient slots of `params`.
    pub fn backward(&self, root: NodeId, params: &mut ParamSet) -> Result<()> {
        let grads = self.gradients(root)?.param_grads(self, params)?;
        params.accumulate_grads(&grads)
    }

    fn propagate(&self, id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                accumulate(adj, *a, matmul_a_bt(g, vb.data(), m, n, k));
                accumulate(adj, *b, matmul_at_b(va.data(), g, m, k, n));
            }
            Op::AddRow(x, bias) => {
                let cols = self.value(*bias).len();
                let mut gb = vec![0.0; cols];
                for row in g.chunks(cols) {
                    for (s, v) in gb.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                accumulate(adj, *x, g.to_vec());
                accumulate(adj, *bias, gb);
            }
            Op::Add(a, b) => {
                accumulate(adj, *a, g.to_vec());
                accumulate(adj, *b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                accumulate(adj, *a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                accumulate(adj, *b, g.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, c) => {
                accumulate(adj, *a, g.iter().map(|v| v * c).collect());
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                accumulate(adj, *a, vec![g[0]; n]);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx = g.iter().zip(xv).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                accumulate(adj, *x, gx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma).data();
                let d = gv.len();
                let b = g.len() / d;
                let bf = b as f64;
                let mut g_gamma = vec![0.0; d];
                let mut g_beta = vec![0.0; d];
                // column sums of dxhat and dxhat·xhat
                let mut s1 = vec![0.0; d];
                let mut s2 = vec![0.0; d];
                for r in 0..b {
                    for j in 0..d {
                        let i = r * d + j;
                        g_gamma[j] += g[i] * xhat[i];
                        g_beta[j] += g[i];
                        let dxhat = g[i] * gv[j];
                        s1[j] += dxhat;
                        s2[j] += dxhat * xhat[i];
                    }
                }
                let mut gx = vec![0.0; b * d];
                for r in 0..b {
                    for j in 0..d {
                        let i = r * d + j;
                        let dxhat = g[i] * gv[j];
                        gx[i] = inv_std[j] / bf * (bf * dxhat - s1[j] - xhat[i] * s2[j]);
                    }
                }
                accumulate(adj, *x, gx);
                accumulate(adj, *gamma, g_gamma);
                accumulate(adj, *beta, g_beta);
            }
            Op::CePos { logits, labels } => {
                let c = self.value(*logits).shape()[1];
                let b = labels.len();
                let mut gl = vec![0.0; b * c];
                for (i, &l) in labels.iter().enumerate() {
                    gl[i * c + l] = -g[0] / b as f64;
                }
                accumulate(adj, *logits, gl);
            }
            Op::CeNeg { logits, probs } => {
                let b = self.value(*logits).shape()[0] as f64;
                accumulate(adj, *logits, probs.iter().map(|p| p * g[0] / b).collect());
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
    match &mut adj[id.0] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Per-node adjoints from one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    adj: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to node `id`, if `id` influences the root.
    pub fn wrt(&self, tape: &Tape, id: NodeId) -> Option<Tensor> {
        self.adj
            .get(id.0)
            .and_then(Option::as_ref)
            .map(|g| Tensor::from_parts(tape.value(id).shape().to_vec(), g.clone()))
    }

    /// One gradient per parameter of `params`, zero for parameters the root does not touch.
    /// Multiple uses of the same parameter are summed.
    pub fn param_grads(&self, tape: &Tape, params: &ParamSet) -> Result<Vec<Tensor>> {
        let mut out: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        for (i, node) in tape.nodes.iter().enumerate().take(self.adj.len()) {
            if let (Op::Param(p), Some(g)) = (&node.op, &self.adj[i]) {
                let slot = out
                    .get_mut(*p)
                    .ok_or_else(|| shape_err("param_grads", format!("tape refers to parameter {p}")))?;
                if slot.len() != g.len() {
                    return Err(shape_err("param_grads", format!("parameter {p} changed shape")));
                }
                for (a, b) in slot.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        if let Some((i, _)) = out.iter().enumerate().find(|(_, t)| !t.all_finite()) {
            return Err(Error::NonFinite {
                context: format!("gradient of parameter {i}"),
            });
        }
        Ok(out)
    }
}
