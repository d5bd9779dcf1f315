use crate::error::{invalid, mismatch, Result, TensorError};
use crate::rng::uniform_from_counter;
use crate::tensor::{matmul_into, transpose_block, Tensor};

/// Handle to a value recorded on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Statistics a training-mode batch-norm computed over its batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (divide-by-N) variance, the one used for normalization.
    pub var: Vec<f64>,
    pub batch_size: usize,
}

impl BatchStats {
    /// Unbiased variance estimate, used for running-statistic updates.
    pub fn unbiased_var(&self) -> Vec<f64> {
        let n = self.batch_size as f64;
        if self.batch_size < 2 {
            return self.var.clone();
        }
        self.var.iter().map(|v| v * n / (n - 1.0)).collect()
    }
}

pub enum BatchNormMode<'a> {
    /// Normalize with the batch's own statistics.
    Training,
    /// Normalize with frozen running statistics.
    Inference { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `[.., k] · [k, n]`, leading axes flattened into rows.
    MatMul(NodeId, NodeId),
    /// `[b, m, k] · [b, k, n]`.
    BatchMatMul(NodeId, NodeId),
    /// Second operand is broadcast over the leading axes of the first.
    Add(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    /// Masked entries have zero output, so their gradient vanishes without
    /// consulting the mask again.
    Softmax(NodeId),
    Scale(NodeId, f64),
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
    },
    Transpose(NodeId),
    Reshape(NodeId),
    AbsDiff(NodeId, NodeId),
    Mean {
        input: NodeId,
        axis: usize,
    },
    Sum(NodeId),
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    LayerNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        input: NodeId,
        scale: Vec<f64>,
    },
    BceWithLogits {
        logits: NodeId,
        targets: Vec<f64>,
    },
    GatherRows {
        table: NodeId,
        indices: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// An eagerly evaluated computation tape.
///
/// Nodes are appended in evaluation order, so the tape index order is a
/// topological order and [`Graph::backward`] simply walks it in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Outer/axis/inner extents for axis-wise copies.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient accumulated by the last [`Graph::backward`] call, if any
    /// flowed into this node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[NodeId]) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite value produced by {op:?}");
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    // ------------------------------------------------------------------
    // forward operators
    // ------------------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let rows = self.value(a).numel() / k;
        let mut out = vec![0.0; rows * n];
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            rows,
            k,
            n,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(mismatch("batch_matmul", &sa, &sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            matmul_into(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Ok(self.push(
            Tensor::new(&[batch, m, n], out)?,
            Op::BatchMatMul(a, b),
            &[a, b],
        ))
    }

    /// Elementwise sum; `b` may match `a` exactly or match a suffix of
    /// `a`'s shape, in which case it is broadcast over the leading axes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(mismatch("add", sa, sb));
        }
        let bd = self.value(b).data();
        let period = bd.len();
        let mut out = self.value(a).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bd[i % period];
        }
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(stable_sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.softmax_impl(x, None)
            .expect("unmasked softmax cannot fail")
    }

    /// Softmax over the last axis where entries with `keep[i] == false`
    /// receive exactly zero probability. `keep` has one flag per element.
    /// A fully masked row yields all zeros.
    pub fn masked_softmax(&mut self, x: NodeId, keep: Vec<bool>) -> Result<NodeId> {
        if keep.len() != self.value(x).numel() {
            return Err(mismatch("masked_softmax", self.shape(x), &[keep.len()]));
        }
        self.softmax_impl(x, Some(keep))
    }

    fn softmax_impl(&mut self, x: NodeId, keep: Option<Vec<bool>>) -> Result<NodeId> {
        let value = self.value(x);
        let (rows, cols) = value.rows_cols();
        let src = value.data();
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let span = r * cols..(r + 1) * cols;
            let kept = |j: usize| keep.as_ref().is_none_or(|k| k[r * cols + j]);
            let max = (0..cols)
                .filter(|&j| kept(j))
                .map(|j| src[span.start + j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for j in 0..cols {
                if kept(j) {
                    let e = (src[span.start + j] - max).exp();
                    out[span.start + j] = e;
                    total += e;
                }
            }
            for o in &mut out[span] {
                *o /= total;
            }
        }
        let out = Tensor::new(value.shape(), out)?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = inputs
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for &id in inputs {
            let s = self.shape(id);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &id in inputs {
                let v = self.value(id);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, extent, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            out,
            Op::Slice {
                input: x,
                axis,
                start,
            },
            &[x],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(invalid("transpose", format!("rank {} < 2", shape.len())));
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len());
        for block in src.chunks(r * c) {
            out.extend(transpose_block(block, r, c));
        }
        let mut out_shape = shape;
        let n = out_shape.len();
        out_shape.swap(n - 2, n - 1);
        let out = Tensor::new(&out_shape, out)?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self
            .value(x)
            .reshape(shape)
            .map_err(|_| mismatch("reshape", self.shape(x), shape))?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// `|a − b|` elementwise.
    pub fn abs_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("abs_diff", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).abs())
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        Ok(self.push(out, Op::AbsDiff(a, b), &[a, b]))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(invalid(
                "mean",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, extent, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..extent {
                let row = &src[(o * extent + a) * inner..(o * extent + a + 1) * inner];
                for (dst, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *dst += v;
                }
            }
        }
        let inv = 1.0 / extent as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let out = Tensor::new(&out_shape, out)?;
        Ok(self.push(out, Op::Mean { input: x, axis }, &[x]))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    /// Batch normalization of a `[batch, features]` input with per-feature
    /// affine parameters. In training mode the batch statistics are
    /// returned so the caller can maintain running estimates.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        mode: BatchNormMode<'_>,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(invalid(
                "batch_norm",
                format!("expected [batch, features], got {shape:?}"),
            ));
        }
        let (n, f) = (shape[0], shape[1]);
        for p in [gamma, beta] {
            if self.shape(p) != [f] {
                return Err(mismatch("batch_norm", &shape, self.shape(p)));
            }
        }
        let src = self.value(x).data();
        let (mean, var, training) = match mode {
            BatchNormMode::Training => {
                let mut mean = vec![0.0; f];
                for row in src.chunks(f) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; f];
                for row in src.chunks(f) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                (mean, var, true)
            }
            BatchNormMode::Inference { mean, var } => {
                if mean.len() != f || var.len() != f {
                    return Err(mismatch("batch_norm", &[f], &[mean.len(), var.len()]));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut normalized = vec![0.0; n * f];
        let mut out = vec![0.0; n * f];
        for i in 0..n {
            for j in 0..f {
                let xh = (src[i * f + j] - mean[j]) * inv_std[j];
                normalized[i * f + j] = xh;
                out[i * f + j] = g[j] * xh + b[j];
            }
        }
        let stats = training.then_some(BatchStats {
            mean,
            var,
            batch_size: n,
        });
        let out = Tensor::new(&shape, out)?;
        let id = self.push(
            out,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                normalized,
                inv_std,
                training,
            },
            &[x, gamma, beta],
        );
        Ok((id, stats))
    }

    /// Normalization over the last axis with per-feature affine parameters.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let (rows, f) = self.value(x).rows_cols();
        for p in [gamma, beta] {
            if self.shape(p) != [f] {
                return Err(mismatch("layer_norm", &shape, self.shape(p)));
            }
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut normalized = vec![0.0; rows * f];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * f];
        for r in 0..rows {
            let row = &src[r * f..(r + 1) * f];
            let mean = row.iter().sum::<f64>() / f as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..f {
                let xh = (row[j] - mean) * is;
                normalized[r * f + j] = xh;
                out[r * f + j] = g[j] * xh + b[j];
            }
        }
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                input: x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Inverted dropout: each element is zeroed with probability `p` and
    /// survivors are scaled by `1 / (1 − p)`. The mask is a pure function
    /// of `key`, so re-running with the same key reproduces it exactly.
    pub fn dropout(&mut self, x: NodeId, p: f64, key: u64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid("dropout", format!("p = {p} not in [0, 1)")));
        }
        let keep_scale = 1.0 / (1.0 - p);
        let scale: Vec<f64> = (0..self.value(x).numel() as u64)
            .map(|i| {
                if uniform_from_counter(key, i) >= p {
                    keep_scale
                } else {
                    0.0
                }
            })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&scale)
            .map(|(v, s)| v * s)
            .collect();
        let out = Tensor::new(self.shape(x), data)?;
        Ok(self.push(out, Op::Dropout { input: x, scale }, &[x]))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`,
    /// evaluated in the overflow-free logit form.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[f64]) -> Result<NodeId> {
        let z = self.value(logits).data();
        if z.len() != targets.len() {
            return Err(mismatch(
                "bce_with_logits",
                self.shape(logits),
                &[targets.len()],
            ));
        }
        let total: f64 = z
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let loss = total / z.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// Looks up rows of a `[vocab, dim]` table. The output has shape
    /// `lead ++ [dim]` where `lead` multiplies out to `indices.len()`.
    pub fn gather_rows(
        &mut self,
        table: NodeId,
        indices: &[usize],
        lead: &[usize],
    ) -> Result<NodeId> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || lead.iter().product::<usize>() != indices.len() {
            return Err(mismatch("gather_rows", &ts, lead));
        }
        let (vocab, dim) = (ts[0], ts[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(invalid(
                "gather_rows",
                format!("index {bad} >= vocab {vocab}"),
            ));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            out.extend_from_slice(&src[i * dim..(i + 1) * dim]);
        }
        let mut shape = lead.to_vec();
        shape.push(dim);
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        ))
    }

    // ------------------------------------------------------------------
    // reverse pass
    // ------------------------------------------------------------------

    /// Back-propagates from a scalar root. All previously stored gradients
    /// are cleared first; afterwards every node that requires a gradient
    /// and influences `root` holds d(root)/d(node).
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(TensorError::NonScalarRoot(self.shape(root).to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(Tensor::ones(self.shape(root)));
        for idx in (0..=root.0).rev() {
            let Some(upstream) = self.nodes[idx].grad.take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let contributions = self.local_grads(idx, &upstream)?;
            self.nodes[idx].grad = Some(upstream);
            for (parent, g) in contributions {
                let node = &mut self.nodes[parent.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(existing) => existing.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, up: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let node = &self.nodes[idx];
        let dy = up.data();
        let grads = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let rows = av.numel() / k;
                let mut da = vec![0.0; rows * k];
                let bt = transpose_block(bv.data(), k, n);
                matmul_into(dy, &bt, &mut da, rows, n, k);
                let at = transpose_block(av.data(), rows, k);
                let mut db = vec![0.0; k * n];
                matmul_into(&at, dy, &mut db, k, rows, n);
                vec![
                    (*a, Tensor::new(av.shape(), da)?),
                    (*b, Tensor::new(bv.shape(), db)?),
                ]
            }
            Op::BatchMatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = bv.shape()[2];
                let mut da = vec![0.0; batch * m * k];
                let mut db = vec![0.0; batch * k * n];
                for i in 0..batch {
                    let a_i = &av.data()[i * m * k..(i + 1) * m * k];
                    let b_i = &bv.data()[i * k * n..(i + 1) * k * n];
                    let dy_i = &dy[i * m * n..(i + 1) * m * n];
                    let bt = transpose_block(b_i, k, n);
                    matmul_into(dy_i, &bt, &mut da[i * m * k..(i + 1) * m * k], m, n, k);
                    let at = transpose_block(a_i, m, k);
                    matmul_into(&at, dy_i, &mut db[i * k * n..(i + 1) * k * n], k, m, n);
                }
                vec![
                    (*a, Tensor::new(av.shape(), da)?),
                    (*b, Tensor::new(bv.shape(), db)?),
                ]
            }
            Op::Add(a, b) => {
                let bshape = self.shape(*b);
                let period = self.value(*b).numel();
                let mut db = vec![0.0; period];
                for (i, g) in dy.iter().enumerate() {
                    db[i % period] += g;
                }
                vec![(*a, up.clone()), (*b, Tensor::new(bshape, db)?)]
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = xv
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                vec![(*x, Tensor::new(up.shape(), dx)?)]
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let dx = y.iter().zip(dy).map(|(&s, &g)| g * s * (1.0 - s)).collect();
                vec![(*x, Tensor::new(up.shape(), dx)?)]
            }
            Op::Softmax(input) => {
                let y = node.value.data();
                let (_, cols) = node.value.rows_cols();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(cols).zip(dy.chunks(cols)).zip(dx.chunks_mut(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (g - dot);
                    }
                }
                vec![(*input, Tensor::new(up.shape(), dx)?)]
            }
            Op::Scale(x, c) => vec![(*x, up.map(|g| g * c))],
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_extents(node.value.shape(), *axis);
                let mut parts: Vec<Vec<f64>> = inputs
                    .iter()
                    .map(|id| Vec::with_capacity(self.value(*id).numel()))
                    .collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (part, id) in parts.iter_mut().zip(inputs) {
                        let chunk = self.shape(*id)[*axis] * inner;
                        part.extend_from_slice(&dy[offset..offset + chunk]);
                        offset += chunk;
                    }
                }
                inputs
                    .iter()
                    .zip(parts)
                    .map(|(id, g)| Ok((*id, Tensor::new(self.shape(*id), g)?)))
                    .collect::<Result<Vec<_>>>()?
            }
            Op::Slice { input, axis, start } => {
                let in_shape = self.shape(*input);
                let (outer, extent, inner) = axis_extents(in_shape, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![0.0; self.value(*input).numel()];
                for o in 0..outer {
                    let base = o * extent * inner + start * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&dy[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*input, Tensor::new(in_shape, dx)?)]
            }
            Op::Transpose(x) => {
                let s = up.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let mut dx = Vec::with_capacity(dy.len());
                for block in dy.chunks(r * c) {
                    dx.extend(transpose_block(block, r, c));
                }
                vec![(*x, Tensor::new(self.shape(*x), dx)?)]
            }
            Op::Reshape(x) => vec![(*x, up.reshape(self.shape(*x))?)],
            Op::AbsDiff(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let da: Vec<f64> = av
                    .iter()
                    .zip(bv)
                    .zip(dy)
                    .map(|((x, y), g)| g * sign(x - y))
                    .collect();
                let db = da.iter().map(|v| -v).collect();
                vec![
                    (*a, Tensor::new(up.shape(), da)?),
                    (*b, Tensor::new(up.shape(), db)?),
                ]
            }
            Op::Mean { input, axis } => {
                let in_shape = self.shape(*input);
                let (outer, extent, inner) = axis_extents(in_shape, *axis);
                let inv = 1.0 / extent as f64;
                let mut dx = vec![0.0; outer * extent * inner];
                for o in 0..outer {
                    for a in 0..extent {
                        let dst = &mut dx[(o * extent + a) * inner..(o * extent + a + 1) * inner];
                        for (d, g) in dst.iter_mut().zip(&dy[o * inner..(o + 1) * inner]) {
                            *d = g * inv;
                        }
                    }
                }
                vec![(*input, Tensor::new(in_shape, dx)?)]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(self.shape(*x), dy[0]))],
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                training,
            } => {
                let shape = self.shape(*input);
                let (n, f) = (shape[0], shape[1]);
                let g = self.value(*gamma).data();
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                for i in 0..n {
                    for j in 0..f {
                        dgamma[j] += dy[i * f + j] * normalized[i * f + j];
                        dbeta[j] += dy[i * f + j];
                    }
                }
                let mut dx = vec![0.0; n * f];
                if *training {
                    let nf = n as f64;
                    for j in 0..f {
                        // sums of dx̂ and dx̂·x̂ over the batch, with dx̂ = dy·γ
                        let (s1, s2) = (g[j] * dbeta[j], g[j] * dgamma[j]);
                        for i in 0..n {
                            let dxh = dy[i * f + j] * g[j];
                            dx[i * f + j] =
                                inv_std[j] / nf * (nf * dxh - s1 - normalized[i * f + j] * s2);
                        }
                    }
                } else {
                    for i in 0..n {
                        for j in 0..f {
                            dx[i * f + j] = dy[i * f + j] * g[j] * inv_std[j];
                        }
                    }
                }
                vec![
                    (*input, Tensor::new(shape, dx)?),
                    (*gamma, Tensor::new(&[f], dgamma)?),
                    (*beta, Tensor::new(&[f], dbeta)?),
                ]
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let shape = self.shape(*input);
                let f = *shape.last().unwrap();
                let rows = dy.len() / f;
                let g = self.value(*gamma).data();
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                let mut dx = vec![0.0; rows * f];
                let ff = f as f64;
                for r in 0..rows {
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for j in 0..f {
                        let k = r * f + j;
                        dgamma[j] += dy[k] * normalized[k];
                        dbeta[j] += dy[k];
                        let dxh = dy[k] * g[j];
                        s1 += dxh;
                        s2 += dxh * normalized[k];
                    }
                    for j in 0..f {
                        let k = r * f + j;
                        let dxh = dy[k] * g[j];
                        dx[k] = inv_std[r] / ff * (ff * dxh - s1 - normalized[k] * s2);
                    }
                }
                vec![
                    (*input, Tensor::new(shape, dx)?),
                    (*gamma, Tensor::new(&[f], dgamma)?),
                    (*beta, Tensor::new(&[f], dbeta)?),
                ]
            }
            Op::Dropout { input, scale } => {
                let dx = dy.iter().zip(scale).map(|(g, s)| g * s).collect();
                vec![(*input, Tensor::new(up.shape(), dx)?)]
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.value(*logits);
                let inv_n = 1.0 / targets.len() as f64;
                let dx = z
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &t)| dy[0] * (stable_sigmoid(z) - t) * inv_n)
                    .collect();
                vec![(*logits, Tensor::new(z.shape(), dx)?)]
            }
            Op::GatherRows { table, indices } => {
                let ts = self.shape(*table);
                let dim = ts[1];
                let mut dt = vec![0.0; ts[0] * dim];
                for (pos, &i) in indices.iter().enumerate() {
                    for (d, g) in dt[i * dim..(i + 1) * dim]
                        .iter_mut()
                        .zip(&dy[pos * dim..(pos + 1) * dim])
                    {
                        *d += g;
                    }
                }
                vec![(*table, Tensor::new(ts, dt)?)]
            }
        };
        Ok(grads)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
