use std::collections::BTreeMap;

use super::{AutodiffError, ParamSet, Scalar, Tensor};

/// Index of a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// One weighted next-token target of a cross-entropy node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTarget<T> {
    pub row: usize,
    pub token: usize,
    pub weight: T,
}

/// A contiguous block of rows forming one causal sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op<T> {
    Input,
    Param(usize),
    MatMul { a: NodeId, b: NodeId, trans_b: bool },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Tanh(NodeId),
    Gelu(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding { table: NodeId, ids: Vec<usize> },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        segments: Vec<Segment>,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<LossTarget<T>>,
        probs: Vec<T>,
    },
    Kl {
        logits: NodeId,
        rows: Vec<usize>,
        weights: Vec<T>,
        ref_logp: Vec<T>,
        /// Per-row (softmax, KL value) cache.
        probs: Vec<T>,
        kls: Vec<T>,
    },
    Sum(NodeId),
    SumSquares(NodeId),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Gelu(_) => "gelu",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Kl { .. } => "kl_divergence",
            Op::Sum(_) => "sum",
            Op::SumSquares(_) => "sum_squares",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], keyed by parameter index.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    by_param: BTreeMap<usize, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, param: usize) -> Option<&[T]> {
        self.by_param.get(&param).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[T])> {
        self.by_param.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    /// Dense per-parameter gradients aligned with `params`; parameters the
    /// loss never reached get all-zero gradients.
    pub fn dense(&self, params: &ParamSet<T>) -> Vec<Vec<T>> {
        (0..params.len())
            .map(|i| match self.by_param.get(&i) {
                Some(g) => g.clone(),
                None => vec![T::zero(); params.by_index(i).1.numel()],
            })
            .collect()
    }
}

/// Define-by-run computation graph.
///
/// Every op evaluates eagerly and appends a node, so node order is a
/// topological order by construction. [`Graph::backward`] walks it in
/// reverse.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    peak_bytes: usize,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            peak_bytes: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    /// Bytes held by node values and forward caches.
    pub fn resident_bytes(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| {
                let cache = match &n.op {
                    Op::LayerNorm { xhat, rstd, .. } => xhat.len() + rstd.len(),
                    Op::Attention { probs, .. } => probs.len(),
                    Op::CrossEntropy { probs, .. } => probs.len(),
                    Op::Kl { probs, .. } => probs.len(),
                    _ => 0,
                };
                (n.value.numel() + cache) * T::BYTES
            })
            .sum()
    }

    /// Largest resident + gradient footprint observed during backward.
    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes.max(self.resident_bytes())
    }

    fn next_id(&self) -> usize {
        self.nodes.len()
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        values: Vec<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Result<NodeId, AutodiffError> {
        let node = self.next_id();
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite {
                node,
                op: op.name(),
                index: pos,
            });
        }
        let value = Tensor::from_parts(shape, values);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(node))
    }

    fn node(&self, id: NodeId) -> Result<&Node<T>, AutodiffError> {
        self.nodes.get(id.0).ok_or(AutodiffError::UnknownNode(id.0))
    }

    fn mismatch(&self, op: &'static str, detail: String) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            node: self.next_id(),
            op,
            detail,
        }
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Constant leaf (no gradient).
    pub fn input(&mut self, t: Tensor<T>) -> Result<NodeId, AutodiffError> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_values(), Op::Input, false)
    }

    /// Leaf bound to parameter `index` of some [`ParamSet`]. Frozen
    /// parameters (`trainable == false`) receive no gradient and do not
    /// force gradient computation upstream.
    pub fn param(
        &mut self,
        index: usize,
        t: &Tensor<T>,
        trainable: bool,
    ) -> Result<NodeId, AutodiffError> {
        self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            Op::Param(index),
            trainable,
        )
    }

    /// Registers every parameter of `params` as a leaf, in order.
    pub fn params(
        &mut self,
        params: &ParamSet<T>,
        trainable: impl Fn(usize) -> bool,
    ) -> Result<Vec<NodeId>, AutodiffError> {
        (0..params.len())
            .map(|i| self.param(i, params.by_index(i).1, trainable(i)))
            .collect()
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize), AutodiffError> {
        let s = self.node(id)?.value.shape();
        match s {
            [r, c] => Ok((*r, *c)),
            _ => Err(self.mismatch(op, format!("expected rank-2 operand, got {s:?}"))),
        }
    }

    /// `a @ b` (or `a @ b^T` when `trans_b`).
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId, AutodiffError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (br, bc) = self.dims2(b, "matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(self.mismatch(
                "matmul",
                format!("inner dimensions differ: [{m},{k}] x [{kb},{n}]"),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.nodes[a.0].value.values(),
            false,
            self.nodes[b.0].value.values(),
            trans_b,
            T::zero(),
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        self.push(vec![m, n], out, Op::MatMul { a, b, trans_b }, rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.matmul_t(a, b, false)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<Vec<usize>, AutodiffError> {
        let sa = self.node(a)?.value.shape();
        let sb = self.node(b)?.value.shape();
        if sa != sb {
            return Err(self.mismatch(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let shape = self.same_shape(a, b, "add")?;
        let out = self.nodes[a.0]
            .value
            .values()
            .iter()
            .zip(self.nodes[b.0].value.values())
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(shape, out, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let shape = self.same_shape(a, b, "mul")?;
        let out = self.nodes[a.0]
            .value
            .values()
            .iter()
            .zip(self.nodes[b.0].value.values())
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(shape, out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> Result<NodeId, AutodiffError> {
        let n = self.node(a)?;
        let shape = n.value.shape().to_vec();
        let out = n.value.values().iter().map(|&x| x * factor).collect();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Scale(a, factor), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let n = self.node(a)?;
        let shape = n.value.shape().to_vec();
        let out = n.value.values().iter().map(|x| x.tanh()).collect();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Tanh(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let n = self.node(a)?;
        let shape = n.value.shape().to_vec();
        let out = n.value.values().iter().map(|&x| gelu(x)).collect();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Gelu(a), rg)
    }

    /// Softmax over the trailing dimension.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let n = self.node(a)?;
        let shape = n.value.shape().to_vec();
        let cols = n.value.cols();
        let mut out = n.value.values().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Softmax(a), rg)
    }

    /// Row-wise layer normalization with a learned gain (no bias).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId, AutodiffError> {
        let (rows, d) = self.dims2(x, "layer_norm")?;
        let gs = self.node(gain)?.value.shape();
        if gs != [d] {
            return Err(self.mismatch("layer_norm", format!("gain {gs:?} for width {d}")));
        }
        let eps = T::from_f64(1e-5);
        let dn = T::from_f64(d as f64);
        let xs = self.nodes[x.0].value.values();
        let g = self.nodes[gain.0].value.values();
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j];
            }
        }
        let rg = self.rg(&[x, gain]);
        if !rg {
            xhat.clear();
            rstd.clear();
        }
        self.push(vec![rows, d], out, Op::LayerNorm { x, gain, xhat, rstd }, rg)
    }

    /// Gathers rows `ids` of `table`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, AutodiffError> {
        let (v, d) = self.dims2(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(self.mismatch("embedding", format!("id {bad} out of range for {v} rows")));
        }
        if ids.is_empty() {
            return Err(self.mismatch("embedding", "no ids".into()));
        }
        let tv = self.nodes[table.0].value.values();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[rows, width]`; each segment attends only within
    /// itself and only to earlier-or-equal positions. Rows outside every
    /// segment produce zeros.
    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        segments: &[Segment],
    ) -> Result<NodeId, AutodiffError> {
        let (rows, width) = self.dims2(q, "attention")?;
        for id in [k, v] {
            let s = self.node(id)?.value.shape();
            if s != [rows, width] {
                return Err(self.mismatch("attention", format!("{s:?} vs q [{rows},{width}]")));
            }
        }
        if heads == 0 || width % heads != 0 {
            return Err(self.mismatch("attention", format!("{heads} heads for width {width}")));
        }
        if let Some(s) = segments.iter().find(|s| s.len == 0 || s.start + s.len > rows) {
            return Err(self.mismatch("attention", format!("segment {s:?} outside {rows} rows")));
        }
        let hd = width / heads;
        let inv = T::one() / T::from_f64(hd as f64).sqrt();
        let qv = self.nodes[q.0].value.values();
        let kv = self.nodes[k.0].value.values();
        let vv = self.nodes[v.0].value.values();
        let mut out = vec![T::zero(); rows * width];
        let mut probs = Vec::with_capacity(segments.iter().map(|s| s.len * s.len * heads).sum());
        let mut scores = Vec::new();
        for seg in segments {
            for h in 0..heads {
                let off = h * hd;
                for i in 0..seg.len {
                    let qi = &qv[(seg.start + i) * width + off..][..hd];
                    scores.clear();
                    for j in 0..=i {
                        let kj = &kv[(seg.start + j) * width + off..][..hd];
                        scores.push(dot(qi, kj) * inv);
                    }
                    softmax_in_place(&mut scores);
                    let oi = &mut out[(seg.start + i) * width + off..][..hd];
                    for (j, &p) in scores.iter().enumerate() {
                        let vj = &vv[(seg.start + j) * width + off..][..hd];
                        oi.iter_mut().zip(vj).for_each(|(o, &x)| *o += p * x);
                    }
                    probs.extend_from_slice(&scores);
                    probs.extend(std::iter::repeat_n(T::zero(), seg.len - i - 1));
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        if !rg {
            probs = Vec::new();
        }
        self.push(
            vec![rows, width],
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Scalar `sum_t weight_t * -ln softmax(logits[row_t])[token_t]`.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[LossTarget<T>],
    ) -> Result<NodeId, AutodiffError> {
        let (rows, vocab) = self.dims2(logits, "cross_entropy")?;
        if let Some(t) = targets.iter().find(|t| t.row >= rows || t.token >= vocab) {
            return Err(self.mismatch(
                "cross_entropy",
                format!("target row {} token {} outside [{rows},{vocab}]", t.row, t.token),
            ));
        }
        let lv = self.nodes[logits.0].value.values();
        let rg = self.rg(&[logits]);
        let mut probs = Vec::with_capacity(if rg { targets.len() * vocab } else { 0 });
        let mut total = 0.0f64;
        let mut buf = vec![T::zero(); vocab];
        for t in targets {
            buf.copy_from_slice(&lv[t.row * vocab..(t.row + 1) * vocab]);
            let lse = log_sum_exp(&buf);
            total += t.weight.as_f64() * (lse - buf[t.token]).as_f64();
            if rg {
                probs.extend(buf.iter().map(|&z| (z - lse).exp()));
            }
        }
        self.push(
            vec![1],
            vec![T::from_f64(total)],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Scalar `sum_r weight_r * KL(softmax(logits[row_r]) || ref_r)`, where
    /// `ref_logp` holds one reference log-distribution per listed row.
    pub fn kl_to_reference(
        &mut self,
        logits: NodeId,
        rows: &[usize],
        weights: &[T],
        ref_logp: &[T],
    ) -> Result<NodeId, AutodiffError> {
        let (n, vocab) = self.dims2(logits, "kl_divergence")?;
        if rows.len() != weights.len() || ref_logp.len() != rows.len() * vocab {
            return Err(self.mismatch(
                "kl_divergence",
                format!(
                    "{} rows, {} weights, {} reference entries for vocab {vocab}",
                    rows.len(),
                    weights.len(),
                    ref_logp.len()
                ),
            ));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= n) {
            return Err(self.mismatch("kl_divergence", format!("row {r} outside {n}")));
        }
        let lv = self.nodes[logits.0].value.values();
        let mut probs = Vec::with_capacity(rows.len() * vocab);
        let mut kls = Vec::with_capacity(rows.len());
        let mut total = 0.0f64;
        for (i, (&r, &w)) in rows.iter().zip(weights).enumerate() {
            let z = &lv[r * vocab..(r + 1) * vocab];
            let lse = log_sum_exp(z);
            let refr = &ref_logp[i * vocab..(i + 1) * vocab];
            let mut kl = T::zero();
            for (&zj, &rj) in z.iter().zip(refr) {
                let lp = zj - lse;
                let p = lp.exp();
                probs.push(p);
                if p > T::zero() {
                    kl += p * (lp - rj);
                }
            }
            kls.push(kl);
            total += w.as_f64() * kl.as_f64();
        }
        let rg = self.rg(&[logits]);
        self.push(
            vec![1],
            vec![T::from_f64(total)],
            Op::Kl {
                logits,
                rows: rows.to_vec(),
                weights: weights.to_vec(),
                ref_logp: ref_logp.to_vec(),
                probs,
                kls,
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let s = self.node(a)?.value.values().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn sum_squares(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let s = self.node(a)?.value.values().iter().map(|&x| x * x).sum();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], Op::SumSquares(a), rg)
    }

    /// Reverse-mode sweep from the scalar `loss`.
    ///
    /// Visits each node at or before `loss` once, in reverse creation
    /// order, and only propagates into operands that require gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>, AutodiffError> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(AutodiffError::BackwardBeforeForward);
        }
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(AutodiffError::NotScalar {
                node: loss.0,
                numel,
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut live = T::BYTES;
        let mut peak = live;
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            live -= g.len() * T::BYTES;
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut sink = GradSink {
                nodes: &self.nodes,
                grads: &mut grads,
                live: &mut live,
            };
            backprop_node(node, &g, &mut sink, &mut out);
            peak = peak.max(live);
        }
        self.peak_bytes = self.peak_bytes.max(self.resident_bytes() + peak);
        Ok(out)
    }
}

struct GradSink<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut Vec<Option<Vec<T>>>,
    live: &'a mut usize,
}

impl<T: Scalar> GradSink<'_, T> {
    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn buf(&mut self, id: NodeId) -> &mut Vec<T> {
        let len = self.nodes[id.0].value.numel();
        let slot = &mut self.grads[id.0];
        if slot.is_none() {
            *self.live += len * T::BYTES;
        }
        slot.get_or_insert_with(|| vec![T::zero(); len])
    }

    fn val(&self, id: NodeId) -> &[T] {
        self.nodes[id.0].value.values()
    }
}

fn backprop_node<T: Scalar>(
    node: &Node<T>,
    g: &[T],
    s: &mut GradSink<'_, T>,
    out: &mut Gradients<T>,
) {
    match &node.op {
        Op::Input => {}
        Op::Param(idx) => {
            match out.by_param.get_mut(idx) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &x)| *a += x),
                None => {
                    out.by_param.insert(*idx, g.to_vec());
                }
            }
        }
        &Op::MatMul { a, b, trans_b } => {
            let sa = s.nodes[a.0].value.shape();
            let (m, k) = (sa[0], sa[1]);
            let n = node.value.shape()[1];
            if s.wants(a) {
                let bv = s.nodes[b.0].value.values();
                let da = s.buf(a);
                // da = g @ B^T
                T::gemm(m, n, k, T::one(), g, false, bv, !trans_b, T::one(), da);
            }
            if s.wants(b) {
                let av = s.nodes[a.0].value.values();
                let db = s.buf(b);
                if trans_b {
                    // stored [n,k]: db = g^T @ a
                    T::gemm(n, m, k, T::one(), g, true, av, false, T::one(), db);
                } else {
                    // stored [k,n]: db = a^T @ g
                    T::gemm(k, m, n, T::one(), av, true, g, false, T::one(), db);
                }
            }
        }
        &Op::Add(a, b) => {
            for id in [a, b] {
                if s.wants(id) {
                    s.buf(id).iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                }
            }
        }
        &Op::Mul(a, b) => {
            if s.wants(a) {
                let bv = s.val(b).to_vec();
                s.buf(a)
                    .iter_mut()
                    .zip(g.iter().zip(&bv))
                    .for_each(|(d, (&x, &y))| *d += x * y);
            }
            if s.wants(b) {
                let av = s.val(a).to_vec();
                s.buf(b)
                    .iter_mut()
                    .zip(g.iter().zip(&av))
                    .for_each(|(d, (&x, &y))| *d += x * y);
            }
        }
        &Op::Scale(a, c) => {
            s.buf(a).iter_mut().zip(g).for_each(|(d, &x)| *d += x * c);
        }
        &Op::Tanh(a) => {
            let y = node.value.values();
            s.buf(a)
                .iter_mut()
                .zip(g.iter().zip(y))
                .for_each(|(d, (&x, &t))| *d += x * (T::one() - t * t));
        }
        &Op::Gelu(a) => {
            let xs = s.val(a).to_vec();
            s.buf(a)
                .iter_mut()
                .zip(g.iter().zip(&xs))
                .for_each(|(d, (&gx, &x))| *d += gx * gelu_grad(x));
        }
        &Op::Softmax(a) => {
            let y = node.value.values();
            let cols = node.value.cols();
            let da = s.buf(a);
            for ((dr, gr), yr) in da.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                let dotp: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((d, &gx), &yx) in dr.iter_mut().zip(gr).zip(yr) {
                    *d += yx * (gx - dotp);
                }
            }
        }
        Op::LayerNorm { x, gain, xhat, rstd } => {
            let (x, gain) = (*x, *gain);
            let d = node.value.cols();
            let gv = s.val(gain).to_vec();
            if s.wants(gain) {
                let dg = s.buf(gain);
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        dg[j] += gr[j] * hr[j];
                    }
                }
            }
            if s.wants(x) {
                let dn = T::from_f64(d as f64);
                let dx = s.buf(x);
                let mut dh = vec![T::zero(); d];
                for (r, ((dxr, gr), hr)) in dx
                    .chunks_mut(d)
                    .zip(g.chunks(d))
                    .zip(xhat.chunks(d))
                    .enumerate()
                {
                    for j in 0..d {
                        dh[j] = gr[j] * gv[j];
                    }
                    let mean_dh = dh.iter().copied().sum::<T>() / dn;
                    let mean_dhh = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                    for j in 0..d {
                        dxr[j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = node.value.cols();
            let dt = s.buf(*table);
            for (r, &i) in ids.iter().enumerate() {
                dt[i * d..(i + 1) * d]
                    .iter_mut()
                    .zip(&g[r * d..(r + 1) * d])
                    .for_each(|(a, &x)| *a += x);
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            segments,
            probs,
        } => attention_backward(s, g, *q, *k, *v, *heads, segments, probs, node.value.cols()),
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let vocab = node_cols(s, *logits);
            let dl = s.buf(*logits);
            let go = g[0];
            for (t, p) in targets.iter().zip(probs.chunks(vocab)) {
                let row = &mut dl[t.row * vocab..(t.row + 1) * vocab];
                let w = go * t.weight;
                row.iter_mut().zip(p).for_each(|(d, &px)| *d += w * px);
                row[t.token] -= w;
            }
        }
        Op::Kl {
            logits,
            rows,
            weights,
            ref_logp,
            probs,
            kls,
        } => {
            let vocab = node_cols(s, *logits);
            let dl = s.buf(*logits);
            let go = g[0];
            for (i, &r) in rows.iter().enumerate() {
                let w = go * weights[i];
                let p = &probs[i * vocab..(i + 1) * vocab];
                let refr = &ref_logp[i * vocab..(i + 1) * vocab];
                let row = &mut dl[r * vocab..(r + 1) * vocab];
                for j in 0..vocab {
                    if p[j] > T::zero() {
                        row[j] += w * p[j] * (p[j].ln() - refr[j] - kls[i]);
                    }
                }
            }
        }
        &Op::Sum(a) => {
            let go = g[0];
            s.buf(a).iter_mut().for_each(|d| *d += go);
        }
        &Op::SumSquares(a) => {
            let go = g[0];
            let av = s.val(a).to_vec();
            let two = T::from_f64(2.0);
            s.buf(a)
                .iter_mut()
                .zip(&av)
                .for_each(|(d, &x)| *d += two * x * go);
        }
    }
}

fn node_cols<T: Scalar>(s: &GradSink<'_, T>, id: NodeId) -> usize {
    s.nodes[id.0].value.cols()
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    s: &mut GradSink<'_, T>,
    g: &[T],
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    segments: &[Segment],
    probs: &[T],
    width: usize,
) {
    let hd = width / heads;
    let inv = T::one() / T::from_f64(hd as f64).sqrt();
    let qv = s.val(q).to_vec();
    let kv = s.val(k).to_vec();
    let vv = s.val(v).to_vec();
    let rows = qv.len() / width;
    let mut dq = vec![T::zero(); rows * width];
    let mut dk = vec![T::zero(); rows * width];
    let mut dv = vec![T::zero(); rows * width];
    let mut dp = Vec::new();
    let mut off_p = 0;
    for seg in segments {
        let l = seg.len;
        for h in 0..heads {
            let off = h * hd;
            for i in 0..l {
                let p = &probs[off_p + i * l..off_p + i * l + i + 1];
                let gi = &g[(seg.start + i) * width + off..][..hd];
                dp.clear();
                for (j, &pij) in p.iter().enumerate() {
                    let r = (seg.start + j) * width + off;
                    dp.push(dot(gi, &vv[r..r + hd]));
                    dv[r..r + hd]
                        .iter_mut()
                        .zip(gi)
                        .for_each(|(d, &x)| *d += pij * x);
                }
                let sdot: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                let ri = (seg.start + i) * width + off;
                for (j, (&pij, &dpij)) in p.iter().zip(&dp).enumerate() {
                    let ds = pij * (dpij - sdot) * inv;
                    if ds == T::zero() {
                        continue;
                    }
                    let rj = (seg.start + j) * width + off;
                    for c in 0..hd {
                        dq[ri + c] += ds * kv[rj + c];
                        dk[rj + c] += ds * qv[ri + c];
                    }
                }
            }
            off_p += l * l;
        }
    }
    for (id, d) in [(q, dq), (k, dk), (v, dv)] {
        if s.wants(id) {
            s.buf(id).iter_mut().zip(&d).for_each(|(a, &x)| *a += x);
        }
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub(crate) fn log_sum_exp<T: Scalar>(z: &[T]) -> T {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = z.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

pub(crate) fn softmax_in_place<T: Scalar>(z: &mut [T]) {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in z.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in z.iter_mut() {
        *x /= s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}
