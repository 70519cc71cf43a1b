//! Tape-based reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] is rebuilt per forward pass; nodes are appended in evaluation
//! order, so node index order is a topological order and the backward sweep
//! walks the tape once in reverse. Parameters are long-lived leaves held in a
//! [`ParamStore`]; leafing a parameter into a graph copies its current value
//! and records the [`ParamId`] so gradients can be pulled out afterwards.
//!
//! All values are 64-bit. Fused kernels (the selective scan, the set
//! distances) live in their own modules and are dispatched from here.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mat::{matmul, matmul_nt_acc, matmul_tn_acc, Mat};
use crate::objectives::{self, ChamferSaved, DcdSaved};
use crate::ssm::{self, ScanSaved};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named trainable parameter.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Mat,
}

/// Long-lived parameter storage. Insertion order is stable and is the
/// canonical order for checkpoints and optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Param { name: name.into(), value });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Exp(NodeId),
    Matmul(NodeId, NodeId),
    /// Broadcast a `1 x C` row over every row of an `N x C` matrix.
    AddRow(NodeId, NodeId),
    LeakyRelu(NodeId, f64),
    Softplus(NodeId),
    Silu(NodeId),
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        /// (mean, inv_std) per (row, group).
        stats: Vec<(f64, f64)>,
    },
    /// Channel-wise max over consecutive row groups.
    MaxPoolSet {
        x: NodeId,
        /// Winning input row per output element, row-major `B x C`.
        argmax: Vec<usize>,
    },
    ConcatCols(Vec<NodeId>),
    GatherRows {
        x: NodeId,
        idx: Arc<Vec<usize>>,
    },
    /// Weighted sum of `group` gathered rows per output row; weights are
    /// constants (no gradient flows into them).
    WeightedPool {
        x: NodeId,
        idx: Arc<Vec<usize>>,
        weights: Arc<Vec<f64>>,
        group: usize,
    },
    Softmax(NodeId),
    SumAll(NodeId),
    CrossEntropy {
        logits: NodeId,
        labels: Arc<Vec<usize>>,
        /// Row-major probabilities saved by the forward pass.
        probs: Vec<f64>,
    },
    DiceLoss {
        probs: NodeId,
        labels: Arc<Vec<usize>>,
        /// (numerator, denominator) per class, smoothing already applied.
        terms: Vec<(f64, f64)>,
    },
    Chamfer {
        p: NodeId,
        q: NodeId,
        saved: ChamferSaved,
    },
    DensityChamfer {
        p: NodeId,
        q: NodeId,
        alpha: f64,
        saved: DcdSaved,
    },
    SsmScan {
        x: NodeId,
        delta: NodeId,
        b: NodeId,
        c: NodeId,
        a: NodeId,
        batch: usize,
        steps: usize,
        saved: ScanSaved,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::invalid(format!(
                "{what}: shape {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= v;
        }
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).cols() != self.value(b).rows() {
            return Err(Error::invalid(format!(
                "matmul: inner dims {} vs {}",
                self.value(a).cols(),
                self.value(b).rows()
            )));
        }
        let out = matmul(self.value(a), self.value(b));
        Ok(self.push(out, Op::Matmul(a, b)))
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, c) = self.value(x).shape();
        if self.value(bias).shape() != (1, c) {
            return Err(Error::invalid(format!(
                "add_row: bias shape {:?}, expected (1, {c})",
                self.value(bias).shape()
            )));
        }
        let mut out = self.value(x).clone();
        let bias_v = self.value(bias).data().to_vec();
        for r in 0..out.rows() {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(bias_v.iter()) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    /// `y = x W + b`, the shared-MLP primitive applied to every row.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu(x, slope))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(softplus);
        self.push(out, Op::Softplus(x))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x))
    }

    /// Per-row group normalization: statistics over each channel group of a
    /// single row, then per-channel affine. No batch coupling.
    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    ) -> Result<NodeId> {
        let (n, c) = self.value(x).shape();
        if groups == 0 || c % groups != 0 {
            return Err(Error::invalid(format!(
                "group_norm: width {c} not divisible by {groups} groups"
            )));
        }
        if self.value(gamma).shape() != (1, c) || self.value(beta).shape() != (1, c) {
            return Err(Error::invalid("group_norm: affine params must be 1 x C"));
        }
        let gs = c / groups;
        let mut out = Mat::zeros(n, c);
        let mut stats = Vec::with_capacity(n * groups);
        {
            let xv = self.value(x);
            let gv = self.value(gamma).data().to_vec();
            let bv = self.value(beta).data().to_vec();
            for r in 0..n {
                let row = xv.row(r);
                let orow = out.row_mut(r);
                for g in 0..groups {
                    let seg = &row[g * gs..(g + 1) * gs];
                    let mean = seg.iter().sum::<f64>() / gs as f64;
                    let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gs as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    stats.push((mean, inv));
                    for (i, &v) in seg.iter().enumerate() {
                        let ci = g * gs + i;
                        orow[ci] = gv[ci] * ((v - mean) * inv) + bv[ci];
                    }
                }
            }
        }
        Ok(self.push(out, Op::GroupNorm { x, gamma, beta, groups, stats }))
    }

    /// Channel-wise max over consecutive groups of `group` rows:
    /// `(B*K) x C -> B x C`. Gradient routes to the argmax rows only,
    /// ties to the lowest row.
    pub fn max_pool_set(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let (n, c) = self.value(x).shape();
        if group == 0 || n % group != 0 {
            return Err(Error::invalid(format!(
                "max_pool_set: {n} rows not divisible into groups of {group}"
            )));
        }
        let b = n / group;
        let mut out = Mat::zeros(b, c);
        let mut argmax = vec![0usize; b * c];
        {
            let xv = self.value(x);
            for bi in 0..b {
                let base = bi * group;
                let orow = out.row_mut(bi);
                for ci in 0..c {
                    let mut best = xv.get(base, ci);
                    let mut best_r = base;
                    for r in base + 1..base + group {
                        let v = xv.get(r, ci);
                        if v > best {
                            best = v;
                            best_r = r;
                        }
                    }
                    orow[ci] = best;
                    argmax[bi * c + ci] = best_r;
                }
            }
        }
        Ok(self.push(out, Op::MaxPoolSet { x, argmax }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols: no inputs"));
        }
        let n = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            if self.value(p).rows() != n {
                return Err(Error::invalid("concat_cols: row count mismatch"));
            }
            total += self.value(p).cols();
        }
        let mut out = Mat::zeros(n, total);
        let mut off = 0;
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            let pc = pv.cols();
            for r in 0..n {
                out.row_mut(r)[off..off + pc].copy_from_slice(pv.row(r));
            }
            off += pc;
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Row gather; backward scatter-adds, so repeated indices broadcast on
    /// the forward pass and accumulate on the backward pass.
    pub fn gather_rows(&mut self, x: NodeId, idx: Arc<Vec<usize>>) -> Result<NodeId> {
        let (n, c) = self.value(x).shape();
        let mut out = Mat::zeros(idx.len(), c);
        {
            let xv = &self.nodes[x.0].value;
            for (i, &src) in idx.iter().enumerate() {
                if src >= n {
                    return Err(Error::invalid(format!(
                        "gather_rows: index {src} out of range for {n} rows"
                    )));
                }
                out.row_mut(i).copy_from_slice(xv.row(src));
            }
        }
        Ok(self.push(out, Op::GatherRows { x, idx }))
    }

    /// Broadcast a single row to `n` rows.
    pub fn broadcast_row(&mut self, x: NodeId, n: usize) -> Result<NodeId> {
        if self.value(x).rows() != 1 {
            return Err(Error::invalid("broadcast_row: input must have one row"));
        }
        self.gather_rows(x, Arc::new(vec![0; n]))
    }

    /// Per output row `q`: sum of `weights[q*k + j] * x[idx[q*k + j]]`.
    pub fn weighted_pool(
        &mut self,
        x: NodeId,
        idx: Arc<Vec<usize>>,
        weights: Arc<Vec<f64>>,
        group: usize,
    ) -> Result<NodeId> {
        if idx.len() != weights.len() || group == 0 || idx.len() % group != 0 {
            return Err(Error::invalid("weighted_pool: malformed index/weight lists"));
        }
        let (n, c) = self.value(x).shape();
        let q = idx.len() / group;
        let mut out = Mat::zeros(q, c);
        {
            let xv = &self.nodes[x.0].value;
            for qi in 0..q {
                let orow = out.row_mut(qi);
                for j in 0..group {
                    let flat = qi * group + j;
                    let src = idx[flat];
                    if src >= n {
                        return Err(Error::invalid("weighted_pool: index out of range"));
                    }
                    let w = weights[flat];
                    for (o, &v) in orow.iter_mut().zip(xv.row(src)) {
                        *o += w * v;
                    }
                }
            }
        }
        Ok(self.push(out, Op::WeightedPool { x, idx, weights, group }))
    }

    /// Row-wise softmax with max-subtraction.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let (n, c) = self.value(x).shape();
        let mut out = Mat::zeros(n, c);
        {
            let xv = self.value(x);
            for r in 0..n {
                let row = xv.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let orow = out.row_mut(r);
                let mut sum = 0.0;
                for (o, &v) in orow.iter_mut().zip(row.iter()) {
                    *o = (v - m).exp();
                    sum += *o;
                }
                for o in orow.iter_mut() {
                    *o /= sum;
                }
            }
        }
        self.push(out, Op::Softmax(x))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        self.push(Mat::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean of `-log softmax(logits)[label]` over rows, stabilized by
    /// max-subtraction.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: Arc<Vec<usize>>) -> Result<NodeId> {
        let (n, k) = self.value(logits).shape();
        if labels.len() != n {
            return Err(Error::invalid("cross_entropy: one label per row required"));
        }
        for &l in labels.iter() {
            if l >= k {
                return Err(Error::invalid(format!(
                    "cross_entropy: label {l} out of range for {k} classes"
                )));
            }
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        {
            let lv = self.value(logits);
            for r in 0..n {
                let row = lv.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (i, &v) in row.iter().enumerate() {
                    let e = (v - m).exp();
                    probs[r * k + i] = e;
                    sum += e;
                }
                for i in 0..k {
                    probs[r * k + i] /= sum;
                }
                let log_z = sum.ln() + m;
                loss += log_z - row[labels[r]];
            }
        }
        loss /= n as f64;
        Ok(self.push(Mat::scalar(loss), Op::CrossEntropy { logits, labels, probs }))
    }

    /// Smoothed soft Dice loss on probabilities (rows summing to one),
    /// averaged over all classes.
    pub fn dice_loss(&mut self, probs: NodeId, labels: Arc<Vec<usize>>, smooth: f64) -> Result<NodeId> {
        let (n, k) = self.value(probs).shape();
        if labels.len() != n {
            return Err(Error::invalid("dice_loss: one label per row required"));
        }
        for &l in labels.iter() {
            if l >= k {
                return Err(Error::invalid(format!(
                    "dice_loss: label {l} out of range for {k} classes"
                )));
            }
        }
        let mut terms = Vec::with_capacity(k);
        let mut mean_dice = 0.0;
        {
            let pv = self.value(probs);
            for c in 0..k {
                let mut inter = 0.0;
                let mut p_sum = 0.0;
                let mut y_sum = 0.0;
                for r in 0..n {
                    let p = pv.get(r, c);
                    p_sum += p;
                    if labels[r] == c {
                        inter += p;
                        y_sum += 1.0;
                    }
                }
                let num = 2.0 * inter + smooth;
                let den = p_sum + y_sum + smooth;
                terms.push((num, den));
                mean_dice += num / den;
            }
        }
        mean_dice /= k as f64;
        Ok(self.push(
            Mat::scalar(1.0 - mean_dice),
            Op::DiceLoss { probs, labels, terms },
        ))
    }

    /// Symmetric mean squared-L2 Chamfer distance between two point sets.
    /// Differentiable with respect to both sides; the match assignment is
    /// treated as locally constant.
    pub fn chamfer(&mut self, p: NodeId, q: NodeId) -> Result<NodeId> {
        let (value, saved) = objectives::chamfer_forward(self.value(p), self.value(q))?;
        Ok(self.push(Mat::scalar(value), Op::Chamfer { p, q, saved }))
    }

    /// Density-aware Chamfer distance with exponential kernel `alpha`.
    pub fn density_chamfer(&mut self, p: NodeId, q: NodeId, alpha: f64) -> Result<NodeId> {
        let (value, saved) = objectives::dcd_forward(self.value(p), self.value(q), alpha)?;
        Ok(self.push(Mat::scalar(value), Op::DensityChamfer { p, q, alpha, saved }))
    }

    /// Selective SSM scan over `batch` sequences of `steps` tokens stored
    /// row-major as `(batch*steps) x C`. `a` is `C x S` (strictly negative
    /// in trained models); `b`/`c` are `(batch*steps) x S`; `delta` matches
    /// `x`. Zero-order-hold discretization happens per token inside.
    pub fn ssm_scan(
        &mut self,
        x: NodeId,
        delta: NodeId,
        b: NodeId,
        c: NodeId,
        a: NodeId,
        batch: usize,
        steps: usize,
    ) -> Result<NodeId> {
        let (n, cw) = self.value(x).shape();
        let (ar, s) = self.value(a).shape();
        if n != batch * steps {
            return Err(Error::invalid(format!(
                "ssm_scan: {n} rows != batch {batch} * steps {steps}"
            )));
        }
        if self.value(delta).shape() != (n, cw) {
            return Err(Error::invalid("ssm_scan: delta shape mismatch"));
        }
        if ar != cw {
            return Err(Error::invalid("ssm_scan: A must be C x S"));
        }
        if self.value(b).shape() != (n, s) || self.value(c).shape() != (n, s) {
            return Err(Error::invalid("ssm_scan: B/C must be (batch*steps) x S"));
        }
        let (y, saved) = ssm::scan_forward(
            self.value(x),
            self.value(delta),
            self.value(b),
            self.value(c),
            self.value(a),
            batch,
            steps,
        );
        Ok(self.push(y, Op::SsmScan { x, delta, b, c, a, batch, steps, saved }))
    }

    /// Reverse-mode sweep from a scalar root. Returns per-node gradients;
    /// each reachable node is visited exactly once in reverse tape order.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.value(root).shape() != (1, 1) {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got {:?}",
                self.value(root).shape()
            )));
        }

        // reachability from root
        let mut reached = vec![false; self.nodes.len()];
        let mut stack = vec![root.0];
        while let Some(id) = stack.pop() {
            if reached[id] {
                continue;
            }
            reached[id] = true;
            self.nodes[id].op.for_each_input(|inp| {
                if !reached[inp.0] {
                    stack.push(inp.0);
                }
            });
        }

        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Mat::scalar(1.0));

        for id in (0..=root.0).rev() {
            if !reached[id] {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue, // reachable but received no gradient (shouldn't happen)
            };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        fn buf<'a>(grads: &'a mut [Option<Mat>], id: NodeId, shape: (usize, usize)) -> &'a mut Mat {
            grads[id.0].get_or_insert_with(|| Mat::zeros(shape.0, shape.1))
        }
        let shape_of = |n: NodeId| self.nodes[n.0].value.shape();

        match &self.nodes[id].op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                let ga = buf(grads, *a, shape_of(*a));
                for (o, &v) in ga.data_mut().iter_mut().zip(g.data()) {
                    *o += v;
                }
                let gb = buf(grads, *b, shape_of(*b));
                for (o, &v) in gb.data_mut().iter_mut().zip(g.data()) {
                    *o += v;
                }
            }
            Op::Sub(a, b) => {
                let ga = buf(grads, *a, shape_of(*a));
                for (o, &v) in ga.data_mut().iter_mut().zip(g.data()) {
                    *o += v;
                }
                let gb = buf(grads, *b, shape_of(*b));
                for (o, &v) in gb.data_mut().iter_mut().zip(g.data()) {
                    *o -= v;
                }
            }
            Op::Mul(a, b) => {
                {
                    let bv = &self.nodes[b.0].value;
                    let ga = buf(grads, *a, shape_of(*a));
                    for ((o, &gv), &v) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gv * v;
                    }
                }
                let av = &self.nodes[a.0].value;
                let gb = buf(grads, *b, shape_of(*b));
                for ((o, &gv), &v) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *o += gv * v;
                }
            }
            Op::Scale(a, s) => {
                let ga = buf(grads, *a, shape_of(*a));
                for (o, &gv) in ga.data_mut().iter_mut().zip(g.data()) {
                    *o += s * gv;
                }
            }
            Op::Exp(a) => {
                let out = &self.nodes[id].value;
                let ga = buf(grads, *a, shape_of(*a));
                for ((o, &gv), &ov) in ga.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *o += gv * ov;
                }
            }
            Op::Matmul(a, b) => {
                {
                    let bv = &self.nodes[b.0].value;
                    let ga = buf(grads, *a, shape_of(*a));
                    matmul_nt_acc(g, bv, ga);
                }
                let av = &self.nodes[a.0].value;
                let gb = buf(grads, *b, shape_of(*b));
                matmul_tn_acc(av, g, gb);
            }
            Op::AddRow(x, bias) => {
                {
                    let gx = buf(grads, *x, shape_of(*x));
                    for (o, &gv) in gx.data_mut().iter_mut().zip(g.data()) {
                        *o += gv;
                    }
                }
                let gb = buf(grads, *bias, shape_of(*bias));
                let c = gb.cols();
                for r in 0..g.rows() {
                    for (o, &gv) in gb.data_mut()[..c].iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xv = &self.nodes[x.0].value;
                let gx = buf(grads, *x, shape_of(*x));
                for ((o, &gv), &v) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                    *o += gv * if v > 0.0 { 1.0 } else { *slope };
                }
            }
            Op::Softplus(x) => {
                let xv = &self.nodes[x.0].value;
                let gx = buf(grads, *x, shape_of(*x));
                for ((o, &gv), &v) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                    *o += gv * sigmoid(v);
                }
            }
            Op::Silu(x) => {
                let xv = &self.nodes[x.0].value;
                let gx = buf(grads, *x, shape_of(*x));
                for ((o, &gv), &v) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                    let s = sigmoid(v);
                    *o += gv * (s * (1.0 + v * (1.0 - s)));
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let (n, c) = shape_of(*x);
                let gs = c / groups;
                let xv = &self.nodes[x.0].value;
                let gammav = &self.nodes[gamma.0].value;

                // affine gradients
                {
                    let ggamma = buf(grads, *gamma, (1, c));
                    for r in 0..n {
                        for gi in 0..*groups {
                            let (mean, inv) = stats[r * groups + gi];
                            for i in 0..gs {
                                let ci = gi * gs + i;
                                let xh = (xv.get(r, ci) - mean) * inv;
                                ggamma.data_mut()[ci] += g.get(r, ci) * xh;
                            }
                        }
                    }
                }
                {
                    let gbeta = buf(grads, *beta, (1, c));
                    for r in 0..n {
                        for ci in 0..c {
                            gbeta.data_mut()[ci] += g.get(r, ci);
                        }
                    }
                }
                // input gradient
                let gx = buf(grads, *x, (n, c));
                for r in 0..n {
                    for gi in 0..*groups {
                        let (mean, inv) = stats[r * groups + gi];
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for i in 0..gs {
                            let ci = gi * gs + i;
                            let xh = (xv.get(r, ci) - mean) * inv;
                            let dxh = g.get(r, ci) * gammav.data()[ci];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                        let m = gs as f64;
                        for i in 0..gs {
                            let ci = gi * gs + i;
                            let xh = (xv.get(r, ci) - mean) * inv;
                            let dxh = g.get(r, ci) * gammav.data()[ci];
                            let d = inv * (dxh - sum_dxh / m - xh * sum_dxh_xh / m);
                            gx.data_mut()[r * c + ci] += d;
                        }
                    }
                }
            }
            Op::MaxPoolSet { x, argmax } => {
                let (b, c) = self.nodes[id].value.shape();
                let gx = buf(grads, *x, shape_of(*x));
                for bi in 0..b {
                    for ci in 0..c {
                        let src = argmax[bi * c + ci];
                        gx.data_mut()[src * c + ci] += g.get(bi, ci);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let n = g.rows();
                let mut off = 0;
                for &p in parts {
                    let pc = shape_of(p).1;
                    let gp = buf(grads, p, shape_of(p));
                    for r in 0..n {
                        let src = &g.row(r)[off..off + pc];
                        for (o, &v) in gp.row_mut(r).iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                    off += pc;
                }
            }
            Op::GatherRows { x, idx } => {
                let gx = buf(grads, *x, shape_of(*x));
                for (i, &src) in idx.iter().enumerate() {
                    for (o, &v) in gx.row_mut(src).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
            }
            Op::WeightedPool { x, idx, weights, group } => {
                let gx = buf(grads, *x, shape_of(*x));
                let q = idx.len() / group;
                for qi in 0..q {
                    for j in 0..*group {
                        let flat = qi * group + j;
                        let src = idx[flat];
                        let w = weights[flat];
                        for (o, &v) in gx.row_mut(src).iter_mut().zip(g.row(qi)) {
                            *o += w * v;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let p = &self.nodes[id].value;
                let (n, c) = p.shape();
                let gx = buf(grads, *x, (n, c));
                for r in 0..n {
                    let prow = p.row(r);
                    let grow = g.row(r);
                    let dot: f64 = prow.iter().zip(grow.iter()).map(|(&pv, &gv)| pv * gv).sum();
                    for (o, (&pv, &gv)) in
                        gx.row_mut(r).iter_mut().zip(prow.iter().zip(grow.iter()))
                    {
                        *o += pv * (gv - dot);
                    }
                }
            }
            Op::SumAll(x) => {
                let gv = g.item();
                let gx = buf(grads, *x, shape_of(*x));
                for o in gx.data_mut() {
                    *o += gv;
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let gv = g.item();
                let (n, k) = shape_of(*logits);
                let gl = buf(grads, *logits, (n, k));
                let scale = gv / n as f64;
                for r in 0..n {
                    for ci in 0..k {
                        let y = if labels[r] == ci { 1.0 } else { 0.0 };
                        gl.data_mut()[r * k + ci] += scale * (probs[r * k + ci] - y);
                    }
                }
            }
            Op::DiceLoss { probs, labels, terms } => {
                let gv = g.item();
                let (n, k) = shape_of(*probs);
                let gp = buf(grads, *probs, (n, k));
                let scale = gv / k as f64;
                for r in 0..n {
                    for ci in 0..k {
                        let (num, den) = terms[ci];
                        let y = if labels[r] == ci { 1.0 } else { 0.0 };
                        // d(1 - mean_c num/den)/dp = -(2y*den - num) / den^2 / K
                        gp.data_mut()[r * k + ci] -= scale * (2.0 * y * den - num) / (den * den);
                    }
                }
            }
            Op::Chamfer { p, q, saved } => {
                let gv = g.item();
                let pv = &self.nodes[p.0].value;
                let qv = &self.nodes[q.0].value;
                {
                    let gp = buf(grads, *p, shape_of(*p));
                    objectives::chamfer_backward_p(gv, pv, qv, saved, gp);
                }
                let gq = buf(grads, *q, shape_of(*q));
                objectives::chamfer_backward_q(gv, pv, qv, saved, gq);
            }
            Op::DensityChamfer { p, q, alpha, saved } => {
                let gv = g.item();
                let pv = &self.nodes[p.0].value;
                let qv = &self.nodes[q.0].value;
                {
                    let gp = buf(grads, *p, shape_of(*p));
                    objectives::dcd_backward_p(gv, pv, qv, *alpha, saved, gp);
                }
                let gq = buf(grads, *q, shape_of(*q));
                objectives::dcd_backward_q(gv, pv, qv, *alpha, saved, gq);
            }
            Op::SsmScan { x, delta, b, c, a, batch, steps, saved } => {
                let inputs = ssm::ScanInputs {
                    x: &self.nodes[x.0].value,
                    delta: &self.nodes[delta.0].value,
                    b: &self.nodes[b.0].value,
                    c: &self.nodes[c.0].value,
                    a: &self.nodes[a.0].value,
                };
                let grad = ssm::scan_backward(g, &inputs, saved, *batch, *steps);
                for (target, delta_g) in [
                    (*x, grad.x),
                    (*delta, grad.delta),
                    (*b, grad.b),
                    (*c, grad.c),
                    (*a, grad.a),
                ] {
                    let gt = buf(grads, target, shape_of(target));
                    for (o, &v) in gt.data_mut().iter_mut().zip(delta_g.data()) {
                        *o += v;
                    }
                }
            }
        }
    }

    /// Accumulate this graph's parameter gradients into `acc`, which is
    /// indexed like the store. Typically called once per sample graph.
    pub fn accumulate_param_grads(&self, grads: &Gradients, acc: &mut [Mat]) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(pid) = node.op {
                if let Some(g) = grads.grads[i].as_ref() {
                    let target = &mut acc[pid.0];
                    for (o, &v) in target.data_mut().iter_mut().zip(g.data()) {
                        *o += v;
                    }
                }
            }
        }
    }
}

impl Op {
    fn for_each_input(&self, mut f: impl FnMut(NodeId)) {
        match self {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) | Op::AddRow(a, b) => {
                f(*a);
                f(*b);
            }
            Op::Scale(a, _)
            | Op::Exp(a)
            | Op::LeakyRelu(a, _)
            | Op::Softplus(a)
            | Op::Silu(a)
            | Op::Softmax(a)
            | Op::SumAll(a) => f(*a),
            Op::GroupNorm { x, gamma, beta, .. } => {
                f(*x);
                f(*gamma);
                f(*beta);
            }
            Op::MaxPoolSet { x, .. } | Op::GatherRows { x, .. } | Op::WeightedPool { x, .. } => {
                f(*x)
            }
            Op::ConcatCols(parts) => {
                for &p in parts {
                    f(p);
                }
            }
            Op::CrossEntropy { logits, .. } => f(*logits),
            Op::DiceLoss { probs, .. } => f(*probs),
            Op::Chamfer { p, q, .. } | Op::DensityChamfer { p, q, .. } => {
                f(*p);
                f(*q);
            }
            Op::SsmScan { x, delta, b, c, a, .. } => {
                f(*x);
                f(*delta);
                f(*b);
                f(*c);
                f(*a);
            }
        }
    }
}
