//! Operation tape: records primitive applications in topological order,
//! propagates gradients in reverse, and can replay the recorded graph
//! forward in f32 (bit-exact) or f64 (for finite-difference oracles).

use super::kernels::{self, AxisLanes};
use super::{Real, Tensor, TensorError, TensorResult};

/// Target value that excludes a position from the cross-entropy mean.
pub const IGNORE_INDEX: usize = usize::MAX;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddRowVec { a: NodeId, v: NodeId },
    AddRowsAt { a: NodeId, patch: NodeId, row0: usize },
    Scale { a: NodeId, c: f32 },
    Gelu { a: NodeId },
    Sum { a: NodeId },
    Mean { a: NodeId },
    Reshape { a: NodeId },
    ConcatRows { a: NodeId, b: NodeId },
    SliceRows { a: NodeId, start: usize, end: usize },
    ConcatCols { a: NodeId, b: NodeId },
    SliceCols { a: NodeId, start: usize, end: usize },
    Embedding { table: NodeId, indices: Vec<usize> },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Softmax { x: NodeId, axis: usize },
    LogSoftmax { x: NodeId, axis: usize },
    CrossEntropy { logits: NodeId, targets: Vec<usize> },
    Patchify { x: NodeId, patch: usize },
    BilinearResize { x: NodeId, out_h: usize, out_w: usize },
    BoxFilter { x: NodeId, k: usize },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::ConcatRows { a, b }
            | Op::ConcatCols { a, b } => vec![a, b],
            Op::AddRowVec { a, v } => vec![a, v],
            Op::AddRowsAt { a, patch, .. } => vec![a, patch],
            Op::Transpose { a }
            | Op::Scale { a, .. }
            | Op::Gelu { a }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::Reshape { a }
            | Op::SliceRows { a, .. }
            | Op::SliceCols { a, .. } => vec![a],
            Op::Embedding { table, .. } => vec![table],
            Op::LayerNorm { x, gain, bias } => vec![x, gain, bias],
            Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::CrossEntropy { logits: x, .. }
            | Op::Patchify { x, .. }
            | Op::BilinearResize { x, .. }
            | Op::BoxFilter { x, .. } => vec![x],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AddRowVec { .. } => "add_row_vec",
            Op::AddRowsAt { .. } => "add_rows_at",
            Op::Scale { .. } => "scale",
            Op::Gelu { .. } => "gelu",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Reshape { .. } => "reshape",
            Op::ConcatRows { .. } => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::Embedding { .. } => "embedding",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Patchify { .. } => "patchify",
            Op::BilinearResize { .. } => "bilinear_resize",
            Op::BoxFilter { .. } => "box_filter",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Single-owner record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Ids of all recorded nodes, in topological order.
    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    /// Recorded value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf)
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, true)
    }

    /// Registers a non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Constant, t, false)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        id
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn data(&self, id: NodeId) -> &[f32] {
        self.nodes[id.0].value.data()
    }

    /// Validates the op, computes its f32 value, finite-checks it, and records it.
    fn apply(&mut self, op: Op, out_shape: Vec<usize>) -> TensorResult<NodeId> {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        let data = eval_op::<f32>(&op, &out_shape, &|id| {
            (self.shape(id), std::borrow::Cow::Borrowed(self.data(id)))
        })?;
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        Ok(self.push(op, Tensor::from_parts(out_shape, data), requires_grad))
    }

    fn mismatch(op: &'static str, detail: String) -> TensorError {
        TensorError::ShapeMismatch { op, detail }
    }

    fn require_rank(&self, op: &'static str, id: NodeId, rank: usize) -> TensorResult<()> {
        if self.shape(id).len() != rank {
            return Err(Self::mismatch(
                op,
                format!("expected rank {rank}, got shape {:?}", self.shape(id)),
            ));
        }
        Ok(())
    }

    // ── Primitive builders ──────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        self.require_rank("matmul", a, 2)?;
        self.require_rank("matmul", b, 2)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(Self::mismatch("matmul", format!("{sa:?} x {sb:?}")));
        }
        let out = vec![sa[0], sb[1]];
        self.apply(Op::MatMul { a, b }, out)
    }

    pub fn transpose(&mut self, a: NodeId) -> TensorResult<NodeId> {
        self.require_rank("transpose", a, 2)?;
        let s = self.shape(a);
        let out = vec![s[1], s[0]];
        self.apply(Op::Transpose { a }, out)
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        op: fn(NodeId, NodeId) -> Op,
        a: NodeId,
        b: NodeId,
    ) -> TensorResult<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::mismatch(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = self.shape(a).to_vec();
        self.apply(op(a, b), out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        self.elementwise("add", |a, b| Op::Add { a, b }, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        self.elementwise("sub", |a, b| Op::Sub { a, b }, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        self.elementwise("mul", |a, b| Op::Mul { a, b }, a, b)
    }

    /// Adds a length-n vector to every row of an [m, n] matrix.
    pub fn add_row_vec(&mut self, a: NodeId, v: NodeId) -> TensorResult<NodeId> {
        self.require_rank("add_row_vec", a, 2)?;
        self.require_rank("add_row_vec", v, 1)?;
        if self.shape(a)[1] != self.shape(v)[0] {
            return Err(Self::mismatch(
                "add_row_vec",
                format!("{:?} vs {:?}", self.shape(a), self.shape(v)),
            ));
        }
        let out = self.shape(a).to_vec();
        self.apply(Op::AddRowVec { a, v }, out)
    }

    /// Adds a [p, n] block into rows `row0..row0+p` of an [m, n] matrix.
    pub fn add_rows_at(&mut self, a: NodeId, patch: NodeId, row0: usize) -> TensorResult<NodeId> {
        self.require_rank("add_rows_at", a, 2)?;
        self.require_rank("add_rows_at", patch, 2)?;
        let (sa, sp) = (self.shape(a), self.shape(patch));
        if sa[1] != sp[1] || row0 + sp[0] > sa[0] {
            return Err(Self::mismatch(
                "add_rows_at",
                format!("{sa:?} patch {sp:?} at row {row0}"),
            ));
        }
        let out = sa.to_vec();
        self.apply(Op::AddRowsAt { a, patch, row0 }, out)
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> TensorResult<NodeId> {
        if !c.is_finite() {
            return Err(TensorError::NonFinite { op: "scale" });
        }
        let out = self.shape(a).to_vec();
        self.apply(Op::Scale { a, c }, out)
    }

    pub fn gelu(&mut self, a: NodeId) -> TensorResult<NodeId> {
        let out = self.shape(a).to_vec();
        self.apply(Op::Gelu { a }, out)
    }

    pub fn sum(&mut self, a: NodeId) -> TensorResult<NodeId> {
        self.apply(Op::Sum { a }, vec![])
    }

    pub fn mean(&mut self, a: NodeId) -> TensorResult<NodeId> {
        self.apply(Op::Mean { a }, vec![])
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> TensorResult<NodeId> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDim { shape });
        }
        if shape.iter().product::<usize>() != self.nodes[a.0].value.len() {
            return Err(Self::mismatch(
                "reshape",
                format!("{:?} -> {:?}", self.shape(a), shape),
            ));
        }
        self.apply(Op::Reshape { a }, shape)
    }

    /// Concatenates along axis 0; trailing dimensions must match.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.is_empty() || sa[1..] != sb[1..] {
            return Err(Self::mismatch("concat_rows", format!("{sa:?} vs {sb:?}")));
        }
        let mut out = sa.to_vec();
        out[0] += sb[0];
        self.apply(Op::ConcatRows { a, b }, out)
    }

    /// Slices `start..end` along axis 0.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> TensorResult<NodeId> {
        let sa = self.shape(a);
        if sa.is_empty() || start >= end || end > sa[0] {
            return Err(Self::mismatch(
                "slice_rows",
                format!("{start}..{end} of {sa:?}"),
            ));
        }
        let mut out = sa.to_vec();
        out[0] = end - start;
        self.apply(Op::SliceRows { a, start, end }, out)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        self.require_rank("concat_cols", a, 2)?;
        self.require_rank("concat_cols", b, 2)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[0] != sb[0] {
            return Err(Self::mismatch("concat_cols", format!("{sa:?} vs {sb:?}")));
        }
        let out = vec![sa[0], sa[1] + sb[1]];
        self.apply(Op::ConcatCols { a, b }, out)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> TensorResult<NodeId> {
        self.require_rank("slice_cols", a, 2)?;
        let sa = self.shape(a);
        if start >= end || end > sa[1] {
            return Err(Self::mismatch(
                "slice_cols",
                format!("{start}..{end} of {sa:?}"),
            ));
        }
        let out = vec![sa[0], end - start];
        self.apply(Op::SliceCols { a, start, end }, out)
    }

    /// Looks up `indices` rows of a [V, d] table.
    pub fn embedding(&mut self, table: NodeId, indices: &[usize]) -> TensorResult<NodeId> {
        self.require_rank("embedding", table, 2)?;
        let v = self.shape(table)[0];
        if indices.is_empty() {
            return Err(TensorError::Invalid {
                op: "embedding",
                detail: "empty index list".into(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(TensorError::IndexOutOfRange {
                op: "embedding",
                index: bad,
                size: v,
            });
        }
        let out = vec![indices.len(), self.shape(table)[1]];
        self.apply(
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            out,
        )
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> TensorResult<NodeId> {
        let sx = self.shape(x);
        if sx.is_empty() {
            return Err(Self::mismatch("layer_norm", "rank-0 input".into()));
        }
        let width = *sx.last().unwrap();
        self.require_rank("layer_norm", gain, 1)?;
        self.require_rank("layer_norm", bias, 1)?;
        if self.shape(gain)[0] != width || self.shape(bias)[0] != width {
            return Err(Self::mismatch(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} vs width {width}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let out = sx.to_vec();
        self.apply(Op::LayerNorm { x, gain, bias }, out)
    }

    fn check_axis(&self, op: &'static str, x: NodeId, axis: usize) -> TensorResult<()> {
        let rank = self.shape(x).len();
        if rank == 0 || axis >= rank {
            return Err(TensorError::InvalidAxis { op, axis, rank });
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> TensorResult<NodeId> {
        self.check_axis("softmax", x, axis)?;
        let out = self.shape(x).to_vec();
        self.apply(Op::Softmax { x, axis }, out)
    }

    pub fn log_softmax(&mut self, x: NodeId, axis: usize) -> TensorResult<NodeId> {
        self.check_axis("log_softmax", x, axis)?;
        let out = self.shape(x).to_vec();
        self.apply(Op::LogSoftmax { x, axis }, out)
    }

    /// Mean negative log-likelihood of `targets` under rows of `logits`.
    /// Positions whose target is [`IGNORE_INDEX`] are skipped.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> TensorResult<NodeId> {
        self.require_rank("cross_entropy", logits, 2)?;
        let s = self.shape(logits);
        if targets.len() != s[0] {
            return Err(Self::mismatch(
                "cross_entropy",
                format!("{} targets for {} logit rows", targets.len(), s[0]),
            ));
        }
        let vocab = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t != IGNORE_INDEX && t >= vocab) {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy",
                index: bad,
                size: vocab,
            });
        }
        if targets.iter().all(|&t| t == IGNORE_INDEX) {
            return Err(TensorError::EmptyTargets);
        }
        self.apply(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            vec![],
        )
    }

    /// [F,H,W,C] -> [F * (H/p) * (W/p), p*p*C] non-overlapping patch rows.
    pub fn patchify(&mut self, x: NodeId, patch: usize) -> TensorResult<NodeId> {
        self.require_rank("patchify", x, 4)?;
        let s = self.shape(x);
        let (f, h, w, c) = (s[0], s[1], s[2], s[3]);
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(TensorError::Invalid {
                op: "patchify",
                detail: format!("patch {patch} does not tile {h}x{w}"),
            });
        }
        let out = vec![f * (h / patch) * (w / patch), patch * patch * c];
        self.apply(Op::Patchify { x, patch }, out)
    }

    /// Bilinear spatial resize of an [F,H,W,C] stack (half-pixel centers).
    pub fn bilinear_resize(&mut self, x: NodeId, out_h: usize, out_w: usize) -> TensorResult<NodeId> {
        self.require_rank("bilinear_resize", x, 4)?;
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::Invalid {
                op: "bilinear_resize",
                detail: "zero output size".into(),
            });
        }
        let s = self.shape(x);
        let out = vec![s[0], out_h, out_w, s[3]];
        self.apply(Op::BilinearResize { x, out_h, out_w }, out)
    }

    /// k x k spatial box filter with edge replication on an [F,H,W,C] stack.
    pub fn box_filter(&mut self, x: NodeId, k: usize) -> TensorResult<NodeId> {
        self.require_rank("box_filter", x, 4)?;
        let s = self.shape(x);
        if k == 0 || k % 2 == 0 {
            return Err(TensorError::Invalid {
                op: "box_filter",
                detail: format!("kernel size {k} must be odd and positive"),
            });
        }
        if k > s[1] || k > s[2] {
            return Err(TensorError::Invalid {
                op: "box_filter",
                detail: format!("kernel {k} larger than frame {}x{}", s[1], s[2]),
            });
        }
        let out = s.to_vec();
        self.apply(Op::BoxFilter { x, k }, out)
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse-mode gradients of a scalar `root` with respect to tape leaves.
    /// Leaves unused by `root` receive zero gradients.
    pub fn backward(&self, root: NodeId, wrt: &[NodeId]) -> TensorResult<Vec<Tensor>> {
        let root_node = &self.nodes[root.0];
        if root_node.value.len() != 1 {
            return Err(TensorError::RootNotScalar {
                shape: root_node.value.shape().to_vec(),
            });
        }
        for id in wrt {
            if !matches!(self.nodes[id.0].op, Op::Leaf) {
                return Err(TensorError::NotALeaf { node: id.0 });
            }
        }

        let mut grads: Vec<Option<Vec<f32>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf | Op::Constant) {
                continue; // leaf gradients stay in place for collection below
            }
            if self.nodes[i].requires_grad && grads[i].is_some() {
                let g = grads[i].take().unwrap();
                self.backprop(i, &g, &mut grads);
            }
        }

        Ok(wrt
            .iter()
            .map(|id| {
                let shape = self.shape(*id).to_vec();
                match grads.get(id.0).and_then(|g| g.clone()) {
                    Some(data) => Tensor::from_parts(shape, data),
                    None => Tensor::zeros(shape),
                }
            })
            .collect())
    }

    fn accumulate<'g>(
        &self,
        grads: &'g mut [Option<Vec<f32>>],
        id: NodeId,
    ) -> Option<&'g mut Vec<f32>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let len = self.nodes[id.0].value.len();
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match self.nodes[idx].op.clone() {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.nodes[a.0].requires_grad {
                    let bt = kernels::transpose(self.data(b), k, n);
                    let da = kernels::matmul(g, &bt, m, n, k);
                    let acc = self.accumulate(grads, a).unwrap();
                    for (o, d) in acc.iter_mut().zip(da) {
                        *o += d;
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let at = kernels::transpose(self.data(a), m, k);
                    let db = kernels::matmul(&at, g, k, m, n);
                    let acc = self.accumulate(grads, b).unwrap();
                    for (o, d) in acc.iter_mut().zip(db) {
                        *o += d;
                    }
                }
            }
            Op::Transpose { a } => {
                let s = self.shape(a);
                let gt = kernels::transpose(g, s[1], s[0]);
                if let Some(acc) = self.accumulate(grads, a) {
                    for (o, d) in acc.iter_mut().zip(gt) {
                        *o += d;
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    if let Some(acc) = self.accumulate(grads, id) {
                        for (o, d) in acc.iter_mut().zip(g) {
                            *o += d;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(acc) = self.accumulate(grads, a) {
                    for (o, d) in acc.iter_mut().zip(g) {
                        *o += d;
                    }
                }
                if let Some(acc) = self.accumulate(grads, b) {
                    for (o, d) in acc.iter_mut().zip(g) {
                        *o -= d;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].requires_grad {
                    let bv = self.data(b);
                    let acc = self.accumulate(grads, a).unwrap();
                    for i in 0..g.len() {
                        acc[i] += g[i] * bv[i];
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.data(a);
                    let acc = self.accumulate(grads, b).unwrap();
                    for i in 0..g.len() {
                        acc[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRowVec { a, v } => {
                if let Some(acc) = self.accumulate(grads, a) {
                    for (o, d) in acc.iter_mut().zip(g) {
                        *o += d;
                    }
                }
                if self.nodes[v.0].requires_grad {
                    let n = self.shape(v)[0];
                    let acc = self.accumulate(grads, v).unwrap();
                    for (i, d) in g.iter().enumerate() {
                        acc[i % n] += d;
                    }
                }
            }
            Op::AddRowsAt { a, patch, row0 } => {
                if let Some(acc) = self.accumulate(grads, a) {
                    for (o, d) in acc.iter_mut().zip(g) {
                        *o += d;
                    }
                }
                if self.nodes[patch.0].requires_grad {
                    let n = self.shape(patch)[1];
                    let p = self.shape(patch)[0];
                    let acc = self.accumulate(grads, patch).unwrap();
                    for r in 0..p {
                        for c in 0..n {
                            acc[r * n + c] += g[(row0 + r) * n + c];
                        }
                    }
                }
            }
            Op::Scale { a, c } => {
                if let Some(acc) = self.accumulate(grads, a) {
                    for (o, d) in acc.iter_mut().zip(g) {
                        *o += c * d;
                    }
                }
            }
            Op::Gelu { a } => {
                if self.nodes[a.0].requires_grad {
                    let xs = self.data(a);
                    let acc = self.accumulate(grads, a).unwrap();
                    for i in 0..g.len() {
                        acc[i] += g[i] * kernels::gelu_grad(xs[i]);
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(acc) = self.accumulate(grads, a) {
                    for o in acc.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mean { a } => {
                let n = self.nodes[a.0].value.len() as f32;
                if let Some(acc) = self.accumulate(grads, a) {
                    let d = g[0] / n;
                    for o in acc.iter_mut() {
                        *o += d;
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(acc) = self.accumulate(grads, a) {
                    for (o, d) in acc.iter_mut().zip(g) {
                        *o += d;
                    }
                }
            }
            Op::ConcatRows { a, b } => {
                let na = self.nodes[a.0].value.len();
                if let Some(acc) = self.accumulate(grads, a) {
                    for (o, d) in acc.iter_mut().zip(&g[..na]) {
                        *o += d;
                    }
                }
                if let Some(acc) = self.accumulate(grads, b) {
                    for (o, d) in acc.iter_mut().zip(&g[na..]) {
                        *o += d;
                    }
                }
            }
            Op::SliceRows { a, start, .. } => {
                if let Some(acc) = self.accumulate(grads, a) {
                    let row: usize = self.shape(a)[1..].iter().product();
                    let off = start * row;
                    for (i, d) in g.iter().enumerate() {
                        acc[off + i] += d;
                    }
                }
            }
            Op::ConcatCols { a, b } => {
                let (rows, ca) = (self.shape(a)[0], self.shape(a)[1]);
                let cb = self.shape(b)[1];
                let n = ca + cb;
                if let Some(acc) = self.accumulate(grads, a) {
                    for r in 0..rows {
                        for c in 0..ca {
                            acc[r * ca + c] += g[r * n + c];
                        }
                    }
                }
                if let Some(acc) = self.accumulate(grads, b) {
                    for r in 0..rows {
                        for c in 0..cb {
                            acc[r * cb + c] += g[r * n + ca + c];
                        }
                    }
                }
            }
            Op::SliceCols { a, start, end } => {
                if let Some(acc) = self.accumulate(grads, a) {
                    let n = self.shape(a)[1];
                    let w = end - start;
                    for (i, d) in g.iter().enumerate() {
                        let (r, c) = (i / w, i % w);
                        acc[r * n + start + c] += d;
                    }
                }
            }
            Op::Embedding { table, indices } => {
                if let Some(acc) = self.accumulate(grads, table) {
                    let d = g.len() / indices.len();
                    for (row, &idx) in indices.iter().enumerate() {
                        for j in 0..d {
                            acc[idx * d + j] += g[row * d + j];
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let width = *self.shape(x).last().unwrap();
                let rows = self.nodes[x.0].value.len() / width;
                let xv = self.data(x);
                let gv = self.data(gain);
                if self.nodes[x.0].requires_grad {
                    let acc = self.accumulate(grads, x).unwrap();
                    for r in 0..rows {
                        let (mean, rstd) = kernels::layer_norm_stats(xv, width, r);
                        let mut m1 = 0.0f64;
                        let mut m2 = 0.0f64;
                        for j in 0..width {
                            let xhat = (xv[r * width + j] as f64 - mean) * rstd;
                            let dxhat = g[r * width + j] as f64 * gv[j] as f64;
                            m1 += dxhat;
                            m2 += dxhat * xhat;
                        }
                        m1 /= width as f64;
                        m2 /= width as f64;
                        for j in 0..width {
                            let xhat = (xv[r * width + j] as f64 - mean) * rstd;
                            let dxhat = g[r * width + j] as f64 * gv[j] as f64;
                            acc[r * width + j] += (rstd * (dxhat - m1 - xhat * m2)) as f32;
                        }
                    }
                }
                if self.nodes[gain.0].requires_grad {
                    let acc = self.accumulate(grads, gain).unwrap();
                    for r in 0..rows {
                        let (mean, rstd) = kernels::layer_norm_stats(xv, width, r);
                        for j in 0..width {
                            let xhat = (xv[r * width + j] as f64 - mean) * rstd;
                            acc[j] += g[r * width + j] * xhat as f32;
                        }
                    }
                }
                if let Some(acc) = self.accumulate(grads, bias) {
                    for r in 0..rows {
                        for j in 0..width {
                            acc[j] += g[r * width + j];
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if self.nodes[x.0].requires_grad {
                    let lanes = kernels::axis_lanes(self.shape(x), axis);
                    let p = self.data(NodeId(idx));
                    let acc = self.accumulate(grads, x).unwrap();
                    kernels::for_each_lane(lanes, |base, stride| {
                        let mut dot = 0.0f64;
                        for j in 0..lanes.lane {
                            let k = base + j * stride;
                            dot += g[k] as f64 * p[k] as f64;
                        }
                        for j in 0..lanes.lane {
                            let k = base + j * stride;
                            acc[k] += p[k] * (g[k] - dot as f32);
                        }
                    });
                }
            }
            Op::LogSoftmax { x, axis } => {
                if self.nodes[x.0].requires_grad {
                    let lanes = kernels::axis_lanes(self.shape(x), axis);
                    let out = self.data(NodeId(idx));
                    let acc = self.accumulate(grads, x).unwrap();
                    kernels::for_each_lane(lanes, |base, stride| {
                        let mut gsum = 0.0f64;
                        for j in 0..lanes.lane {
                            gsum += g[base + j * stride] as f64;
                        }
                        for j in 0..lanes.lane {
                            let k = base + j * stride;
                            acc[k] += g[k] - (out[k].exp() as f64 * gsum) as f32;
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if self.nodes[logits.0].requires_grad {
                    let vocab = self.shape(logits)[1];
                    let lv = self.data(logits);
                    let count = targets.iter().filter(|&&t| t != IGNORE_INDEX).count() as f64;
                    let acc = self.accumulate(grads, logits).unwrap();
                    for (r, &t) in targets.iter().enumerate() {
                        if t == IGNORE_INDEX {
                            continue;
                        }
                        let row = &lv[r * vocab..(r + 1) * vocab];
                        let lse = kernels::row_lse_f64(row);
                        for j in 0..vocab {
                            let p = ((row[j] as f64) - lse).exp();
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            acc[r * vocab + j] += (g[0] as f64 * (p - onehot) / count) as f32;
                        }
                    }
                }
            }
            Op::Patchify { x, patch } => {
                if self.nodes[x.0].requires_grad {
                    let s = self.shape(x);
                    let dims = [s[0], s[1], s[2], s[3]];
                    let xv = self.data(x);
                    let acc = self.accumulate(grads, x).unwrap();
                    kernels::patchify::<f32>(xv, dims, patch, &mut |dst, src, _| {
                        acc[src] += g[dst];
                    });
                }
            }
            Op::BilinearResize { x, out_h, out_w } => {
                if self.nodes[x.0].requires_grad {
                    let s = self.shape(x);
                    let dims = [s[0], s[1], s[2], s[3]];
                    let acc = self.accumulate(grads, x).unwrap();
                    kernels::bilinear_taps(dims, out_h, out_w, &mut |dst, src, w| {
                        acc[src] += (g[dst] as f64 * w) as f32;
                    });
                }
            }
            Op::BoxFilter { x, k } => {
                if self.nodes[x.0].requires_grad {
                    let s = self.shape(x);
                    let dims = [s[0], s[1], s[2], s[3]];
                    let inv = 1.0 / (k * k) as f32;
                    let acc = self.accumulate(grads, x).unwrap();
                    kernels::box_filter_taps(dims, k, &mut |dst, src| {
                        acc[src] += g[dst] * inv;
                    });
                }
            }
        }
    }

    // ── Replay ──────────────────────────────────────────────────────

    /// Re-executes every recorded primitive in f32. Used to verify that the
    /// record is a faithful, bit-exact description of the forward pass.
    pub fn replay_f32(&self) -> TensorResult<Vec<Tensor>> {
        let mut values: Vec<Vec<f32>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let data = match node.op {
                Op::Leaf | Op::Constant => node.value.data().to_vec(),
                _ => eval_op::<f32>(&node.op, node.value.shape(), &|id| {
                    debug_assert!(id.0 < i);
                    (
                        self.shape(id),
                        std::borrow::Cow::Borrowed(values[id.0].as_slice()),
                    )
                })?,
            };
            values.push(data);
        }
        Ok(self
            .nodes
            .iter()
            .zip(values)
            .map(|(n, v)| Tensor::from_parts(n.value.shape().to_vec(), v))
            .collect())
    }

    /// Replays the subgraph feeding `root` in f64, with some leaf values
    /// overridden. Serves as the high-precision oracle for finite differences.
    pub fn replay_root_f64(
        &self,
        root: NodeId,
        overrides: &[(NodeId, &[f64])],
    ) -> TensorResult<f64> {
        let mut needed = vec![false; root.0 + 1];
        needed[root.0] = true;
        for i in (0..=root.0).rev() {
            if needed[i] {
                for dep in self.nodes[i].op.inputs() {
                    needed[dep.0] = true;
                }
            }
        }
        let mut values: Vec<Vec<f64>> = vec![Vec::new(); root.0 + 1];
        for i in 0..=root.0 {
            if !needed[i] {
                continue;
            }
            let node = &self.nodes[i];
            let over = overrides.iter().find(|(id, _)| id.0 == i);
            values[i] = match (&node.op, over) {
                (_, Some((_, data))) => data.to_vec(),
                (Op::Leaf, None) | (Op::Constant, None) => {
                    node.value.data().iter().map(|&v| v as f64).collect()
                }
                (op, None) => eval_op::<f64>(op, node.value.shape(), &|id| {
                    (
                        self.shape(id),
                        std::borrow::Cow::Borrowed(values[id.0].as_slice()),
                    )
                })?,
            };
        }
        debug_assert_eq!(values[root.0].len(), 1);
        Ok(values[root.0][0])
    }
}

type SourceFn<'a, R> = dyn Fn(NodeId) -> (&'a [usize], std::borrow::Cow<'a, [R]>) + 'a;

/// Computes the value of one primitive from its input values. Shared by the
/// f32 execution path and both replay paths.
fn eval_op<R: Real + 'static>(
    op: &Op,
    out_shape: &[usize],
    src: &SourceFn<'_, R>,
) -> TensorResult<Vec<R>> {
    let val = |id: NodeId| src(id).1;
    let shape = |id: NodeId| src(id).0;
    Ok(match *op {
        Op::Leaf | Op::Constant => unreachable!("leaf values are stored, not computed"),
        Op::MatMul { a, b } => {
            let (m, k) = (shape(a)[0], shape(a)[1]);
            let n = shape(b)[1];
            kernels::matmul(&val(a), &val(b), m, k, n)
        }
        Op::Transpose { a } => {
            let s = shape(a);
            kernels::transpose(&val(a), s[0], s[1])
        }
        Op::Add { a, b } => zip_map(&val(a), &val(b), |x, y| x + y),
        Op::Sub { a, b } => zip_map(&val(a), &val(b), |x, y| x - y),
        Op::Mul { a, b } => zip_map(&val(a), &val(b), |x, y| x * y),
        Op::AddRowVec { a, v } => {
            let vv = val(v);
            let n = shape(v)[0];
            val(a)
                .iter()
                .enumerate()
                .map(|(i, &x)| x + vv[i % n])
                .collect()
        }
        Op::AddRowsAt { a, patch, row0 } => {
            let mut out: Vec<R> = val(a).to_vec();
            let pv = val(patch);
            let (p, n) = (shape(patch)[0], shape(patch)[1]);
            for r in 0..p {
                for c in 0..n {
                    let i = (row0 + r) * n + c;
                    out[i] = out[i] + pv[r * n + c];
                }
            }
            out
        }
        Op::Scale { a, c } => {
            let cc = R::from_f32(c);
            val(a).iter().map(|&x| x * cc).collect()
        }
        Op::Gelu { a } => val(a).iter().map(|&x| kernels::gelu(x)).collect(),
        Op::Sum { a } => vec![R::from_f64(kernels::sum_f64(&val(a)))],
        Op::Mean { a } => {
            let v = val(a);
            vec![R::from_f64(kernels::sum_f64(&v) / v.len() as f64)]
        }
        Op::Reshape { a } => val(a).to_vec(),
        Op::ConcatRows { a, b } => {
            let mut out = val(a).to_vec();
            out.extend_from_slice(&val(b));
            out
        }
        Op::SliceRows { a, start, end } => {
            let row: usize = shape(a)[1..].iter().product();
            val(a)[start * row..end * row].to_vec()
        }
        Op::ConcatCols { a, b } => {
            let (rows, ca) = (shape(a)[0], shape(a)[1]);
            let cb = shape(b)[1];
            let (av, bv) = (val(a), val(b));
            let mut out = Vec::with_capacity(rows * (ca + cb));
            for r in 0..rows {
                out.extend_from_slice(&av[r * ca..(r + 1) * ca]);
                out.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
            }
            out
        }
        Op::SliceCols { a, start, end } => {
            let n = shape(a)[1];
            let av = val(a);
            let mut out = Vec::with_capacity(shape(a)[0] * (end - start));
            for r in 0..shape(a)[0] {
                out.extend_from_slice(&av[r * n + start..r * n + end]);
            }
            out
        }
        Op::Embedding { table, ref indices } => {
            let d = shape(table)[1];
            let tv = val(table);
            let mut out = Vec::with_capacity(indices.len() * d);
            for &idx in indices {
                out.extend_from_slice(&tv[idx * d..(idx + 1) * d]);
            }
            out
        }
        Op::LayerNorm { x, gain, bias } => {
            let width = *shape(x).last().unwrap();
            kernels::layer_norm(&val(x), &val(gain), &val(bias), width)
        }
        Op::Softmax { x, axis } => {
            let lanes: AxisLanes = kernels::axis_lanes(shape(x), axis);
            kernels::softmax(&val(x), lanes)
        }
        Op::LogSoftmax { x, axis } => {
            let lanes = kernels::axis_lanes(shape(x), axis);
            kernels::log_softmax(&val(x), lanes)
        }
        Op::CrossEntropy { logits, ref targets } => {
            let vocab = shape(logits)[1];
            let lv = val(logits);
            let mut total = 0.0f64;
            let mut count = 0usize;
            for (r, &t) in targets.iter().enumerate() {
                if t == IGNORE_INDEX {
                    continue;
                }
                let row = &lv[r * vocab..(r + 1) * vocab];
                total += kernels::row_lse_f64(row) - row[t].to_f64();
                count += 1;
            }
            vec![R::from_f64(total / count as f64)]
        }
        Op::Patchify { x, patch } => {
            let s = shape(x);
            let dims = [s[0], s[1], s[2], s[3]];
            let xv = val(x);
            let mut out = vec![R::ZERO; out_shape.iter().product()];
            kernels::patchify(&xv, dims, patch, &mut |dst, _, v| out[dst] = v);
            out
        }
        Op::BilinearResize { x, out_h, out_w } => {
            let s = shape(x);
            let dims = [s[0], s[1], s[2], s[3]];
            let xv = val(x);
            let mut out = vec![0.0f64; out_shape.iter().product()];
            kernels::bilinear_taps(dims, out_h, out_w, &mut |dst, src_idx, w| {
                out[dst] += xv[src_idx].to_f64() * w;
            });
            out.into_iter().map(R::from_f64).collect()
        }
        Op::BoxFilter { x, k } => {
            let s = shape(x);
            let dims = [s[0], s[1], s[2], s[3]];
            let xv = val(x);
            let mut out = vec![0.0f64; out_shape.iter().product()];
            kernels::box_filter_taps(dims, k, &mut |dst, src_idx| {
                out[dst] += xv[src_idx].to_f64();
            });
            let inv = 1.0 / (k * k) as f64;
            out.into_iter().map(|v| R::from_f64(v * inv)).collect()
        }
    })
}

fn zip_map<R: Real>(a: &[R], b: &[R], f: impl Fn(R, R) -> R) -> Vec<R> {
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}
