//! Dense-tensor computation graphs with exact reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape: builder methods validate shapes and
//! push nodes, so node ids are already a topological order. Values are
//! computed by [`Graph::forward`] and cached for [`Graph::backward`], which
//! walks the tape in reverse accumulating analytic adjoints. Parameters live
//! outside the graph in a [`ParamStore`] so the same tape machinery can be
//! rebuilt per batch while parameters persist across optimizer steps.

mod kernels;

use std::collections::HashMap;

use thiserror::Error;

use crate::tensor::{Fnv1a, Tensor};

pub use kernels::{conv2d_forward, conv_out_dims, gemm, same_pad};

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("loss node must be scalar, got shape {shape:?}")]
    LossNotScalar { shape: Vec<usize> },
    #[error("missing feed for input '{name}'")]
    MissingFeed { name: String },
    #[error("feed '{name}' has shape {got:?}, expected {expected:?}")]
    FeedShapeMismatch {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("node {node} has no cached value; run forward over it first")]
    NotEvaluated { node: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("gather index {index} out of range for table with {rows} rows")]
    GatherOutOfRange { index: usize, rows: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

/// Identifier of a persistent parameter tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Persistent parameter tensors with per-tensor freeze flags.
///
/// Frozen tensors still receive gradients during backward; the freeze
/// contract is enforced by the optimizer, which never applies updates
/// to them.
#[derive(Debug, Clone)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    frozen: Vec<bool>,
    names: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            tensors: Vec::new(),
            frozen: Vec::new(),
            names: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let id = ParamId(self.tensors.len());
        self.tensors.push(tensor);
        self.frozen.push(false);
        self.names.push(name.into());
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, tensor: Tensor) {
        assert_eq!(self.tensors[id.0].shape(), tensor.shape());
        self.tensors[id.0] = tensor;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    pub fn freeze_all(&mut self, frozen: bool) {
        for f in self.frozen.iter_mut() {
            *f = frozen;
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total scalar count across a set of parameters.
    pub fn count_scalars(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|id| self.get(*id).numel()).sum()
    }

    /// FNV-1a hash over a subset of parameters, in the given order.
    pub fn hash_subset(&self, ids: &[ParamId]) -> u64 {
        let mut h = Fnv1a::new();
        for id in ids {
            self.get(*id).hash_into(&mut h);
        }
        h.finish()
    }

    /// Snapshot of all tensors for checkpointing.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.tensors.clone()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) {
        assert_eq!(snapshot.len(), self.tensors.len());
        for (t, s) in self.tensors.iter_mut().zip(snapshot.iter()) {
            *t = s.clone();
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Node identifier within a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Broadcast mode for binary elementwise ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    /// Shapes equal.
    Same,
    /// `b` matches a suffix of `a`'s shape; repeated over leading axes
    /// (row-wise bias add).
    Suffix,
    /// `b` matches a prefix of `a`'s shape; repeated over trailing axes
    /// (channel bias, channel-wise kernel modulation).
    Prefix,
}

#[derive(Debug, Clone)]
enum Op {
    Input { name: String },
    Param { param: ParamId },
    Constant { value: Tensor },
    Add { a: NodeId, b: NodeId, bcast: Bcast },
    Mul { a: NodeId, b: NodeId, bcast: Bcast },
    Scale { a: NodeId, mul: f64, add: f64 },
    MatMul { a: NodeId, b: NodeId, trans_a: bool, trans_b: bool },
    Conv2d { input: NodeId, kernel: NodeId, padding: Padding },
    Relu { a: NodeId },
    Mean { a: NodeId, keep: usize },
    Gather { table: NodeId, rows: Vec<usize> },
    Concat { parts: Vec<NodeId>, axis: usize },
    Reshape { a: NodeId },
    SoftmaxXent { logits: NodeId, labels: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Constant { .. } => "constant",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu { .. } => "relu",
            Op::Mean { .. } => "mean",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
            Op::SoftmaxXent { .. } => "softmax_xent",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } | Op::Param { .. } | Op::Constant { .. } => Vec::new(),
            Op::Add { a, b, .. } | Op::Mul { a, b, .. } | Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale { a, .. } | Op::Relu { a } | Op::Mean { a, .. } | Op::Reshape { a } => {
                vec![*a]
            }
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::Gather { table, .. } => vec![*table],
            Op::Concat { parts, .. } => parts.clone(),
            Op::SoftmaxXent { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    requires_grad: bool,
}

/// Map from node id to gradient tensor for every differentiable node reached
/// from the loss.
#[derive(Debug)]
pub struct GradientMap {
    grads: Vec<Option<Tensor>>,
}

impl GradientMap {
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        self.grads.get(node.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter, if it participated in the loss.
    pub fn param_grad<'a>(&'a self, graph: &Graph, param: ParamId) -> Option<&'a Tensor> {
        graph
            .param_lookup
            .get(&param)
            .and_then(|node| self.get(*node))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Feeds {
    map: HashMap<String, Tensor>,
}

impl Feeds {
    pub fn new() -> Self {
        Feeds::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.map.insert(name.into(), tensor);
    }

    fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }
}

/// Append-only computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Option<Tensor>>,
    param_lookup: HashMap<ParamId, NodeId>,
    param_nodes: Vec<(ParamId, NodeId)>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, node: NodeId) -> &[usize] {
        &self.nodes[node.0].shape
    }

    pub fn requires_grad(&self, node: NodeId) -> bool {
        self.nodes[node.0].requires_grad
    }

    /// Parameters referenced by this graph, in registration order.
    pub fn params(&self) -> &[(ParamId, NodeId)] {
        &self.param_nodes
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let requires_grad = match &op {
            Op::Param { .. } => true,
            Op::Input { .. } | Op::Constant { .. } => false,
            other => other
                .inputs()
                .iter()
                .any(|id| self.nodes[id.0].requires_grad),
        };
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            shape,
            requires_grad,
        });
        self.values.push(None);
        id
    }

    pub fn input(&mut self, name: impl Into<String>, shape: Vec<usize>) -> NodeId {
        self.push(Op::Input { name: name.into() }, shape)
    }

    /// Reference a persistent parameter. Repeated calls with the same id
    /// return the same node, so gradients from all uses accumulate.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(node) = self.param_lookup.get(&id) {
            return *node;
        }
        let shape = store.get(id).shape().to_vec();
        let node = self.push(Op::Param { param: id }, shape);
        self.param_lookup.insert(id, node);
        self.param_nodes.push((id, node));
        node
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant { value }, shape)
    }

    fn binary_shapes(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        bcast: Bcast,
    ) -> Result<Vec<usize>, DiffError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let ok = match bcast {
            Bcast::Same => sa == sb,
            Bcast::Suffix => sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb,
            Bcast::Prefix => sb.len() <= sa.len() && sa[..sb.len()] == *sb,
        };
        if ok {
            Ok(sa.to_vec())
        } else {
            Err(DiffError::ShapeMismatch {
                op,
                detail: format!("{sa:?} vs {sb:?} under {bcast:?} broadcast"),
            })
        }
    }

    /// Elementwise sum of two equal-shaped tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let shape = self.binary_shapes("add", a, b, Bcast::Same)?;
        Ok(self.push(Op::Add { a, b, bcast: Bcast::Same }, shape))
    }

    /// Add `b` to every leading slice of `a` (`[n, c] + [c]` bias add).
    pub fn add_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let shape = self.binary_shapes("add", a, b, Bcast::Suffix)?;
        Ok(self.push(Op::Add { a, b, bcast: Bcast::Suffix }, shape))
    }

    /// Add `b` along leading axes of `a` (`[c, h, w] + [c]` channel bias).
    pub fn add_chan(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let shape = self.binary_shapes("add", a, b, Bcast::Prefix)?;
        Ok(self.push(Op::Add { a, b, bcast: Bcast::Prefix }, shape))
    }

    /// Elementwise product of two equal-shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let shape = self.binary_shapes("mul", a, b, Bcast::Same)?;
        Ok(self.push(Op::Mul { a, b, bcast: Bcast::Same }, shape))
    }

    /// Multiply `a` by `b` broadcast over trailing axes
    /// (`[c_out, c_in, k_h, k_w] * [c_out, c_in]` kernel modulation).
    pub fn mul_chan(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let shape = self.binary_shapes("mul", a, b, Bcast::Prefix)?;
        Ok(self.push(Op::Mul { a, b, bcast: Bcast::Prefix }, shape))
    }

    /// Elementwise affine map `mul * x + add`.
    pub fn scale(&mut self, a: NodeId, mul: f64, add: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale { a, mul, add }, shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product with optional transposes. `a` must be 2-D; `b` may be
    /// 2-D, or 1-D (treated as a column vector, `trans_b` must be false).
    pub fn matmul_t(
        &mut self,
        a: NodeId,
        b: NodeId,
        trans_a: bool,
        trans_b: bool,
    ) -> Result<NodeId, DiffError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                detail: format!("lhs must be 2-D, got {sa:?}"),
            });
        }
        let (m, k) = if trans_a { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let shape = match sb.len() {
            2 => {
                let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
                if kb != k {
                    return Err(DiffError::ShapeMismatch {
                        op: "matmul",
                        detail: format!("inner dims {k} vs {kb}"),
                    });
                }
                vec![m, n]
            }
            1 => {
                if trans_b {
                    return Err(DiffError::ShapeMismatch {
                        op: "matmul",
                        detail: "cannot transpose a vector operand".into(),
                    });
                }
                if sb[0] != k {
                    return Err(DiffError::ShapeMismatch {
                        op: "matmul",
                        detail: format!("inner dims {k} vs {}", sb[0]),
                    });
                }
                vec![m]
            }
            _ => {
                return Err(DiffError::ShapeMismatch {
                    op: "matmul",
                    detail: format!("rhs must be 1-D or 2-D, got {sb:?}"),
                })
            }
        };
        Ok(self.push(Op::MatMul { a, b, trans_a, trans_b }, shape))
    }

    /// Stride-1 convolution of `[c_in, h, w]` with `[c_out, c_in, k_h, k_w]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        padding: Padding,
    ) -> Result<NodeId, DiffError> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        if si.len() != 3 || sk.len() != 4 {
            return Err(DiffError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {si:?} must be 3-D and kernel {sk:?} 4-D"),
            });
        }
        if si[0] != sk[1] {
            return Err(DiffError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input channels {} vs kernel {}", si[0], sk[1]),
            });
        }
        if padding == Padding::Valid && (si[1] < sk[2] || si[2] < sk[3]) {
            return Err(DiffError::ShapeMismatch {
                op: "conv2d",
                detail: "kernel larger than input under valid padding".into(),
            });
        }
        let (oh, ow) = conv_out_dims(si[1], si[2], sk[2], sk[3], padding == Padding::Same);
        Ok(self.push(
            Op::Conv2d { input, kernel, padding },
            vec![sk[0], oh, ow],
        ))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Relu { a }, shape)
    }

    /// Mean over all elements, producing a scalar.
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean { a, keep: 0 }, Vec::new())
    }

    /// Mean over all axes after the first `keep` (global average pooling with
    /// `keep = 1` maps `[c, h, w]` to `[c]`).
    pub fn mean_keep(&mut self, a: NodeId, keep: usize) -> Result<NodeId, DiffError> {
        let sa = self.shape(a);
        if keep > sa.len() {
            return Err(DiffError::ShapeMismatch {
                op: "mean",
                detail: format!("keep {keep} exceeds rank of {sa:?}"),
            });
        }
        let shape = sa[..keep].to_vec();
        Ok(self.push(Op::Mean { a, keep }, shape))
    }

    /// Select rows of a 2-D table by fixed indices (embedding lookup).
    pub fn gather(&mut self, table: NodeId, rows: Vec<usize>) -> Result<NodeId, DiffError> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(DiffError::ShapeMismatch {
                op: "gather",
                detail: format!("table must be 2-D, got {st:?}"),
            });
        }
        for &r in &rows {
            if r >= st[0] {
                return Err(DiffError::GatherOutOfRange { index: r, rows: st[0] });
            }
        }
        let shape = vec![rows.len(), st[1]];
        Ok(self.push(Op::Gather { table, rows }, shape))
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::InvalidArgument("concat of zero parts".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(DiffError::ShapeMismatch {
                op: "concat",
                detail: format!("axis {axis} out of range for {first:?}"),
            });
        }
        let mut total = first[axis];
        for p in &parts[1..] {
            let sp = self.shape(*p);
            if sp.len() != first.len()
                || sp
                    .iter()
                    .zip(first.iter())
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    detail: format!("{sp:?} vs {first:?} along axis {axis}"),
                });
            }
            total += sp[axis];
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(Op::Concat { parts: parts.to_vec(), axis }, shape))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, DiffError> {
        let numel: usize = shape.iter().product();
        let cur: usize = self.shape(a).iter().product();
        if numel != cur {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {shape:?} changes element count", self.shape(a)),
            });
        }
        Ok(self.push(Op::Reshape { a }, shape))
    }

    /// Mean softmax cross-entropy of `[n, c]` logits against integer labels.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: Vec<usize>) -> Result<NodeId, DiffError> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(DiffError::ShapeMismatch {
                op: "softmax_xent",
                detail: format!("logits {sl:?} vs {} labels", labels.len()),
            });
        }
        for &y in &labels {
            if y >= sl[1] {
                return Err(DiffError::LabelOutOfRange { label: y, classes: sl[1] });
            }
        }
        Ok(self.push(Op::SoftmaxXent { logits, labels }, Vec::new()))
    }

    /// Node ids reachable from `root`, as a membership mask.
    fn reachable(&self, root: NodeId) -> Vec<bool> {
        let mut mark = vec![false; self.nodes.len()];
        let mut stack = vec![root];
        while let Some(id) = stack.pop() {
            if mark[id.0] {
                continue;
            }
            mark[id.0] = true;
            stack.extend(self.nodes[id.0].op.inputs());
        }
        mark
    }

    fn eval_node(&self, id: usize, store: &ParamStore, feeds: &Feeds) -> Result<Tensor, DiffError> {
        let node = &self.nodes[id];
        let val = |n: NodeId| self.values[n.0].as_ref().expect("inputs evaluated first");
        let out = match &node.op {
            Op::Input { name } => {
                let t = feeds
                    .get(name)
                    .ok_or_else(|| DiffError::MissingFeed { name: name.clone() })?;
                if t.shape() != node.shape.as_slice() {
                    return Err(DiffError::FeedShapeMismatch {
                        name: name.clone(),
                        got: t.shape().to_vec(),
                        expected: node.shape.clone(),
                    });
                }
                t.clone()
            }
            Op::Param { param } => store.get(*param).clone(),
            Op::Constant { value } => value.clone(),
            Op::Add { a, b, bcast } => {
                let (ta, tb) = (val(*a), val(*b));
                let mut out = ta.clone();
                apply_binary(out.data_mut(), tb.data(), *bcast, |x, y| x + y);
                out
            }
            Op::Mul { a, b, bcast } => {
                let (ta, tb) = (val(*a), val(*b));
                let mut out = ta.clone();
                apply_binary(out.data_mut(), tb.data(), *bcast, |x, y| x * y);
                out
            }
            Op::Scale { a, mul, add } => {
                let mut out = val(*a).clone();
                for v in out.data_mut() {
                    *v = mul * *v + add;
                }
                out
            }
            Op::MatMul { a, b, trans_a, trans_b } => {
                let (ta, tb) = (val(*a), val(*b));
                let a_dims = (ta.shape()[0], ta.shape()[1]);
                let b_dims = if tb.ndim() == 2 {
                    (tb.shape()[0], tb.shape()[1])
                } else {
                    (tb.shape()[0], 1)
                };
                let mut out = vec![0.0; node.shape.iter().product()];
                gemm(ta.data(), a_dims, *trans_a, tb.data(), b_dims, *trans_b, &mut out);
                Tensor::new(node.shape.clone(), out)
            }
            Op::Conv2d { input, kernel, padding } => {
                let (ti, tk) = (val(*input), val(*kernel));
                let si = ti.shape();
                let sk = tk.shape();
                let data = kernels::conv2d_forward(
                    ti.data(),
                    (si[0], si[1], si[2]),
                    tk.data(),
                    (sk[0], sk[2], sk[3]),
                    *padding == Padding::Same,
                );
                Tensor::new(node.shape.clone(), data)
            }
            Op::Relu { a } => {
                let mut out = val(*a).clone();
                for v in out.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                out
            }
            Op::Mean { a, keep } => {
                let ta = val(*a);
                let lead: usize = ta.shape()[..*keep].iter().product();
                let rest = ta.numel() / lead.max(1);
                let mut out = vec![0.0; lead];
                for (i, o) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for v in &ta.data()[i * rest..(i + 1) * rest] {
                        acc += v;
                    }
                    *o = acc / rest as f64;
                }
                Tensor::new(node.shape.clone(), out)
            }
            Op::Gather { table, rows } => {
                let tt = val(*table);
                let cols = tt.shape()[1];
                let mut out = Vec::with_capacity(rows.len() * cols);
                for &r in rows {
                    out.extend_from_slice(&tt.data()[r * cols..(r + 1) * cols]);
                }
                Tensor::new(node.shape.clone(), out)
            }
            Op::Concat { parts, axis } => {
                let tensors: Vec<&Tensor> = parts.iter().map(|p| val(*p)).collect();
                concat_forward(&tensors, *axis, &node.shape)
            }
            Op::Reshape { a } => val(*a).clone().reshaped(node.shape.clone()),
            Op::SoftmaxXent { logits, labels } => {
                Tensor::scalar(kernels::softmax_xent_forward(val(*logits), labels))
            }
        };
        if !out.all_finite() {
            return Err(DiffError::NonFinite { node: id, op: node.op.name() });
        }
        Ok(out)
    }

    /// Evaluate `root` and all of its ancestors, caching every intermediate.
    pub fn forward(
        &mut self,
        store: &ParamStore,
        feeds: &Feeds,
        root: NodeId,
    ) -> Result<Tensor, DiffError> {
        let mark = self.reachable(root);
        for (id, marked) in mark.iter().enumerate().take(root.0 + 1) {
            if *marked {
                let v = self.eval_node(id, store, feeds)?;
                self.values[id] = Some(v);
            }
        }
        Ok(self.values[root.0].clone().expect("root evaluated"))
    }

    /// Evaluate `root` reusing every already-cached value. Only valid while
    /// the store and feeds are unchanged since the last [`Graph::forward`];
    /// used to pull side outputs (pooled features) after evaluating a loss.
    pub fn forward_more(
        &mut self,
        store: &ParamStore,
        feeds: &Feeds,
        root: NodeId,
    ) -> Result<Tensor, DiffError> {
        let mark = self.reachable(root);
        for (id, marked) in mark.iter().enumerate().take(root.0 + 1) {
            if *marked && self.values[id].is_none() {
                let v = self.eval_node(id, store, feeds)?;
                self.values[id] = Some(v);
            }
        }
        Ok(self.values[root.0].clone().expect("root evaluated"))
    }

    /// Cached value of a node from the most recent forward pass over it.
    pub fn value(&self, node: NodeId) -> Result<&Tensor, DiffError> {
        self.values[node.0]
            .as_ref()
            .ok_or(DiffError::NotEvaluated { node: node.0 })
    }

    /// Exact reverse-mode gradients of a scalar loss for every
    /// `requires_grad` node reachable from it. Requires a prior
    /// [`Graph::forward`] over the loss.
    pub fn backward(&self, _store: &ParamStore, loss: NodeId) -> Result<GradientMap, DiffError> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.shape.iter().product::<usize>() != 1 {
            return Err(DiffError::LossNotScalar { shape: loss_node.shape.clone() });
        }
        if self.values[loss.0].is_none() {
            return Err(DiffError::NotEvaluated { node: loss.0 });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(&loss_node.shape, 1.0));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad || grads[id].is_none() {
                continue;
            }
            let g = grads[id].clone().unwrap();
            self.accumulate_adjoints(id, &g, &mut grads)?;
        }
        Ok(GradientMap { grads })
    }

    fn grad_slot<'a>(
        &self,
        grads: &'a mut [Option<Tensor>],
        node: NodeId,
    ) -> Option<&'a mut Tensor> {
        if !self.nodes[node.0].requires_grad {
            return None;
        }
        if grads[node.0].is_none() {
            grads[node.0] = Some(Tensor::zeros(&self.nodes[node.0].shape));
        }
        grads[node.0].as_mut()
    }

    fn accumulate_adjoints(
        &self,
        id: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), DiffError> {
        let val = |n: NodeId| self.values[n.0].as_ref().expect("forward cached values");
        match &self.nodes[id].op {
            Op::Input { .. } | Op::Param { .. } | Op::Constant { .. } => {}
            Op::Add { a, b, bcast } => {
                if let Some(da) = self.grad_slot(grads, *a) {
                    for (d, s) in da.data_mut().iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    reduce_binary(db.data_mut(), g.data(), *bcast, |gv, _| gv, &[]);
                }
            }
            Op::Mul { a, b, bcast } => {
                let (va, vb) = (val(*a).clone(), val(*b).clone());
                if let Some(da) = self.grad_slot(grads, *a) {
                    let n = da.data_mut().len();
                    let chunk = n / vb.numel().max(1);
                    match bcast {
                        Bcast::Same => {
                            for i in 0..n {
                                da.data_mut()[i] += g.data()[i] * vb.data()[i];
                            }
                        }
                        Bcast::Prefix => {
                            for (p, &bv) in vb.data().iter().enumerate() {
                                for i in 0..chunk {
                                    da.data_mut()[p * chunk + i] += g.data()[p * chunk + i] * bv;
                                }
                            }
                        }
                        Bcast::Suffix => {
                            let reps = n / vb.numel();
                            for r in 0..reps {
                                for (i, &bv) in vb.data().iter().enumerate() {
                                    da.data_mut()[r * vb.numel() + i] +=
                                        g.data()[r * vb.numel() + i] * bv;
                                }
                            }
                        }
                    }
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    reduce_binary(db.data_mut(), g.data(), *bcast, |ga, av| ga * av, va.data());
                }
            }
            Op::Scale { a, mul, .. } => {
                if let Some(da) = self.grad_slot(grads, *a) {
                    for (d, s) in da.data_mut().iter_mut().zip(g.data()) {
                        *d += mul * s;
                    }
                }
            }
            Op::MatMul { a, b, trans_a, trans_b } => {
                let (va, vb) = (val(*a).clone(), val(*b).clone());
                let a_dims = (va.shape()[0], va.shape()[1]);
                let b_dims = if vb.ndim() == 2 {
                    (vb.shape()[0], vb.shape()[1])
                } else {
                    (vb.shape()[0], 1)
                };
                let (m, _k) = if *trans_a { (a_dims.1, a_dims.0) } else { (a_dims.0, a_dims.1) };
                let n = if *trans_b { b_dims.0 } else { b_dims.1 };
                let g_dims = (m, n);
                // dA_eff = G * B_eff^T ; dB_eff = A_eff^T * G, mapped back to
                // stored layouts through the transpose flags.
                if let Some(da) = self.grad_slot(grads, *a) {
                    if *trans_a {
                        // dA_stored = (G * B_eff^T)^T = B_eff * G^T
                        kernels::gemm_acc(
                            vb.data(),
                            b_dims,
                            *trans_b,
                            g.data(),
                            g_dims,
                            true,
                            da.data_mut(),
                        );
                    } else {
                        kernels::gemm_acc(
                            g.data(),
                            g_dims,
                            false,
                            vb.data(),
                            b_dims,
                            !*trans_b,
                            da.data_mut(),
                        );
                    }
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    if *trans_b {
                        // dB_stored = (A_eff^T * G)^T = G^T * A_eff
                        kernels::gemm_acc(
                            g.data(),
                            g_dims,
                            true,
                            va.data(),
                            a_dims,
                            *trans_a,
                            db.data_mut(),
                        );
                    } else {
                        kernels::gemm_acc(
                            va.data(),
                            a_dims,
                            !*trans_a,
                            g.data(),
                            g_dims,
                            false,
                            db.data_mut(),
                        );
                    }
                }
            }
            Op::Conv2d { input, kernel, padding } => {
                let (vi, vk) = (val(*input).clone(), val(*kernel).clone());
                let si = vi.shape().to_vec();
                let sk = vk.shape().to_vec();
                let mut d_input = vec![0.0; vi.numel()];
                let mut d_kernel = vec![0.0; vk.numel()];
                kernels::conv2d_backward(
                    vi.data(),
                    (si[0], si[1], si[2]),
                    vk.data(),
                    (sk[0], sk[2], sk[3]),
                    *padding == Padding::Same,
                    g.data(),
                    &mut d_input,
                    &mut d_kernel,
                );
                if let Some(di) = self.grad_slot(grads, *input) {
                    for (d, s) in di.data_mut().iter_mut().zip(&d_input) {
                        *d += s;
                    }
                }
                if let Some(dk) = self.grad_slot(grads, *kernel) {
                    for (d, s) in dk.data_mut().iter_mut().zip(&d_kernel) {
                        *d += s;
                    }
                }
            }
            Op::Relu { a } => {
                let va = val(*a).clone();
                if let Some(da) = self.grad_slot(grads, *a) {
                    for i in 0..va.numel() {
                        if va.data()[i] > 0.0 {
                            da.data_mut()[i] += g.data()[i];
                        }
                    }
                }
            }
            Op::Mean { a, keep } => {
                let sa = self.nodes[a.0].shape.clone();
                let lead: usize = sa[..*keep].iter().product();
                let rest: usize = sa[*keep..].iter().product();
                if let Some(da) = self.grad_slot(grads, *a) {
                    for i in 0..lead {
                        let gv = g.data()[i] / rest as f64;
                        for v in &mut da.data_mut()[i * rest..(i + 1) * rest] {
                            *v += gv;
                        }
                    }
                }
            }
            Op::Gather { table, rows } => {
                let cols = self.nodes[table.0].shape[1];
                if let Some(dt) = self.grad_slot(grads, *table) {
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..cols {
                            dt.data_mut()[r * cols + j] += g.data()[i * cols + j];
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[id].shape.clone();
                let mut offset = 0;
                for p in parts {
                    let sp = self.nodes[p.0].shape.clone();
                    let span = sp[*axis];
                    if let Some(dp) = self.grad_slot(grads, *p) {
                        copy_concat_slice(g.data(), &out_shape, *axis, offset, span, dp.data_mut());
                    }
                    offset += span;
                }
            }
            Op::Reshape { a } => {
                if let Some(da) = self.grad_slot(grads, *a) {
                    for (d, s) in da.data_mut().iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
            }
            Op::SoftmaxXent { logits, labels } => {
                let vl = val(*logits).clone();
                if let Some(dl) = self.grad_slot(grads, *logits) {
                    kernels::softmax_xent_backward(
                        &vl,
                        labels,
                        g.scalar_value(),
                        dl.data_mut(),
                    );
                }
            }
        }
        Ok(())
    }
}

/// `a[i] = f(a[i], broadcast(b)[i])` under the given broadcast mode.
fn apply_binary(a: &mut [f64], b: &[f64], bcast: Bcast, f: impl Fn(f64, f64) -> f64) {
    match bcast {
        Bcast::Same => {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x = f(*x, *y);
            }
        }
        Bcast::Suffix => {
            let reps = a.len() / b.len();
            for r in 0..reps {
                for (i, y) in b.iter().enumerate() {
                    let x = &mut a[r * b.len() + i];
                    *x = f(*x, *y);
                }
            }
        }
        Bcast::Prefix => {
            let chunk = a.len() / b.len();
            for (p, y) in b.iter().enumerate() {
                for x in &mut a[p * chunk..(p + 1) * chunk] {
                    *x = f(*x, *y);
                }
            }
        }
    }
}

/// Accumulate `f(g[i], aux[i])` into the (possibly broadcast) `b` slot.
/// `aux` carries the co-factor value (`a`'s forward value for `mul`); it is
/// empty for `add`, where the contribution is the gradient itself.
fn reduce_binary(db: &mut [f64], g: &[f64], bcast: Bcast, f: impl Fn(f64, f64) -> f64, aux: &[f64]) {
    let term = |i: usize| {
        let av = if aux.is_empty() { 0.0 } else { aux[i] };
        f(g[i], av)
    };
    match bcast {
        Bcast::Same => {
            for (i, d) in db.iter_mut().enumerate() {
                *d += term(i);
            }
        }
        Bcast::Suffix => {
            let width = db.len();
            let reps = g.len() / width;
            for r in 0..reps {
                for (i, d) in db.iter_mut().enumerate() {
                    *d += term(r * width + i);
                }
            }
        }
        Bcast::Prefix => {
            let chunk = g.len() / db.len();
            for (p, d) in db.iter_mut().enumerate() {
                for i in 0..chunk {
                    *d += term(p * chunk + i);
                }
            }
        }
    }
}

fn concat_forward(tensors: &[&Tensor], axis: usize, out_shape: &[usize]) -> Tensor {
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let total_axis = out_shape[axis];
    let mut out = vec![0.0; outer * total_axis * inner];
    let mut offset = 0;
    for t in tensors {
        let span = t.shape()[axis];
        for o in 0..outer {
            let src = &t.data()[o * span * inner..(o + 1) * span * inner];
            let dst_off = (o * total_axis + offset) * inner;
            out[dst_off..dst_off + span * inner].copy_from_slice(src);
        }
        offset += span;
    }
    Tensor::new(out_shape.to_vec(), out)
}

/// Accumulate the slice `[offset, offset+span)` of `g` along `axis` into `dp`.
fn copy_concat_slice(
    g: &[f64],
    out_shape: &[usize],
    axis: usize,
    offset: usize,
    span: usize,
    dp: &mut [f64],
) {
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let total_axis = out_shape[axis];
    for o in 0..outer {
        let src_off = (o * total_axis + offset) * inner;
        let dst_off = o * span * inner;
        for i in 0..span * inner {
            dp[dst_off + i] += g[src_off + i];
        }
    }
}

/// Result of checking one parameter against central finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub param: ParamId,
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }
}

/// Relative error convention used throughout the gradient checks.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compare analytic gradients of `loss` against central finite differences
/// `(f(x+eps) - f(x-eps)) / (2 eps)` for every parameter referenced by the
/// graph. Parameters not connected to the loss check out with error 0.
pub fn check_gradients(
    graph: &mut Graph,
    store: &ParamStore,
    feeds: &Feeds,
    loss: NodeId,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport, DiffError> {
    if eps <= 0.0 || tol <= 0.0 {
        return Err(DiffError::InvalidArgument(
            "eps and tol must be positive".into(),
        ));
    }
    graph.forward(store, feeds, loss)?;
    let grads = graph.backward(store, loss)?;
    let analytic: Vec<(ParamId, Option<Tensor>)> = graph
        .params()
        .iter()
        .map(|(pid, node)| (*pid, grads.get(*node).cloned()))
        .collect();

    let mut perturbed = store.clone();
    let mut entries = Vec::new();
    let mut overall: f64 = 0.0;
    for (pid, ana) in &analytic {
        let numel = store.get(*pid).numel();
        let mut max_err: f64 = 0.0;
        for i in 0..numel {
            let orig = perturbed.get(*pid).data()[i];
            perturbed.get_mut(*pid).data_mut()[i] = orig + eps;
            let f_plus = graph.forward(&perturbed, feeds, loss)?.scalar_value();
            perturbed.get_mut(*pid).data_mut()[i] = orig - eps;
            let f_minus = graph.forward(&perturbed, feeds, loss)?.scalar_value();
            perturbed.get_mut(*pid).data_mut()[i] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = ana.as_ref().map(|t| t.data()[i]).unwrap_or(0.0);
            max_err = max_err.max(rel_err(a, numeric));
        }
        overall = overall.max(max_err);
        entries.push(GradCheckEntry {
            param: *pid,
            name: store.name(*pid).to_string(),
            max_rel_err: max_err,
            pass: max_err <= tol,
        });
    }
    // Restore the true values into the graph's cache.
    graph.forward(store, feeds, loss)?;
    Ok(GradCheckReport { entries, max_rel_err: overall })
}

#[cfg(test)]
mod tests;
