//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Tape`] is a define-by-run graph: every operation appends a node that
//! stores its forward values plus whatever the backward pass needs. Nodes are
//! identified by [`NodeId`] (creation order), so parents always precede
//! children and a single reverse sweep implements backpropagation.
//!
//! Design points that matter to callers:
//!
//! * **Gradient accumulation.** [`Tape::backward`] never clears gradients; it
//!   adds the adjoints of this sweep into each node's `grad` buffer. Calling
//!   it twice therefore yields exactly twice the one-call gradient.
//! * **Precision.** Tapes run 64-bit by default. In [`Precision::F32`] mode
//!   every stored forward value is rounded to the nearest `f32` after each
//!   op, emulating single-precision storage while keeping one code path.
//! * **Instrumentation.** The tape counts multiply-accumulates analytically
//!   (`macs`) and counts the accumulates actually required given zero-valued
//!   inputs (`accs`). Named scopes attribute counts to layers; the energy
//!   ledger is built on these counters.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::shape::{for_each_index, Shape};

/// Handle to a node in a [`Tape`]. Plain index; `Copy` on purpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Storage precision for forward values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Per-scope operation counters over the synaptic ops: matrix products,
/// linear maps, elementwise products and accumulation sums. `macs` is the
/// dense multiply-accumulate count implied by the shapes; `accs` counts only
/// the accumulates that fire given zero inputs (the event-driven cost of a
/// spiking layer). Elementwise state updates — neuron dynamics, scalar
/// shifts, normalisation — are not counted, matching the usual accounting
/// for spiking-network energy estimates.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct OpCount {
    pub macs: u64,
    pub accs: u64,
}

impl OpCount {
    fn add(&mut self, other: OpCount) {
        self.macs += other.macs;
        self.accs += other.accs;
    }
}

/// Batch statistics returned by a train-mode batch-norm op so the owning
/// layer can maintain running estimates.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    /// Biased (1/m) variance, as used for normalization.
    pub var: Vec<f64>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

/// Statistics source for a batch-norm op.
pub enum BnMode {
    /// Normalize with statistics of the current batch (training).
    Batch,
    /// Normalize with externally supplied (running) statistics (evaluation).
    Running { mean: Vec<f64>, var: Vec<f64> },
}

struct BatchNormRecord {
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    channel_axis: usize,
    /// Normalized input, saved for the backward pass.
    xhat: Vec<f64>,
    /// Per-channel 1/sqrt(var + eps).
    inv_std: Vec<f64>,
    /// True when batch statistics were used (couples dx across the batch).
    batch_stats: bool,
}

enum Op {
    Leaf,
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddScalar {
        a: NodeId,
    },
    Scale {
        a: NodeId,
        factor: f64,
    },
    /// Elementwise product with extent-1 broadcasting on either side.
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Maximum {
        a: NodeId,
        b: NodeId,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Permute {
        a: NodeId,
        perm: Vec<usize>,
    },
    Reshape {
        a: NodeId,
    },
    SliceAxis0 {
        a: NodeId,
        start: usize,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    ReduceSum {
        a: NodeId,
        axis: usize,
    },
    Clamp {
        a: NodeId,
        lo: f64,
        hi: f64,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    BatchNorm(Box<BatchNormRecord>),
    /// Heaviside threshold with a rectangular surrogate gradient.
    Spike {
        h: NodeId,
        v_th: f64,
    },
    CrossEntropyMean {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    shape: Shape,
    values: Vec<f64>,
    /// Accumulated gradient; empty unless `requires_grad`.
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Reverse-mode autodiff tape. See the module docs for semantics.
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    scopes: Vec<(String, OpCount)>,
    scope_index: HashMap<String, usize>,
    scope_stack: Vec<usize>,
    total: OpCount,
    count_pause: usize,
    firing: Vec<(String, FiringStat)>,
    firing_index: HashMap<String, usize>,
}

/// Accumulated firing statistics for one named site.
#[derive(Debug, Default, Clone, Copy)]
pub struct FiringStat {
    pub ones: f64,
    pub count: u64,
}

impl FiringStat {
    pub fn rate(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.ones / self.count as f64
        }
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            precision,
            scopes: Vec::new(),
            scope_index: HashMap::new(),
            scope_stack: Vec::new(),
            total: OpCount::default(),
            count_pause: 0,
            firing: Vec::new(),
            firing_index: HashMap::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Round `x` to storage precision.
    #[inline]
    fn q(&self, x: f64) -> f64 {
        match self.precision {
            Precision::F64 => x,
            Precision::F32 => x as f32 as f64,
        }
    }

    fn quantize_vec(&self, mut v: Vec<f64>) -> Vec<f64> {
        if self.precision == Precision::F32 {
            for x in v.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
        v
    }

    fn push(&mut self, shape: Shape, values: Vec<f64>, requires_grad: bool, op: Op) -> NodeId {
        debug_assert_eq!(values.len(), shape.numel());
        let grad = if requires_grad {
            vec![0.0; values.len()]
        } else {
            Vec::new()
        };
        self.nodes.push(Node {
            shape,
            values,
            grad,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn count(&mut self, c: OpCount) {
        if self.count_pause > 0 {
            return;
        }
        self.total.add(c);
        if let Some(&i) = self.scope_stack.last() {
            self.scopes[i].1.add(c);
        }
    }

    /// Suspend op counting until the matching [`Tape::resume_counting`].
    /// Neuron state updates use this: a membrane multiply is not a synaptic
    /// operation. Nests.
    pub fn pause_counting(&mut self) {
        self.count_pause += 1;
    }

    pub fn resume_counting(&mut self) {
        self.count_pause = self.count_pause.saturating_sub(1);
    }

    // ───────────────────────── instrumentation ─────────────────────────

    /// Enter a named counter scope. Counts are attributed to the innermost
    /// active scope only; callers compose hierarchical names themselves.
    pub fn push_scope(&mut self, name: &str) {
        let i = *self.scope_index.entry(name.to_string()).or_insert_with(|| {
            self.scopes.push((name.to_string(), OpCount::default()));
            self.scopes.len() - 1
        });
        self.scope_stack.push(i);
    }

    pub fn pop_scope(&mut self) {
        self.scope_stack.pop();
    }

    /// Counter totals for the whole tape.
    pub fn total_counts(&self) -> OpCount {
        self.total
    }

    /// Counter for a named scope, if any op ran inside it.
    pub fn scope_counts(&self, name: &str) -> Option<OpCount> {
        self.scope_index.get(name).map(|&i| self.scopes[i].1)
    }

    /// All scopes in first-use order.
    pub fn scopes(&self) -> impl Iterator<Item = (&str, OpCount)> {
        self.scopes.iter().map(|(n, c)| (n.as_str(), *c))
    }

    /// Record firing statistics of a (binary) activation under `name`.
    /// Repeated calls with the same name accumulate.
    pub fn log_firing(&mut self, name: &str, node: NodeId) {
        let ones: f64 = self.nodes[node.0].values.iter().sum();
        let count = self.nodes[node.0].values.len() as u64;
        let i = *self.firing_index.entry(name.to_string()).or_insert_with(|| {
            self.firing.push((name.to_string(), FiringStat::default()));
            self.firing.len() - 1
        });
        self.firing[i].1.ones += ones;
        self.firing[i].1.count += count;
    }

    pub fn firing_stats(&self) -> impl Iterator<Item = (&str, FiringStat)> {
        self.firing.iter().map(|(n, s)| (n.as_str(), *s))
    }

    // ───────────────────────── node accessors ─────────────────────────

    pub fn shape(&self, id: NodeId) -> &Shape {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    /// Accumulated gradient of a node. Empty slice if the node does not
    /// require gradients.
    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Reset every accumulated gradient on the tape to zero.
    pub fn zero_all_grads(&mut self) {
        for n in self.nodes.iter_mut() {
            for g in n.grad.iter_mut() {
                *g = 0.0;
            }
        }
    }

    // ───────────────────────── leaf constructors ─────────────────────────

    /// New leaf with explicit values. Gradients are tracked iff
    /// `requires_grad`.
    pub fn leaf(&mut self, shape: Shape, values: Vec<f64>, requires_grad: bool) -> Result<NodeId> {
        if values.len() != shape.numel() {
            return Err(Error::shape(
                "leaf",
                format!("{} values for shape {shape}", values.len()),
            ));
        }
        let values = self.quantize_vec(values);
        Ok(self.push(shape, values, requires_grad, Op::Leaf))
    }

    /// Non-differentiable constant node.
    pub fn constant(&mut self, shape: Shape, values: Vec<f64>) -> Result<NodeId> {
        self.leaf(shape, values, false)
    }

    /// Constant filled with a single value.
    pub fn full(&mut self, shape: Shape, value: f64) -> Result<NodeId> {
        let n = shape.numel();
        self.leaf(shape, vec![value; n], false)
    }

    // ───────────────────────── elementwise ops ─────────────────────────

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::shape("add", format!("{sa} vs {sb}")));
        }
        let shape = sa.clone();
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| self.q(x + y))
            .collect();
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(shape, values, rg, Op::Add { a, b }))
    }

    /// Add a scalar constant to every element.
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.nodes[a.0].shape.clone();
        let values: Vec<f64> = self.nodes[a.0].values.iter().map(|&x| self.q(x + c)).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, values, rg, Op::AddScalar { a })
    }

    /// Multiply every element by a scalar constant.
    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let shape = self.nodes[a.0].shape.clone();
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| self.q(x * factor))
            .collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, values, rg, Op::Scale { a, factor })
    }

    /// Elementwise (Hadamard) product. Ranks must match; axes where one side
    /// has extent 1 broadcast against the other.
    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out_shape = {
            let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
            sa.broadcast_with(sb)?
        };
        let values = broadcast_binary(
            &self.nodes[a.0].values,
            self.nodes[a.0].shape.dims(),
            &self.nodes[b.0].values,
            self.nodes[b.0].shape.dims(),
            out_shape.dims(),
            |x, y| x * y,
        );
        let values = self.quantize_vec(values);
        let nnz_a = self.nodes[a.0].values.iter().filter(|&&v| v != 0.0).count() as u64;
        self.count(OpCount {
            macs: out_shape.numel() as u64,
            accs: nnz_a * (out_shape.numel() / self.nodes[a.0].shape.numel()) as u64,
        });
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(out_shape, values, rg, Op::Mul { a, b }))
    }

    /// Elementwise maximum; shapes must match. The gradient flows to the
    /// larger input (to `a` on ties).
    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::shape("maximum", format!("{sa} vs {sb}")));
        }
        let shape = sa.clone();
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| x.max(y))
            .collect();
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(shape, values, rg, Op::Maximum { a, b }))
    }

    /// Clamp to `[lo, hi]` with the hard-clip subgradient: 1 strictly inside
    /// the interval, 0 at and beyond the bounds.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo < hi) {
            return Err(Error::shape("clamp", format!("need lo < hi, got [{lo}, {hi}]")));
        }
        let shape = self.nodes[a.0].shape.clone();
        let values: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| self.q(x.clamp(lo, hi)))
            .collect();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(shape, values, rg, Op::Clamp { a, lo, hi }))
    }

    // ───────────────────────── structural ops ─────────────────────────

    /// Reorder axes by `perm` (a permutation of `0..rank`).
    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let in_shape = self.nodes[a.0].shape.clone();
        let rank = in_shape.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(
                "permute",
                format!("{perm:?} is not a permutation of 0..{rank}"),
            ));
        }
        let out_dims: Vec<usize> = perm.iter().map(|&p| in_shape.dims()[p]).collect();
        let out_shape = Shape::new(&out_dims)?;
        let in_strides = in_shape.strides();
        let mut values = vec![0.0; out_shape.numel()];
        let mut flat = 0usize;
        for_each_index(&out_dims, |idx| {
            let mut off = 0;
            for (d, &i) in idx.iter().enumerate() {
                off += i * in_strides[perm[d]];
            }
            values[flat] = self.nodes[a.0].values[off];
            flat += 1;
        });
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(out_shape, values, rg, Op::Permute { a, perm: perm.to_vec() }))
    }

    /// Swap the last two axes (rank must be >= 2).
    pub fn transpose_last(&mut self, a: NodeId) -> Result<NodeId> {
        let rank = self.nodes[a.0].shape.rank();
        if rank < 2 {
            return Err(Error::shape("transpose", "rank must be >= 2".to_string()));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    /// Reinterpret the flat data under a new shape of identical length.
    pub fn reshape(&mut self, a: NodeId, dims: &[usize]) -> Result<NodeId> {
        let out_shape = Shape::new(dims)?;
        if out_shape.numel() != self.nodes[a.0].shape.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{} -> {out_shape} changes element count", self.nodes[a.0].shape),
            ));
        }
        let values = self.nodes[a.0].values.clone();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(out_shape, values, rg, Op::Reshape { a }))
    }

    /// Contiguous slice `[start, start+len)` along axis 0.
    pub fn slice_axis0(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let in_shape = self.nodes[a.0].shape.clone();
        let t = in_shape.dims()[0];
        if len == 0 || start + len > t {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) out of range for axis extent {t}", start + len),
            ));
        }
        let mut out_dims = in_shape.dims().to_vec();
        out_dims[0] = len;
        let out_shape = Shape::new(&out_dims)?;
        let inner: usize = in_shape.dims()[1..].iter().product();
        let values = self.nodes[a.0].values[start * inner..(start + len) * inner].to_vec();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(out_shape, values, rg, Op::SliceAxis0 { a, start }))
    }

    /// Concatenate two tensors along `axis`; all other extents must match.
    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        self.concat_many(&[a, b], axis)
    }

    /// N-ary concatenation along `axis`.
    pub fn concat_many(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs".to_string()));
        }
        let rank = self.nodes[parts[0].0].shape.rank();
        if axis >= rank {
            return Err(Error::shape("concat", format!("axis {axis} out of range for rank {rank}")));
        }
        let first_dims = self.nodes[parts[0].0].shape.dims().to_vec();
        let mut out_dims = first_dims.clone();
        out_dims[axis] = 0;
        for &p in parts {
            let d = self.nodes[p.0].shape.dims();
            if d.len() != rank || d.iter().enumerate().any(|(i, &e)| i != axis && e != first_dims[i]) {
                return Err(Error::shape(
                    "concat",
                    format!("part shape {} incompatible along axis {axis}", self.nodes[p.0].shape),
                ));
            }
            out_dims[axis] += d[axis];
        }
        let out_shape = Shape::new(&out_dims)?;
        let outer: usize = out_dims[..axis].iter().product();
        let inner: usize = out_dims[axis + 1..].iter().product();
        let mut values = vec![0.0; out_shape.numel()];
        let mut col = 0usize; // running offset along the concat axis
        for &p in parts {
            let d_axis = self.nodes[p.0].shape.dims()[axis];
            let slab = d_axis * inner;
            for o in 0..outer {
                let src = &self.nodes[p.0].values[o * slab..(o + 1) * slab];
                let dst = (o * out_dims[axis] + col) * inner;
                values[dst..dst + slab].copy_from_slice(src);
            }
            col += d_axis;
        }
        let rg = parts.iter().any(|&p| self.nodes[p.0].requires_grad);
        Ok(self.push(
            out_shape,
            values,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Sum along one axis. With `keepdim` the axis stays with extent 1;
    /// otherwise it is removed (scalar results keep rank 1).
    pub fn reduce_sum(&mut self, a: NodeId, axis: usize, keepdim: bool) -> Result<NodeId> {
        let in_shape = self.nodes[a.0].shape.clone();
        let rank = in_shape.rank();
        if axis >= rank {
            return Err(Error::shape("reduce_sum", format!("axis {axis} out of range for rank {rank}")));
        }
        let dims = in_shape.dims();
        let outer: usize = dims[..axis].iter().product();
        let mid = dims[axis];
        let inner: usize = dims[axis + 1..].iter().product();
        let mut values = vec![0.0; outer * inner];
        let src = &self.nodes[a.0].values;
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for i in 0..inner {
                    values[o * inner + i] += src[base + i];
                }
            }
        }
        let values = self.quantize_vec(values);
        let nnz = src.iter().filter(|&&v| v != 0.0).count() as u64;
        self.count(OpCount {
            macs: in_shape.numel() as u64,
            accs: nnz,
        });
        let mut out_dims: Vec<usize> = if keepdim {
            let mut d = dims.to_vec();
            d[axis] = 1;
            d
        } else {
            dims.iter()
                .enumerate()
                .filter(|&(i, _)| i != axis)
                .map(|(_, &e)| e)
                .collect()
        };
        if out_dims.is_empty() {
            out_dims.push(1);
        }
        let out_shape = Shape::new(&out_dims)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(out_shape, values, rg, Op::ReduceSum { a, axis }))
    }

    /// Mean along one axis (sum followed by a 1/extent scale).
    pub fn reduce_mean(&mut self, a: NodeId, axis: usize, keepdim: bool) -> Result<NodeId> {
        let extent = self.nodes[a.0].shape.dims()[axis];
        let s = self.reduce_sum(a, axis, keepdim)?;
        Ok(self.scale(s, 1.0 / extent as f64))
    }

    // ───────────────────────── linear algebra ─────────────────────────

    /// Batched matrix product. Both inputs must share rank (>= 2); the last
    /// two axes multiply as `[m, k] x [k, p]`, leading axes broadcast.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone());
        let (ra, rb) = (sa.rank(), sb.rank());
        if ra < 2 || rb < 2 || ra != rb {
            return Err(Error::shape(
                "matmul",
                format!("need equal ranks >= 2, got {sa} x {sb}"),
            ));
        }
        let (m, k) = (sa.dims()[ra - 2], sa.dims()[ra - 1]);
        let (k2, p) = (sb.dims()[rb - 2], sb.dims()[rb - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner extents differ: {sa} x {sb}")));
        }
        // Broadcast the leading (batch) axes.
        let batch_a = &sa.dims()[..ra - 2];
        let batch_b = &sb.dims()[..rb - 2];
        let mut batch = Vec::with_capacity(ra - 2);
        for (&x, &y) in batch_a.iter().zip(batch_b) {
            if x == y || y == 1 {
                batch.push(x);
            } else if x == 1 {
                batch.push(y);
            } else {
                return Err(Error::shape("matmul", format!("batch axes incompatible: {sa} x {sb}")));
            }
        }
        let mut out_dims = batch.clone();
        out_dims.push(m);
        out_dims.push(p);
        let out_shape = Shape::new(&out_dims)?;
        let nb: usize = batch.iter().product();
        let mut values = vec![0.0; out_shape.numel()];
        let mut accs = 0u64;
        {
            let av = &self.nodes[a.0].values;
            let bv = &self.nodes[b.0].values;
            for bi in 0..nb {
                let ao = batch_offset(bi, &batch, batch_a) * m * k;
                let bo = batch_offset(bi, &batch, batch_b) * k * p;
                let co = bi * m * p;
                for i in 0..m {
                    for kk in 0..k {
                        let x = av[ao + i * k + kk];
                        if x != 0.0 {
                            accs += p as u64;
                            let brow = bo + kk * p;
                            let crow = co + i * p;
                            for j in 0..p {
                                values[crow + j] += x * bv[brow + j];
                            }
                        }
                    }
                }
            }
        }
        let values = self.quantize_vec(values);
        self.count(OpCount {
            macs: (nb * m * k * p) as u64,
            accs,
        });
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(out_shape, values, rg, Op::MatMul { a, b }))
    }

    /// Affine map over the trailing axis: `y[.., o] = sum_i x[.., i] w[i, o]
    /// (+ b[o])`. `w` is `[c_in, c_out]`, `b` is `[c_out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let sx = self.nodes[x.0].shape.clone();
        let sw = self.nodes[w.0].shape.clone();
        if sw.rank() != 2 {
            return Err(Error::shape("linear", format!("weight must be rank 2, got {sw}")));
        }
        let c_in = *sx.dims().last().unwrap();
        let (wi, wo) = (sw.dims()[0], sw.dims()[1]);
        if wi != c_in {
            return Err(Error::shape(
                "linear",
                format!("input channels {c_in} vs weight rows {wi}"),
            ));
        }
        if let Some(bid) = b {
            let sb = &self.nodes[bid.0].shape;
            if sb.rank() != 1 || sb.dims()[0] != wo {
                return Err(Error::shape("linear", format!("bias shape {sb} vs {wo} outputs")));
            }
        }
        let rows = sx.numel() / c_in;
        let mut out_dims = sx.dims().to_vec();
        *out_dims.last_mut().unwrap() = wo;
        let out_shape = Shape::new(&out_dims)?;
        let mut values = vec![0.0; rows * wo];
        let mut accs = 0u64;
        {
            let xv = &self.nodes[x.0].values;
            let wv = &self.nodes[w.0].values;
            for r in 0..rows {
                let xrow = r * c_in;
                let orow = r * wo;
                for i in 0..c_in {
                    let xi = xv[xrow + i];
                    if xi != 0.0 {
                        accs += wo as u64;
                        let wrow = i * wo;
                        for o in 0..wo {
                            values[orow + o] += xi * wv[wrow + o];
                        }
                    }
                }
            }
            if let Some(bid) = b {
                let bv = &self.nodes[bid.0].values;
                for r in 0..rows {
                    for o in 0..wo {
                        values[r * wo + o] += bv[o];
                    }
                }
            }
        }
        let values = self.quantize_vec(values);
        self.count(OpCount {
            macs: (rows * c_in * wo) as u64,
            accs,
        });
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[w.0].requires_grad
            || b.map(|bid| self.nodes[bid.0].requires_grad).unwrap_or(false);
        Ok(self.push(out_shape, values, rg, Op::Linear { x, w, b }))
    }

    /// Batch normalization along `channel_axis` with learnable per-channel
    /// `gamma`/`beta`. In [`BnMode::Batch`] the op normalizes with this
    /// batch's biased statistics and returns them so the caller can update
    /// running estimates; in [`BnMode::Running`] it uses the supplied ones.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        channel_axis: usize,
        eps: f64,
        mode: BnMode,
    ) -> Result<(NodeId, Option<BnBatchStats>)> {
        let sx = self.nodes[x.0].shape.clone();
        let rank = sx.rank();
        if channel_axis >= rank {
            return Err(Error::shape(
                "batch_norm",
                format!("channel axis {channel_axis} out of range for rank {rank}"),
            ));
        }
        let c = sx.dims()[channel_axis];
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let s = &self.nodes[id.0].shape;
            if s.rank() != 1 || s.dims()[0] != c {
                return Err(Error::shape("batch_norm", format!("{name} shape {s}, expected [{c}]")));
            }
        }
        let m = sx.numel() / c;
        if m == 0 {
            return Err(Error::shape("batch_norm", "empty reduction".to_string()));
        }
        let outer: usize = sx.dims()[..channel_axis].iter().product();
        let inner: usize = sx.dims()[channel_axis + 1..].iter().product();
        let xv = &self.nodes[x.0].values;

        let (mean, var, batch_stats) = match &mode {
            BnMode::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for i in 0..inner {
                            mean[ch] += xv[base + i];
                        }
                    }
                }
                for v in mean.iter_mut() {
                    *v /= m as f64;
                }
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for i in 0..inner {
                            let d = xv[base + i] - mean[ch];
                            var[ch] += d * d;
                        }
                    }
                }
                for v in var.iter_mut() {
                    *v /= m as f64;
                }
                (mean, var, true)
            }
            BnMode::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape(
                        "batch_norm",
                        format!("running stats length {} vs {c} channels", mean.len()),
                    ));
                }
                (mean.clone(), var.clone(), false)
            }
        };

        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let gv = &self.nodes[gamma.0].values;
        let bv = &self.nodes[beta.0].values;
        let mut xhat = vec![0.0; sx.numel()];
        let mut values = vec![0.0; sx.numel()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in 0..inner {
                    let h = (xv[base + i] - mean[ch]) * inv_std[ch];
                    xhat[base + i] = h;
                    values[base + i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let values = self.quantize_vec(values);
        let stats = batch_stats.then(|| BnBatchStats {
            mean: mean.clone(),
            var: var.clone(),
            count: m,
        });
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[gamma.0].requires_grad
            || self.nodes[beta.0].requires_grad;
        let id = self.push(
            sx,
            values,
            rg,
            Op::BatchNorm(Box::new(BatchNormRecord {
                x,
                gamma,
                beta,
                channel_axis,
                xhat,
                inv_std,
                batch_stats,
            })),
        );
        Ok((id, stats))
    }

    // ───────────────────────── spiking / loss ─────────────────────────

    /// Heaviside threshold: 1 where `h >= v_th`, else 0. The backward pass
    /// uses the rectangular surrogate `(1/v_th) * 1[v_th/2 < h < 3 v_th/2]`.
    pub fn spike(&mut self, h: NodeId, v_th: f64) -> Result<NodeId> {
        if !(v_th > 0.0) {
            return Err(Error::shape("spike", format!("threshold must be positive, got {v_th}")));
        }
        let shape = self.nodes[h.0].shape.clone();
        let values: Vec<f64> = self.nodes[h.0]
            .values
            .iter()
            .map(|&x| if x >= v_th { 1.0 } else { 0.0 })
            .collect();
        let rg = self.nodes[h.0].requires_grad;
        Ok(self.push(shape, values, rg, Op::Spike { h, v_th }))
    }

    /// Mean cross-entropy of `logits` (`[batch, classes]`) against integer
    /// targets. Numerically stabilized log-softmax; returns a scalar node.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let s = self.nodes[logits.0].shape.clone();
        if s.rank() != 2 {
            return Err(Error::shape("cross_entropy", format!("logits must be [batch, classes], got {s}")));
        }
        let (bsz, l) = (s.dims()[0], s.dims()[1]);
        if targets.len() != bsz {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for batch {bsz}", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= l) {
            return Err(Error::shape("cross_entropy", format!("target {t} out of range for {l} classes")));
        }
        let lv = &self.nodes[logits.0].values;
        let mut probs = vec![0.0; bsz * l];
        let mut loss = 0.0;
        for bi in 0..bsz {
            let row = &lv[bi * l..(bi + 1) * l];
            let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &v in row {
                denom += (v - maxv).exp();
            }
            let lse = maxv + denom.ln();
            loss += lse - row[targets[bi]];
            for (j, &v) in row.iter().enumerate() {
                probs[bi * l + j] = (v - lse).exp();
            }
        }
        loss = self.q(loss / bsz as f64);
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            Shape::new(&[1])?,
            vec![loss],
            rg,
            Op::CrossEntropyMean {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    // ───────────────────────── backward ─────────────────────────

    /// Reverse sweep from the scalar node `out`. Adds this sweep's adjoints
    /// into each node's accumulated `grad`; never clears existing gradients.
    pub fn backward(&mut self, out: NodeId) -> Result<()> {
        if self.nodes[out.0].shape.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {}", self.nodes[out.0].shape),
            ));
        }
        if !self.nodes[out.0].requires_grad {
            return Err(Error::shape("backward", "output does not require gradients".to_string()));
        }
        let n = out.0 + 1;
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
        adj.resize_with(n, || None);
        adj[out.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            if node.requires_grad {
                for (dst, src) in node.grad.iter_mut().zip(&g) {
                    *dst += src;
                }
            }
        }
        Ok(())
    }

    /// Add `g ⋅ ∂node_i/∂parent` into each differentiable parent's adjoint.
    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        // Local helper: lazily materialize a parent's adjoint buffer.
        macro_rules! buf {
            ($id:expr) => {{
                let len = self.nodes[$id.0].values.len();
                adj[$id.0].get_or_insert_with(|| vec![0.0; len])
            }};
        }
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                for &p in [a, b].iter() {
                    if wants(*p) {
                        let pb = buf!(*p);
                        for (d, s) in pb.iter_mut().zip(g) {
                            *d += s;
                        }
                    }
                }
            }
            Op::AddScalar { a } => {
                if wants(*a) {
                    let pb = buf!(*a);
                    for (d, s) in pb.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::Scale { a, factor } => {
                if wants(*a) {
                    let f = *factor;
                    let pb = buf!(*a);
                    for (d, s) in pb.iter_mut().zip(g) {
                        *d += f * s;
                    }
                }
            }
            Op::Mul { a, b } => {
                let out_dims = self.nodes[i].shape.dims().to_vec();
                for (p, other) in [(*a, *b), (*b, *a)] {
                    if wants(p) {
                        // dL/dp = sum over broadcast axes of g * other.
                        let contrib = broadcast_binary(
                            g,
                            &out_dims,
                            &self.nodes[other.0].values,
                            self.nodes[other.0].shape.dims(),
                            &out_dims,
                            |x, y| x * y,
                        );
                        let reduced =
                            reduce_to_shape(&contrib, &out_dims, self.nodes[p.0].shape.dims());
                        let pb = buf!(p);
                        for (d, s) in pb.iter_mut().zip(&reduced) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Maximum { a, b } => {
                let av = &self.nodes[a.0].values;
                let bv = &self.nodes[b.0].values;
                if wants(*a) {
                    let pb = buf!(*a);
                    for (j, (d, s)) in pb.iter_mut().zip(g).enumerate() {
                        if av[j] >= bv[j] {
                            *d += s;
                        }
                    }
                }
                if wants(*b) {
                    let pb = buf!(*b);
                    for (j, (d, s)) in pb.iter_mut().zip(g).enumerate() {
                        if av[j] < bv[j] {
                            *d += s;
                        }
                    }
                }
            }
            Op::Clamp { a, lo, hi } => {
                if wants(*a) {
                    let av = &self.nodes[a.0].values;
                    let (lo, hi) = (*lo, *hi);
                    let pb = buf!(*a);
                    for (j, (d, s)) in pb.iter_mut().zip(g).enumerate() {
                        if av[j] > lo && av[j] < hi {
                            *d += s;
                        }
                    }
                }
            }
            Op::Permute { a, perm } => {
                if wants(*a) {
                    let out_dims = self.nodes[i].shape.dims().to_vec();
                    let in_strides = self.nodes[a.0].shape.strides();
                    let pb = buf!(*a);
                    let mut flat = 0usize;
                    for_each_index(&out_dims, |idx| {
                        let mut off = 0;
                        for (d, &ix) in idx.iter().enumerate() {
                            off += ix * in_strides[perm[d]];
                        }
                        pb[off] += g[flat];
                        flat += 1;
                    });
                }
            }
            Op::Reshape { a } => {
                if wants(*a) {
                    let pb = buf!(*a);
                    for (d, s) in pb.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::SliceAxis0 { a, start } => {
                if wants(*a) {
                    let inner: usize = self.nodes[a.0].shape.dims()[1..].iter().product();
                    let off = start * inner;
                    let pb = buf!(*a);
                    for (j, s) in g.iter().enumerate() {
                        pb[off + j] += s;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let out_dims = self.nodes[i].shape.dims().to_vec();
                let outer: usize = out_dims[..*axis].iter().product();
                let inner: usize = out_dims[*axis + 1..].iter().product();
                let mut col = 0usize;
                for &p in parts {
                    let d_axis = self.nodes[p.0].shape.dims()[*axis];
                    let slab = d_axis * inner;
                    if wants(p) {
                        let pb = buf!(p);
                        for o in 0..outer {
                            let src = (o * out_dims[*axis] + col) * inner;
                            for j in 0..slab {
                                pb[o * slab + j] += g[src + j];
                            }
                        }
                    }
                    col += d_axis;
                }
            }
            Op::ReduceSum { a, axis } => {
                if wants(*a) {
                    let dims = self.nodes[a.0].shape.dims().to_vec();
                    let outer: usize = dims[..*axis].iter().product();
                    let mid = dims[*axis];
                    let inner: usize = dims[*axis + 1..].iter().product();
                    let pb = buf!(*a);
                    for o in 0..outer {
                        for m in 0..mid {
                            let base = (o * mid + m) * inner;
                            for j in 0..inner {
                                pb[base + j] += g[o * inner + j];
                            }
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let sa = self.nodes[a.0].shape.dims().to_vec();
                let sb = self.nodes[b.0].shape.dims().to_vec();
                let ra = sa.len();
                let (m, k) = (sa[ra - 2], sa[ra - 1]);
                let p = sb[ra - 1];
                let batch: Vec<usize> = self.nodes[i].shape.dims()[..ra - 2].to_vec();
                let nb: usize = batch.iter().product();
                let batch_a = &sa[..ra - 2];
                let batch_b = &sb[..ra - 2];
                let av = &self.nodes[a.0].values;
                let bv = &self.nodes[b.0].values;
                if wants(*a) {
                    let pb = buf!(*a);
                    for bi in 0..nb {
                        let ao = batch_offset(bi, &batch, batch_a) * m * k;
                        let bo = batch_offset(bi, &batch, batch_b) * k * p;
                        let co = bi * m * p;
                        // dA = dC · Bᵀ
                        for ii in 0..m {
                            for kk in 0..k {
                                let mut s = 0.0;
                                for j in 0..p {
                                    s += g[co + ii * p + j] * bv[bo + kk * p + j];
                                }
                                pb[ao + ii * k + kk] += s;
                            }
                        }
                    }
                }
                if wants(*b) {
                    let pb = buf!(*b);
                    for bi in 0..nb {
                        let ao = batch_offset(bi, &batch, batch_a) * m * k;
                        let bo = batch_offset(bi, &batch, batch_b) * k * p;
                        let co = bi * m * p;
                        // dB = Aᵀ · dC
                        for kk in 0..k {
                            for ii in 0..m {
                                let x = av[ao + ii * k + kk];
                                if x != 0.0 {
                                    for j in 0..p {
                                        pb[bo + kk * p + j] += x * g[co + ii * p + j];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let c_in = *self.nodes[x.0].shape.dims().last().unwrap();
                let wo = self.nodes[w.0].shape.dims()[1];
                let rows = self.nodes[x.0].shape.numel() / c_in;
                let xv = &self.nodes[x.0].values;
                let wv = &self.nodes[w.0].values;
                if wants(*x) {
                    let pb = buf!(*x);
                    for r in 0..rows {
                        for ii in 0..c_in {
                            let mut s = 0.0;
                            for o in 0..wo {
                                s += g[r * wo + o] * wv[ii * wo + o];
                            }
                            pb[r * c_in + ii] += s;
                        }
                    }
                }
                if wants(*w) {
                    let pb = buf!(*w);
                    for r in 0..rows {
                        for ii in 0..c_in {
                            let xi = xv[r * c_in + ii];
                            if xi != 0.0 {
                                for o in 0..wo {
                                    pb[ii * wo + o] += xi * g[r * wo + o];
                                }
                            }
                        }
                    }
                }
                if let Some(bid) = b {
                    if wants(*bid) {
                        let pb = buf!(*bid);
                        for r in 0..rows {
                            for o in 0..wo {
                                pb[o] += g[r * wo + o];
                            }
                        }
                    }
                }
            }
            Op::BatchNorm(rec) => {
                let c = self.nodes[rec.gamma.0].shape.dims()[0];
                let sx = self.nodes[rec.x.0].shape.dims().to_vec();
                let outer: usize = sx[..rec.channel_axis].iter().product();
                let inner: usize = sx[rec.channel_axis + 1..].iter().product();
                let m = (outer * inner) as f64;
                let gv = &self.nodes[rec.gamma.0].values;

                // Per-channel reductions shared by all three gradients.
                let mut sum_g = vec![0.0; c];
                let mut sum_g_xhat = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for j in 0..inner {
                            sum_g[ch] += g[base + j];
                            sum_g_xhat[ch] += g[base + j] * rec.xhat[base + j];
                        }
                    }
                }
                if wants(rec.gamma) {
                    let pb = buf!(rec.gamma);
                    for ch in 0..c {
                        pb[ch] += sum_g_xhat[ch];
                    }
                }
                if wants(rec.beta) {
                    let pb = buf!(rec.beta);
                    for ch in 0..c {
                        pb[ch] += sum_g[ch];
                    }
                }
                if wants(rec.x) {
                    let pb = buf!(rec.x);
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            let k = gv[ch] * rec.inv_std[ch];
                            for j in 0..inner {
                                let gj = g[base + j];
                                let dx = if rec.batch_stats {
                                    k * (gj
                                        - sum_g[ch] / m
                                        - rec.xhat[base + j] * sum_g_xhat[ch] / m)
                                } else {
                                    k * gj
                                };
                                pb[base + j] += dx;
                            }
                        }
                    }
                }
            }
            Op::Spike { h, v_th } => {
                if wants(*h) {
                    let hv = &self.nodes[h.0].values;
                    let (lo, hi) = (0.5 * v_th, 1.5 * v_th);
                    let inv = 1.0 / v_th;
                    let pb = buf!(*h);
                    for (j, s) in g.iter().enumerate() {
                        if hv[j] > lo && hv[j] < hi {
                            pb[j] += inv * s;
                        }
                    }
                }
            }
            Op::CrossEntropyMean {
                logits,
                targets,
                probs,
            } => {
                if wants(*logits) {
                    let l = self.nodes[logits.0].shape.dims()[1];
                    let bsz = targets.len();
                    let scale = g[0] / bsz as f64;
                    let pb = buf!(*logits);
                    for bi in 0..bsz {
                        for j in 0..l {
                            let one = if j == targets[bi] { 1.0 } else { 0.0 };
                            pb[bi * l + j] += scale * (probs[bi * l + j] - one);
                        }
                    }
                }
            }
        }
    }
}

/// Flat offset of broadcast batch index `bi` (over `out_batch`) into a tensor
/// whose batch dims are `in_batch` (extent-1 axes rewind to 0).
fn batch_offset(bi: usize, out_batch: &[usize], in_batch: &[usize]) -> usize {
    let mut rem = bi;
    let mut off = 0usize;
    let mut stride = 1usize;
    // Decompose bi over out_batch (row-major), build offset over in_batch.
    let mut idx = vec![0usize; out_batch.len()];
    for d in (0..out_batch.len()).rev() {
        idx[d] = rem % out_batch[d];
        rem /= out_batch[d];
    }
    for d in (0..in_batch.len()).rev() {
        let i = if in_batch[d] == 1 { 0 } else { idx[d] };
        off += i * stride;
        stride *= in_batch[d];
    }
    off
}

/// Elementwise binary op with extent-1 broadcasting, writing the result over
/// `out_dims`.
fn broadcast_binary(
    a: &[f64],
    a_dims: &[usize],
    b: &[f64],
    b_dims: &[usize],
    out_dims: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let a_strides = broadcast_strides(a_dims, out_dims);
    let b_strides = broadcast_strides(b_dims, out_dims);
    let n: usize = out_dims.iter().product();
    let mut out = vec![0.0; n];
    let mut flat = 0usize;
    for_each_index(out_dims, |idx| {
        let mut ao = 0;
        let mut bo = 0;
        for (d, &i) in idx.iter().enumerate() {
            ao += i * a_strides[d];
            bo += i * b_strides[d];
        }
        out[flat] = f(a[ao], b[bo]);
        flat += 1;
    });
    out
}

/// Row-major strides with zeros on broadcast (extent-1) axes.
fn broadcast_strides(dims: &[usize], out_dims: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; dims.len()];
    let mut s = 1usize;
    for d in (0..dims.len()).rev() {
        strides[d] = if dims[d] == 1 && out_dims[d] != 1 { 0 } else { s };
        s *= dims[d];
    }
    strides
}

/// Sum `data` (shaped `from_dims`) down to `to_dims` over the axes where
/// `to_dims` has extent 1.
fn reduce_to_shape(data: &[f64], from_dims: &[usize], to_dims: &[usize]) -> Vec<f64> {
    if from_dims == to_dims {
        return data.to_vec();
    }
    let to_strides = broadcast_strides(to_dims, from_dims);
    let n: usize = to_dims.iter().product();
    let mut out = vec![0.0; n];
    let mut flat = 0usize;
    for_each_index(from_dims, |idx| {
        let mut off = 0;
        for (d, &i) in idx.iter().enumerate() {
            off += i * to_strides[d];
        }
        out[off] += data[flat];
        flat += 1;
    });
    out
}
