use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{BoundParams, GradientMap, NodeRef, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

fn next_graph_id() -> u64 {
    NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed)
}

/// Softplus with the large-argument branch returning `x` to keep `exp` finite.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_grad(x: f64) -> f64 {
    if x > 30.0 {
        1.0
    } else {
        sigmoid(x)
    }
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Backward rule for an operation whose forward pass is computed outside the
/// graph (fused sequence kernels).
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient buffer per input (None when the input does not
    /// need one). `inputs` holds the forward input values in call order.
    fn backward(&self, inputs: &[&[f64]], grad: &[f64]) -> Result<Vec<Option<Vec<f64>>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Exp,
    Softplus,
    Silu,
    Relu,
    Scale,
    Sum,
    Mean,
    Reshape,
    Transpose,
    Reverse,
    Narrow,
    Select,
    MeanAxis0,
    LayerNorm,
    RmsNorm,
    Custom(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Exp,
    Softplus,
    Silu,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone)]
struct Input {
    node: Option<usize>,
    value: Arc<Vec<f64>>,
}

enum Op {
    Leaf(ParamId, Vec<usize>),
    MatMul { a: Input, b: Input, m: usize, k: usize, p: usize },
    Binary { kind: Binary, a: Input, b: Input },
    Unary { kind: Unary, x: Input },
    Scale { x: Input, c: f64 },
    Sum { x: Input },
    Mean { x: Input },
    Reshape { x: Input },
    Transpose { x: Input, rows: usize, cols: usize },
    Reverse { x: Input, outer: usize, len: usize, inner: usize },
    Narrow { x: Input, width: usize, start: usize, len: usize },
    Select { x: Input, index: usize },
    MeanAxis0 { x: Input, rows: usize },
    LayerNorm { x: Input, gain: Input, bias: Input, xhat: Vec<f64>, rstd: Vec<f64> },
    RmsNorm { x: Input, gain: Input, rstd: Vec<f64> },
    Custom { inputs: Vec<Input>, op: Box<dyn CustomOp> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf(..) => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Binary { kind, .. } => match kind {
                Binary::Add => OpKind::Add,
                Binary::Sub => OpKind::Sub,
                Binary::Mul => OpKind::Mul,
            },
            Op::Unary { kind, .. } => match kind {
                Unary::Exp => OpKind::Exp,
                Unary::Softplus => OpKind::Softplus,
                Unary::Silu => OpKind::Silu,
                Unary::Relu => OpKind::Relu,
            },
            Op::Scale { .. } => OpKind::Scale,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Reverse { .. } => OpKind::Reverse,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Select { .. } => OpKind::Select,
            Op::MeanAxis0 { .. } => OpKind::MeanAxis0,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::RmsNorm { .. } => OpKind::RmsNorm,
            Op::Custom { op, .. } => OpKind::Custom(op.name()),
        }
    }
}

struct Node {
    op: Op,
    numel: usize,
}

/// Tape of traced operations. One graph per forward pass; `backward`
/// consumes it.
pub struct Graph {
    id: u64,
    trace: bool,
    nodes: Vec<Node>,
    consumed: bool,
    macs: u64,
    corrupt: Option<OpKind>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A recording graph.
    pub fn new() -> Self {
        Graph {
            id: next_graph_id(),
            trace: true,
            nodes: Vec::new(),
            consumed: false,
            macs: 0,
            corrupt: None,
        }
    }

    /// A graph that never records: parameters bind as constants and every
    /// operation simply evaluates.
    pub fn no_grad() -> Self {
        Graph {
            trace: false,
            ..Self::new()
        }
    }

    /// Test fixture: scales every gradient produced by `kind` by 1.1.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, kind: OpKind) {
        self.corrupt = Some(kind);
    }

    pub fn is_tracing(&self) -> bool {
        self.trace
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by matmuls and fused kernels so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn add_macs(&mut self, n: u64) {
        self.macs += n;
    }

    /// Drops all recorded nodes. Tensors from before the reset are rejected.
    pub fn reset(&mut self) {
        self.id = next_graph_id();
        self.nodes.clear();
        self.consumed = false;
        self.macs = 0;
    }

    /// Registers `value` as a trainable leaf.
    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Tensor {
        if !self.trace || self.consumed {
            return value.detach();
        }
        let node = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf(id, value.shape().to_vec()),
            numel: value.numel(),
        });
        Tensor::from_parts(
            value.shape().to_vec(),
            value.shared_data(),
            Some(NodeRef { graph: self.id, node }),
        )
    }

    pub fn bind(&mut self, store: &ParamStore) -> BoundParams {
        let tensors = store.ids().map(|id| self.param(id, store.get(id))).collect();
        BoundParams { tensors }
    }

    fn input(&self, t: &Tensor) -> Result<Input> {
        let node = match t.node() {
            Some(r) if r.graph != self.id => {
                return Err(Error::Graph("tensor belongs to a different or reset graph".into()))
            }
            Some(_) if self.consumed => {
                return Err(Error::Graph("graph already consumed by backward".into()))
            }
            Some(r) => Some(r.node),
            None => None,
        };
        Ok(Input {
            node,
            value: t.shared_data(),
        })
    }

    fn emit(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, traced: bool) -> Tensor {
        let data = Arc::new(value);
        if !traced {
            return Tensor::from_parts(shape, data, None);
        }
        let node = self.nodes.len();
        self.nodes.push(Node {
            op,
            numel: data.len(),
        });
        Tensor::from_parts(shape, data, Some(NodeRef { graph: self.id, node }))
    }

    // ── linear algebra ───────────────────────────────────────────────

    /// `a[..., k] × b[k, p] → [..., p]`. Leading axes of `a` are flattened
    /// into the row dimension.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() < 2 || b.rank() != 2 || a.shape()[a.rank() - 1] != b.shape()[0] {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let k = b.shape()[0];
        let p = b.shape()[1];
        let m = a.numel() / k;
        let out = matmul_raw(a.data(), b.data(), m, k, p);
        self.macs += (m * k * p) as u64;
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = p;
        let (ia, ib) = (self.input(a)?, self.input(b)?);
        let traced = ia.node.is_some() || ib.node.is_some();
        Ok(self.emit(Op::MatMul { a: ia, b: ib, m, k, p }, shape, out, traced))
    }

    // ── element-wise ─────────────────────────────────────────────────

    fn binary(&mut self, kind: Binary, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let op_name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::shape(op_name, a.shape(), b.shape()))?;
        let n: usize = shape.iter().product();
        let (ad, bd) = (a.data(), b.data());
        let (la, lb) = (ad.len(), bd.len());
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
        };
        let out: Vec<f64> = if la == n && lb == n {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(ad[i % la], bd[i % lb])).collect()
        };
        let (ia, ib) = (self.input(a)?, self.input(b)?);
        let traced = ia.node.is_some() || ib.node.is_some();
        Ok(self.emit(Op::Binary { kind, a: ia, b: ib }, shape, out, traced))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(Binary::Mul, a, b)
    }

    fn unary(&mut self, kind: Unary, x: &Tensor) -> Result<Tensor> {
        let f = match kind {
            Unary::Exp => f64::exp,
            Unary::Softplus => softplus,
            Unary::Silu => |v: f64| v * sigmoid(v),
            Unary::Relu => |v: f64| v.max(0.0),
        };
        let out = x.data().iter().map(|&v| f(v)).collect();
        let ix = self.input(x)?;
        let traced = ix.node.is_some();
        Ok(self.emit(Op::Unary { kind, x: ix }, x.shape().to_vec(), out, traced))
    }

    pub fn exp(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(Unary::Exp, x)
    }

    /// `ln(1 + eˣ)`, returning `x` itself for `x > 30`.
    pub fn softplus(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(Unary::Softplus, x)
    }

    pub fn silu(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(Unary::Silu, x)
    }

    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(Unary::Relu, x)
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        let out = x.data().iter().map(|&v| v * c).collect();
        let ix = self.input(x)?;
        let traced = ix.node.is_some();
        Ok(self.emit(Op::Scale { x: ix, c }, x.shape().to_vec(), out, traced))
    }

    pub fn sum(&mut self, x: &Tensor) -> Result<Tensor> {
        let s = x.data().iter().sum();
        let ix = self.input(x)?;
        let traced = ix.node.is_some();
        Ok(self.emit(Op::Sum { x: ix }, vec![1], vec![s], traced))
    }

    pub fn mean(&mut self, x: &Tensor) -> Result<Tensor> {
        let s: f64 = x.data().iter().sum();
        let ix = self.input(x)?;
        let traced = ix.node.is_some();
        Ok(self.emit(Op::Mean { x: ix }, vec![1], vec![s / x.numel() as f64], traced))
    }

    // ── structural ───────────────────────────────────────────────────

    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != x.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", x.shape(), shape));
        }
        let ix = self.input(x)?;
        if ix.node.is_none() {
            return Ok(Tensor::from_parts(shape.to_vec(), x.shared_data(), None));
        }
        let node = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Reshape { x: ix },
            numel: x.numel(),
        });
        Ok(Tensor::from_parts(
            shape.to_vec(),
            x.shared_data(),
            Some(NodeRef { graph: self.id, node }),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.rank() < 2 {
            return Err(Error::Rank {
                op: "transpose",
                detail: format!("needs rank >= 2, got {:?}", x.shape()),
            });
        }
        let r = x.rank();
        let (rows, cols) = (x.shape()[r - 2], x.shape()[r - 1]);
        let out = transpose_raw(x.data(), rows, cols);
        let mut shape = x.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let ix = self.input(x)?;
        let traced = ix.node.is_some();
        Ok(self.emit(Op::Transpose { x: ix, rows, cols }, shape, out, traced))
    }

    /// Reverses the order of entries along `axis`.
    pub fn reverse(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= x.rank() {
            return Err(Error::Rank {
                op: "reverse",
                detail: format!("axis {} out of range for {:?}", axis, x.shape()),
            });
        }
        let outer: usize = x.shape()[..axis].iter().product();
        let len = x.shape()[axis];
        let inner: usize = x.shape()[axis + 1..].iter().product();
        let out = reverse_raw(x.data(), outer, len, inner);
        let ix = self.input(x)?;
        let traced = ix.node.is_some();
        Ok(self.emit(Op::Reverse { x: ix, outer, len, inner }, x.shape().to_vec(), out, traced))
    }

    /// Slice `[start, start + len)` of the last axis.
    pub fn narrow(&mut self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let width = *x.shape().last().ok_or(Error::EmptyAxis { op: "narrow" })?;
        if len == 0 || start + len > width {
            return Err(Error::Rank {
                op: "narrow",
                detail: format!("slice {}..{} of axis with {}", start, start + len, width),
            });
        }
        let out: Vec<f64> = x
            .data()
            .chunks_exact(width)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let ix = self.input(x)?;
        let traced = ix.node.is_some();
        Ok(self.emit(Op::Narrow { x: ix, width, start, len }, shape, out, traced))
    }

    /// Single entry (flat index) as a one-element tensor.
    pub fn select(&mut self, x: &Tensor, index: usize) -> Result<Tensor> {
        if index >= x.numel() {
            return Err(Error::Rank {
                op: "select",
                detail: format!("index {} out of range for {:?}", index, x.shape()),
            });
        }
        let v = x.data()[index];
        let ix = self.input(x)?;
        let traced = ix.node.is_some();
        Ok(self.emit(Op::Select { x: ix, index }, vec![1], vec![v], traced))
    }

    /// Mean over the leading axis.
    pub fn mean_axis0(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.rank() < 2 {
            return Err(Error::Rank {
                op: "mean_axis0",
                detail: format!("needs rank >= 2, got {:?}", x.shape()),
            });
        }
        let rows = x.shape()[0];
        let width = x.numel() / rows;
        let mut out = vec![0.0; width];
        for row in x.data().chunks_exact(width) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        let ix = self.input(x)?;
        let traced = ix.node.is_some();
        Ok(self.emit(Op::MeanAxis0 { x: ix, rows }, x.shape()[1..].to_vec(), out, traced))
    }

    // ── normalization ────────────────────────────────────────────────

    /// Standardizes the last axis (population variance), then applies
    /// `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *x.shape().last().ok_or(Error::EmptyAxis { op: "layer_norm" })?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
        }
        if !(eps > 0.0) {
            return Err(Error::Domain(format!("layer_norm eps must be positive, got {}", eps)));
        }
        let rows = x.numel() / d;
        let (g, b) = (gain.data(), bias.data());
        let mut xhat = Vec::with_capacity(x.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks_exact(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let (ix, ig, ib) = (self.input(x)?, self.input(gain)?, self.input(bias)?);
        let traced = ix.node.is_some() || ig.node.is_some() || ib.node.is_some();
        let op = if traced {
            Op::LayerNorm { x: ix, gain: ig, bias: ib, xhat, rstd }
        } else {
            Op::LayerNorm { x: ix, gain: ig, bias: ib, xhat: Vec::new(), rstd: Vec::new() }
        };
        Ok(self.emit(op, x.shape().to_vec(), out, traced))
    }

    /// `gain ⊙ x / sqrt(mean(x²) + eps)` over the last axis.
    pub fn rms_norm(&mut self, x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *x.shape().last().ok_or(Error::EmptyAxis { op: "rms_norm" })?;
        if gain.shape() != [d] {
            return Err(Error::shape("rms_norm", x.shape(), gain.shape()));
        }
        if !(eps > 0.0) {
            return Err(Error::Domain(format!("rms_norm eps must be positive, got {}", eps)));
        }
        let g = gain.data();
        let mut rstd = Vec::with_capacity(x.numel() / d);
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks_exact(d) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = 1.0 / (ms + eps).sqrt();
            rstd.push(r);
            out.extend(row.iter().zip(g).map(|(v, gj)| gj * v * r));
        }
        let (ix, ig) = (self.input(x)?, self.input(gain)?);
        let traced = ix.node.is_some() || ig.node.is_some();
        Ok(self.emit(Op::RmsNorm { x: ix, gain: ig, rstd }, x.shape().to_vec(), out, traced))
    }

    // ── extension point ──────────────────────────────────────────────

    /// Records an externally computed forward result together with its
    /// backward rule.
    pub fn custom(&mut self, inputs: &[&Tensor], shape: Vec<usize>, value: Vec<f64>, op: Box<dyn CustomOp>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::Rank {
                op: "custom",
                detail: format!("{}: shape {:?} vs {} values", op.name(), shape, value.len()),
            });
        }
        let inputs = inputs.iter().map(|t| self.input(t)).collect::<Result<Vec<_>>>()?;
        let traced = inputs.iter().any(|i| i.node.is_some());
        Ok(self.emit(Op::Custom { inputs, op }, shape, value, traced))
    }

    // ── reverse pass ─────────────────────────────────────────────────

    /// Gradients of a scalar `loss` with respect to every bound parameter.
    /// Parameters the loss does not depend on receive zeros. The graph is
    /// consumed: a second call fails until [`Graph::reset`].
    pub fn backward(&mut self, loss: &Tensor) -> Result<GradientMap> {
        if self.consumed {
            return Err(Error::Graph("backward called on a consumed graph".into()));
        }
        if loss.numel() != 1 {
            return Err(Error::Rank {
                op: "backward",
                detail: format!("loss must be scalar, got shape {:?}", loss.shape()),
            });
        }
        let root = match loss.node() {
            Some(r) if r.graph == self.id => r.node,
            Some(_) => return Err(Error::Graph("loss belongs to a different graph".into())),
            None => return Err(Error::Graph("loss is not traced".into())),
        };

        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root] = Some(vec![1.0]);
        let mut leaf: BTreeMap<ParamId, Vec<f64>> = BTreeMap::new();

        for idx in (0..=root).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let factor = if self.corrupt == Some(node.op.kind()) { 1.1 } else { 1.0 };
            let push = |grads: &mut Vec<Option<Vec<f64>>>, input: &Input, mut contrib: Vec<f64>| {
                if let Some(n) = input.node {
                    if factor != 1.0 {
                        contrib.iter_mut().for_each(|v| *v *= factor);
                    }
                    accumulate(&mut grads[n], contrib);
                }
            };
            match &node.op {
                Op::Leaf(id, _) => match leaf.get_mut(id) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                    None => {
                        leaf.insert(*id, g);
                    }
                },
                Op::MatMul { a, b, m, k, p } => {
                    if a.node.is_some() {
                        // g[m,p] · bᵀ[p,k]
                        let bt = transpose_raw(&b.value, *k, *p);
                        push(&mut grads, a, matmul_raw(&g, &bt, *m, *p, *k));
                    }
                    if b.node.is_some() {
                        let at = transpose_raw(&a.value, *m, *k);
                        push(&mut grads, b, matmul_raw(&at, &g, *k, *m, *p));
                    }
                }
                Op::Binary { kind, a, b } => {
                    let n = g.len();
                    let (la, lb) = (a.value.len(), b.value.len());
                    if a.node.is_some() {
                        let mut ga = vec![0.0; la];
                        for i in 0..n {
                            ga[i % la] += match kind {
                                Binary::Add | Binary::Sub => g[i],
                                Binary::Mul => g[i] * b.value[i % lb],
                            };
                        }
                        push(&mut grads, a, ga);
                    }
                    if b.node.is_some() {
                        let mut gb = vec![0.0; lb];
                        for i in 0..n {
                            gb[i % lb] += match kind {
                                Binary::Add => g[i],
                                Binary::Sub => -g[i],
                                Binary::Mul => g[i] * a.value[i % la],
                            };
                        }
                        push(&mut grads, b, gb);
                    }
                }
                Op::Unary { kind, x } => {
                    let gx = match kind {
                        Unary::Exp => g.iter().zip(x.value.iter()).map(|(gi, v)| gi * v.exp()).collect(),
                        Unary::Softplus => g.iter().zip(x.value.iter()).map(|(gi, v)| gi * softplus_grad(*v)).collect(),
                        Unary::Silu => g.iter().zip(x.value.iter()).map(|(gi, v)| gi * silu_grad(*v)).collect(),
                        Unary::Relu => g
                            .iter()
                            .zip(x.value.iter())
                            .map(|(gi, v)| if *v > 0.0 { *gi } else { 0.0 })
                            .collect(),
                    };
                    push(&mut grads, x, gx);
                }
                Op::Scale { x, c } => push(&mut grads, x, g.iter().map(|v| v * c).collect()),
                Op::Sum { x } => push(&mut grads, x, vec![g[0]; x.value.len()]),
                Op::Mean { x } => {
                    let n = x.value.len();
                    push(&mut grads, x, vec![g[0] / n as f64; n]);
                }
                Op::Reshape { x } => push(&mut grads, x, g),
                Op::Transpose { x, rows, cols } => {
                    // forward mapped [.., rows, cols] → [.., cols, rows]
                    push(&mut grads, x, transpose_raw(&g, *cols, *rows));
                }
                Op::Reverse { x, outer, len, inner } => push(&mut grads, x, reverse_raw(&g, *outer, *len, *inner)),
                Op::Narrow { x, width, start, len } => {
                    let mut gx = vec![0.0; x.value.len()];
                    for (row, grow) in gx.chunks_exact_mut(*width).zip(g.chunks_exact(*len)) {
                        row[*start..*start + *len].copy_from_slice(grow);
                    }
                    push(&mut grads, x, gx);
                }
                Op::Select { x, index } => {
                    let mut gx = vec![0.0; x.value.len()];
                    gx[*index] = g[0];
                    push(&mut grads, x, gx);
                }
                Op::MeanAxis0 { x, rows } => {
                    let inv = 1.0 / *rows as f64;
                    let gx = (0..*rows).flat_map(|_| g.iter().map(move |v| v * inv)).collect();
                    push(&mut grads, x, gx);
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let d = gain.value.len();
                    if x.node.is_some() {
                        let mut gx = Vec::with_capacity(g.len());
                        for ((grow, hrow), r) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).zip(rstd) {
                            let dh: Vec<f64> = grow.iter().zip(gain.value.iter()).map(|(a, b)| a * b).collect();
                            let mean_dh = dh.iter().sum::<f64>() / d as f64;
                            let mean_dh_h = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            gx.extend(dh.iter().zip(hrow).map(|(dhj, hj)| r * (dhj - mean_dh - hj * mean_dh_h)));
                        }
                        push(&mut grads, x, gx);
                    }
                    if gain.node.is_some() {
                        let mut gg = vec![0.0; d];
                        for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for j in 0..d {
                                gg[j] += grow[j] * hrow[j];
                            }
                        }
                        push(&mut grads, gain, gg);
                    }
                    if bias.node.is_some() {
                        let mut gb = vec![0.0; d];
                        for grow in g.chunks_exact(d) {
                            gb.iter_mut().zip(grow).for_each(|(a, v)| *a += v);
                        }
                        push(&mut grads, bias, gb);
                    }
                }
                Op::RmsNorm { x, gain, rstd } => {
                    let d = gain.value.len();
                    if x.node.is_some() {
                        let mut gx = Vec::with_capacity(g.len());
                        for ((grow, xrow), r) in g.chunks_exact(d).zip(x.value.chunks_exact(d)).zip(rstd) {
                            let dot: f64 = (0..d).map(|j| gain.value[j] * grow[j] * xrow[j]).sum();
                            let c = r * r * r * dot / d as f64;
                            gx.extend((0..d).map(|j| gain.value[j] * grow[j] * r - xrow[j] * c));
                        }
                        push(&mut grads, x, gx);
                    }
                    if gain.node.is_some() {
                        let mut gg = vec![0.0; d];
                        for ((grow, xrow), r) in g.chunks_exact(d).zip(x.value.chunks_exact(d)).zip(rstd) {
                            for j in 0..d {
                                gg[j] += grow[j] * xrow[j] * r;
                            }
                        }
                        push(&mut grads, gain, gg);
                    }
                }
                Op::Custom { inputs, op } => {
                    let values: Vec<&[f64]> = inputs.iter().map(|i| i.value.as_slice()).collect();
                    let input_grads = op.backward(&values, &g)?;
                    if input_grads.len() != inputs.len() {
                        return Err(Error::Graph(format!("{} returned {} gradients for {} inputs", op.name(), input_grads.len(), inputs.len())));
                    }
                    for (input, gi) in inputs.iter().zip(input_grads) {
                        if let Some(gi) = gi {
                            push(&mut grads, input, gi);
                        }
                    }
                }
            }
        }

        let mut out = GradientMap::default();
        for node in &self.nodes {
            if let Op::Leaf(id, shape) = &node.op {
                if out.get(*id).is_none() {
                    let g = leaf.remove(id).unwrap_or_else(|| vec![0.0; node.numel]);
                    out.insert(*id, Tensor::from_parts(shape.clone(), Arc::new(g), None));
                }
            }
        }
        self.nodes.clear();
        self.consumed = true;
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, v)| *a += v),
        None => *slot = Some(contrib),
    }
}

/// Result shape when `small` is a trailing suffix of `large` (either way
/// round) or a single element.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        return Some(a.to_vec());
    }
    if nb == 1 {
        return Some(a.to_vec());
    }
    if na == 1 {
        return Some(b.to_vec());
    }
    if a.len() >= b.len() && a.ends_with(b) {
        return Some(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Some(b.to_vec());
    }
    None
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            let brow = &b[kk * p..(kk + 1) * p];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let block = rows * cols;
    for (src, dst) in x.chunks_exact(block).zip(out.chunks_exact_mut(block)) {
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

fn reverse_raw(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for t in 0..len {
            let src = (o * len + (len - 1 - t)) * inner;
            let dst = (o * len + t) * inner;
            out[dst..dst + inner].copy_from_slice(&x[src..src + inner]);
        }
    }
    out
}
