//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Values are computed by plain kernels; when a [`Tape`] is supplied the
//! operation is additionally recorded so [`Tape::backward`] can replay the
//! chain rule in reverse. The same kernel runs with and without a tape, so
//! traced and untraced values are bit-identical.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Identifier for a trainable parameter, assigned by the parameter store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Dense row-major tensor. `node` links into the tape that produced it.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    node: Option<NodeRef>,
}

#[derive(Debug, Clone, Copy)]
struct NodeRef {
    tape_id: u64,
    index: usize,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        assert!(shape.iter().all(|&d| d >= 1), "zero-size dim in {shape:?}");
        Tensor { shape, data, node: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![v; n])
    }

    /// Scalar tensor with empty shape.
    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert!(self.data.len() == 1, "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    /// Row-major reshape. Pure metadata change: the tape node is carried
    /// over, so gradients flow through unchanged.
    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape {:?} -> {:?} changes element count",
            self.shape,
            shape
        );
        self.shape = shape.to_vec();
        self
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn detached(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Tensor { shape, data, node: None }
    }
}

// ── Tape ─────────────────────────────────────────────────────────────

/// Recorded application of one primitive. Shape-sensitive ops carry the
/// geometry they saw at forward time: `Tensor::reshape` shares the node,
/// so the input node's own shape may be stale by backward time.
#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<ParamId> },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Matmul { a: usize, b: usize, a_shape: Vec<usize>, b_shape: Vec<usize> },
    Relu { x: usize },
    SoftmaxLastDim { x: usize },
    LayerNormLastDim { x: usize },
    Sum { x: usize },
    /// `geom` is (outer, dim, inner) of the reduced axis; None = full mean.
    Mean { x: usize, geom: Option<(usize, usize, usize)> },
    Sqrt { x: usize },
    Square { x: usize },
    L2NormLastDim { x: usize },
    ConcatLastDim { xs: Vec<usize>, widths: Vec<usize> },
    /// (outer, dim, inner) of the sliced axis plus the start offset.
    Slice { x: usize, geom: (usize, usize, usize), start: usize },
    Transpose { x: usize },
    Broadcast { x: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Div { .. } => "div",
            Op::Matmul { .. } => "matmul",
            Op::Relu { .. } => "relu",
            Op::SoftmaxLastDim { .. } => "softmax_lastdim",
            Op::LayerNormLastDim { .. } => "layernorm_lastdim",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Sqrt { .. } => "sqrt",
            Op::Square { .. } => "square",
            Op::L2NormLastDim { .. } => "l2norm_lastdim",
            Op::ConcatLastDim { .. } => "concat_lastdim",
            Op::Slice { .. } => "slice",
            Op::Transpose { .. } => "transpose",
            Op::Broadcast { .. } => "broadcast",
        }
    }
}

/// One node on the tape: the op, plus the forward value the backward
/// rules read from.
#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Wengert tape. Confined to one thread; inputs always reference earlier
/// nodes, so a single reverse sweep computes all gradients.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Record a parameter leaf. The returned tensor participates in
    /// gradient computation under `id`.
    pub fn leaf_param(&self, id: ParamId, value: &Tensor) -> Tensor {
        let index = self.push(Node {
            op: Op::Leaf { param: Some(id) },
            shape: value.shape.clone(),
            value: value.data.clone(),
        });
        Tensor {
            shape: value.shape.clone(),
            data: value.data.clone(),
            node: Some(NodeRef { tape_id: self.id, index }),
        }
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Node index of `t` on this tape, auto-leafing constants and tensors
    /// from other tapes (their values are fixed from this tape's view).
    fn node_of(&self, t: &Tensor) -> usize {
        match t.node {
            Some(r) if r.tape_id == self.id => r.index,
            _ => self.push(Node {
                op: Op::Leaf { param: None },
                shape: t.shape.clone(),
                value: t.data.clone(),
            }),
        }
    }

    fn record(&self, op: Op, out: &mut Tensor) {
        let index = self.push(Node {
            op,
            shape: out.shape.clone(),
            value: out.data.clone(),
        });
        out.node = Some(NodeRef { tape_id: self.id, index });
    }

    /// Name and index of the earliest node whose value contains a NaN.
    pub fn first_nan_op(&self) -> Option<String> {
        let nodes = self.nodes.borrow();
        for (i, n) in nodes.iter().enumerate() {
            if n.value.iter().any(|v| v.is_nan()) {
                return Some(format!("{}#{}", n.op.name(), i));
            }
        }
        None
    }

    /// Reverse sweep from a scalar loss. Consumes the tape; every listed
    /// parameter gets an entry, all-zero when unreachable from the loss.
    pub fn backward(self, loss: &Tensor, params: &[(ParamId, Vec<usize>)]) -> Result<GradientMap> {
        if !loss.is_scalar() {
            return Err(Error::NonScalarLoss { shape: loss.shape.clone() });
        }
        let loss_node = match loss.node {
            Some(r) if r.tape_id == self.id => r.index,
            _ => return Err(Error::LossNotOnTape),
        };
        let nodes = self.nodes.into_inner();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss_node] = Some(vec![1.0]);

        for i in (0..nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            backprop_node(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut map = BTreeMap::new();
        for (id, shape) in params {
            let numel: usize = shape.iter().product();
            let mut acc = vec![0.0; numel];
            for (i, n) in nodes.iter().enumerate() {
                if let Op::Leaf { param: Some(p) } = n.op {
                    if p == *id {
                        if let Some(g) = &grads[i] {
                            for (a, v) in acc.iter_mut().zip(g) {
                                *a += v;
                            }
                        }
                    }
                }
            }
            map.insert(*id, Tensor::detached(shape.clone(), acc));
        }
        Ok(GradientMap { entries: map })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

/// Apply the vjp rule of node `i`, scattering `g` into its inputs.
fn backprop_node(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |j: usize| -> &[f64] { &nodes[j].value };
    let len = |j: usize| nodes[j].value.len();
    match &nodes[i].op {
        Op::Leaf { .. } => {}
        Op::Add { a, b } => {
            accumulate(&mut grads[*a], len(*a), |d| {
                for (d, g) in d.iter_mut().zip(g) {
                    *d += g;
                }
            });
            accumulate(&mut grads[*b], len(*b), |d| {
                for (d, g) in d.iter_mut().zip(g) {
                    *d += g;
                }
            });
        }
        Op::Sub { a, b } => {
            accumulate(&mut grads[*a], len(*a), |d| {
                for (d, g) in d.iter_mut().zip(g) {
                    *d += g;
                }
            });
            accumulate(&mut grads[*b], len(*b), |d| {
                for (d, g) in d.iter_mut().zip(g) {
                    *d -= g;
                }
            });
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(&mut grads[*a], av.len(), |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * bv[k];
                }
            });
            accumulate(&mut grads[*b], bv.len(), |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * av[k];
                }
            });
        }
        Op::Div { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(&mut grads[*a], av.len(), |d| {
                for k in 0..d.len() {
                    d[k] += g[k] / bv[k];
                }
            });
            accumulate(&mut grads[*b], bv.len(), |d| {
                for k in 0..d.len() {
                    d[k] -= g[k] * av[k] / (bv[k] * bv[k]);
                }
            });
        }
        Op::Matmul { a, b, a_shape, b_shape } => {
            let (ash, bsh) = (a_shape, b_shape);
            let (av, bv) = (val(*a), val(*b));
            match (ash.len(), bsh.len()) {
                (2, 2) => {
                    let (m, k, n) = (ash[0], ash[1], bsh[1]);
                    accumulate(&mut grads[*a], av.len(), |d| {
                        matmul_nt_acc(g, bv, d, m, n, k);
                    });
                    accumulate(&mut grads[*b], bv.len(), |d| {
                        matmul_tn_acc(av, g, d, k, m, n);
                    });
                }
                (3, 3) => {
                    let (bb, m, k, n) = (ash[0], ash[1], ash[2], bsh[2]);
                    accumulate(&mut grads[*a], av.len(), |d| {
                        for t in 0..bb {
                            matmul_nt_acc(
                                &g[t * m * n..(t + 1) * m * n],
                                &bv[t * k * n..(t + 1) * k * n],
                                &mut d[t * m * k..(t + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    });
                    accumulate(&mut grads[*b], bv.len(), |d| {
                        for t in 0..bb {
                            matmul_tn_acc(
                                &av[t * m * k..(t + 1) * m * k],
                                &g[t * m * n..(t + 1) * m * n],
                                &mut d[t * k * n..(t + 1) * k * n],
                                k,
                                m,
                                n,
                            );
                        }
                    });
                }
                (3, 2) => {
                    let (bb, m, k, n) = (ash[0], ash[1], ash[2], bsh[1]);
                    accumulate(&mut grads[*a], av.len(), |d| {
                        for t in 0..bb {
                            matmul_nt_acc(
                                &g[t * m * n..(t + 1) * m * n],
                                bv,
                                &mut d[t * m * k..(t + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    });
                    accumulate(&mut grads[*b], bv.len(), |d| {
                        for t in 0..bb {
                            matmul_tn_acc(
                                &av[t * m * k..(t + 1) * m * k],
                                &g[t * m * n..(t + 1) * m * n],
                                d,
                                k,
                                m,
                                n,
                            );
                        }
                    });
                }
                _ => unreachable!("matmul recorded with unsupported ranks"),
            }
        }
        Op::Relu { x } => {
            let xv = val(*x);
            accumulate(&mut grads[*x], xv.len(), |d| {
                for k in 0..d.len() {
                    if xv[k] > 0.0 {
                        d[k] += g[k];
                    }
                }
            });
        }
        Op::SoftmaxLastDim { x } => {
            let y = &nodes[i].value;
            let row = *nodes[i].shape.last().unwrap();
            accumulate(&mut grads[*x], y.len(), |d| {
                for r in 0..y.len() / row {
                    let (ys, gs) = (&y[r * row..(r + 1) * row], &g[r * row..(r + 1) * row]);
                    let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                    for k in 0..row {
                        d[r * row + k] += ys[k] * (gs[k] - dot);
                    }
                }
            });
        }
        Op::LayerNormLastDim { x } => {
            let xv = val(*x);
            let y = &nodes[i].value;
            let row = *nodes[i].shape.last().unwrap();
            accumulate(&mut grads[*x], xv.len(), |d| {
                for r in 0..xv.len() / row {
                    let xs = &xv[r * row..(r + 1) * row];
                    let ys = &y[r * row..(r + 1) * row];
                    let gs = &g[r * row..(r + 1) * row];
                    let mu = xs.iter().sum::<f64>() / row as f64;
                    let var = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / row as f64;
                    let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
                    let g_mean = gs.iter().sum::<f64>() / row as f64;
                    let gy_mean = gs.iter().zip(ys).map(|(g, y)| g * y).sum::<f64>() / row as f64;
                    for k in 0..row {
                        d[r * row + k] += inv * (gs[k] - g_mean - ys[k] * gy_mean);
                    }
                }
            });
        }
        Op::Sum { x } => {
            accumulate(&mut grads[*x], len(*x), |d| {
                for d in d.iter_mut() {
                    *d += g[0];
                }
            });
        }
        Op::Mean { x, geom } => match geom {
            None => {
                let n = len(*x) as f64;
                accumulate(&mut grads[*x], len(*x), |d| {
                    for d in d.iter_mut() {
                        *d += g[0] / n;
                    }
                });
            }
            Some((outer, dim, inner)) => {
                accumulate(&mut grads[*x], len(*x), |d| {
                    for o in 0..*outer {
                        for a in 0..*dim {
                            for j in 0..*inner {
                                d[(o * dim + a) * inner + j] += g[o * inner + j] / *dim as f64;
                            }
                        }
                    }
                });
            }
        },
        Op::Sqrt { x } => {
            let y = &nodes[i].value;
            accumulate(&mut grads[*x], y.len(), |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * 0.5 / y[k];
                }
            });
        }
        Op::Square { x } => {
            let xv = val(*x);
            accumulate(&mut grads[*x], xv.len(), |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * 2.0 * xv[k];
                }
            });
        }
        Op::L2NormLastDim { x } => {
            let xv = val(*x);
            let y = &nodes[i].value;
            let row = xv.len() / y.len();
            accumulate(&mut grads[*x], xv.len(), |d| {
                for r in 0..y.len() {
                    if y[r] == 0.0 {
                        continue; // subgradient convention at the origin
                    }
                    for k in 0..row {
                        d[r * row + k] += g[r] * xv[r * row + k] / y[r];
                    }
                }
            });
        }
        Op::ConcatLastDim { xs, widths } => {
            let total: usize = widths.iter().sum();
            let rows = nodes[i].value.len() / total;
            let mut offset = 0;
            for (xi, &x) in xs.iter().enumerate() {
                let w = widths[xi];
                accumulate(&mut grads[x], len(x), |d| {
                    for r in 0..rows {
                        for k in 0..w {
                            d[r * w + k] += g[r * total + offset + k];
                        }
                    }
                });
                offset += w;
            }
        }
        Op::Slice { x, geom: (outer, dim, inner), start } => {
            let take = nodes[i].value.len() / (outer * inner);
            accumulate(&mut grads[*x], len(*x), |d| {
                for o in 0..*outer {
                    for a in 0..take {
                        let src = (o * take + a) * inner;
                        let dst = (o * dim + start + a) * inner;
                        for j in 0..*inner {
                            d[dst + j] += g[src + j];
                        }
                    }
                }
            });
        }
        Op::Transpose { x } => {
            let osh = &nodes[i].shape;
            accumulate(&mut grads[*x], len(*x), |d| {
                transpose_last2_acc(g, osh, d);
            });
        }
        Op::Broadcast { x } => {
            let xn = len(*x);
            accumulate(&mut grads[*x], xn, |d| {
                for (k, g) in g.iter().enumerate() {
                    d[k % xn] += g;
                }
            });
        }
    }
}

// ── Value kernels ────────────────────────────────────────────────────

pub const LAYERNORM_EPS: f64 = 1e-5;

/// c[m,n] += a[m,k] * b[k,n] over a zeroed c (plain matmul).
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// d[m,k] += g[m,n] * b[k,n]^T
fn matmul_nt_acc(g: &[f64], b: &[f64], d: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        for p in 0..k {
            let mut s = 0.0;
            let grow = &g[i * n..(i + 1) * n];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                s += grow[j] * brow[j];
            }
            d[i * k + p] += s;
        }
    }
}

/// d[k,n] += a[m,k]^T * g[m,n]
fn matmul_tn_acc(a: &[f64], g: &[f64], d: &mut [f64], k: usize, m: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let grow = &g[i * n..(i + 1) * n];
            let drow = &mut d[p * n..(p + 1) * n];
            for j in 0..n {
                drow[j] += av * grow[j];
            }
        }
    }
}

fn transpose_last2(src: &[f64], shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let (m, n) = (shape[rank - 2], shape[rank - 1]);
    let batch: usize = shape[..rank - 2].iter().product();
    let mut out = vec![0.0; src.len()];
    for t in 0..batch {
        let base = t * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = src[base + i * n + j];
            }
        }
    }
    let mut osh = shape.to_vec();
    osh.swap(rank - 2, rank - 1);
    (osh, out)
}

/// Accumulate the transpose of `g` (shaped `gshape`) into `d`.
fn transpose_last2_acc(g: &[f64], gshape: &[usize], d: &mut [f64]) {
    let (_, t) = transpose_last2(g, gshape);
    for (d, t) in d.iter_mut().zip(t) {
        *d += t;
    }
}

// ── Public operations ────────────────────────────────────────────────

fn require_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

macro_rules! elementwise_binary {
    ($name:ident, $opname:literal, $kernel:expr, $variant:ident) => {
        pub fn $name(tape: Option<&Tape>, a: &Tensor, b: &Tensor) -> Result<Tensor> {
            require_same_shape($opname, a, b)?;
            let f = $kernel;
            let data: Vec<f64> = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
            let mut out = Tensor::detached(a.shape.clone(), data);
            if let Some(t) = tape {
                let (na, nb) = (t.node_of(a), t.node_of(b));
                t.record(Op::$variant { a: na, b: nb }, &mut out);
            }
            Ok(out)
        }
    };
}

elementwise_binary!(add, "add", |x: f64, y: f64| x + y, Add);
elementwise_binary!(sub, "sub", |x: f64, y: f64| x - y, Sub);
elementwise_binary!(mul, "mul", |x: f64, y: f64| x * y, Mul);
elementwise_binary!(div, "div", |x: f64, y: f64| x / y, Div);

/// Matrix multiply. Supported shapes: (m,k)x(k,n), batched (B,m,k)x(B,k,n),
/// and (B,m,k)x(k,n) with a shared right operand.
pub fn matmul(tape: Option<&Tape>, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    };
    let (shape, data) = match (a.shape.as_slice(), b.shape.as_slice()) {
        (&[m, k], &[k2, n]) => {
            if k != k2 {
                return Err(mismatch());
            }
            (vec![m, n], matmul_nn(&a.data, &b.data, m, k, n))
        }
        (&[bb, m, k], &[bb2, k2, n]) => {
            if k != k2 || bb != bb2 {
                return Err(mismatch());
            }
            let mut out = Vec::with_capacity(bb * m * n);
            for t in 0..bb {
                out.extend(matmul_nn(
                    &a.data[t * m * k..(t + 1) * m * k],
                    &b.data[t * k * n..(t + 1) * k * n],
                    m,
                    k,
                    n,
                ));
            }
            (vec![bb, m, n], out)
        }
        (&[bb, m, k], &[k2, n]) => {
            if k != k2 {
                return Err(mismatch());
            }
            let mut out = Vec::with_capacity(bb * m * n);
            for t in 0..bb {
                out.extend(matmul_nn(&a.data[t * m * k..(t + 1) * m * k], &b.data, m, k, n));
            }
            (vec![bb, m, n], out)
        }
        _ => return Err(mismatch()),
    };
    let mut out = Tensor::detached(shape, data);
    if let Some(t) = tape {
        let (na, nb) = (t.node_of(a), t.node_of(b));
        t.record(
            Op::Matmul {
                a: na,
                b: nb,
                a_shape: a.shape.clone(),
                b_shape: b.shape.clone(),
            },
            &mut out,
        );
    }
    Ok(out)
}

pub fn relu(tape: Option<&Tape>, x: &Tensor) -> Result<Tensor> {
    let data = x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    let mut out = Tensor::detached(x.shape.clone(), data);
    if let Some(t) = tape {
        let nx = t.node_of(x);
        t.record(Op::Relu { x: nx }, &mut out);
    }
    Ok(out)
}

fn last_dim(op: &'static str, x: &Tensor) -> Result<usize> {
    x.shape.last().copied().ok_or(Error::BadShape { op, shape: x.shape.clone() })
}

pub fn softmax_lastdim(tape: Option<&Tape>, x: &Tensor) -> Result<Tensor> {
    let row = last_dim("softmax_lastdim", x)?;
    let mut data = vec![0.0; x.data.len()];
    for r in 0..x.data.len() / row {
        let xs = &x.data[r * row..(r + 1) * row];
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for k in 0..row {
            let e = (xs[k] - max).exp();
            data[r * row + k] = e;
            denom += e;
        }
        for k in 0..row {
            data[r * row + k] /= denom;
        }
    }
    let mut out = Tensor::detached(x.shape.clone(), data);
    if let Some(t) = tape {
        let nx = t.node_of(x);
        t.record(Op::SoftmaxLastDim { x: nx }, &mut out);
    }
    Ok(out)
}

/// Normalize the last dimension to zero mean and unit variance
/// (population statistics, epsilon inside the square root).
pub fn layernorm_lastdim(tape: Option<&Tape>, x: &Tensor) -> Result<Tensor> {
    let row = last_dim("layernorm_lastdim", x)?;
    let mut data = vec![0.0; x.data.len()];
    for r in 0..x.data.len() / row {
        let xs = &x.data[r * row..(r + 1) * row];
        let mu = xs.iter().sum::<f64>() / row as f64;
        let var = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / row as f64;
        let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
        for k in 0..row {
            data[r * row + k] = (xs[k] - mu) * inv;
        }
    }
    let mut out = Tensor::detached(x.shape.clone(), data);
    if let Some(t) = tape {
        let nx = t.node_of(x);
        t.record(Op::LayerNormLastDim { x: nx }, &mut out);
    }
    Ok(out)
}

/// Full reduction to a scalar.
pub fn sum(tape: Option<&Tape>, x: &Tensor) -> Result<Tensor> {
    let mut out = Tensor::scalar(x.data.iter().sum());
    if let Some(t) = tape {
        let nx = t.node_of(x);
        t.record(Op::Sum { x: nx }, &mut out);
    }
    Ok(out)
}

/// Mean over one axis, or over everything when `axis` is `None`.
pub fn mean(tape: Option<&Tape>, x: &Tensor, axis: Option<usize>) -> Result<Tensor> {
    let (shape, data, geom) = match axis {
        None => (vec![], vec![x.data.iter().sum::<f64>() / x.data.len() as f64], None),
        Some(ax) => {
            if ax >= x.shape.len() {
                return Err(Error::BadShape { op: "mean", shape: x.shape.clone() });
            }
            let dim = x.shape[ax];
            let inner: usize = x.shape[ax + 1..].iter().product();
            let outer: usize = x.shape[..ax].iter().product();
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for a in 0..dim {
                    for j in 0..inner {
                        data[o * inner + j] += x.data[(o * dim + a) * inner + j];
                    }
                }
            }
            for v in data.iter_mut() {
                *v /= dim as f64;
            }
            let mut shape = x.shape.clone();
            shape.remove(ax);
            (shape, data, Some((outer, dim, inner)))
        }
    };
    let mut out = Tensor::detached(shape, data);
    if let Some(t) = tape {
        let nx = t.node_of(x);
        t.record(Op::Mean { x: nx, geom }, &mut out);
    }
    Ok(out)
}

pub fn sqrt(tape: Option<&Tape>, x: &Tensor) -> Result<Tensor> {
    let data = x.data.iter().map(|v| v.sqrt()).collect();
    let mut out = Tensor::detached(x.shape.clone(), data);
    if let Some(t) = tape {
        let nx = t.node_of(x);
        t.record(Op::Sqrt { x: nx }, &mut out);
    }
    Ok(out)
}

pub fn square(tape: Option<&Tape>, x: &Tensor) -> Result<Tensor> {
    let data = x.data.iter().map(|v| v * v).collect();
    let mut out = Tensor::detached(x.shape.clone(), data);
    if let Some(t) = tape {
        let nx = t.node_of(x);
        t.record(Op::Square { x: nx }, &mut out);
    }
    Ok(out)
}

/// Euclidean norm of each last-dimension row; drops the last dim.
pub fn l2norm_lastdim(tape: Option<&Tape>, x: &Tensor) -> Result<Tensor> {
    let row = last_dim("l2norm_lastdim", x)?;
    let rows = x.data.len() / row;
    let mut data = vec![0.0; rows];
    for r in 0..rows {
        data[r] = x.data[r * row..(r + 1) * row]
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
    }
    let shape = x.shape[..x.shape.len() - 1].to_vec();
    let mut out = Tensor::detached(shape, data);
    if let Some(t) = tape {
        let nx = t.node_of(x);
        t.record(Op::L2NormLastDim { x: nx }, &mut out);
    }
    Ok(out)
}

pub fn concat_lastdim(tape: Option<&Tape>, xs: &[&Tensor]) -> Result<Tensor> {
    assert!(!xs.is_empty(), "concat_lastdim of nothing");
    let lead = &xs[0].shape[..xs[0].shape.len() - 1];
    let mut total = 0;
    for x in xs {
        if x.shape.is_empty() || &x.shape[..x.shape.len() - 1] != lead {
            return Err(Error::ShapeMismatch {
                op: "concat_lastdim",
                lhs: xs[0].shape.clone(),
                rhs: x.shape.clone(),
            });
        }
        total += x.shape.last().unwrap();
    }
    let rows: usize = lead.iter().product();
    let mut data = vec![0.0; rows * total];
    let mut offset = 0;
    for x in xs {
        let w = *x.shape.last().unwrap();
        for r in 0..rows {
            data[r * total + offset..r * total + offset + w]
                .copy_from_slice(&x.data[r * w..(r + 1) * w]);
        }
        offset += w;
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    let mut out = Tensor::detached(shape, data);
    if let Some(t) = tape {
        let ns: Vec<usize> = xs.iter().map(|x| t.node_of(x)).collect();
        let widths: Vec<usize> = xs.iter().map(|x| *x.shape.last().unwrap()).collect();
        t.record(Op::ConcatLastDim { xs: ns, widths }, &mut out);
    }
    Ok(out)
}

pub fn slice(tape: Option<&Tape>, x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.shape.len() || start + len > x.shape[axis] || len == 0 {
        return Err(Error::BadShape { op: "slice", shape: x.shape.clone() });
    }
    let dim = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut data = vec![0.0; outer * len * inner];
    for o in 0..outer {
        for a in 0..len {
            let src = (o * dim + start + a) * inner;
            let dst = (o * len + a) * inner;
            data[dst..dst + inner].copy_from_slice(&x.data[src..src + inner]);
        }
    }
    let mut shape = x.shape.clone();
    shape[axis] = len;
    let mut out = Tensor::detached(shape, data);
    if let Some(t) = tape {
        let nx = t.node_of(x);
        t.record(Op::Slice { x: nx, geom: (outer, dim, inner), start }, &mut out);
    }
    Ok(out)
}

/// Swap the last two dimensions.
pub fn transpose(tape: Option<&Tape>, x: &Tensor) -> Result<Tensor> {
    if x.shape.len() < 2 {
        return Err(Error::BadShape { op: "transpose", shape: x.shape.clone() });
    }
    let (shape, data) = transpose_last2(&x.data, &x.shape);
    let mut out = Tensor::detached(shape, data);
    if let Some(t) = tape {
        let nx = t.node_of(x);
        t.record(Op::Transpose { x: nx }, &mut out);
    }
    Ok(out)
}

/// Replicate `x` over leading dimensions. `x.shape` must equal the trailing
/// dims of `target` (bias-add pattern); anything fancier is rejected.
pub fn broadcast(tape: Option<&Tape>, x: &Tensor, target: &[usize]) -> Result<Tensor> {
    if target.len() < x.shape.len() || target[target.len() - x.shape.len()..] != x.shape[..] {
        return Err(Error::ShapeMismatch {
            op: "broadcast",
            lhs: x.shape.clone(),
            rhs: target.to_vec(),
        });
    }
    let n: usize = target.iter().product();
    let xn = x.data.len();
    let mut data = vec![0.0; n];
    for (k, v) in data.iter_mut().enumerate() {
        *v = x.data[k % xn];
    }
    let mut out = Tensor::detached(target.to_vec(), data);
    if let Some(t) = tape {
        let nx = t.node_of(x);
        t.record(Op::Broadcast { x: nx }, &mut out);
    }
    Ok(out)
}

// ── Gradients ────────────────────────────────────────────────────────

/// Gradients keyed by parameter id; same shape as the parameter, explicit
/// zeros for parameters the loss never touched.
#[derive(Debug, Clone)]
pub struct GradientMap {
    entries: BTreeMap<ParamId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.entries.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn from_entries(entries: BTreeMap<ParamId, Tensor>) -> Self {
        GradientMap { entries }
    }
}

/// Central-difference gradient of `eval` at `params`:
/// (eval(x + eps e_i) - eval(x - eps e_i)) / (2 eps) per coordinate.
///
/// Independent of the tape machinery; serves as the gradient oracle.
pub fn finite_diff_gradient<F>(
    mut eval: F,
    params: &BTreeMap<ParamId, Tensor>,
    eps: f64,
) -> GradientMap
where
    F: FnMut(&BTreeMap<ParamId, Tensor>) -> f64,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut work = params.clone();
    let mut out = BTreeMap::new();
    let ids: Vec<ParamId> = params.keys().copied().collect();
    for id in ids {
        let n = params[&id].numel();
        let mut grad = vec![0.0; n];
        for k in 0..n {
            let orig = params[&id].data[k];
            work.get_mut(&id).unwrap().data[k] = orig + eps;
            let plus = eval(&work);
            work.get_mut(&id).unwrap().data[k] = orig - eps;
            let minus = eval(&work);
            work.get_mut(&id).unwrap().data[k] = orig;
            grad[k] = (plus - minus) / (2.0 * eps);
        }
        out.insert(id, Tensor::detached(params[&id].shape.clone(), grad));
    }
    GradientMap { entries: out }
}
