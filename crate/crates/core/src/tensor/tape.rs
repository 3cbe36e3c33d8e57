use std::cell::RefCell;

use super::kernels::{gemm, transpose};
use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Sigmoid,
    Relu,
    Tanh,
    Exp,
    Log,
    Gelu,
    Clamp { lo: f64, hi: f64 },
    Affine { scale: f64, shift: f64 },
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Unary {
        x: usize,
        kind: Unary,
    },
    AddRow {
        x: usize,
        row: usize,
    },
    MulRow {
        x: usize,
        row: usize,
    },
    ScaleRows {
        x: usize,
        scale: usize,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    LayerNorm {
        x: usize,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Gather {
        table: usize,
        index: Vec<usize>,
    },
    SplitHeads {
        x: usize,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        x: usize,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    Reshape {
        x: usize,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Operation record for one forward pass.
///
/// Entries are appended in execution order, so every entry's inputs precede
/// it and a reverse sweep visits nodes in a valid topological order.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Result of [`Tape::backward`]: one gradient per node that requires it.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }
}

fn is_scalar(t: &Tensor) -> bool {
    t.len() == 1 && t.shape().iter().all(|&d| d == 1)
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// Output shape of a same-shape or scalar-broadcast binary op.
fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if is_scalar(b) {
        Ok(a.shape().to_vec())
    } else if is_scalar(a) {
        Ok(b.shape().to_vec())
    } else {
        Err(shape_err(op, a, b))
    }
}

fn binary_values(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = if a.len() == n && b.len() == n {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    } else if a.len() == n {
        let y = b.data()[0];
        a.data().iter().map(|&x| f(x, y)).collect()
    } else {
        let x = a.data()[0];
        b.data().iter().map(|&y| f(x, y)).collect()
    };
    Tensor::new(shape, data).expect("broadcast shape")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => x.max(0.0),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Gelu => gelu(x),
            Unary::Clamp { lo, hi } => x.clamp(lo, hi),
            Unary::Affine { scale, shift } => x * scale + shift,
        }
    }

    /// d(out)/d(in) given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Gelu => gelu_grad(x),
            Unary::Clamp { lo, hi } => {
                if x > lo && x < hi {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Affine { scale, .. } => scale,
        }
    }
}

/// Rows × last-dimension view of a tensor.
fn rows_cols(t: &Tensor) -> (usize, usize) {
    let cols = t.shape().last().copied().unwrap_or(1);
    if cols == 0 {
        (0, 0)
    } else {
        (t.len() / cols, cols)
    }
}

/// Batch, rows, cols of a 2-D or 3-D tensor.
fn batched(t: &Tensor) -> Option<(usize, usize, usize)> {
    match *t.shape() {
        [m, n] => Some((1, m, n)),
        [b, m, n] => Some((b, m, n)),
        _ => None,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Registers an input. Gradients are only produced for leaves created
    /// with `requires_grad = true` and for values derived from them.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients accumulate additively when a value is used more than once.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        if root.requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            propagate(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| g.map(|g| Tensor::new(nodes[id].value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, contribution: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

/// Adds `factor * g` into the gradient slot of a (possibly scalar-broadcast)
/// operand.
fn accumulate_broadcast(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, contribution: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    if nodes[id].value.len() == contribution.len() {
        accumulate(nodes, grads, id, contribution);
    } else {
        let s: f64 = contribution.iter().sum();
        accumulate(nodes, grads, id, vec![s]);
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: usize| &nodes[id].value;
    let needs = |id: usize| nodes[id].requires_grad;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, trans_b } => {
            let (ta, tb) = (val(a), val(b));
            let (bt, m, k) = batched(ta).expect("matmul lhs");
            let n = if trans_b {
                batched(tb).expect("matmul rhs").1
            } else {
                batched(tb).expect("matmul rhs").2
            };
            if needs(a) {
                let mut da = vec![0.0; bt * m * k];
                for s in 0..bt {
                    let gs = &g[s * m * n..(s + 1) * m * n];
                    let bs = &tb.data()[s * k * n..(s + 1) * k * n];
                    let out = &mut da[s * m * k..(s + 1) * m * k];
                    if trans_b {
                        // C = A·Bᵀ, B is n×k: dA = G·B
                        gemm(m, n, k, gs, bs, out);
                    } else {
                        // dA = G·Bᵀ
                        gemm(m, n, k, gs, &transpose(k, n, bs), out);
                    }
                }
                accumulate(nodes, grads, a, da);
            }
            if needs(b) {
                let mut db = vec![0.0; bt * k * n];
                for s in 0..bt {
                    let gs = &g[s * m * n..(s + 1) * m * n];
                    let as_ = &ta.data()[s * m * k..(s + 1) * m * k];
                    let out = &mut db[s * k * n..(s + 1) * k * n];
                    if trans_b {
                        // dB = Gᵀ·A (n×k)
                        gemm(n, m, k, &transpose(m, n, gs), as_, out);
                    } else {
                        // dB = Aᵀ·G (k×n)
                        gemm(k, m, n, &transpose(m, k, as_), gs, out);
                    }
                }
                accumulate(nodes, grads, b, db);
            }
        }
        &Op::Add { a, b } => {
            accumulate_broadcast(nodes, grads, a, g.to_vec());
            accumulate_broadcast(nodes, grads, b, g.to_vec());
        }
        &Op::Sub { a, b } => {
            accumulate_broadcast(nodes, grads, a, g.to_vec());
            accumulate_broadcast(nodes, grads, b, g.iter().map(|v| -v).collect());
        }
        &Op::Mul { a, b } => {
            let (ta, tb) = (val(a), val(b));
            let at = |t: &Tensor, i: usize| if t.len() == 1 { t.data()[0] } else { t.data()[i] };
            if needs(a) {
                let c = g.iter().enumerate().map(|(i, gv)| gv * at(tb, i)).collect();
                accumulate_broadcast(nodes, grads, a, c);
            }
            if needs(b) {
                let c = g.iter().enumerate().map(|(i, gv)| gv * at(ta, i)).collect();
                accumulate_broadcast(nodes, grads, b, c);
            }
        }
        &Op::Unary { x, kind } => {
            let xs = val(x).data();
            let ys = node.value.data();
            let c = g
                .iter()
                .zip(xs.iter().zip(ys))
                .map(|(gv, (&xv, &yv))| gv * kind.derivative(xv, yv))
                .collect();
            accumulate(nodes, grads, x, c);
        }
        &Op::AddRow { x, row } => {
            let (_, cols) = rows_cols(val(x));
            if needs(row) {
                let mut dr = vec![0.0; cols];
                for gr in g.chunks_exact(cols) {
                    for (d, v) in dr.iter_mut().zip(gr) {
                        *d += v;
                    }
                }
                accumulate(nodes, grads, row, dr);
            }
            accumulate(nodes, grads, x, g.to_vec());
        }
        &Op::MulRow { x, row } => {
            let (_, cols) = rows_cols(val(x));
            let r = val(row).data();
            if needs(row) {
                let mut dr = vec![0.0; cols];
                for (gr, xr) in g.chunks_exact(cols).zip(val(x).data().chunks_exact(cols)) {
                    for ((d, gv), xv) in dr.iter_mut().zip(gr).zip(xr) {
                        *d += gv * xv;
                    }
                }
                accumulate(nodes, grads, row, dr);
            }
            if needs(x) {
                let mut dx = g.to_vec();
                for dxr in dx.chunks_exact_mut(cols) {
                    for (d, rv) in dxr.iter_mut().zip(r) {
                        *d *= rv;
                    }
                }
                accumulate(nodes, grads, x, dx);
            }
        }
        &Op::ScaleRows { x, scale } => {
            let (_, cols) = rows_cols(val(x));
            let s = val(scale).data();
            if needs(scale) {
                let ds = g
                    .chunks_exact(cols)
                    .zip(val(x).data().chunks_exact(cols))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                    .collect();
                accumulate(nodes, grads, scale, ds);
            }
            if needs(x) {
                let mut dx = g.to_vec();
                for (dxr, &sv) in dx.chunks_exact_mut(cols).zip(s) {
                    for d in dxr {
                        *d *= sv;
                    }
                }
                accumulate(nodes, grads, x, dx);
            }
        }
        &Op::Sum { x } => {
            accumulate(nodes, grads, x, vec![g[0]; val(x).len()]);
        }
        &Op::Mean { x } => {
            let n = val(x).len();
            accumulate(nodes, grads, x, vec![g[0] / n as f64; n]);
        }
        Op::LayerNorm { x, inv_std } => {
            let (_, cols) = rows_cols(val(*x));
            let y = node.value.data();
            let mut dx = vec![0.0; y.len()];
            for (((dxr, gr), yr), &inv) in dx
                .chunks_exact_mut(cols)
                .zip(g.chunks_exact(cols))
                .zip(y.chunks_exact(cols))
                .zip(inv_std)
            {
                let n = cols as f64;
                let g_mean: f64 = gr.iter().sum::<f64>() / n;
                let gy_mean: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                for ((d, gv), yv) in dxr.iter_mut().zip(gr).zip(yr) {
                    *d = inv * (gv - g_mean - yv * gy_mean);
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        &Op::Softmax { x } => {
            let (_, cols) = rows_cols(val(x));
            let y = node.value.data();
            let mut dx = vec![0.0; y.len()];
            for ((dxr, gr), yr) in dx
                .chunks_exact_mut(cols)
                .zip(g.chunks_exact(cols))
                .zip(y.chunks_exact(cols))
            {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((d, gv), yv) in dxr.iter_mut().zip(gr).zip(yr) {
                    *d = yv * (gv - dot);
                }
            }
            accumulate(nodes, grads, x, dx);
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let (rows, cols) = rows_cols(val(*logits));
            let scale = g[0] / rows as f64;
            let mut dx = probs.clone();
            for (r, &t) in targets.iter().enumerate() {
                dx[r * cols + t] -= 1.0;
            }
            for d in &mut dx {
                *d *= scale;
            }
            accumulate(nodes, grads, *logits, dx);
        }
        Op::Gather { table, index } => {
            let (_, cols) = rows_cols(val(*table));
            let mut dt = vec![0.0; val(*table).len()];
            for (gr, &i) in g.chunks_exact(cols).zip(index) {
                for (d, v) in dt[i * cols..(i + 1) * cols].iter_mut().zip(gr) {
                    *d += v;
                }
            }
            accumulate(nodes, grads, *table, dt);
        }
        &Op::SplitHeads { x, batch, seq, heads } => {
            let d = val(x).len() / (batch * seq);
            accumulate(nodes, grads, x, merge_heads_data(g, batch, seq, heads, d));
        }
        &Op::MergeHeads { x, batch, seq, heads } => {
            let d = val(x).len() / (batch * seq);
            accumulate(nodes, grads, x, split_heads_data(g, batch, seq, heads, d));
        }
        &Op::Reshape { x } => accumulate(nodes, grads, x, g.to_vec()),
    }
}

/// `[batch·seq, heads·dh]` → `[batch·heads, seq, dh]`.
fn split_heads_data(x: &[f64], batch: usize, seq: usize, heads: usize, d: usize) -> Vec<f64> {
    let dh = d / heads;
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for t in 0..seq {
            let src = &x[(b * seq + t) * d..(b * seq + t + 1) * d];
            for h in 0..heads {
                let dst = ((b * heads + h) * seq + t) * dh;
                out[dst..dst + dh].copy_from_slice(&src[h * dh..(h + 1) * dh]);
            }
        }
    }
    out
}

fn merge_heads_data(x: &[f64], batch: usize, seq: usize, heads: usize, d: usize) -> Vec<f64> {
    let dh = d / heads;
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for t in 0..seq {
            let dst = (b * seq + t) * d;
            for h in 0..heads {
                let src = ((b * heads + h) * seq + t) * dh;
                out[dst + h * dh..dst + (h + 1) * dh].copy_from_slice(&x[src..src + dh]);
            }
        }
    }
    out
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn with_values<R>(&self, other: Var<'t>, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        f(&nodes[self.id].value, &nodes[other.id].value)
    }

    fn record(&self, value: Tensor, inputs: &[usize], op: Op) -> Var<'t> {
        let rg = self.tape.requires(inputs);
        self.tape.push(value, rg, op)
    }

    /// Matrix product; 2-D `[m,k]·[k,n]` or batched 3-D `[b,m,k]·[b,k,n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, false)
    }

    /// `self · otherᵀ` where `other` is `[n,k]` (or `[b,n,k]`).
    pub fn matmul_t(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(self, other: Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        let value = self.with_values(other, |a, b| {
            let err = || shape_err("matmul", a, b);
            let (ba, m, k) = batched(a).ok_or_else(err)?;
            let (bb, r, c) = batched(b).ok_or_else(err)?;
            if a.shape().len() != b.shape().len() || ba != bb {
                return Err(err());
            }
            let (kb, n) = if trans_b { (c, r) } else { (r, c) };
            if kb != k {
                return Err(err());
            }
            let mut out = vec![0.0; ba * m * n];
            for s in 0..ba {
                let asl = &a.data()[s * m * k..(s + 1) * m * k];
                let bsl = &b.data()[s * k * n..(s + 1) * k * n];
                let osl = &mut out[s * m * n..(s + 1) * m * n];
                if trans_b {
                    gemm(m, k, n, asl, &transpose(n, k, bsl), osl);
                } else {
                    gemm(m, k, n, asl, bsl, osl);
                }
            }
            let shape = if a.shape().len() == 2 {
                vec![m, n]
            } else {
                vec![ba, m, n]
            };
            Tensor::new(shape, out)
        })?;
        Ok(self.record(
            value,
            &[self.id, other.id],
            Op::MatMul {
                a: self.id,
                b: other.id,
                trans_b,
            },
        ))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.with_values(other, |a, b| {
            let shape = broadcast_shape("add", a, b)?;
            Ok(binary_values(a, b, shape, |x, y| x + y))
        })?;
        Ok(self.record(
            value,
            &[self.id, other.id],
            Op::Add {
                a: self.id,
                b: other.id,
            },
        ))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.with_values(other, |a, b| {
            let shape = broadcast_shape("sub", a, b)?;
            Ok(binary_values(a, b, shape, |x, y| x - y))
        })?;
        Ok(self.record(
            value,
            &[self.id, other.id],
            Op::Sub {
                a: self.id,
                b: other.id,
            },
        ))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.with_values(other, |a, b| {
            let shape = broadcast_shape("mul", a, b)?;
            Ok(binary_values(a, b, shape, |x, y| x * y))
        })?;
        Ok(self.record(
            value,
            &[self.id, other.id],
            Op::Mul {
                a: self.id,
                b: other.id,
            },
        ))
    }

    fn unary(self, kind: Unary) -> Var<'t> {
        let value = self.with_value(|x| x.map(|v| kind.apply(v)));
        self.record(value, &[self.id], Op::Unary { x: self.id, kind })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Unary::Relu)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp)
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        self.unary(Unary::Gelu)
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(self) -> Result<Var<'t>> {
        self.with_value(|x| match x.data().iter().position(|&v| !(v > 0.0)) {
            Some(index) => Err(TensorError::Domain {
                op: "log",
                index,
                value: x.data()[index],
            }),
            None => Ok(()),
        })?;
        Ok(self.unary(Unary::Log))
    }

    /// Gradient is 1 strictly inside `(lo, hi)` and exactly 0 elsewhere.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Unary::Clamp { lo, hi })
    }

    /// `self * scale + shift`.
    pub fn affine(self, scale: f64, shift: f64) -> Var<'t> {
        self.unary(Unary::Affine { scale, shift })
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        self.affine(factor, 0.0)
    }

    /// Adds a vector along the last dimension (bias broadcast).
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let value = self.with_values(row, |x, r| {
            let (_, cols) = rows_cols(x);
            if r.len() != cols || r.shape().len() != 1 {
                return Err(shape_err("add_row", x, r));
            }
            let mut out = x.data().to_vec();
            for chunk in out.chunks_exact_mut(cols) {
                for (o, v) in chunk.iter_mut().zip(r.data()) {
                    *o += v;
                }
            }
            Tensor::new(x.shape().to_vec(), out)
        })?;
        Ok(self.record(
            value,
            &[self.id, row.id],
            Op::AddRow {
                x: self.id,
                row: row.id,
            },
        ))
    }

    /// Multiplies by a vector along the last dimension.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let value = self.with_values(row, |x, r| {
            let (_, cols) = rows_cols(x);
            if r.len() != cols || r.shape().len() != 1 {
                return Err(shape_err("mul_row", x, r));
            }
            let mut out = x.data().to_vec();
            for chunk in out.chunks_exact_mut(cols) {
                for (o, v) in chunk.iter_mut().zip(r.data()) {
                    *o *= v;
                }
            }
            Tensor::new(x.shape().to_vec(), out)
        })?;
        Ok(self.record(
            value,
            &[self.id, row.id],
            Op::MulRow {
                x: self.id,
                row: row.id,
            },
        ))
    }

    /// Multiplies row `i` of a 2-D tensor by `scale[i]`.
    pub fn scale_rows(self, scale: Var<'t>) -> Result<Var<'t>> {
        let value = self.with_values(scale, |x, s| {
            if x.shape().len() != 2 || s.shape() != [x.shape()[0]] {
                return Err(shape_err("scale_rows", x, s));
            }
            let cols = x.shape()[1];
            let mut out = x.data().to_vec();
            if cols > 0 {
                for (chunk, &sv) in out.chunks_exact_mut(cols).zip(s.data()) {
                    for o in chunk {
                        *o *= sv;
                    }
                }
            }
            Tensor::new(x.shape().to_vec(), out)
        })?;
        Ok(self.record(
            value,
            &[self.id, scale.id],
            Op::ScaleRows {
                x: self.id,
                scale: scale.id,
            },
        ))
    }

    pub fn sum(self) -> Var<'t> {
        let value = self.with_value(|x| Tensor::scalar(x.data().iter().sum()));
        self.record(value, &[self.id], Op::Sum { x: self.id })
    }

    pub fn mean(self) -> Var<'t> {
        let value = self.with_value(|x| Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64));
        self.record(value, &[self.id], Op::Mean { x: self.id })
    }

    /// Normalizes each last-dimension vector to zero mean and unit variance
    /// (no affine part).
    pub fn layer_norm(self, eps: f64) -> Var<'t> {
        let (value, inv_std) = self.with_value(|x| {
            let (_, cols) = rows_cols(x);
            let mut out = x.data().to_vec();
            let mut inv_std = Vec::with_capacity(x.len() / cols.max(1));
            for chunk in out.chunks_exact_mut(cols) {
                let n = cols as f64;
                let mean = chunk.iter().sum::<f64>() / n;
                let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                for v in chunk.iter_mut() {
                    *v = (*v - mean) * inv;
                }
                inv_std.push(inv);
            }
            (Tensor::new(x.shape().to_vec(), out).expect("same shape"), inv_std)
        });
        self.record(value, &[self.id], Op::LayerNorm { x: self.id, inv_std })
    }

    /// Softmax over the last dimension.
    ///
    /// With `causal`, the input must be `[.., seq, seq]` and entry `(i, j)`
    /// with `j > i` receives probability exactly 0.
    pub fn softmax(self, causal: bool) -> Result<Var<'t>> {
        let value = self.with_value(|x| {
            let (_, cols) = rows_cols(x);
            if causal {
                let s = x.shape();
                if s.len() < 2 || s[s.len() - 2] != cols {
                    return Err(TensorError::Shape {
                        op: "causal softmax",
                        lhs: s.to_vec(),
                        rhs: vec![cols, cols],
                    });
                }
            }
            let mut out = x.data().to_vec();
            for (r, chunk) in out.chunks_exact_mut(cols).enumerate() {
                let valid = if causal { r % cols + 1 } else { cols };
                let (live, masked) = chunk.split_at_mut(valid);
                let max = live.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in live.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in live.iter_mut() {
                    *v /= total;
                }
                masked.fill(0.0);
            }
            Tensor::new(x.shape().to_vec(), out)
        })?;
        Ok(self.record(value, &[self.id], Op::Softmax { x: self.id }))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `[batch, vocab]` logits.
    pub fn softmax_cross_entropy(self, targets: &[usize]) -> Result<Var<'t>> {
        let (loss, probs) = self.with_value(|x| {
            if x.shape().len() != 2 || x.shape()[0] != targets.len() {
                return Err(TensorError::Shape {
                    op: "softmax_cross_entropy",
                    lhs: x.shape().to_vec(),
                    rhs: vec![targets.len()],
                });
            }
            let (rows, cols) = (x.shape()[0], x.shape()[1]);
            if let Some((_, &t)) = targets.iter().enumerate().find(|(_, &t)| t >= cols) {
                return Err(TensorError::Index {
                    op: "softmax_cross_entropy target",
                    index: t,
                    len: cols,
                });
            }
            let mut probs = x.data().to_vec();
            let mut total = 0.0;
            for (chunk, &t) in probs.chunks_exact_mut(cols).zip(targets) {
                let max = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let shifted_target = chunk[t] - max;
                let mut z = 0.0;
                for v in chunk.iter_mut() {
                    *v = (*v - max).exp();
                    z += *v;
                }
                total += z.ln() - shifted_target;
                for v in chunk.iter_mut() {
                    *v /= z;
                }
            }
            Ok((total / rows as f64, probs))
        })?;
        Ok(self.record(
            Tensor::scalar(loss),
            &[self.id],
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Selects rows of a 2-D table (embedding lookup).
    pub fn gather_rows(self, index: &[usize]) -> Result<Var<'t>> {
        let value = self.with_value(|t| {
            if t.shape().len() != 2 {
                return Err(TensorError::Shape {
                    op: "gather_rows",
                    lhs: t.shape().to_vec(),
                    rhs: vec![index.len()],
                });
            }
            let (rows, cols) = (t.shape()[0], t.shape()[1]);
            let mut out = Vec::with_capacity(index.len() * cols);
            for &i in index {
                if i >= rows {
                    return Err(TensorError::Index {
                        op: "gather_rows",
                        index: i,
                        len: rows,
                    });
                }
                out.extend_from_slice(t.row(i));
            }
            Tensor::new([index.len(), cols], out)
        })?;
        Ok(self.record(
            value,
            &[self.id],
            Op::Gather {
                table: self.id,
                index: index.to_vec(),
            },
        ))
    }

    /// `[batch·seq, heads·dh]` → `[batch·heads, seq, dh]`.
    pub fn split_heads(self, batch: usize, seq: usize, heads: usize) -> Result<Var<'t>> {
        let value = self.with_value(|x| {
            let s = x.shape();
            if s.len() != 2 || s[0] != batch * seq || heads == 0 || s[1] % heads != 0 {
                return Err(TensorError::Shape {
                    op: "split_heads",
                    lhs: s.to_vec(),
                    rhs: vec![batch, seq, heads],
                });
            }
            let d = s[1];
            Tensor::new(
                [batch * heads, seq, d / heads],
                split_heads_data(x.data(), batch, seq, heads, d),
            )
        })?;
        Ok(self.record(
            value,
            &[self.id],
            Op::SplitHeads {
                x: self.id,
                batch,
                seq,
                heads,
            },
        ))
    }

    /// Inverse of [`Var::split_heads`].
    pub fn merge_heads(self, batch: usize, seq: usize, heads: usize) -> Result<Var<'t>> {
        let value = self.with_value(|x| {
            let s = x.shape();
            if s.len() != 3 || s[0] != batch * heads || s[1] != seq {
                return Err(TensorError::Shape {
                    op: "merge_heads",
                    lhs: s.to_vec(),
                    rhs: vec![batch, seq, heads],
                });
            }
            let d = s[2] * heads;
            Tensor::new([batch * seq, d], merge_heads_data(x.data(), batch, seq, heads, d))
        })?;
        Ok(self.record(
            value,
            &[self.id],
            Op::MergeHeads {
                x: self.id,
                batch,
                seq,
                heads,
            },
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.with_value(|x| x.reshape(shape.to_vec()))?;
        Ok(self.record(value, &[self.id], Op::Reshape { x: self.id }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let loss = x.mul(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn reused_input_accumulates() {
        let tape = Tape::new();
        let w = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let x = tape.leaf(t(&[2, 1], &[0.5, -1.0]), true);
        let once = w.matmul(x).unwrap().sum();
        let g1 = tape.backward(once).unwrap().get(x).unwrap().clone();
        let twice = once.add(w.matmul(x).unwrap().sum()).unwrap();
        let g2 = tape.backward(twice).unwrap().get(x).unwrap().clone();
        assert_eq!(g1.data(), &[4.0, 6.0]);
        assert_eq!(g2.data(), &[8.0, 12.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones([3]), true);
        assert!(matches!(tape.backward(x.sigmoid()), Err(TensorError::NonScalar(_))));
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::ones([2, 2]), false);
        let m = tape.leaf(Tensor::full([2, 2], 0.5), true);
        let loss = w.mul(m).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(w).is_none());
        assert_eq!(g.get(m).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_leaves_values_untouched() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.1, -0.2, 0.3]), true);
        let y = x.tanh().exp().sum();
        let before = x.value();
        tape.backward(y).unwrap();
        assert!(before.bit_eq(&x.value()));
    }

    #[test]
    fn sigmoid_and_clamp_examples() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::scalar(0.0), true);
        assert_eq!(z.sigmoid().value().item(), 0.5);

        let v = tape.leaf(Tensor::scalar(1.5986), true).sigmoid().value().item();
        assert!((v - 0.8318).abs() < 1e-4, "{v}");

        let x = tape.leaf(Tensor::scalar(1.3), true);
        let c = x.clamp(0.0, 1.0);
        assert_eq!(c.value().item(), 1.0);
        let g = tape.backward(c.sum()).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 0.0);

        let y = tape.leaf(Tensor::scalar(0.4), true);
        let g = tape.backward(y.clamp(0.0, 1.0).sum()).unwrap();
        assert_eq!(g.get(y).unwrap().item(), 1.0);
    }

    #[test]
    fn log_rejects_non_positive() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 0.0, 2.0]), true);
        let err = x.log().unwrap_err();
        assert_eq!(
            err,
            TensorError::Domain {
                op: "log",
                index: 1,
                value: 0.0
            }
        );
    }

    #[test]
    fn broadcasting_is_scalar_or_same_shape_only() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::ones([2, 3]), true);
        let s = tape.leaf(Tensor::scalar(2.0), true);
        let y = a.mul(s).unwrap();
        assert_eq!(y.shape(), vec![2, 3]);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(s).unwrap().item(), 6.0);
        assert_eq!(g.get(a).unwrap().data(), &[2.0; 6]);

        let b = tape.leaf(Tensor::ones([3, 2]), true);
        assert!(matches!(a.add(b), Err(TensorError::Shape { op: "add", .. })));
    }

    #[test]
    fn cross_entropy_examples() {
        let tape = Tape::new();
        let uniform = tape.leaf(Tensor::zeros([3, 7]), true);
        let loss = uniform.softmax_cross_entropy(&[0, 3, 6]).unwrap();
        assert!((loss.value().item() - 7f64.ln()).abs() < 1e-12);

        let confident = tape.leaf(t(&[1, 2], &[10.0, -10.0]), true);
        let loss = confident.softmax_cross_entropy(&[0]).unwrap().value().item();
        assert!(loss < 1e-8, "{loss}");

        let err = confident.softmax_cross_entropy(&[2]).unwrap_err();
        assert!(matches!(err, TensorError::Index { index: 2, len: 2, .. }));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn([1, 3, 3], |i| i as f64 * 0.1), true);
        let p = x.softmax(true).unwrap().value();
        assert_eq!(p.data()[0], 1.0);
        assert_eq!(&p.data()[1..3], &[0.0, 0.0]);
        assert_eq!(p.data()[5], 0.0);
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn split_merge_heads_are_inverse() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn([6, 4], |i| i as f64), true);
        let s = x.split_heads(2, 3, 2).unwrap();
        assert_eq!(s.shape(), vec![4, 3, 2]);
        // batch 0, head 1, position 0 holds columns 2..4 of row 0
        assert_eq!(&s.value().data()[6..8], &[2.0, 3.0]);
        let m = s.merge_heads(2, 3, 2).unwrap();
        assert!(m.value().bit_eq(&x.value()));
    }

    #[test]
    fn layer_norm_moments() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn([4, 16], |i| ((i * 37) % 11) as f64 - 3.3), true);
        let y = x.layer_norm(1e-12).value();
        for row in y.data().chunks(16) {
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-8);
        }
    }
}
