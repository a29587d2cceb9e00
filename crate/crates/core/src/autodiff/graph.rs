use std::cell::RefCell;
use std::sync::Arc;

use super::tensor::{gemm, MatView, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// One batch element of a fused attention call: rows of the query matrix
/// attend to rows of the key/value matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

/// Layout of a (possibly batched, possibly causal) multi-head attention call.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayout {
    pub heads: usize,
    /// Query `i` may see key `j` only when `j <= i + (k_len - q_len)`.
    pub causal: bool,
    pub segments: Vec<Segment>,
}

impl AttentionLayout {
    /// Single unbatched segment covering `q_len` queries and `k_len` keys.
    pub fn single(heads: usize, causal: bool, q_len: usize, k_len: usize) -> Self {
        Self {
            heads,
            causal,
            segments: vec![Segment {
                q_start: 0,
                q_len,
                k_start: 0,
                k_len,
            }],
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRows {
        a: usize,
        rows: usize,
        group: usize,
    },
    RepeatRows {
        a: usize,
        group: usize,
    },
    Scale(usize, f64),
    AddScalar(usize),
    Sigmoid(usize),
    Relu(usize),
    Softplus(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(usize),
    LogSoftmax(usize),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows {
        a: usize,
        start: usize,
    },
    SliceCols {
        a: usize,
        start: usize,
    },
    GatherRows {
        table: usize,
        idx: Vec<usize>,
    },
    Pick {
        a: usize,
        idx: Vec<usize>,
    },
    Reshape(usize),
    GroupMax {
        a: usize,
        argmax: Vec<usize>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        layout: AttentionLayout,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } => vec![*a, *b],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![*a, *b],
            AddRows { a, rows, .. } => vec![*a, *rows],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            ConcatRows(ids) | ConcatCols(ids) => ids.clone(),
            GatherRows { table, .. } => vec![*table],
            Attention { q, k, v, .. } => vec![*q, *k, *v],
            RepeatRows { a, .. }
            | Scale(a, _)
            | AddScalar(a)
            | Sigmoid(a)
            | Relu(a)
            | Softplus(a)
            | Softmax(a)
            | LogSoftmax(a)
            | Sum(a)
            | Mean(a)
            | SumLast(a)
            | SliceRows { a, .. }
            | SliceCols { a, .. }
            | Pick { a, .. }
            | Reshape(a)
            | GroupMax { a, .. } => vec![*a],
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so node ids
/// are already a topological order of the computation.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
}

/// Handle to a value recorded on a [`Graph`]: the data, its backward rule,
/// and (after [`Graph::backward`]) its accumulated gradient.
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn param(&self, value: impl Into<Arc<Tensor>>) -> Var<'_> {
        self.leaf(value.into(), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: impl Into<Arc<Tensor>>) -> Var<'_> {
        self.leaf(value.into(), false)
    }

    pub fn leaf(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        self.push_node(value, Op::Leaf, requires_grad)
    }

    fn push_node(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        self.push_node(Arc::new(value), op, requires_grad)
    }

    fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Drops every accumulated gradient.
    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    /// Accumulates `d loss / d leaf` into every reachable trainable leaf.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));

        let mut store = self.grads.borrow_mut();
        if store.len() < nodes.len() {
            store.resize_with(nodes.len(), || None);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                match &mut store[id] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            propagate(&nodes, node, &g, &mut grads);
        }
        Ok(())
    }

    fn grad_of(&self, id: usize) -> Option<Tensor> {
        self.grads.borrow().get(id).and_then(Clone::clone)
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn zeros_like(t: &Tensor) -> Tensor {
    Tensor::zeros(t.shape())
}

fn with_shape(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("shape matches by construction")
}

fn propagate(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let needs = |i: usize| nodes[i].requires_grad;
    let out = &node.value;
    match &node.op {
        Op::Leaf => unreachable!("leaves are handled by the caller"),
        Op::MatMul { a, b, ta, tb } => {
            let (av, bv) = (val(*a), val(*b));
            let a_op = if *ta { av.view().t() } else { av.view() };
            let b_op = if *tb { bv.view().t() } else { bv.view() };
            let gv = g.view();
            if needs(*a) {
                let mut da = zeros_like(av);
                let cols = av.cols();
                if *ta {
                    gemm(1.0, b_op, gv.t(), 0.0, da.data_mut(), cols);
                } else {
                    gemm(1.0, gv, b_op.t(), 0.0, da.data_mut(), cols);
                }
                accumulate(nodes, grads, *a, da);
            }
            if needs(*b) {
                let mut db = zeros_like(bv);
                let cols = bv.cols();
                if *tb {
                    gemm(1.0, gv.t(), a_op, 0.0, db.data_mut(), cols);
                } else {
                    gemm(1.0, a_op.t(), gv, 0.0, db.data_mut(), cols);
                }
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if needs(*a) {
                let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                accumulate(nodes, grads, *a, with_shape(av.shape(), d));
            }
            if needs(*b) {
                let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                accumulate(nodes, grads, *b, with_shape(bv.shape(), d));
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if needs(*a) {
                let d = g.data().iter().zip(bv.data()).map(|(x, y)| x / y).collect();
                accumulate(nodes, grads, *a, with_shape(av.shape(), d));
            }
            if needs(*b) {
                let d = g
                    .data()
                    .iter()
                    .zip(av.data().iter().zip(bv.data()))
                    .map(|(gi, (x, y))| -gi * x / (y * y))
                    .collect();
                accumulate(nodes, grads, *b, with_shape(bv.shape(), d));
            }
        }
        Op::AddRows { a, rows, group } => {
            accumulate(nodes, grads, *a, g.clone());
            if needs(*rows) {
                let rv = val(*rows);
                let c = rv.cols();
                let mut d = zeros_like(rv);
                for (r, grow) in g.data().chunks(c).enumerate() {
                    let dst = &mut d.data_mut()[(r / group) * c..(r / group + 1) * c];
                    for (x, y) in dst.iter_mut().zip(grow) {
                        *x += y;
                    }
                }
                accumulate(nodes, grads, *rows, d);
            }
        }
        Op::RepeatRows { a, group } => {
            let av = val(*a);
            let c = av.cols();
            let mut d = zeros_like(av);
            for (r, grow) in g.data().chunks(c).enumerate() {
                let dst = &mut d.data_mut()[(r / group) * c..(r / group + 1) * c];
                for (x, y) in dst.iter_mut().zip(grow) {
                    *x += y;
                }
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::Scale(a, s) => accumulate(nodes, grads, *a, g.map(|v| v * s)),
        Op::AddScalar(a) => accumulate(nodes, grads, *a, g.clone()),
        Op::Sigmoid(a) => {
            let d = g
                .data()
                .iter()
                .zip(out.data())
                .map(|(gi, y)| gi * y * (1.0 - y))
                .collect();
            accumulate(nodes, grads, *a, with_shape(out.shape(), d));
        }
        Op::Relu(a) => {
            let d = g
                .data()
                .iter()
                .zip(val(*a).data())
                .map(|(gi, x)| if *x > 0.0 { *gi } else { 0.0 })
                .collect();
            accumulate(nodes, grads, *a, with_shape(out.shape(), d));
        }
        Op::Softplus(a) => {
            let d = g
                .data()
                .iter()
                .zip(val(*a).data())
                .map(|(gi, x)| gi * sigmoid(*x))
                .collect();
            accumulate(nodes, grads, *a, with_shape(out.shape(), d));
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
        } => {
            let xv = val(*x);
            let gam = val(*gamma).data();
            let c = xv.cols();
            let mut dx = if needs(*x) {
                Some(zeros_like(xv))
            } else {
                None
            };
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut xhat = vec![0.0; c];
            let mut dxhat = vec![0.0; c];
            for r in 0..xv.rows() {
                let xr = xv.row(r);
                let gr = g.row(r);
                for j in 0..c {
                    xhat[j] = (xr[j] - mean[r]) * rstd[r];
                    dgamma[j] += gr[j] * xhat[j];
                    dbeta[j] += gr[j];
                    dxhat[j] = gr[j] * gam[j];
                }
                if let Some(dx) = dx.as_mut() {
                    let m1 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    let dst = &mut dx.data_mut()[r * c..(r + 1) * c];
                    for j in 0..c {
                        dst[j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
            }
            if let Some(dx) = dx {
                accumulate(nodes, grads, *x, dx);
            }
            accumulate(nodes, grads, *gamma, with_shape(&[c], dgamma));
            accumulate(nodes, grads, *beta, with_shape(&[c], dbeta));
        }
        Op::Softmax(a) => {
            let c = out.cols();
            let mut d = zeros_like(out);
            for r in 0..out.rows() {
                let (y, gr) = (out.row(r), g.row(r));
                let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                for (j, dst) in d.data_mut()[r * c..(r + 1) * c].iter_mut().enumerate() {
                    *dst = y[j] * (gr[j] - dot);
                }
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::LogSoftmax(a) => {
            let c = out.cols();
            let mut d = zeros_like(out);
            for r in 0..out.rows() {
                let (y, gr) = (out.row(r), g.row(r));
                let total: f64 = gr.iter().sum();
                for (j, dst) in d.data_mut()[r * c..(r + 1) * c].iter_mut().enumerate() {
                    *dst = gr[j] - y[j].exp() * total;
                }
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::Sum(a) => {
            let av = val(*a);
            accumulate(nodes, grads, *a, Tensor::full(av.shape(), g.item()));
        }
        Op::Mean(a) => {
            let av = val(*a);
            let n = av.numel().max(1) as f64;
            accumulate(nodes, grads, *a, Tensor::full(av.shape(), g.item() / n));
        }
        Op::SumLast(a) => {
            let av = val(*a);
            let c = av.cols();
            let d = (0..av.numel()).map(|i| g.data()[i / c]).collect();
            accumulate(nodes, grads, *a, with_shape(av.shape(), d));
        }
        Op::ConcatRows(ids) => {
            let mut offset = 0;
            for &i in ids {
                let n = val(i).numel();
                if needs(i) {
                    let d = g.data()[offset..offset + n].to_vec();
                    accumulate(nodes, grads, i, with_shape(val(i).shape(), d));
                }
                offset += n;
            }
        }
        Op::ConcatCols(ids) => {
            let total = out.cols();
            let mut offset = 0;
            for &i in ids {
                let iv = val(i);
                let c = iv.cols();
                if needs(i) {
                    let mut d = Vec::with_capacity(iv.numel());
                    for r in 0..iv.rows() {
                        d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                    }
                    accumulate(nodes, grads, i, with_shape(iv.shape(), d));
                }
                offset += c;
            }
        }
        Op::SliceRows { a, start } => {
            let av = val(*a);
            let c = av.cols();
            let mut d = zeros_like(av);
            d.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
            accumulate(nodes, grads, *a, d);
        }
        Op::SliceCols { a, start } => {
            let av = val(*a);
            let (c, w) = (av.cols(), out.cols());
            let mut d = zeros_like(av);
            for r in 0..av.rows() {
                d.data_mut()[r * c + start..r * c + start + w].copy_from_slice(g.row(r));
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::GatherRows { table, idx } => {
            let tv = val(*table);
            let c = tv.cols();
            let mut d = zeros_like(tv);
            for (r, &src) in idx.iter().enumerate() {
                let dst = &mut d.data_mut()[src * c..(src + 1) * c];
                for (x, y) in dst.iter_mut().zip(g.row(r)) {
                    *x += y;
                }
            }
            accumulate(nodes, grads, *table, d);
        }
        Op::Pick { a, idx } => {
            let av = val(*a);
            let c = av.cols();
            let mut d = zeros_like(av);
            for (r, &j) in idx.iter().enumerate() {
                d.data_mut()[r * c + j] = g.data()[r];
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::Reshape(a) => {
            let d = g.clone().reshaped(val(*a).shape()).expect("same numel");
            accumulate(nodes, grads, *a, d);
        }
        Op::GroupMax { a, argmax } => {
            let av = val(*a);
            let c = av.cols();
            let mut d = zeros_like(av);
            for (o, &src_row) in argmax.iter().enumerate() {
                d.data_mut()[src_row * c + o % c] += g.data()[o];
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::Attention {
            q,
            k,
            v,
            layout,
            probs,
        } => {
            attention_backward(nodes, grads, (*q, *k, *v), layout, probs, g);
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn visible(layout: &AttentionLayout, seg: &Segment, i: usize) -> usize {
    if layout.causal {
        (i + 1 + seg.k_len.saturating_sub(seg.q_len)).min(seg.k_len)
    } else {
        seg.k_len
    }
}

fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    layout: &AttentionLayout,
) -> (Tensor, Vec<f64>) {
    let d = q.cols();
    let dh = d / layout.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor::zeros(&[q.rows(), v.cols()]);
    let probs_len: usize = layout
        .segments
        .iter()
        .map(|s| s.q_len * s.k_len)
        .sum::<usize>()
        * layout.heads;
    let mut probs = vec![0.0; probs_len];
    let mut offset = 0;
    for seg in &layout.segments {
        let (ql, kl) = (seg.q_len, seg.k_len);
        if ql == 0 {
            continue;
        }
        for h in 0..layout.heads {
            let p = &mut probs[offset..offset + ql * kl];
            offset += ql * kl;
            let qh = MatView::cols_of(&q.data()[seg.q_start * d..], ql, d, h * dh, dh);
            let kh = MatView::cols_of(&k.data()[seg.k_start * d..], kl, d, h * dh, dh);
            gemm(scale, qh, kh.t(), 0.0, p, kl);
            for i in 0..ql {
                let row = &mut p[i * kl..(i + 1) * kl];
                let vis = visible(layout, seg, i);
                let max = row[..vis].iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                let mut total = 0.0;
                for x in &mut row[..vis] {
                    *x = (*x - max).exp();
                    total += *x;
                }
                for x in &mut row[..vis] {
                    *x /= total;
                }
                for x in &mut row[vis..] {
                    *x = 0.0;
                }
            }
            let dv = v.cols() / layout.heads;
            let vh = MatView::cols_of(
                &v.data()[seg.k_start * v.cols()..],
                kl,
                v.cols(),
                h * dv,
                dv,
            );
            let pv = MatView::new(p, ql, kl);
            let vc = v.cols();
            gemm(
                1.0,
                pv,
                vh,
                0.0,
                &mut out.data_mut()[seg.q_start * vc + h * dv..],
                vc,
            );
        }
    }
    (out, probs)
}

fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Tensor>],
    (q, k, v): (usize, usize, usize),
    layout: &AttentionLayout,
    probs: &[f64],
    g: &Tensor,
) {
    let (qv, kv, vv) = (&nodes[q].value, &nodes[k].value, &nodes[v].value);
    let d = qv.cols();
    let dh = d / layout.heads;
    let vc = vv.cols();
    let dvh = vc / layout.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = zeros_like(qv);
    let mut dk = zeros_like(kv);
    let mut dv = zeros_like(vv);
    let mut offset = 0;
    let mut dp = Vec::new();
    for seg in &layout.segments {
        let (ql, kl) = (seg.q_len, seg.k_len);
        if ql == 0 {
            continue;
        }
        for h in 0..layout.heads {
            let p = &probs[offset..offset + ql * kl];
            offset += ql * kl;
            let pv = MatView::new(p, ql, kl);
            let gh = MatView::cols_of(&g.data()[seg.q_start * vc..], ql, vc, h * dvh, dvh);
            // dV += Pᵀ dO
            gemm(
                1.0,
                pv.t(),
                gh,
                1.0,
                &mut dv.data_mut()[seg.k_start * vc + h * dvh..],
                vc,
            );
            // dP = dO Vᵀ, then through the softmax
            dp.clear();
            dp.resize(ql * kl, 0.0);
            let vh = MatView::cols_of(&vv.data()[seg.k_start * vc..], kl, vc, h * dvh, dvh);
            gemm(1.0, gh, vh.t(), 0.0, &mut dp, kl);
            for i in 0..ql {
                let pr = &p[i * kl..(i + 1) * kl];
                let dr = &mut dp[i * kl..(i + 1) * kl];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (x, pj) in dr.iter_mut().zip(pr) {
                    *x = pj * (*x - dot) * scale;
                }
            }
            let ds = MatView::new(&dp, ql, kl);
            let qh = MatView::cols_of(&qv.data()[seg.q_start * d..], ql, d, h * dh, dh);
            let kh = MatView::cols_of(&kv.data()[seg.k_start * d..], kl, d, h * dh, dh);
            gemm(
                1.0,
                ds,
                kh,
                1.0,
                &mut dq.data_mut()[seg.q_start * d + h * dh..],
                d,
            );
            gemm(
                1.0,
                ds.t(),
                qh,
                1.0,
                &mut dk.data_mut()[seg.k_start * d + h * dh..],
                d,
            );
        }
    }
    accumulate(nodes, grads, q, dq);
    accumulate(nodes, grads, k, dk);
    accumulate(nodes, grads, v, dv);
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let d = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| f(*x, *y))
        .collect();
    with_shape(a.shape(), d)
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Parents that receive gradient from this node during backward.
    pub fn parents(&self) -> Vec<usize> {
        let nodes = self.graph.nodes.borrow();
        nodes[self.id]
            .op
            .inputs()
            .into_iter()
            .filter(|&i| nodes[i].requires_grad)
            .collect()
    }

    /// Accumulated gradient; `None` until a backward pass reaches this leaf.
    pub fn grad(&self) -> Option<Tensor> {
        self.graph.grad_of(self.id)
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars from different graphs"
        );
    }

    fn unary(self, op: Op, value: Tensor) -> Var<'g> {
        self.graph.push(value, op)
    }

    /// `op(self) · op(other)` where `op` optionally transposes a 2-D operand.
    pub fn matmul_ext(self, other: Var<'g>, ta: bool, tb: bool) -> Result<Var<'g>> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape().len() != 2 || b.shape().len() != 2 {
            return Err(Error::dim("matmul", a.shape(), b.shape()));
        }
        let av = if ta { a.view().t() } else { a.view() };
        let bv = if tb { b.view().t() } else { b.view() };
        if av.cols != bv.rows {
            return Err(Error::dim("matmul", a.shape(), b.shape()));
        }
        let mut c = Tensor::zeros(&[av.rows, bv.cols]);
        gemm(1.0, av, bv, 0.0, c.data_mut(), bv.cols);
        Ok(self.graph.push(
            c,
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
        ))
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.matmul_ext(other, false, false)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(self, other: Var<'g>) -> Result<Var<'g>> {
        self.matmul_ext(other, false, true)
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        check_same("add", &a, &b)?;
        Ok(self
            .graph
            .push(zip_map(&a, &b, |x, y| x + y), Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        check_same("sub", &a, &b)?;
        Ok(self
            .graph
            .push(zip_map(&a, &b, |x, y| x - y), Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        check_same("mul", &a, &b)?;
        Ok(self
            .graph
            .push(zip_map(&a, &b, |x, y| x * y), Op::Mul(self.id, other.id)))
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        check_same("div", &a, &b)?;
        Ok(self
            .graph
            .push(zip_map(&a, &b, |x, y| x / y), Op::Div(self.id, other.id)))
    }

    /// Adds a `[c]` vector to every row of a `[r, c]` matrix.
    pub fn add_row(self, row: Var<'g>) -> Result<Var<'g>> {
        let rows = self.value().rows();
        self.add_rows_grouped(row, rows)
    }

    /// Adds row `g` of a `[G, c]` matrix to rows `g*group .. (g+1)*group`.
    pub fn add_rows_grouped(self, rows: Var<'g>, group: usize) -> Result<Var<'g>> {
        self.same_graph(&rows);
        let (a, r) = (self.value(), rows.value());
        let c = a.cols();
        if r.cols() != c || group == 0 || r.rows() * group != a.rows() {
            return Err(Error::dim("add_rows", a.shape(), r.shape()));
        }
        let mut out = (*a).clone();
        for (i, dst) in out.data_mut().chunks_mut(c).enumerate() {
            for (x, y) in dst.iter_mut().zip(r.row(i / group)) {
                *x += y;
            }
        }
        Ok(self.graph.push(
            out,
            Op::AddRows {
                a: self.id,
                rows: rows.id,
                group,
            },
        ))
    }

    /// Repeats each row `group` times: `[G, c] -> [G*group, c]`.
    pub fn repeat_rows(self, group: usize) -> Var<'g> {
        let a = self.value();
        let c = a.cols();
        let mut data = Vec::with_capacity(a.numel() * group);
        for r in 0..a.rows() {
            for _ in 0..group {
                data.extend_from_slice(a.row(r));
            }
        }
        let out = with_shape(&[a.rows() * group, c], data);
        self.unary(Op::RepeatRows { a: self.id, group }, out)
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        let out = self.value().map(|v| v * s);
        self.unary(Op::Scale(self.id, s), out)
    }

    pub fn add_scalar(self, s: f64) -> Var<'g> {
        let out = self.value().map(|v| v + s);
        self.unary(Op::AddScalar(self.id), out)
    }

    pub fn sigmoid(self) -> Var<'g> {
        let out = self.value().map(sigmoid);
        self.unary(Op::Sigmoid(self.id), out)
    }

    pub fn relu(self) -> Var<'g> {
        let out = self.value().map(|v| v.max(0.0));
        self.unary(Op::Relu(self.id), out)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'g> {
        let out = self.value().map(softplus);
        self.unary(Op::Softplus(self.id), out)
    }

    /// Normalizes the last axis, then applies `gamma * x̂ + beta` (epsilon 1e-5).
    pub fn layer_norm(self, gamma: Var<'g>, beta: Var<'g>) -> Result<Var<'g>> {
        let x = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        let c = x.cols();
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::dim("layer_norm", x.shape(), gv.shape()));
        }
        let rows = x.rows();
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Tensor::zeros(x.shape());
        for r in 0..rows {
            let xr = x.row(r);
            let mu = xr.iter().sum::<f64>() / c as f64;
            let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            let dst = &mut out.data_mut()[r * c..(r + 1) * c];
            for j in 0..c {
                dst[j] = (xr[j] - mu) * rs * gv.data()[j] + bv.data()[j];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        Ok(self.graph.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                mean,
                rstd,
            },
        ))
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax(self) -> Var<'g> {
        let x = self.value();
        let mut out = (*x).clone();
        let c = x.cols();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.unary(Op::Softmax(self.id), out)
    }

    pub fn log_softmax(self) -> Var<'g> {
        let x = self.value();
        let mut out = (*x).clone();
        let c = x.cols();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.unary(Op::LogSoftmax(self.id), out)
    }

    pub fn sum(self) -> Var<'g> {
        let s = self.value().data().iter().sum();
        self.unary(Op::Sum(self.id), Tensor::scalar(s))
    }

    pub fn mean(self) -> Var<'g> {
        let x = self.value();
        let s = x.data().iter().sum::<f64>() / x.numel().max(1) as f64;
        self.unary(Op::Mean(self.id), Tensor::scalar(s))
    }

    /// Sums the last axis: `[r, c] -> [r]`.
    pub fn sum_last(self) -> Var<'g> {
        let x = self.value();
        let data: Vec<f64> = x
            .data()
            .chunks(x.cols().max(1))
            .map(|r| r.iter().sum())
            .collect();
        let n = data.len();
        self.unary(Op::SumLast(self.id), with_shape(&[n], data))
    }

    /// Stacks 2-D parts with equal column counts.
    pub fn concat_rows(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let c = first.value().cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            first.same_graph(p);
            let v = p.value();
            if v.cols() != c {
                return Err(Error::dim("concat_rows", &first.shape(), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = with_shape(&[rows, c], data);
        Ok(first
            .graph
            .push(out, Op::ConcatRows(parts.iter().map(|p| p.id).collect())))
    }

    pub fn concat_cols(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let rows = first.value().rows();
        let values: Vec<_> = parts.iter().map(Var::value).collect();
        for v in &values {
            if v.rows() != rows {
                return Err(Error::dim("concat_cols", &first.shape(), v.shape()));
            }
        }
        let total: usize = values.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let out = with_shape(&[rows, total], data);
        Ok(first
            .graph
            .push(out, Op::ConcatCols(parts.iter().map(|p| p.id).collect())))
    }

    /// Rows `[start, end)` of a matrix.
    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'g>> {
        let x = self.value();
        if start > end || end > x.rows() {
            return Err(Error::Contract(format!(
                "slice_rows {start}..{end} of {:?}",
                x.shape()
            )));
        }
        let c = x.cols();
        let out = with_shape(&[end - start, c], x.data()[start * c..end * c].to_vec());
        Ok(self.unary(Op::SliceRows { a: self.id, start }, out))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'g>> {
        let x = self.value();
        let c = x.cols();
        if start > end || end > c {
            return Err(Error::Contract(format!(
                "slice_cols {start}..{end} of {:?}",
                x.shape()
            )));
        }
        let mut data = Vec::with_capacity(x.rows() * (end - start));
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row(r)[start..end]);
        }
        let out = with_shape(&[x.rows(), end - start], data);
        Ok(self.unary(Op::SliceCols { a: self.id, start }, out))
    }

    /// `out[i] = self[idx[i]]`; gradient scatters back into the selected rows.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'g>> {
        let t = self.value();
        let c = t.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= t.rows() {
                return Err(Error::Contract(format!(
                    "row index {i} out of {} rows",
                    t.rows()
                )));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = with_shape(&[idx.len(), c], data);
        Ok(self.unary(
            Op::GatherRows {
                table: self.id,
                idx: idx.to_vec(),
            },
            out,
        ))
    }

    /// Row lookup into an embedding table.
    pub fn embedding_lookup(self, ids: &[usize]) -> Result<Var<'g>> {
        self.gather_rows(ids)
    }

    /// `out[r] = self[r, idx[r]]`.
    pub fn pick(self, idx: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        if idx.len() != x.rows() {
            return Err(Error::dim("pick", x.shape(), &[idx.len()]));
        }
        let c = x.cols();
        let mut data = Vec::with_capacity(idx.len());
        for (r, &j) in idx.iter().enumerate() {
            if j >= c {
                return Err(Error::Contract(format!("column {j} out of {c}")));
            }
            data.push(x.data()[r * c + j]);
        }
        let out = with_shape(&[idx.len()], data);
        Ok(self.unary(
            Op::Pick {
                a: self.id,
                idx: idx.to_vec(),
            },
            out,
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let out = (*self.value()).clone().reshaped(shape)?;
        Ok(self.unary(Op::Reshape(self.id), out))
    }

    /// Column-wise max over consecutive groups of `group` rows: `[G*group, c] -> [G, c]`.
    pub fn group_max(self, group: usize) -> Result<Var<'g>> {
        let x = self.value();
        if group == 0 || x.rows() % group != 0 {
            return Err(Error::Contract(format!(
                "group_max({group}) of {:?}",
                x.shape()
            )));
        }
        let c = x.cols();
        let groups = x.rows() / group;
        let mut data = vec![f64::NEG_INFINITY; groups * c];
        let mut argmax = vec![0usize; groups * c];
        for r in 0..x.rows() {
            let gi = r / group;
            for (j, &v) in x.row(r).iter().enumerate() {
                let o = gi * c + j;
                if v > data[o] {
                    data[o] = v;
                    argmax[o] = r;
                }
            }
        }
        let out = with_shape(&[groups, c], data);
        Ok(self.unary(Op::GroupMax { a: self.id, argmax }, out))
    }

    /// Scaled dot-product attention, `softmax(q kᵀ / sqrt(d_head)) v`, per head and per segment.
    pub fn attention(self, k: Var<'g>, v: Var<'g>, layout: &AttentionLayout) -> Result<Var<'g>> {
        self.same_graph(&k);
        self.same_graph(&v);
        let (qv, kv, vv) = (self.value(), k.value(), v.value());
        if qv.shape().len() != 2 || qv.cols() != kv.cols() || kv.rows() != vv.rows() {
            return Err(Error::dim("attention", qv.shape(), kv.shape()));
        }
        if layout.heads == 0 || qv.cols() % layout.heads != 0 || vv.cols() % layout.heads != 0 {
            return Err(Error::Contract(format!(
                "width {} not divisible by {} heads",
                qv.cols(),
                layout.heads
            )));
        }
        for s in &layout.segments {
            if s.q_start + s.q_len > qv.rows() || s.k_start + s.k_len > kv.rows() || s.k_len == 0 {
                return Err(Error::Contract(format!("bad attention segment {s:?}")));
            }
        }
        let (out, probs) = attention_forward(&qv, &kv, &vv, layout);
        Ok(self.graph.push(
            out,
            Op::Attention {
                q: self.id,
                k: k.id,
                v: v.id,
                layout: layout.clone(),
                probs,
            },
        ))
    }
}
