use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::conv::{gemm, Conv2dSpec, ConvGeometry, MatRef};
use super::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Neg,
    Scale(f64),
    Offset(f64),
    Relu,
    Exp,
    Log,
    Sqrt,
    Sigmoid,
    Clamp(f64, f64),
    /// Identity forward, gradient multiplied by the factor on the way back.
    ScaleGrad(f64),
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Scale(_) => "scale",
            Unary::Offset(_) => "offset",
            Unary::Relu => "relu",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Sqrt => "sqrt",
            Unary::Sigmoid => "sigmoid",
            Unary::Clamp(..) => "clamp",
            Unary::ScaleGrad(_) => "scale_grad",
        }
    }

    fn forward(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Scale(c) => c * x,
            Unary::Offset(c) => x + c,
            Unary::Relu => x.max(0.0),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
            Unary::ScaleGrad(_) => x,
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Scale(c) => c,
            Unary::Offset(_) => 1.0,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Sqrt => 0.5 / y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Clamp(lo, hi) => {
                if (lo..=hi).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::ScaleGrad(f) => f,
        }
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

enum Op {
    Leaf,
    Binary(usize, usize, Binary),
    Unary(usize, Unary),
    /// Sum of input elements into output slots; `map[i]` is the output slot of
    /// input element `i`, `scale` is 1 for sums and `1/count` for means.
    Reduce {
        a: usize,
        map: Vec<usize>,
        scale: f64,
    },
    Softmax {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    L2NormRows {
        a: usize,
        cols: usize,
    },
    Conv2d {
        input: usize,
        weight: usize,
        geom: ConvGeometry,
        positions: Rc<[usize]>,
        cols: Vec<f64>,
    },
    ChannelBias {
        a: usize,
        bias: usize,
        plane: usize,
    },
    GatherPixels {
        a: usize,
        pixels: Rc<[usize]>,
        first_channel: usize,
        channels: usize,
        plane: usize,
    },
    SelectRow {
        a: usize,
        row: usize,
    },
    ExpandRows {
        a: usize,
        rows: usize,
    },
    ConcatCols {
        a: usize,
        b: usize,
        rows: usize,
        ca: usize,
        cb: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary(_, _, Binary::Add) => "add",
            Op::Binary(_, _, Binary::Sub) => "sub",
            Op::Binary(_, _, Binary::Mul) => "mul",
            Op::Binary(_, _, Binary::Div) => "div",
            Op::Unary(_, u) => u.name(),
            Op::Reduce { .. } => "reduce",
            Op::Softmax { .. } => "softmax",
            Op::L2NormRows { .. } => "l2norm_rows",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelBias { .. } => "add_channel_bias",
            Op::GatherPixels { .. } => "gather_pixels",
            Op::SelectRow { .. } => "select_row",
            Op::ExpandRows { .. } => "expand_rows",
            Op::ConcatCols { .. } => "concat_cols",
            Op::MatMul { .. } => "matmul",
            Op::Reshape(_) => "reshape",
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Record of executed operations. Node ids increase in creation order, which
/// is a topological order of the computation graph.
///
/// A tape is single-threaded (`!Sync`); build a fresh one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
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

    /// Register a trainable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, true, Op::Leaf)
    }

    /// Register an input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, false, Op::Leaf)
    }

    fn push_node(&self, value: Tensor, requires_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op, parents: &[usize]) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        Ok(self.push_node(value, requires_grad, op))
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse-mode sweep from a scalar `loss`. Every node that depends on a
    /// trainable leaf receives its gradient.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to another tape");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: node.op.name() });
            }
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                g.map(|g| Tensor {
                    shape: n.value.shape().to_vec(),
                    data: g,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Gradient buffer for node `id`, allocated on first use. Returns `None` when
/// the node does not participate in differentiation.
fn slot<'g>(
    nodes: &[Node],
    grads: &'g mut [Option<Vec<f64>>],
    id: usize,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]))
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Binary(a, b, kind) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (sa, sb) = (av.numel() == 1, bv.numel() == 1);
            let n = g.len();
            let ai = |i: usize| if sa { av.data[0] } else { av.data[i] };
            let bi = |i: usize| if sb { bv.data[0] } else { bv.data[i] };
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..n {
                    let d = match kind {
                        Binary::Add | Binary::Sub => 1.0,
                        Binary::Mul => bi(i),
                        Binary::Div => 1.0 / bi(i),
                    };
                    ga[if sa { 0 } else { i }] += g[i] * d;
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for i in 0..n {
                    let d = match kind {
                        Binary::Add => 1.0,
                        Binary::Sub => -1.0,
                        Binary::Mul => ai(i),
                        Binary::Div => -ai(i) / (bi(i) * bi(i)),
                    };
                    gb[if sb { 0 } else { i }] += g[i] * d;
                }
            }
        }
        Op::Unary(a, kind) => {
            let x = &nodes[*a].value;
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * kind.derivative(x.data[i], y.data[i]);
                }
            }
        }
        Op::Reduce { a, map, scale } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for (gi, &o) in ga.iter_mut().zip(map) {
                    *gi += g[o] * scale;
                }
            }
        }
        Op::Softmax {
            a,
            outer,
            len,
            inner,
        } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for o in 0..*outer {
                    for j in 0..*inner {
                        let at = |l: usize| (o * len + l) * inner + j;
                        let dot: f64 = (0..*len).map(|l| g[at(l)] * y.data[at(l)]).sum();
                        for l in 0..*len {
                            ga[at(l)] += y.data[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
            }
        }
        Op::L2NormRows { a, cols } => {
            let x = &nodes[*a].value;
            if let Some(ga) = slot(nodes, grads, *a) {
                for (r, (&gr, &norm)) in g.iter().zip(&y.data).enumerate() {
                    if norm == 0.0 {
                        continue;
                    }
                    for c in 0..*cols {
                        let i = r * cols + c;
                        ga[i] += gr * x.data[i] / norm;
                    }
                }
            }
        }
        Op::Conv2d {
            input,
            weight,
            geom,
            positions,
            cols,
        } => {
            let n = positions.len();
            let (c_out, patch) = (geom.c_out, geom.patch_len());
            let plane = geom.out_positions();
            let mut g_compact = vec![0.0; c_out * n];
            for o in 0..c_out {
                for (j, &p) in positions.iter().enumerate() {
                    g_compact[o * n + j] = g[o * plane + p];
                }
            }
            if let Some(gw) = slot(nodes, grads, *weight) {
                gemm(
                    c_out,
                    n,
                    patch,
                    MatRef::plain(&g_compact),
                    MatRef::t(cols),
                    gw,
                    true,
                );
            }
            if nodes[*input].requires_grad {
                let w = &nodes[*weight].value;
                let mut g_cols = vec![0.0; patch * n];
                gemm(
                    patch,
                    c_out,
                    n,
                    MatRef::t(&w.data),
                    MatRef::plain(&g_compact),
                    &mut g_cols,
                    false,
                );
                if let Some(gi) = slot(nodes, grads, *input) {
                    geom.col2im(&g_cols, positions, gi);
                }
            }
        }
        Op::ChannelBias { a, bias, plane } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for (gi, v) in ga.iter_mut().zip(g) {
                    *gi += v;
                }
            }
            if let Some(gb) = slot(nodes, grads, *bias) {
                for (c, gbc) in gb.iter_mut().enumerate() {
                    *gbc += g[c * plane..(c + 1) * plane].iter().sum::<f64>();
                }
            }
        }
        Op::GatherPixels {
            a,
            pixels,
            first_channel,
            channels,
            plane,
        } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for (r, &p) in pixels.iter().enumerate() {
                    for c in 0..*channels {
                        ga[(first_channel + c) * plane + p] += g[r * channels + c];
                    }
                }
            }
        }
        Op::SelectRow { a, row } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let d = g.len();
                for (gi, v) in ga[row * d..(row + 1) * d].iter_mut().zip(g) {
                    *gi += v;
                }
            }
        }
        Op::ExpandRows { a, rows } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let d = ga.len();
                for r in 0..*rows {
                    for (gi, v) in ga.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *gi += v;
                    }
                }
            }
        }
        Op::ConcatCols { a, b, rows, ca, cb } => {
            let w = ca + cb;
            if let Some(ga) = slot(nodes, grads, *a) {
                for r in 0..*rows {
                    for c in 0..*ca {
                        ga[r * ca + c] += g[r * w + c];
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for r in 0..*rows {
                    for c in 0..*cb {
                        gb[r * cb + c] += g[r * w + ca + c];
                    }
                }
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let bv = &nodes[*b].value;
                gemm(*m, *n, *k, MatRef::plain(g), MatRef::t(&bv.data), ga, true);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                let av = &nodes[*a].value;
                gemm(*k, *m, *n, MatRef::t(&av.data), MatRef::plain(g), gb, true);
            }
        }
        Op::Reshape(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for (gi, v) in ga.iter_mut().zip(g) {
                    *gi += v;
                }
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` if the loss does
    /// not depend on it through trainable leaves.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but yields zeros for untouched variables.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables from different tapes"
        );
    }

    fn binary(self, other: Var<'t>, kind: Binary, op: &'static str) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let shape = if a.shape() == b.shape() || b.numel() == 1 {
            a.shape().to_vec()
        } else if a.numel() == 1 {
            b.shape().to_vec()
        } else {
            return Err(shape_err(op, &a, &b));
        };
        let n: usize = shape.iter().product();
        let (sa, sb) = (a.numel() == 1, b.numel() == 1);
        let data = (0..n)
            .map(|i| {
                let x = if sa { a.data[0] } else { a.data[i] };
                let y = if sb { b.data[0] } else { b.data[i] };
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        self.tape.push(
            Tensor { shape, data },
            Op::Binary(self.id, other.id, kind),
            &[self.id, other.id],
        )
    }

    /// Elementwise sum. Equal shapes, or either side a single element.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add, "add")
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub, "sub")
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul, "mul")
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Div, "div")
    }

    fn unary(self, kind: Unary) -> Result<Var<'t>> {
        let a = self.value();
        if matches!(kind, Unary::Log | Unary::Sqrt) {
            if let Some(&v) = a.data.iter().find(|v| **v < 0.0) {
                return Err(TensorError::Domain {
                    op: kind.name(),
                    value: v,
                });
            }
        }
        self.tape
            .push(a.map(|v| kind.forward(v)), Op::Unary(self.id, kind), &[self.id])
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.unary(Unary::Neg)
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t>> {
        self.unary(Unary::Scale(factor))
    }

    pub fn add_scalar(self, offset: f64) -> Result<Var<'t>> {
        self.unary(Unary::Offset(offset))
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(Unary::Relu)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(Unary::Exp)
    }

    /// Natural log; negative inputs are a domain error.
    pub fn log(self) -> Result<Var<'t>> {
        self.unary(Unary::Log)
    }

    /// Square root; negative inputs are a domain error.
    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(Unary::Sqrt)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(Unary::Sigmoid)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t>> {
        if lo > hi {
            return Err(TensorError::Invalid(format!("clamp: lo {lo} > hi {hi}")));
        }
        self.unary(Unary::Clamp(lo, hi))
    }

    /// Identity on the forward pass; scales the gradient flowing back.
    pub fn scale_grad(self, factor: f64) -> Result<Var<'t>> {
        self.unary(Unary::ScaleGrad(factor))
    }

    fn reduce(self, axes: &[usize], mean: bool) -> Result<Var<'t>> {
        let op = if mean { "mean" } else { "sum" };
        let a = self.value();
        let shape = a.shape();
        let rank = shape.len();
        let mut reduced = vec![false; rank];
        for &ax in axes {
            if ax >= rank {
                return Err(TensorError::InvalidAxis { op, axis: ax, rank });
            }
            reduced[ax] = true;
        }
        let count: usize = (0..rank).filter(|&i| reduced[i]).map(|i| shape[i]).product();
        if count == 0 || a.numel() == 0 {
            return Err(TensorError::EmptyReduction { op });
        }
        let out_shape: Vec<usize> = (0..rank)
            .filter(|&i| !reduced[i])
            .map(|i| shape[i])
            .collect();
        // Map each input element to its output slot by walking the multi-index.
        let mut map = Vec::with_capacity(a.numel());
        let mut index = vec![0usize; rank];
        for _ in 0..a.numel() {
            let mut o = 0;
            for i in 0..rank {
                if !reduced[i] {
                    o = o * shape[i] + index[i];
                }
            }
            map.push(o);
            for i in (0..rank).rev() {
                index[i] += 1;
                if index[i] < shape[i] {
                    break;
                }
                index[i] = 0;
            }
        }
        let scale = if mean { 1.0 / count as f64 } else { 1.0 };
        let mut data = vec![0.0; out_shape.iter().product()];
        for (&v, &o) in a.data.iter().zip(&map) {
            data[o] += v;
        }
        if mean {
            data.iter_mut().for_each(|v| *v *= scale);
        }
        self.tape.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Reduce {
                a: self.id,
                map,
                scale,
            },
            &[self.id],
        )
    }

    pub fn sum(self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(axes, false)
    }

    pub fn mean(self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(axes, true)
    }

    pub fn sum_all(self) -> Result<Var<'t>> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(&axes, false)
    }

    pub fn mean_all(self) -> Result<Var<'t>> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(&axes, true)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        let shape = a.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let len = shape[axis];
        if len == 0 {
            return Err(TensorError::EmptyReduction { op: "softmax" });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0; a.numel()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |l: usize| (o * len + l) * inner + j;
                let max = (0..len).map(|l| a.data[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for l in 0..len {
                    let e = (a.data[at(l)] - max).exp();
                    data[at(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    data[at(l)] /= total;
                }
            }
        }
        self.tape.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::Softmax {
                a: self.id,
                outer,
                len,
                inner,
            },
            &[self.id],
        )
    }

    /// Row norms `sqrt(sum_d a[n, d]^2 + eps)` of an `[N, D]` matrix.
    pub fn l2norm_rows(self, eps: f64) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(TensorError::Invalid(format!(
                "l2norm_rows: expected [N, D], got {:?}",
                a.shape()
            )));
        }
        if eps < 0.0 {
            return Err(TensorError::Invalid(format!("l2norm_rows: eps {eps} < 0")));
        }
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        if cols == 0 {
            return Err(TensorError::EmptyReduction { op: "l2norm_rows" });
        }
        let data = a
            .data
            .chunks(cols)
            .map(|r| (r.iter().map(|v| v * v).sum::<f64>() + eps).sqrt())
            .collect();
        self.tape.push(
            Tensor {
                shape: vec![rows],
                data,
            },
            Op::L2NormRows { a: self.id, cols },
            &[self.id],
        )
    }

    /// Cross-correlation of a `[C_in, H, W]` input with `[C_out, C_in, kh, kw]`
    /// weights.
    pub fn conv2d(self, weight: Var<'t>, spec: Conv2dSpec) -> Result<Var<'t>> {
        self.conv2d_at(weight, spec, None)
    }

    /// Like [`conv2d`](Self::conv2d), but only the listed flat output positions
    /// are computed; every other output is left at zero. Used to skip work on
    /// pixels that cannot reach the loss.
    pub fn conv2d_at(
        self,
        weight: Var<'t>,
        spec: Conv2dSpec,
        positions: Option<Rc<[usize]>>,
    ) -> Result<Var<'t>> {
        self.same_tape(&weight);
        let (x, w) = (self.value(), weight.value());
        let geom = ConvGeometry::new(x.shape(), w.shape(), spec)?;
        let plane = geom.out_positions();
        let positions: Rc<[usize]> = match positions {
            Some(p) => {
                if let Some(&bad) = p.iter().find(|&&q| q >= plane) {
                    return Err(TensorError::Invalid(format!(
                        "conv2d: output position {bad} outside {plane}"
                    )));
                }
                p
            }
            None => (0..plane).collect(),
        };
        let n = positions.len();
        let cols = geom.im2col(&x.data, &positions);
        let mut compact = vec![0.0; geom.c_out * n];
        gemm(
            geom.c_out,
            geom.patch_len(),
            n,
            MatRef::plain(&w.data),
            MatRef::plain(&cols),
            &mut compact,
            false,
        );
        let mut data = vec![0.0; geom.c_out * plane];
        for o in 0..geom.c_out {
            for (j, &p) in positions.iter().enumerate() {
                data[o * plane + p] = compact[o * n + j];
            }
        }
        self.tape.push(
            Tensor {
                shape: vec![geom.c_out, geom.out_h, geom.out_w],
                data,
            },
            Op::Conv2d {
                input: self.id,
                weight: weight.id,
                geom,
                positions,
                cols,
            },
            &[self.id, weight.id],
        )
    }

    /// Add `bias[c]` to every element of channel `c` of a `[C, ...]` tensor.
    pub fn add_channel_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias);
        let (a, b) = (self.value(), bias.value());
        if a.rank() == 0 || b.rank() != 1 || a.shape()[0] != b.numel() {
            return Err(shape_err("add_channel_bias", &a, &b));
        }
        let plane = a.numel() / b.numel().max(1);
        let mut data = a.data.clone();
        for (c, chunk) in data.chunks_mut(plane.max(1)).enumerate() {
            chunk.iter_mut().for_each(|v| *v += b.data[c]);
        }
        self.tape.push(
            Tensor {
                shape: a.shape().to_vec(),
                data,
            },
            Op::ChannelBias {
                a: self.id,
                bias: bias.id,
                plane,
            },
            &[self.id, bias.id],
        )
    }

    /// Pick pixel columns out of a `[D, H, W]` map: returns `[N, channels.len()]`
    /// with row `n` holding channels `channels` of flat pixel `pixels[n]`.
    pub fn gather_pixels(
        self,
        pixels: Rc<[usize]>,
        channels: std::ops::Range<usize>,
    ) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 3 || channels.end > a.shape()[0] || channels.start > channels.end {
            return Err(TensorError::Invalid(format!(
                "gather_pixels: channels {channels:?} from shape {:?}",
                a.shape()
            )));
        }
        let plane = a.shape()[1] * a.shape()[2];
        if let Some(&bad) = pixels.iter().find(|&&p| p >= plane) {
            return Err(TensorError::Invalid(format!(
                "gather_pixels: pixel {bad} outside {plane}"
            )));
        }
        let width = channels.len();
        let mut data = Vec::with_capacity(pixels.len() * width);
        for &p in pixels.iter() {
            for c in channels.clone() {
                data.push(a.data[c * plane + p]);
            }
        }
        self.tape.push(
            Tensor {
                shape: vec![pixels.len(), width],
                data,
            },
            Op::GatherPixels {
                a: self.id,
                pixels,
                first_channel: channels.start,
                channels: width,
                plane,
            },
            &[self.id],
        )
    }

    /// Row `row` of an `[N, D]` matrix as a `[D]` vector.
    pub fn select_row(self, row: usize) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 || row >= a.shape()[0] {
            return Err(TensorError::Invalid(format!(
                "select_row: row {row} of shape {:?}",
                a.shape()
            )));
        }
        let d = a.shape()[1];
        self.tape.push(
            Tensor {
                shape: vec![d],
                data: a.data[row * d..(row + 1) * d].to_vec(),
            },
            Op::SelectRow { a: self.id, row },
            &[self.id],
        )
    }

    /// Tile a `[D]` vector into `[rows, D]`.
    pub fn expand_rows(self, rows: usize) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 1 {
            return Err(TensorError::Invalid(format!(
                "expand_rows: expected a vector, got {:?}",
                a.shape()
            )));
        }
        let mut data = Vec::with_capacity(rows * a.numel());
        for _ in 0..rows {
            data.extend_from_slice(&a.data);
        }
        self.tape.push(
            Tensor {
                shape: vec![rows, a.numel()],
                data,
            },
            Op::ExpandRows { a: self.id, rows },
            &[self.id],
        )
    }

    /// Side-by-side concatenation of `[N, A]` and `[N, B]` into `[N, A + B]`.
    pub fn concat_cols(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[0] {
            return Err(shape_err("concat_cols", &a, &b));
        }
        let (rows, ca, cb) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&a.data[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&b.data[r * cb..(r + 1) * cb]);
        }
        self.tape.push(
            Tensor {
                shape: vec![rows, ca + cb],
                data,
            },
            Op::ConcatCols {
                a: self.id,
                b: other.id,
                rows,
                ca,
                cb,
            },
            &[self.id, other.id],
        )
    }

    /// Matrix product of `[M, K]` and `[K, N]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(shape_err("matmul", &a, &b));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut data = vec![0.0; m * n];
        gemm(m, k, n, MatRef::plain(&a.data), MatRef::plain(&b.data), &mut data, false);
        self.tape.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            &[self.id, other.id],
        )
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let a = self.value();
        let t = Tensor::new(shape, a.data.clone())?;
        self.tape.push(t, Op::Reshape(self.id), &[self.id])
    }
}
