use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom, Elem};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded in a [`Graph`].
///
/// Handles are cheap to copy. They carry the identity of the graph that
/// produced them so that mixing graphs is reported instead of silently
/// reading the wrong node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tensor {
    graph: u64,
    id: usize,
}

impl Tensor {
    /// Position of the node in its graph's recording order.
    pub fn node_id(&self) -> usize {
        self.id
    }
}

/// Primitive operations understood by the engine.
///
/// Binary arithmetic broadcasts numpy-style (right-aligned, size-1 axes
/// stretch). Image-shaped operations use `[N, C, H, W]` layout.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    /// Elementwise minimum; the gradient goes to the smaller input, ties to
    /// the first.
    Minimum,
    /// Elementwise maximum; ties route to the first input.
    Maximum,
    Neg,
    /// `d|x|/dx` is taken as 0 at `x = 0`.
    Abs,
    Log,
    Exp,
    Sqrt,
    Pow(f64),
    Sigmoid,
    Elu(f64),
    Relu,
    AddScalar(f64),
    MulScalar(f64),
    Clamp {
        min: f64,
        max: f64,
    },
    Sum,
    Mean,
    /// Sum over one axis, keeping it with extent 1.
    SumAxis(usize),
    Reshape(Vec<usize>),
    BroadcastTo(Vec<usize>),
    Concat(usize),
    Narrow {
        axis: usize,
        start: usize,
        len: usize,
    },
    /// Inputs `[x, weight]` or `[x, weight, bias]`; zero padding. With
    /// `single` the matrix products run in f32.
    Conv2d {
        stride: usize,
        padding: usize,
        single: bool,
    },
    UpsampleNearest(usize),
    /// Bilinear resize with half-pixel centres.
    ResizeBilinear {
        height: usize,
        width: usize,
    },
    /// 3x3 box filter with one pixel of reflection padding, stride 1.
    AvgPool3x3,
    /// Per-channel SSIM map of two `[N,C,H,W]` images from 3x3
    /// reflection-padded box statistics.
    Ssim { c1: f64, c2: f64 },
    /// Forward difference along the last axis.
    GradX,
    /// Forward difference along the second to last axis.
    GradY,
    /// Inputs `[image [N,C,H,W], coords [N,2,Ho,Wo]]` with `coords[:,0]` the
    /// column and `coords[:,1]` the row in pixels; border clamped.
    BilinearSample,
    /// `[N,a,b] x [N,b,c] -> [N,a,c]`.
    BatchMatmul,
    /// `[N,3]` axis-angle vectors to `[N,3,3]` rotation matrices.
    AxisAngleToRotation,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Minimum => "minimum",
            OpKind::Maximum => "maximum",
            OpKind::Neg => "neg",
            OpKind::Abs => "abs",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Sqrt => "sqrt",
            OpKind::Pow(_) => "pow",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Elu(_) => "elu",
            OpKind::Relu => "relu",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::MulScalar(_) => "mul_scalar",
            OpKind::Clamp { .. } => "clamp",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumAxis(_) => "sum_axis",
            OpKind::Reshape(_) => "reshape",
            OpKind::BroadcastTo(_) => "broadcast_to",
            OpKind::Concat(_) => "concat",
            OpKind::Narrow { .. } => "narrow",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::UpsampleNearest(_) => "upsample_nearest",
            OpKind::ResizeBilinear { .. } => "resize_bilinear",
            OpKind::AvgPool3x3 => "avg_pool3x3",
            OpKind::Ssim { .. } => "ssim",
            OpKind::GradX => "grad_x",
            OpKind::GradY => "grad_y",
            OpKind::BilinearSample => "bilinear_sample",
            OpKind::BatchMatmul => "batch_matmul",
            OpKind::AxisAngleToRotation => "axis_angle_to_rotation",
        }
    }
}

struct Node {
    kind: OpKind,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
}

/// A recording of primitive operations. Recording order is a topological
/// order, so backward is a single reverse sweep.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    single_precision_conv: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], keyed by leaf.
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `t`, or `None` when `t` does not require gradients or
    /// the root does not depend on it.
    pub fn get(&self, t: Tensor) -> Option<&[f64]> {
        if t.graph != self.graph {
            return None;
        }
        self.grads.get(t.id).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but materialises zeros for unreached leaves.
    pub fn get_or_zeros(&self, t: Tensor, len: usize) -> Vec<f64> {
        self.get(t).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            single_precision_conv: false,
        }
    }

    /// A graph whose convolutions multiply in f32 (accumulating results
    /// back into f64). Roughly three times faster; finite-difference
    /// checks should use the default full-precision graph.
    pub fn with_single_precision_conv() -> Self {
        Graph {
            single_precision_conv: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, t: Tensor) -> Result<&Node> {
        if t.graph != self.id {
            return Err(Error::ForeignTensor(t.id));
        }
        self.nodes.get(t.id).ok_or(Error::ForeignTensor(t.id))
    }

    fn node(&self, t: Tensor) -> &Node {
        self.check(t).expect("tensor from another graph")
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.node(t).shape
    }

    pub fn value(&self, t: Tensor) -> &[f64] {
        &self.node(t).value
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.node(t).requires_grad
    }

    /// The single value of a scalar tensor.
    pub fn item(&self, t: Tensor) -> f64 {
        let n = self.node(t);
        debug_assert_eq!(n.value.len(), 1, "item() on a non-scalar");
        n.value[0]
    }

    /// Inputs and kind of a recorded node, in recording order.
    pub fn inputs_of(&self, t: Tensor) -> (&OpKind, Vec<usize>) {
        let n = self.node(t);
        (&n.kind, n.inputs.clone())
    }

    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::shape("leaf", &[shape, &[data.len()]]));
        }
        Ok(self.push(OpKind::Leaf, Vec::new(), shape.to_vec(), data, requires_grad))
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        self.leaf(data, shape, false)
    }

    pub fn param(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        self.leaf(data, shape, true)
    }

    pub fn scalar(&mut self, v: f64) -> Tensor {
        self.push(OpKind::Leaf, Vec::new(), Vec::new(), vec![v], false)
    }

    pub fn full(&mut self, shape: &[usize], v: f64) -> Tensor {
        self.push(OpKind::Leaf, Vec::new(), shape.to_vec(), vec![v; numel(shape)], false)
    }

    pub fn zeros_like(&mut self, t: Tensor) -> Tensor {
        let shape = self.shape(t).to_vec();
        self.full(&shape, 0.0)
    }

    pub fn ones_like(&mut self, t: Tensor) -> Tensor {
        let shape = self.shape(t).to_vec();
        self.full(&shape, 1.0)
    }

    /// A gradient-free copy of `t`.
    pub fn detach(&mut self, t: Tensor) -> Tensor {
        let n = self.node(t);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(OpKind::Leaf, Vec::new(), shape, value, false)
    }

    fn push(
        &mut self,
        kind: OpKind,
        inputs: Vec<usize>,
        shape: Vec<usize>,
        value: Vec<f64>,
        requires_grad: bool,
    ) -> Tensor {
        let id = self.nodes.len();
        self.nodes.push(Node {
            kind,
            inputs,
            shape,
            value,
            requires_grad,
        });
        Tensor { graph: self.id, id }
    }

    /// Evaluate `kind` on `inputs` and append the result to the graph.
    pub fn record(&mut self, kind: OpKind, inputs: &[Tensor]) -> Result<Tensor> {
        if kind == OpKind::Leaf {
            return Err(Error::InvalidArgument("leaves are created with Graph::leaf".into()));
        }
        for &t in inputs {
            self.check(t)?;
        }
        let ins: Vec<&Node> = inputs.iter().map(|t| &self.nodes[t.id]).collect();
        let (shape, value) = forward(&kind, &ins)?;
        let requires_grad = ins.iter().any(|n| n.requires_grad);
        let ids = inputs.iter().map(|t| t.id).collect();
        Ok(self.push(kind, ids, shape, value, requires_grad))
    }

    /// Reverse sweep from a scalar root. Gradients are kept for every leaf
    /// that requires them; intermediates are released as the sweep passes.
    pub fn backward(&self, root: Tensor) -> Result<Gradients> {
        let root_node = self.check(root)?;
        if root_node.value.len() != 1 {
            return Err(Error::NonScalarRoot(root_node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if root_node.requires_grad {
            grads[root.id] = Some(vec![1.0]);
        }
        for id in (0..=root.id).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || node.kind == OpKind::Leaf {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let ins: Vec<&Node> = node.inputs.iter().map(|&i| &self.nodes[i]).collect();
            let input_grads = vjp(&node.kind, &ins, node, &g);
            for (&input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }
}

// ---------------------------------------------------------------------------
// Convenience wrappers.

macro_rules! binary_ops {
    ($($name:ident => $kind:expr),* $(,)?) => {
        impl Graph {
            $(
                pub fn $name(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
                    self.record($kind, &[a, b])
                }
            )*
        }
    };
}

macro_rules! unary_ops {
    ($($name:ident => $kind:expr),* $(,)?) => {
        impl Graph {
            $(
                pub fn $name(&mut self, a: Tensor) -> Result<Tensor> {
                    self.record($kind, &[a])
                }
            )*
        }
    };
}

binary_ops! {
    add => OpKind::Add,
    sub => OpKind::Sub,
    mul => OpKind::Mul,
    div => OpKind::Div,
    minimum => OpKind::Minimum,
    maximum => OpKind::Maximum,
    bilinear_sample => OpKind::BilinearSample,
    batch_matmul => OpKind::BatchMatmul,
}

unary_ops! {
    neg => OpKind::Neg,
    abs => OpKind::Abs,
    log => OpKind::Log,
    exp => OpKind::Exp,
    sqrt => OpKind::Sqrt,
    sigmoid => OpKind::Sigmoid,
    relu => OpKind::Relu,
    sum => OpKind::Sum,
    mean => OpKind::Mean,
    avg_pool3x3 => OpKind::AvgPool3x3,
    grad_x => OpKind::GradX,
    grad_y => OpKind::GradY,
    axis_angle_to_rotation => OpKind::AxisAngleToRotation,
}

impl Graph {
    pub fn pow(&mut self, a: Tensor, p: f64) -> Result<Tensor> {
        self.record(OpKind::Pow(p), &[a])
    }

    pub fn elu(&mut self, a: Tensor) -> Result<Tensor> {
        self.record(OpKind::Elu(1.0), &[a])
    }

    pub fn add_scalar(&mut self, a: Tensor, c: f64) -> Result<Tensor> {
        self.record(OpKind::AddScalar(c), &[a])
    }

    pub fn mul_scalar(&mut self, a: Tensor, c: f64) -> Result<Tensor> {
        self.record(OpKind::MulScalar(c), &[a])
    }

    pub fn clamp(&mut self, a: Tensor, min: f64, max: f64) -> Result<Tensor> {
        self.record(OpKind::Clamp { min, max }, &[a])
    }

    pub fn sum_axis(&mut self, a: Tensor, axis: usize) -> Result<Tensor> {
        self.record(OpKind::SumAxis(axis), &[a])
    }

    /// Mean over one axis, keeping it with extent 1.
    pub fn mean_axis(&mut self, a: Tensor, axis: usize) -> Result<Tensor> {
        let n = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", &[self.shape(a), &[axis]]))?;
        let s = self.sum_axis(a, axis)?;
        self.mul_scalar(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, a: Tensor, shape: &[usize]) -> Result<Tensor> {
        self.record(OpKind::Reshape(shape.to_vec()), &[a])
    }

    pub fn broadcast_to(&mut self, a: Tensor, shape: &[usize]) -> Result<Tensor> {
        self.record(OpKind::BroadcastTo(shape.to_vec()), &[a])
    }

    pub fn concat(&mut self, parts: &[Tensor], axis: usize) -> Result<Tensor> {
        self.record(OpKind::Concat(axis), parts)
    }

    pub fn narrow(&mut self, a: Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        self.record(OpKind::Narrow { axis, start, len }, &[a])
    }

    pub fn conv2d(
        &mut self,
        x: Tensor,
        weight: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let kind = OpKind::Conv2d {
            stride,
            padding,
            single: self.single_precision_conv,
        };
        match bias {
            Some(b) => self.record(kind, &[x, weight, b]),
            None => self.record(kind, &[x, weight]),
        }
    }

    pub fn upsample_nearest(&mut self, a: Tensor, factor: usize) -> Result<Tensor> {
        self.record(OpKind::UpsampleNearest(factor), &[a])
    }

    pub fn resize_bilinear(&mut self, a: Tensor, height: usize, width: usize) -> Result<Tensor> {
        self.record(OpKind::ResizeBilinear { height, width }, &[a])
    }

    pub fn ssim_map(&mut self, a: Tensor, b: Tensor, c1: f64, c2: f64) -> Result<Tensor> {
        self.record(OpKind::Ssim { c1, c2 }, &[a, b])
    }
}

// ---------------------------------------------------------------------------
// Forward evaluation.

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out`, the flat index of the broadcast input.
/// `None` when the shapes are identical.
fn index_map(out: &[usize], inp: &[usize]) -> Option<Vec<usize>> {
    if out == inp {
        return None;
    }
    let total = numel(out);
    if numel(inp) == 1 {
        return Some(vec![0; total]);
    }
    let rank = out.len();
    let offset = rank - inp.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..inp.len()).rev() {
        strides[i + offset] = if inp[i] == 1 { 0 } else { acc };
        acc *= inp[i];
    }
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for d in (0..rank).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out[d] {
                break;
            }
            flat -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    Some(map)
}

#[inline]
fn at(map: &Option<Vec<usize>>, i: usize) -> usize {
    match map {
        Some(m) => m[i],
        None => i,
    }
}

/// Sum a full-size contribution into the (possibly broadcast) input shape.
#[inline(always)]
fn reduce_into(map: &Option<Vec<usize>>, len: usize, contrib: impl Fn(usize) -> f64, total: usize) -> Vec<f64> {
    match map {
        None => (0..total).map(contrib).collect(),
        Some(m) => {
            let mut out = vec![0.0; len];
            for (i, &j) in m.iter().enumerate() {
                out[j] += contrib(i);
            }
            out
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn expect_arity(kind: &OpKind, ins: &[&Node], n: usize) -> Result<()> {
    if ins.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} expects {} inputs, got {}",
            kind.name(),
            n,
            ins.len()
        )));
    }
    Ok(())
}

fn image_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(op, &[shape])),
    }
}

fn forward(kind: &OpKind, ins: &[&Node]) -> Result<(Vec<usize>, Vec<f64>)> {
    use OpKind::*;
    let op = kind.name();
    match kind {
        Leaf => unreachable!("leaves are not recorded"),
        Add | Sub | Mul | Div | Minimum | Maximum => {
            expect_arity(kind, ins, 2)?;
            let (a, b) = (ins[0], ins[1]);
            let shape = broadcast_shape(&a.shape, &b.shape)
                .ok_or_else(|| Error::shape(op, &[&a.shape, &b.shape]))?;
            let (ma, mb) = (index_map(&shape, &a.shape), index_map(&shape, &b.shape));
            let total = numel(&shape);
            if *kind == Div && b.value.iter().any(|&v| v == 0.0) {
                return Err(Error::domain(op, "division by zero"));
            }
            let z = |f: fn(f64, f64) -> f64| zip_broadcast(&a.value, &b.value, &ma, &mb, total, f);
            let value = match kind {
                Add => z(|x, y| x + y),
                Sub => z(|x, y| x - y),
                Mul => z(|x, y| x * y),
                Div => z(|x, y| x / y),
                Minimum => z(f64::min),
                _ => z(f64::max),
            };
            Ok((shape, value))
        }
        Neg | Abs | Log | Exp | Sqrt | Pow(_) | Sigmoid | Elu(_) | Relu | AddScalar(_) | MulScalar(_)
        | Clamp { .. } => {
            expect_arity(kind, ins, 1)?;
            let x = ins[0];
            match kind {
                Log if x.value.iter().any(|&v| v <= 0.0) => {
                    return Err(Error::domain(op, "logarithm of a nonpositive value"))
                }
                Sqrt if x.value.iter().any(|&v| v < 0.0) => {
                    return Err(Error::domain(op, "square root of a negative value"))
                }
                Pow(p) if p.fract() != 0.0 && x.value.iter().any(|&v| v < 0.0) => {
                    return Err(Error::domain(op, "fractional power of a negative value"))
                }
                Clamp { min, max } if min > max => {
                    return Err(Error::domain(op, format!("empty interval [{min}, {max}]")))
                }
                _ => {}
            }
            Ok((x.shape.clone(), unary_map(kind, &x.value)))
        }
        Sum | Mean => {
            expect_arity(kind, ins, 1)?;
            let x = ins[0];
            let s: f64 = x.value.iter().sum();
            let v = if *kind == Mean {
                if x.value.is_empty() {
                    return Err(Error::shape(op, &[&x.shape]));
                }
                s / x.value.len() as f64
            } else {
                s
            };
            Ok((Vec::new(), vec![v]))
        }
        SumAxis(axis) => {
            expect_arity(kind, ins, 1)?;
            let x = ins[0];
            if *axis >= x.shape.len() {
                return Err(Error::shape(op, &[&x.shape, &[*axis]]));
            }
            let (outer, n, inner) = split_axis(&x.shape, *axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for k in 0..n {
                    let src = &x.value[(o * n + k) * inner..(o * n + k + 1) * inner];
                    let dst = &mut out[o * inner..(o + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
            let mut shape = x.shape.clone();
            shape[*axis] = 1;
            Ok((shape, out))
        }
        Reshape(shape) => {
            expect_arity(kind, ins, 1)?;
            if numel(shape) != ins[0].value.len() {
                return Err(Error::shape(op, &[&ins[0].shape, shape]));
            }
            Ok((shape.clone(), ins[0].value.clone()))
        }
        BroadcastTo(shape) => {
            expect_arity(kind, ins, 1)?;
            let x = ins[0];
            match broadcast_shape(&x.shape, shape) {
                Some(s) if &s == shape => {}
                _ => return Err(Error::shape(op, &[&x.shape, shape])),
            }
            let m = index_map(shape, &x.shape);
            let value = (0..numel(shape)).map(|i| x.value[at(&m, i)]).collect();
            Ok((shape.clone(), value))
        }
        Concat(axis) => {
            if ins.is_empty() {
                return Err(Error::InvalidArgument("concat of zero tensors".into()));
            }
            let first = &ins[0].shape;
            let bad = || Error::Shape {
                op,
                shapes: ins.iter().map(|n| n.shape.clone()).collect(),
            };
            if *axis >= first.len() {
                return Err(bad());
            }
            for n in ins {
                if n.shape.len() != first.len()
                    || n.shape.iter().enumerate().any(|(d, &e)| d != *axis && e != first[d])
                {
                    return Err(bad());
                }
            }
            let total_axis: usize = ins.iter().map(|n| n.shape[*axis]).sum();
            let (outer, _, inner) = split_axis(first, *axis);
            let mut out = Vec::with_capacity(outer * total_axis * inner);
            for o in 0..outer {
                for n in ins {
                    let len = n.shape[*axis] * inner;
                    out.extend_from_slice(&n.value[o * len..(o + 1) * len]);
                }
            }
            let mut shape = first.clone();
            shape[*axis] = total_axis;
            Ok((shape, out))
        }
        Narrow { axis, start, len } => {
            expect_arity(kind, ins, 1)?;
            let x = ins[0];
            if *axis >= x.shape.len() || start + len > x.shape[*axis] {
                return Err(Error::shape(op, &[&x.shape, &[*axis, *start, *len]]));
            }
            let (outer, n, inner) = split_axis(&x.shape, *axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * n + start) * inner;
                out.extend_from_slice(&x.value[base..base + len * inner]);
            }
            let mut shape = x.shape.clone();
            shape[*axis] = *len;
            Ok((shape, out))
        }
        Conv2d { stride, padding, single } => {
            if *single {
                conv_forward::<f32>(ins, *stride, *padding)
            } else {
                conv_forward::<f64>(ins, *stride, *padding)
            }
        }
        UpsampleNearest(f) => {
            expect_arity(kind, ins, 1)?;
            let x = ins[0];
            let (n, c, h, w) = image_dims(op, &x.shape)?;
            if *f == 0 {
                return Err(Error::domain(op, "zero upsampling factor"));
            }
            let (ho, wo) = (h * f, w * f);
            let mut out = vec![0.0; n * c * ho * wo];
            for p in 0..n * c {
                let src = &x.value[p * h * w..(p + 1) * h * w];
                let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
                for y in 0..ho {
                    for xx in 0..wo {
                        dst[y * wo + xx] = src[(y / f) * w + xx / f];
                    }
                }
            }
            Ok((vec![n, c, ho, wo], out))
        }
        ResizeBilinear { height, width } => {
            expect_arity(kind, ins, 1)?;
            let x = ins[0];
            let (n, c, h, w) = image_dims(op, &x.shape)?;
            if *height == 0 || *width == 0 || h == 0 || w == 0 {
                return Err(Error::shape(op, &[&x.shape, &[*height, *width]]));
            }
            let ty = kernels::resize_table(h, *height);
            let tx = kernels::resize_table(w, *width);
            let mut out = vec![0.0; n * c * height * width];
            for p in 0..n * c {
                let src = &x.value[p * h * w..(p + 1) * h * w];
                let dst = &mut out[p * height * width..(p + 1) * height * width];
                for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                        let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
                        let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
                        dst[oy * width + ox] = top * (1.0 - wy) + bot * wy;
                    }
                }
            }
            Ok((vec![n, c, *height, *width], out))
        }
        AvgPool3x3 => {
            expect_arity(kind, ins, 1)?;
            let x = ins[0];
            let (_, _, h, w) = image_dims(op, &x.shape)?;
            if h < 2 || w < 2 {
                return Err(Error::shape(op, &[&x.shape]));
            }
            let mut out = vec![0.0; x.value.len()];
            for (src, dst) in x.value.chunks_exact(h * w).zip(out.chunks_exact_mut(h * w)) {
                kernels::box3_reflect(src, dst, h, w);
            }
            Ok((x.shape.clone(), out))
        }
        Ssim { c1, c2 } => {
            expect_arity(kind, ins, 2)?;
            let (a, b) = (ins[0], ins[1]);
            let (_, _, h, w) = image_dims(op, &a.shape)?;
            if a.shape != b.shape || h < 2 || w < 2 {
                return Err(Error::shape(op, &[&a.shape, &b.shape]));
            }
            let mut value = vec![0.0; a.value.len()];
            let mut st = kernels::SsimScratch::new(h, w);
            for ((pa, pb), out) in a.value.chunks_exact(h * w).zip(b.value.chunks_exact(h * w)).zip(value.chunks_exact_mut(h * w)) {
                kernels::ssim_plane(pa, pb, out, &mut st, *c1, *c2);
            }
            Ok((a.shape.clone(), value))
        }
        GradX | GradY => {
            expect_arity(kind, ins, 1)?;
            let x = ins[0];
            let r = x.shape.len();
            if r < 2 {
                return Err(Error::shape(op, &[&x.shape]));
            }
            let (h, w) = (x.shape[r - 2], x.shape[r - 1]);
            let planes = numel(&x.shape[..r - 2]);
            let mut shape = x.shape.clone();
            let (ho, wo) = if *kind == GradX { (h, w.saturating_sub(1)) } else { (h.saturating_sub(1), w) };
            if ho == 0 || wo == 0 {
                return Err(Error::shape(op, &[&x.shape]));
            }
            shape[r - 2] = ho;
            shape[r - 1] = wo;
            let mut out = Vec::with_capacity(planes * ho * wo);
            for p in 0..planes {
                let src = &x.value[p * h * w..(p + 1) * h * w];
                for y in 0..ho {
                    for xx in 0..wo {
                        let v = if *kind == GradX {
                            src[y * w + xx + 1] - src[y * w + xx]
                        } else {
                            src[(y + 1) * w + xx] - src[y * w + xx]
                        };
                        out.push(v);
                    }
                }
            }
            Ok((shape, out))
        }
        BilinearSample => {
            expect_arity(kind, ins, 2)?;
            let (img, crd) = (ins[0], ins[1]);
            let (n, c, h, w) = image_dims(op, &img.shape)?;
            let (cn, two, ho, wo) = image_dims(op, &crd.shape)?;
            if cn != n || two != 2 || h < 1 || w < 1 {
                return Err(Error::shape(op, &[&img.shape, &crd.shape]));
            }
            let plane = ho * wo;
            let mut out = vec![0.0; n * c * plane];
            for b in 0..n {
                let cx = &crd.value[b * 2 * plane..b * 2 * plane + plane];
                let cy = &crd.value[b * 2 * plane + plane..(b + 1) * 2 * plane];
                for p in 0..plane {
                    let (x0, x1, fx, _) = kernels::sample_axis(cx[p], w);
                    let (y0, y1, fy, _) = kernels::sample_axis(cy[p], h);
                    for ch in 0..c {
                        let src = &img.value[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                        let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                        let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                        out[(b * c + ch) * plane + p] = top * (1.0 - fy) + bot * fy;
                    }
                }
            }
            Ok((vec![n, c, ho, wo], out))
        }
        BatchMatmul => {
            expect_arity(kind, ins, 2)?;
            let (a, b) = (ins[0], ins[1]);
            let (n, m, k, k2, p) = match (&a.shape[..], &b.shape[..]) {
                (&[n, m, k], &[n2, k2, p]) if n == n2 => (n, m, k, k2, p),
                _ => return Err(Error::shape(op, &[&a.shape, &b.shape])),
            };
            if k != k2 {
                return Err(Error::shape(op, &[&a.shape, &b.shape]));
            }
            let mut out = vec![0.0; n * m * p];
            for i in 0..n {
                kernels::gemm(
                    m,
                    k,
                    p,
                    &a.value[i * m * k..(i + 1) * m * k],
                    false,
                    &b.value[i * k * p..(i + 1) * k * p],
                    false,
                    0.0,
                    &mut out[i * m * p..(i + 1) * m * p],
                );
            }
            Ok((vec![n, m, p], out))
        }
        AxisAngleToRotation => {
            expect_arity(kind, ins, 1)?;
            let x = ins[0];
            let n = match x.shape[..] {
                [n, 3] => n,
                _ => return Err(Error::shape(op, &[&x.shape])),
            };
            let mut out = Vec::with_capacity(n * 9);
            for i in 0..n {
                let w = [x.value[3 * i], x.value[3 * i + 1], x.value[3 * i + 2]];
                out.extend_from_slice(&kernels::rotation_from_axis_angle(w));
            }
            Ok((vec![n, 3, 3], out))
        }
    }
}

#[inline(always)]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn unary_map(kind: &OpKind, x: &[f64]) -> Vec<f64> {
    fn m(x: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
        x.iter().map(|&v| f(v)).collect()
    }
    match *kind {
        OpKind::Neg => m(x, |v| -v),
        OpKind::Abs => m(x, f64::abs),
        OpKind::Log => m(x, f64::ln),
        OpKind::Exp => m(x, f64::exp),
        OpKind::Sqrt => m(x, f64::sqrt),
        OpKind::Pow(p) => m(x, |v| v.powf(p)),
        OpKind::Sigmoid => m(x, sigmoid),
        OpKind::Elu(alpha) => m(x, |v| if v > 0.0 { v } else { alpha * (v.exp() - 1.0) }),
        OpKind::Relu => m(x, |v| v.max(0.0)),
        OpKind::AddScalar(c) => m(x, |v| v + c),
        OpKind::MulScalar(c) => m(x, |v| v * c),
        OpKind::Clamp { min, max } => m(x, |v| v.clamp(min, max)),
        _ => unreachable!(),
    }
}

/// `f(a, b)` over the broadcast output.
#[inline(always)]
fn zip_broadcast(
    a: &[f64],
    b: &[f64],
    ma: &Option<Vec<usize>>,
    mb: &Option<Vec<usize>>,
    total: usize,
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    match (ma, mb) {
        (None, None) => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        (None, Some(_)) if b.len() == 1 => a.iter().map(|&x| f(x, b[0])).collect(),
        (Some(_), None) if a.len() == 1 => b.iter().map(|&y| f(a[0], y)).collect(),
        _ => (0..total).map(|i| f(a[at(ma, i)], b[at(mb, i)])).collect(),
    }
}

fn conv_geom(ins: &[&Node], stride: usize, padding: usize) -> Result<(usize, usize, ConvGeom)> {
    let op = "conv2d";
    if ins.len() != 2 && ins.len() != 3 {
        return Err(Error::InvalidArgument("conv2d expects 2 or 3 inputs".into()));
    }
    let (x, w) = (ins[0], ins[1]);
    let (n, ci, h, wd) = image_dims(op, &x.shape)?;
    let (co, wci, kh, kw) = image_dims(op, &w.shape)?;
    let bad = || Error::shape(op, &[&x.shape, &w.shape]);
    if wci != ci || kh != kw || stride == 0 || h + 2 * padding < kh || wd + 2 * padding < kw {
        return Err(bad());
    }
    if let Some(b) = ins.get(2) {
        if b.shape != [co] {
            return Err(Error::shape(op, &[&x.shape, &w.shape, &b.shape]));
        }
    }
    Ok((
        n,
        co,
        ConvGeom {
            channels: ci,
            height: h,
            width: wd,
            kernel: kh,
            stride,
            padding,
        },
    ))
}

fn conv_forward<T: Elem>(ins: &[&Node], stride: usize, padding: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let (n, co, g) = conv_geom(ins, stride, padding)?;
    let (x, w) = (ins[0], ins[1]);
    let (ho, wo) = (g.out_height(), g.out_width());
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let in_len = g.channels * g.height * g.width;
    let out_len = co * ho * wo;
    let weights: Vec<T> = w.value.iter().map(|&v| T::from_f64(v)).collect();
    let mut out = vec![0.0; n * out_len];
    if use_direct(&g, co) {
        let mut xin = vec![T::default(); in_len];
        let mut prod = vec![T::default(); out_len];
        for b in 0..n {
            xin.iter_mut().zip(&x.value[b * in_len..]).for_each(|(d, s)| *d = T::from_f64(*s));
            prod.iter_mut().for_each(|v| *v = T::default());
            kernels::conv3x3_direct(&xin, &weights, &mut prod, g.channels, co, g.height, g.width);
            let dst = &mut out[b * out_len..(b + 1) * out_len];
            dst.iter_mut().zip(&prod).for_each(|(d, p)| *d = p.to_f64());
            add_bias(dst, ins.get(2), cols_n);
        }
        return Ok((vec![n, co, ho, wo], out));
    }
    let mut cols = vec![T::default(); rows * cols_n];
    let mut prod = vec![T::default(); out_len];
    for b in 0..n {
        let xin = &x.value[b * in_len..(b + 1) * in_len];
        kernels::im2col(xin, &g, &mut cols);
        kernels::gemm(co, rows, cols_n, &weights, false, &cols, false, T::default(), &mut prod);
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        dst.iter_mut().zip(&prod).for_each(|(d, p)| *d = p.to_f64());
        add_bias(dst, ins.get(2), cols_n);
    }
    Ok((vec![n, co, ho, wo], out))
}

fn add_bias(dst: &mut [f64], bias: Option<&&Node>, plane: usize) {
    if let Some(bias) = bias {
        for (o, &bv) in bias.value.iter().enumerate() {
            dst[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += bv);
        }
    }
}

/// Direct 3x3 convolution beats unfolding when few output channels share
/// each unfolded column.
const DIRECT_MAX_CO: usize = 8;
const DIRECT_BACKWARD_MAX_CO: usize = 4;

fn use_direct(g: &ConvGeom, co: usize) -> bool {
    g.kernel == 3 && g.stride == 1 && g.padding == 1 && g.width >= 3 && co <= DIRECT_MAX_CO
}

// ---------------------------------------------------------------------------
// Vector-Jacobian products.

fn vjp(kind: &OpKind, ins: &[&Node], out: &Node, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    use OpKind::*;
    let need = |i: usize| ins[i].requires_grad;
    match kind {
        Leaf => Vec::new(),
        Add | Sub | Mul | Div | Minimum | Maximum => {
            let (a, b) = (ins[0], ins[1]);
            let total = out.value.len();
            let (ma, mb) = (index_map(&out.shape, &a.shape), index_map(&out.shape, &b.shape));
            let av = |i: usize| a.value[at(&ma, i)];
            let bv = |i: usize| b.value[at(&mb, i)];
            let (na, nb) = (a.value.len(), b.value.len());
            let ga = need(0).then(|| match kind {
                Add | Sub => reduce_into(&ma, na, |i| g[i], total),
                Mul => reduce_into(&ma, na, |i| g[i] * bv(i), total),
                Div => reduce_into(&ma, na, |i| g[i] / bv(i), total),
                Minimum => reduce_into(&ma, na, |i| if av(i) <= bv(i) { g[i] } else { 0.0 }, total),
                _ => reduce_into(&ma, na, |i| if av(i) >= bv(i) { g[i] } else { 0.0 }, total),
            });
            let gb = need(1).then(|| match kind {
                Add => reduce_into(&mb, nb, |i| g[i], total),
                Sub => reduce_into(&mb, nb, |i| -g[i], total),
                Mul => reduce_into(&mb, nb, |i| g[i] * av(i), total),
                Div => reduce_into(&mb, nb, |i| -g[i] * av(i) / (bv(i) * bv(i)), total),
                Minimum => reduce_into(&mb, nb, |i| if av(i) <= bv(i) { 0.0 } else { g[i] }, total),
                _ => reduce_into(&mb, nb, |i| if av(i) >= bv(i) { 0.0 } else { g[i] }, total),
            });
            vec![ga, gb]
        }
        Neg | Abs | Log | Exp | Sqrt | Pow(_) | Sigmoid | Elu(_) | Relu | AddScalar(_) | MulScalar(_)
        | Clamp { .. } => {
            let x = &ins[0].value;
            let y = &out.value;
            fn m(g: &[f64], x: &[f64], y: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
                g.iter().zip(x).zip(y).map(|((&g, &x), &y)| g * f(x, y)).collect()
            }
            let d = match *kind {
                Neg => g.iter().map(|v| -v).collect(),
                Abs => m(g, x, y, |xv, _| {
                    if xv > 0.0 {
                        1.0
                    } else if xv < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }),
                Log => m(g, x, y, |xv, _| 1.0 / xv),
                Exp => m(g, x, y, |_, yv| yv),
                Sqrt => m(g, x, y, |_, yv| 0.5 / yv),
                Pow(p) => m(g, x, y, |xv, _| p * xv.powf(p - 1.0)),
                Sigmoid => m(g, x, y, |_, yv| yv * (1.0 - yv)),
                Elu(alpha) => m(g, x, y, |xv, yv| if xv > 0.0 { 1.0 } else { yv + alpha }),
                Relu => m(g, x, y, |xv, _| if xv > 0.0 { 1.0 } else { 0.0 }),
                AddScalar(_) => g.to_vec(),
                MulScalar(c) => g.iter().map(|v| v * c).collect(),
                Clamp { min, max } => m(g, x, y, |xv, _| if xv >= min && xv <= max { 1.0 } else { 0.0 }),
                _ => unreachable!(),
            };
            vec![Some(d)]
        }
        Sum => vec![Some(vec![g[0]; ins[0].value.len()])],
        Mean => {
            let n = ins[0].value.len();
            vec![Some(vec![g[0] / n as f64; n])]
        }
        SumAxis(axis) => {
            let x = ins[0];
            let (outer, n, inner) = split_axis(&x.shape, *axis);
            let mut d = vec![0.0; x.value.len()];
            for o in 0..outer {
                for k in 0..n {
                    d[(o * n + k) * inner..(o * n + k + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(d)]
        }
        Reshape(_) => vec![Some(g.to_vec())],
        BroadcastTo(shape) => {
            let x = ins[0];
            let m = index_map(shape, &x.shape);
            vec![Some(reduce_into(&m, x.value.len(), |i| g[i], g.len()))]
        }
        Concat(axis) => {
            let (outer, _, inner) = split_axis(&out.shape, *axis);
            let total_axis = out.shape[*axis];
            let mut offset = 0;
            ins.iter()
                .map(|n| {
                    let len = n.shape[*axis];
                    let res = n.requires_grad.then(|| {
                        let mut d = Vec::with_capacity(n.value.len());
                        for o in 0..outer {
                            let base = (o * total_axis + offset) * inner;
                            d.extend_from_slice(&g[base..base + len * inner]);
                        }
                        d
                    });
                    offset += len;
                    res
                })
                .collect()
        }
        Narrow { axis, start, len } => {
            let x = ins[0];
            let (outer, n, inner) = split_axis(&x.shape, *axis);
            let mut d = vec![0.0; x.value.len()];
            for o in 0..outer {
                let base = (o * n + start) * inner;
                d[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(d)]
        }
        Conv2d { stride, padding, single } => {
            if *single {
                conv_vjp::<f32>(ins, g, *stride, *padding)
            } else {
                conv_vjp::<f64>(ins, g, *stride, *padding)
            }
        }
        UpsampleNearest(f) => {
            let f = *f;
            let x = ins[0];
            let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
            let (ho, wo) = (h * f, w * f);
            let mut d = vec![0.0; x.value.len()];
            for p in 0..n * c {
                let src = &g[p * ho * wo..(p + 1) * ho * wo];
                let dst = &mut d[p * h * w..(p + 1) * h * w];
                for y in 0..ho {
                    for xx in 0..wo {
                        dst[(y / f) * w + xx / f] += src[y * wo + xx];
                    }
                }
            }
            vec![Some(d)]
        }
        ResizeBilinear { height, width } => {
            let x = ins[0];
            let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
            let ty = kernels::resize_table(h, *height);
            let tx = kernels::resize_table(w, *width);
            let mut d = vec![0.0; x.value.len()];
            for p in 0..n * c {
                let src = &g[p * height * width..(p + 1) * height * width];
                let dst = &mut d[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                        let gv = src[oy * width + ox];
                        dst[y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                        dst[y0 * w + x1] += gv * (1.0 - wy) * wx;
                        dst[y1 * w + x0] += gv * wy * (1.0 - wx);
                        dst[y1 * w + x1] += gv * wy * wx;
                    }
                }
            }
            vec![Some(d)]
        }
        AvgPool3x3 => {
            let x = ins[0];
            let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
            let mut d = vec![0.0; x.value.len()];
            for (src, dst) in g.chunks_exact(h * w).zip(d.chunks_exact_mut(h * w)).take(n * c) {
                kernels::box3_reflect_adjoint(src, dst, h, w);
            }
            vec![Some(d)]
        }
        Ssim { c1, c2 } => {
            let (a, b) = (ins[0], ins[1]);
            let (h, w) = (a.shape[2], a.shape[3]);
            let len = a.value.len();
            let (mut ga, mut gb) = (vec![0.0; len], vec![0.0; len]);
            let mut st = kernels::SsimScratch::new(h, w);
            let planes = a
                .value
                .chunks_exact(h * w)
                .zip(b.value.chunks_exact(h * w))
                .zip(g.chunks_exact(h * w))
                .zip(ga.chunks_exact_mut(h * w).zip(gb.chunks_exact_mut(h * w)));
            for (((pa, pb), pg), (da, db)) in planes {
                kernels::ssim_plane_vjp(pa, pb, pg, da, db, &mut st, *c1, *c2);
            }
            let ga = need(0).then_some(ga);
            let gb = need(1).then_some(gb);
            vec![ga, gb]
        }
        GradX | GradY => {
            let x = ins[0];
            let r = x.shape.len();
            let (h, w) = (x.shape[r - 2], x.shape[r - 1]);
            let (ho, wo) = (out.shape[r - 2], out.shape[r - 1]);
            let planes = numel(&x.shape[..r - 2]);
            let mut d = vec![0.0; x.value.len()];
            for p in 0..planes {
                let src = &g[p * ho * wo..(p + 1) * ho * wo];
                let dst = &mut d[p * h * w..(p + 1) * h * w];
                for y in 0..ho {
                    for xx in 0..wo {
                        let gv = src[y * wo + xx];
                        let (hi, lo) = if *kind == GradX {
                            (y * w + xx + 1, y * w + xx)
                        } else {
                            ((y + 1) * w + xx, y * w + xx)
                        };
                        dst[hi] += gv;
                        dst[lo] -= gv;
                    }
                }
            }
            vec![Some(d)]
        }
        BilinearSample => {
            let (img, crd) = (ins[0], ins[1]);
            let (n, c, h, w) = (img.shape[0], img.shape[1], img.shape[2], img.shape[3]);
            let plane = crd.shape[2] * crd.shape[3];
            let mut gi = need(0).then(|| vec![0.0; img.value.len()]);
            let mut gc = need(1).then(|| vec![0.0; crd.value.len()]);
            for b in 0..n {
                let base = b * 2 * plane;
                for p in 0..plane {
                    let (x0, x1, fx, xin) = kernels::sample_axis(crd.value[base + p], w);
                    let (y0, y1, fy, yin) = kernels::sample_axis(crd.value[base + plane + p], h);
                    let (mut dx, mut dy) = (0.0, 0.0);
                    for ch in 0..c {
                        let off = (b * c + ch) * h * w;
                        let gv = g[(b * c + ch) * plane + p];
                        if let Some(gi) = gi.as_mut() {
                            gi[off + y0 * w + x0] += gv * (1.0 - fx) * (1.0 - fy);
                            gi[off + y0 * w + x1] += gv * fx * (1.0 - fy);
                            gi[off + y1 * w + x0] += gv * (1.0 - fx) * fy;
                            gi[off + y1 * w + x1] += gv * fx * fy;
                        }
                        if gc.is_some() {
                            let src = &img.value[off..off + h * w];
                            let (i00, i01) = (src[y0 * w + x0], src[y0 * w + x1]);
                            let (i10, i11) = (src[y1 * w + x0], src[y1 * w + x1]);
                            dx += gv * ((1.0 - fy) * (i01 - i00) + fy * (i11 - i10));
                            dy += gv * ((1.0 - fx) * (i10 - i00) + fx * (i11 - i01));
                        }
                    }
                    if let Some(gc) = gc.as_mut() {
                        if xin && w > 1 {
                            gc[base + p] = dx;
                        }
                        if yin && h > 1 {
                            gc[base + plane + p] = dy;
                        }
                    }
                }
            }
            vec![gi, gc]
        }
        BatchMatmul => {
            let (a, b) = (ins[0], ins[1]);
            let (n, m, k, p) = (a.shape[0], a.shape[1], a.shape[2], b.shape[2]);
            let ga = need(0).then(|| {
                let mut d = vec![0.0; a.value.len()];
                for i in 0..n {
                    kernels::gemm(
                        m,
                        p,
                        k,
                        &g[i * m * p..(i + 1) * m * p],
                        false,
                        &b.value[i * k * p..(i + 1) * k * p],
                        true,
                        0.0,
                        &mut d[i * m * k..(i + 1) * m * k],
                    );
                }
                d
            });
            let gb = need(1).then(|| {
                let mut d = vec![0.0; b.value.len()];
                for i in 0..n {
                    kernels::gemm(
                        k,
                        m,
                        p,
                        &a.value[i * m * k..(i + 1) * m * k],
                        true,
                        &g[i * m * p..(i + 1) * m * p],
                        false,
                        0.0,
                        &mut d[i * k * p..(i + 1) * k * p],
                    );
                }
                d
            });
            vec![ga, gb]
        }
        AxisAngleToRotation => {
            let x = ins[0];
            let n = x.shape[0];
            let mut d = Vec::with_capacity(3 * n);
            for i in 0..n {
                let w = [x.value[3 * i], x.value[3 * i + 1], x.value[3 * i + 2]];
                d.extend_from_slice(&kernels::rotation_vjp(w, &g[9 * i..9 * i + 9]));
            }
            vec![Some(d)]
        }
    }
}

fn conv_vjp<T: Elem>(ins: &[&Node], g: &[f64], stride: usize, padding: usize) -> Vec<Option<Vec<f64>>> {
    let (n, co, geom) = conv_geom(ins, stride, padding).expect("validated in forward");
    let (x, w) = (ins[0], ins[1]);
    let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
    let in_len = geom.channels * geom.height * geom.width;
    let out_len = co * cols_n;

    let mut gx = x.requires_grad.then(|| vec![0.0; x.value.len()]);
    let mut gw = w.requires_grad.then(|| vec![T::default(); w.value.len()]);
    let gb = ins.get(2).filter(|b| b.requires_grad).map(|_| {
        let mut d = vec![0.0; co];
        for b in 0..n {
            for (o, dv) in d.iter_mut().enumerate() {
                let base = b * out_len + o * cols_n;
                *dv += g[base..base + cols_n].iter().sum::<f64>();
            }
        }
        d
    });

    if use_direct(&geom, co) && co <= DIRECT_BACKWARD_MAX_CO {
        let (ci, h, wd) = (geom.channels, geom.height, geom.width);
        let wt: Vec<T> = w.value.iter().map(|&v| T::from_f64(v)).collect();
        let flipped = kernels::conv3x3_flip(&wt, ci, co);
        let mut xin = vec![T::default(); in_len];
        let mut gout = vec![T::default(); out_len];
        let mut dx = vec![T::default(); in_len];
        for b in 0..n {
            gout.iter_mut()
                .zip(&g[b * out_len..(b + 1) * out_len])
                .for_each(|(d, s)| *d = T::from_f64(*s));
            if let Some(gw) = gw.as_mut() {
                xin.iter_mut().zip(&x.value[b * in_len..]).for_each(|(d, s)| *d = T::from_f64(*s));
                kernels::conv3x3_direct_weight_grad(&gout, &xin, gw, ci, co, h, wd);
            }
            if let Some(gx) = gx.as_mut() {
                dx.iter_mut().for_each(|v| *v = T::default());
                kernels::conv3x3_direct(&gout, &flipped, &mut dx, co, ci, h, wd);
                gx[b * in_len..(b + 1) * in_len]
                    .iter_mut()
                    .zip(&dx)
                    .for_each(|(d, s)| *d = s.to_f64());
            }
        }
        let mut res = vec![gx, gw.map(|v| v.into_iter().map(T::to_f64).collect())];
        if ins.len() == 3 {
            res.push(gb);
        }
        return res;
    }
    let weights: Vec<T> = if gx.is_some() {
        w.value.iter().map(|&v| T::from_f64(v)).collect()
    } else {
        Vec::new()
    };
    let mut cols = vec![T::default(); rows * cols_n];
    let mut gout = vec![T::default(); out_len];
    for b in 0..n {
        gout.iter_mut()
            .zip(&g[b * out_len..(b + 1) * out_len])
            .for_each(|(d, s)| *d = T::from_f64(*s));
        if let Some(gw) = gw.as_mut() {
            let xin = &x.value[b * in_len..(b + 1) * in_len];
            kernels::im2col(xin, &geom, &mut cols);
            kernels::gemm(co, cols_n, rows, &gout, false, &cols, true, T::from_f64(1.0), gw);
        }
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx[b * in_len..(b + 1) * in_len];
            kernels::gemm(rows, co, cols_n, &weights, true, &gout, false, T::default(), &mut cols);
            kernels::col2im(&cols, &geom, dst);
        }
    }
    let mut res = vec![gx, gw.map(|v| v.into_iter().map(T::to_f64).collect())];
    if ins.len() == 3 {
        res.push(gb);
    }
    res
}
