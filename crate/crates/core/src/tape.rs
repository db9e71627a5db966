//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! A [`Tape`] owns the forward recording; [`Var`] is a cheap handle to one
//! recorded node. Operations append nodes in topological order, so the
//! backward pass is a single reverse sweep. One recording supports exactly
//! one backward pass.

use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::{lit, Scalar};
use crate::tensor::{broadcast_shape, broadcast_zip, reduce_to_shape, strides_of, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Neg,
    Exp,
    Ln,
    Sqrt,
    Sigmoid,
    Tanh,
    Mish,
    Gelu,
}

fn softplus<T: Scalar>(x: T) -> T {
    // max(x, 0) + ln(1 + e^{-|x|}), stable at both tails.
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl UnaryKind {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            UnaryKind::Neg => -x,
            UnaryKind::Exp => x.exp(),
            UnaryKind::Ln => x.ln(),
            UnaryKind::Sqrt => x.sqrt(),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Mish => x * softplus(x).tanh(),
            UnaryKind::Gelu => {
                // tanh approximation of GELU.
                let c = lit::<T>(0.7978845608028654); // sqrt(2/pi)
                let u = c * (x + lit::<T>(0.044715) * x * x * x);
                lit::<T>(0.5) * x * (T::one() + u.tanh())
            }
        }
    }

    /// d(apply)/dx given input x and output y.
    fn df<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            UnaryKind::Neg => -T::one(),
            UnaryKind::Exp => y,
            UnaryKind::Ln => T::one() / x,
            UnaryKind::Sqrt => T::one() / (lit::<T>(2.0) * y),
            UnaryKind::Sigmoid => y * (T::one() - y),
            UnaryKind::Tanh => T::one() - y * y,
            UnaryKind::Mish => {
                let t = softplus(x).tanh();
                t + x * (T::one() - t * t) * sigmoid(x)
            }
            UnaryKind::Gelu => {
                let c = lit::<T>(0.7978845608028654);
                let x2 = x * x;
                let u = c * (x + lit::<T>(0.044715) * x * x2);
                let t = u.tanh();
                lit::<T>(0.5) * (T::one() + t)
                    + lit::<T>(0.5)
                        * x
                        * (T::one() - t * t)
                        * c
                        * (T::one() + lit::<T>(3.0 * 0.044715) * x2)
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<T: Scalar> {
    Leaf,
    Unary {
        input: usize,
        kind: UnaryKind,
    },
    /// y = scale * x + shift (elementwise affine by constants).
    Affine {
        input: usize,
        scale: T,
        shift: T,
    },
    ClampMin {
        input: usize,
        min: T,
    },
    Binary {
        lhs: usize,
        rhs: usize,
        kind: BinKind,
    },
    MatMul {
        lhs: usize,
        rhs: usize,
    },
    Softmax {
        input: usize,
        axis: usize,
    },
    Reshape {
        input: usize,
    },
    Permute {
        input: usize,
        perm: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        input: usize,
        ranges: Vec<(usize, usize)>,
    },
    Pad2d {
        input: usize,
        pads: [usize; 4], // top, bottom, left, right
    },
    UpsampleNearest2x {
        input: usize,
    },
    GatherCols {
        input: usize,
        idx: Arc<Vec<usize>>,
    },
    SumAxes {
        input: usize,
        keep_shape: Vec<usize>, // input shape with reduced axes set to 1
    },
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    DwConv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    MaxPool2d {
        input: usize,
        argmax: Vec<usize>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

struct TapeInner<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Vec<T>>>>,
    consumed: Cell<bool>,
}

/// Recording of a forward computation supporting one backward pass.
pub struct Tape<T: Scalar> {
    inner: Rc<TapeInner<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a tape. Cloning is cheap; the value is shared.
#[derive(Clone)]
pub struct Var<T: Scalar> {
    tape: Rc<TapeInner<T>>,
    id: usize,
    shape: Vec<usize>,
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(id={}, shape={:?})", self.id, self.shape)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(TapeInner {
                nodes: RefCell::new(Vec::new()),
                grads: RefCell::new(Vec::new()),
                consumed: Cell::new(false),
            }),
        }
    }

    fn push(&self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var<T> {
        let shape = value.shape().to_vec();
        let mut nodes = self.inner.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            tape: Rc::clone(&self.inner),
            id: nodes.len() - 1,
            shape,
        }
    }

    /// Register a trainable leaf: it will receive a gradient on backward.
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        self.push(value, true, Op::Leaf)
    }

    /// Register data that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        self.push(value, false, Op::Leaf)
    }

    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gradient of the last backward pass w.r.t. `var`, if one was produced.
    pub fn grad(&self, var: &Var<T>) -> Option<Tensor<T>> {
        if !Rc::ptr_eq(&self.inner, &var.tape) {
            return None;
        }
        let grads = self.inner.grads.borrow();
        grads.get(var.id).and_then(|g| {
            g.as_ref()
                .map(|d| Tensor::new(&var.shape, d.clone()).expect("grad shape"))
        })
    }

    /// Multiply-add count (as 2 ops each) of every conv/matmul recorded so far.
    pub fn flop_count(&self) -> u64 {
        let nodes = self.inner.nodes.borrow();
        let mut total: u64 = 0;
        for node in nodes.iter() {
            match &node.op {
                Op::MatMul { lhs, rhs } => {
                    let a = nodes[*lhs].value.shape();
                    let b = nodes[*rhs].value.shape();
                    let m = a[a.len() - 2] as u64;
                    let k = a[a.len() - 1] as u64;
                    let n = b[b.len() - 1] as u64;
                    let batch: u64 = node.value.shape()[..node.value.shape().len() - 2]
                        .iter()
                        .product::<usize>() as u64;
                    total += 2 * batch * m * k * n;
                }
                Op::Conv2d {
                    input,
                    weight,
                    geom,
                    ..
                } => {
                    let ish = nodes[*input].value.shape();
                    let wsh = nodes[*weight].value.shape();
                    let (batch, in_c, out_c) = (ish[0] as u64, ish[1] as u64, wsh[0] as u64);
                    let span = (geom.out_h() * geom.out_w()) as u64;
                    total += 2 * batch * out_c * span * in_c * (geom.k * geom.k) as u64;
                }
                Op::ConvTranspose2d {
                    input,
                    weight,
                    geom,
                    ..
                } => {
                    let ish = nodes[*input].value.shape();
                    let wsh = nodes[*weight].value.shape();
                    let (batch, in_c, out_c) = (ish[0] as u64, ish[1] as u64, wsh[1] as u64);
                    let span = (ish[2] * ish[3]) as u64;
                    total += 2 * batch * in_c * span * out_c * (geom.k * geom.k) as u64;
                }
                Op::DwConv2d { geom, .. } => {
                    let osh = node.value.shape();
                    let numel: u64 = osh.iter().product::<usize>() as u64;
                    total += 2 * numel * (geom.k * geom.k) as u64;
                }
                _ => {}
            }
        }
        total
    }

    /// Reverse sweep from a scalar root; populates leaf gradients.
    pub fn backward(&self, root: &Var<T>) -> Result<()> {
        if !Rc::ptr_eq(&self.inner, &root.tape) {
            return Err(Error::Autodiff("root is not on this tape".into()));
        }
        if self.inner.consumed.get() {
            return Err(Error::Autodiff(
                "tape already consumed by a previous backward pass".into(),
            ));
        }
        if root.shape.iter().product::<usize>() != 1 {
            return Err(Error::Autodiff(format!(
                "backward root must be scalar, got shape {:?}",
                root.shape
            )));
        }
        self.inner.consumed.set(true);

        let nodes = self.inner.nodes.borrow();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[root.id] = Some(vec![T::one()]);

        for id in (0..=root.id).rev() {
            if grads[id].is_none() || !nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take();
            let g = g.unwrap();
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }

        *self.inner.grads.borrow_mut() = grads;
        Ok(())
    }
}

/// Accumulate `delta` into `grads[target]`, allocating on first touch.
fn accum<T: Scalar>(grads: &mut [Option<Vec<T>>], target: usize, numel: usize, delta: &[T]) {
    let slot = grads[target].get_or_insert_with(|| vec![T::zero(); numel]);
    for (s, d) in slot.iter_mut().zip(delta) {
        *s = *s + *d;
    }
}

fn backprop_node<T: Scalar>(
    nodes: &[Node<T>],
    id: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let wants = |i: usize| nodes[i].requires_grad;
    let numel = |i: usize| nodes[i].value.numel();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Unary { input, kind } => {
            if wants(*input) {
                let x = nodes[*input].value.data();
                let y = nodes[id].value.data();
                let delta: Vec<T> = g
                    .iter()
                    .zip(x.iter().zip(y.iter()))
                    .map(|(&gi, (&xi, &yi))| gi * kind.df(xi, yi))
                    .collect();
                accum(grads, *input, numel(*input), &delta);
            }
        }
        Op::Affine { input, scale, .. } => {
            if wants(*input) {
                let delta: Vec<T> = g.iter().map(|&gi| gi * *scale).collect();
                accum(grads, *input, numel(*input), &delta);
            }
        }
        Op::ClampMin { input, min } => {
            if wants(*input) {
                let x = nodes[*input].value.data();
                let delta: Vec<T> = g
                    .iter()
                    .zip(x.iter())
                    .map(|(&gi, &xi)| if xi > *min { gi } else { T::zero() })
                    .collect();
                accum(grads, *input, numel(*input), &delta);
            }
        }
        Op::Binary { lhs, rhs, kind } => {
            let out_shape = nodes[id].value.shape();
            let a = &nodes[*lhs].value;
            let b = &nodes[*rhs].value;
            let gt = Tensor::new(out_shape, g.to_vec()).expect("grad shape");
            match kind {
                BinKind::Add => {
                    if wants(*lhs) {
                        let d = reduce_to_shape(g, out_shape, a.shape());
                        accum(grads, *lhs, numel(*lhs), &d);
                    }
                    if wants(*rhs) {
                        let d = reduce_to_shape(g, out_shape, b.shape());
                        accum(grads, *rhs, numel(*rhs), &d);
                    }
                }
                BinKind::Sub => {
                    if wants(*lhs) {
                        let d = reduce_to_shape(g, out_shape, a.shape());
                        accum(grads, *lhs, numel(*lhs), &d);
                    }
                    if wants(*rhs) {
                        let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                        let d = reduce_to_shape(&neg, out_shape, b.shape());
                        accum(grads, *rhs, numel(*rhs), &d);
                    }
                }
                BinKind::Mul => {
                    if wants(*lhs) {
                        let gb = broadcast_zip(&gt, b, |x, y| x * y).expect("bcast");
                        let d = reduce_to_shape(gb.data(), out_shape, a.shape());
                        accum(grads, *lhs, numel(*lhs), &d);
                    }
                    if wants(*rhs) {
                        let ga = broadcast_zip(&gt, a, |x, y| x * y).expect("bcast");
                        let d = reduce_to_shape(ga.data(), out_shape, b.shape());
                        accum(grads, *rhs, numel(*rhs), &d);
                    }
                }
                BinKind::Div => {
                    if wants(*lhs) {
                        let gb = broadcast_zip(&gt, b, |x, y| x / y).expect("bcast");
                        let d = reduce_to_shape(gb.data(), out_shape, a.shape());
                        accum(grads, *lhs, numel(*lhs), &d);
                    }
                    if wants(*rhs) {
                        // d/db (a/b) = -a / b^2 = -c / b
                        let c = &nodes[id].value;
                        let gc = broadcast_zip(&gt, c, |x, y| x * y).expect("bcast");
                        let gcb = broadcast_zip(&gc, b, |x, y| -(x / y)).expect("bcast");
                        let d = reduce_to_shape(gcb.data(), out_shape, b.shape());
                        accum(grads, *rhs, numel(*rhs), &d);
                    }
                }
            }
        }
        Op::MatMul { lhs, rhs } => {
            let a = &nodes[*lhs].value;
            let b = &nodes[*rhs].value;
            let gshape = nodes[id].value.shape();
            if wants(*lhs) {
                // dA = dC * B^T
                let (full_shape, data) =
                    batched_matmul_raw(gshape, g, b.shape(), b.data(), false, true)
                        .expect("dA matmul");
                let d = reduce_to_shape(&data, &full_shape, a.shape());
                accum(grads, *lhs, numel(*lhs), &d);
            }
            if wants(*rhs) {
                // dB = A^T * dC
                let (full_shape, data) =
                    batched_matmul_raw(a.shape(), a.data(), gshape, g, true, false)
                        .expect("dB matmul");
                let d = reduce_to_shape(&data, &full_shape, b.shape());
                accum(grads, *rhs, numel(*rhs), &d);
            }
        }
        Op::Softmax { input, axis } => {
            if wants(*input) {
                let y = nodes[id].value.data();
                let shape = nodes[id].value.shape();
                let axis_len = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let mut delta = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * axis_len * inner + i;
                        let mut dot = T::zero();
                        for j in 0..axis_len {
                            let p = base + j * inner;
                            dot = dot + g[p] * y[p];
                        }
                        for j in 0..axis_len {
                            let p = base + j * inner;
                            delta[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                accum(grads, *input, numel(*input), &delta);
            }
        }
        Op::Reshape { input } => {
            if wants(*input) {
                accum(grads, *input, numel(*input), g);
            }
        }
        Op::Permute { input, perm } => {
            if wants(*input) {
                // Inverse permutation routes the gradient back.
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = Tensor::new(nodes[id].value.shape(), g.to_vec()).expect("shape");
                let back = permute_data(&gt, &inv);
                accum(grads, *input, numel(*input), back.data());
            }
        }
        Op::Concat { inputs, axis } => {
            let out_shape = nodes[id].value.shape();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let outer: usize = out_shape[..*axis].iter().product();
            let total_axis = out_shape[*axis];
            let mut offset = 0usize;
            for &inp in inputs {
                let in_shape = nodes[inp].value.shape().to_vec();
                let len = in_shape[*axis];
                if wants(inp) {
                    let mut delta = vec![T::zero(); nodes[inp].value.numel()];
                    for o in 0..outer {
                        let src = (o * total_axis + offset) * inner;
                        let dst = o * len * inner;
                        delta[dst..dst + len * inner]
                            .copy_from_slice(&g[src..src + len * inner]);
                    }
                    accum(grads, inp, numel(inp), &delta);
                }
                offset += len;
            }
        }
        Op::Slice { input, ranges } => {
            if wants(*input) {
                let in_shape = nodes[*input].value.shape();
                let mut delta = vec![T::zero(); nodes[*input].value.numel()];
                scatter_slice(&mut delta, in_shape, ranges, g);
                accum(grads, *input, numel(*input), &delta);
            }
        }
        Op::Pad2d { input, pads } => {
            if wants(*input) {
                let in_shape = nodes[*input].value.shape();
                let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
                let [pt, _pb, pl, _pr] = *pads;
                let oh = nodes[id].value.shape()[2];
                let ow = nodes[id].value.shape()[3];
                let mut delta = vec![T::zero(); nodes[*input].value.numel()];
                for p in 0..n * c {
                    for y in 0..h {
                        let src = (p * oh + y + pt) * ow + pl;
                        let dst = (p * h + y) * w;
                        delta[dst..dst + w].copy_from_slice(&g[src..src + w]);
                    }
                }
                accum(grads, *input, numel(*input), &delta);
            }
        }
        Op::UpsampleNearest2x { input } => {
            if wants(*input) {
                let in_shape = nodes[*input].value.shape();
                let (h, w) = (in_shape[2], in_shape[3]);
                let planes = in_shape[0] * in_shape[1];
                let mut delta = vec![T::zero(); nodes[*input].value.numel()];
                for p in 0..planes {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            let src = (p * 2 * h + y) * 2 * w + x;
                            let dst = (p * h + y / 2) * w + x / 2;
                            delta[dst] = delta[dst] + g[src];
                        }
                    }
                }
                accum(grads, *input, numel(*input), &delta);
            }
        }
        Op::GatherCols { input, idx } => {
            if wants(*input) {
                let in_shape = nodes[*input].value.shape();
                let (rows, cols) = (in_shape[0], in_shape[1]);
                let l = idx.len();
                let mut delta = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    for (j, &src_col) in idx.iter().enumerate() {
                        delta[r * cols + src_col] = delta[r * cols + src_col] + g[r * l + j];
                    }
                }
                accum(grads, *input, numel(*input), &delta);
            }
        }
        Op::SumAxes { input, keep_shape } => {
            if wants(*input) {
                let in_shape = nodes[*input].value.shape();
                let gt = Tensor::new(keep_shape, g.to_vec()).expect("shape");
                let zeros = Tensor::<T>::zeros(in_shape);
                let expanded = broadcast_zip(&gt, &zeros, |x, _| x).expect("bcast");
                accum(grads, *input, numel(*input), expanded.data());
            }
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
        } => {
            let ish = nodes[*input].value.shape().to_vec();
            let wsh = nodes[*weight].value.shape().to_vec();
            let (batch, in_c, out_c) = (ish[0], ish[1], wsh[0]);
            let (di, dw, db) = kernels::conv2d_bwd(
                nodes[*input].value.data(),
                nodes[*weight].value.data(),
                g,
                batch,
                in_c,
                out_c,
                geom,
                wants(*input),
                wants(*weight),
            );
            if wants(*input) {
                accum(grads, *input, numel(*input), &di);
            }
            if wants(*weight) {
                accum(grads, *weight, numel(*weight), &dw);
            }
            if let Some(b) = bias {
                if wants(*b) {
                    accum(grads, *b, numel(*b), &db);
                }
            }
        }
        Op::ConvTranspose2d {
            input,
            weight,
            bias,
            geom,
        } => {
            let ish = nodes[*input].value.shape().to_vec();
            let wsh = nodes[*weight].value.shape().to_vec();
            let (batch, in_c, out_c) = (ish[0], ish[1], wsh[1]);
            let (di, dw, db) = kernels::conv_transpose2d_bwd(
                nodes[*input].value.data(),
                nodes[*weight].value.data(),
                g,
                batch,
                in_c,
                out_c,
                geom,
            );
            if wants(*input) {
                accum(grads, *input, numel(*input), &di);
            }
            if wants(*weight) {
                accum(grads, *weight, numel(*weight), &dw);
            }
            if let Some(b) = bias {
                if wants(*b) {
                    accum(grads, *b, numel(*b), &db);
                }
            }
        }
        Op::DwConv2d {
            input,
            weight,
            bias,
            geom,
        } => {
            let ish = nodes[*input].value.shape().to_vec();
            let (batch, channels) = (ish[0], ish[1]);
            let (di, dw, db) = kernels::dwconv2d_bwd(
                nodes[*input].value.data(),
                nodes[*weight].value.data(),
                g,
                batch,
                channels,
                geom,
            );
            if wants(*input) {
                accum(grads, *input, numel(*input), &di);
            }
            if wants(*weight) {
                accum(grads, *weight, numel(*weight), &dw);
            }
            if let Some(b) = bias {
                if wants(*b) {
                    accum(grads, *b, numel(*b), &db);
                }
            }
        }
        Op::MaxPool2d { input, argmax } => {
            if wants(*input) {
                let mut delta = vec![T::zero(); nodes[*input].value.numel()];
                for (gi, &src) in g.iter().zip(argmax.iter()) {
                    if src != usize::MAX {
                        delta[src] = delta[src] + *gi;
                    }
                }
                accum(grads, *input, numel(*input), &delta);
            }
        }
    }
}

/// Copy a slice region described by per-axis ranges out of `data`.
fn gather_slice<T: Scalar>(
    data: &[T],
    shape: &[usize],
    ranges: &[(usize, usize)],
) -> (Vec<usize>, Vec<T>) {
    let out_shape: Vec<usize> = ranges.iter().map(|(s, e)| e - s).collect();
    let numel: usize = out_shape.iter().product();
    let strides = strides_of(shape);
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..numel {
        let off: usize = idx
            .iter()
            .zip(ranges)
            .zip(&strides)
            .map(|((i, (s, _)), st)| (i + s) * st)
            .sum();
        out.push(data[off]);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn scatter_slice<T: Scalar>(
    target: &mut [T],
    shape: &[usize],
    ranges: &[(usize, usize)],
    values: &[T],
) {
    let out_shape: Vec<usize> = ranges.iter().map(|(s, e)| e - s).collect();
    let numel: usize = out_shape.iter().product();
    let strides = strides_of(shape);
    let mut idx = vec![0usize; shape.len()];
    for v in values.iter().take(numel) {
        let off: usize = idx
            .iter()
            .zip(ranges)
            .zip(&strides)
            .map(|((i, (s, _)), st)| (i + s) * st)
            .sum();
        target[off] = target[off] + *v;
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn permute_data<T: Scalar>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let in_shape = t.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides_of(in_shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel = t.numel();
    let data = t.data();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..numel {
        out.push(data[off]);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            off -= src_strides[d] * out_shape[d];
        }
    }
    Tensor::new(&out_shape, out).expect("permute shape")
}

/// Batched matmul with numpy-style broadcasting of leading (batch) dims.
fn batched_matmul_raw<T: Scalar>(
    a_shape: &[usize],
    a: &[T],
    b_shape: &[usize],
    b: &[T],
    ta: bool,
    tb: bool,
) -> Result<(Vec<usize>, Vec<T>)> {
    if a_shape.len() < 2 || b_shape.len() < 2 {
        return Err(Error::Shape(format!(
            "matmul needs >= 2 dims, got {:?} x {:?}",
            a_shape, b_shape
        )));
    }
    let (ar, ac) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
    let (br, bc) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
    let (m, ka) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    if ka != kb {
        return Err(Error::Shape(format!(
            "matmul inner dimensions disagree: {} vs {} (shapes {:?} x {:?})",
            ka, kb, a_shape, b_shape
        )));
    }
    let batch_a = &a_shape[..a_shape.len() - 2];
    let batch_b = &b_shape[..b_shape.len() - 2];
    let batch = broadcast_shape(batch_a, batch_b)?;
    let batch_numel: usize = batch.iter().product();

    // Flat batch strides (0 where broadcast) for each operand.
    let stride_for = |bdims: &[usize]| -> Vec<usize> {
        let local = strides_of(bdims);
        let offset = batch.len() - bdims.len();
        let mut s = vec![0usize; batch.len()];
        for i in 0..bdims.len() {
            s[offset + i] = if bdims[i] == 1 { 0 } else { local[i] };
        }
        s
    };
    let sa = stride_for(batch_a);
    let sb = stride_for(batch_b);
    let a_mat = ar * ac;
    let b_mat = br * bc;

    let mut out = Vec::with_capacity(batch_numel * m * n);
    let mut idx = vec![0usize; batch.len()];
    for _ in 0..batch_numel.max(1) {
        let (mut ia, mut ib) = (0usize, 0usize);
        for d in 0..batch.len() {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        let a_slice = &a[ia * a_mat..ia * a_mat + a_mat];
        let b_slice = &b[ib * b_mat..ib * b_mat + b_mat];
        let c = match (ta, tb) {
            (false, false) => kernels::matmul(a_slice, b_slice, m, ka, n),
            (false, true) => kernels::matmul_nt(a_slice, b_slice, m, ka, n),
            (true, false) => kernels::matmul_tn(a_slice, b_slice, m, ka, n),
            (true, true) => unreachable!("double-transposed matmul is never recorded"),
        };
        out.extend_from_slice(&c);
        for d in (0..batch.len()).rev() {
            idx[d] += 1;
            if idx[d] < batch[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    let mut out_shape = batch;
    out_shape.push(m);
    out_shape.push(n);
    Ok((out_shape, out))
}

impl<T: Scalar> Var<T> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn tape_handle(&self) -> Tape<T> {
        Tape {
            inner: Rc::clone(&self.tape),
        }
    }

    fn same_tape(&self, other: &Var<T>) -> Result<()> {
        if Rc::ptr_eq(&self.tape, &other.tape) {
            Ok(())
        } else {
            Err(Error::Autodiff("operands live on different tapes".into()))
        }
    }

    fn unary(&self, kind: UnaryKind) -> Var<T> {
        let value = self.value().map(|x| kind.apply(x));
        self.tape_handle().push(
            value,
            self.requires_grad(),
            Op::Unary {
                input: self.id,
                kind,
            },
        )
    }

    pub fn neg(&self) -> Var<T> {
        self.unary(UnaryKind::Neg)
    }
    pub fn exp(&self) -> Var<T> {
        self.unary(UnaryKind::Exp)
    }
    pub fn ln(&self) -> Var<T> {
        self.unary(UnaryKind::Ln)
    }
    pub fn sqrt(&self) -> Var<T> {
        self.unary(UnaryKind::Sqrt)
    }
    pub fn sigmoid(&self) -> Var<T> {
        self.unary(UnaryKind::Sigmoid)
    }
    pub fn tanh(&self) -> Var<T> {
        self.unary(UnaryKind::Tanh)
    }
    pub fn mish(&self) -> Var<T> {
        self.unary(UnaryKind::Mish)
    }
    pub fn gelu(&self) -> Var<T> {
        self.unary(UnaryKind::Gelu)
    }

    pub fn mul_scalar(&self, c: T) -> Var<T> {
        let value = self.value().map(|x| x * c);
        self.tape_handle().push(
            value,
            self.requires_grad(),
            Op::Affine {
                input: self.id,
                scale: c,
                shift: T::zero(),
            },
        )
    }

    pub fn add_scalar(&self, c: T) -> Var<T> {
        let value = self.value().map(|x| x + c);
        self.tape_handle().push(
            value,
            self.requires_grad(),
            Op::Affine {
                input: self.id,
                scale: T::one(),
                shift: c,
            },
        )
    }

    pub fn clamp_min(&self, min: T) -> Var<T> {
        let value = self.value().map(|x| x.max(min));
        self.tape_handle().push(
            value,
            self.requires_grad(),
            Op::ClampMin {
                input: self.id,
                min,
            },
        )
    }

    fn binary(&self, other: &Var<T>, kind: BinKind) -> Result<Var<T>> {
        self.same_tape(other)?;
        let f = match kind {
            BinKind::Add => |x: T, y: T| x + y,
            BinKind::Sub => |x: T, y: T| x - y,
            BinKind::Mul => |x: T, y: T| x * y,
            BinKind::Div => |x: T, y: T| x / y,
        };
        let value = broadcast_zip(&self.value(), &other.value(), f)?;
        Ok(self.tape_handle().push(
            value,
            self.requires_grad() || other.requires_grad(),
            Op::Binary {
                lhs: self.id,
                rhs: other.id,
                kind,
            },
        ))
    }

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, BinKind::Add)
    }
    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, BinKind::Sub)
    }
    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, BinKind::Mul)
    }
    pub fn div(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, BinKind::Div)
    }

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.same_tape(other)?;
        let a = self.value();
        let b = other.value();
        let (shape, data) =
            batched_matmul_raw(a.shape(), a.data(), b.shape(), b.data(), false, false)?;
        let value = Tensor::new(&shape, data)?;
        Ok(self.tape_handle().push(
            value,
            self.requires_grad() || other.requires_grad(),
            Op::MatMul {
                lhs: self.id,
                rhs: other.id,
            },
        ))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<T>> {
        if axis >= self.shape.len() {
            return Err(Error::Invalid(format!(
                "softmax axis {} out of range for shape {:?}",
                axis, self.shape
            )));
        }
        let t = self.value();
        let shape = t.shape().to_vec();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let x = t.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..axis_len {
                    mx = mx.max(x[base + j * inner]);
                }
                let mut sum = T::zero();
                for j in 0..axis_len {
                    let e = (x[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    sum = sum + e;
                }
                for j in 0..axis_len {
                    out[base + j * inner] = out[base + j * inner] / sum;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.tape_handle().push(
            value,
            self.requires_grad(),
            Op::Softmax {
                input: self.id,
                axis,
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let value = self.value().reshaped(shape)?;
        Ok(self
            .tape_handle()
            .push(value, self.requires_grad(), Op::Reshape { input: self.id }))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<T>> {
        if perm.len() != self.shape.len() {
            return Err(Error::Invalid(format!(
                "permutation {:?} does not match rank of shape {:?}",
                perm, self.shape
            )));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::Invalid(format!("invalid permutation {:?}", perm)));
            }
            seen[p] = true;
        }
        let value = permute_data(&self.value(), perm);
        Ok(self.tape_handle().push(
            value,
            self.requires_grad(),
            Op::Permute {
                input: self.id,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Slice by half-open per-axis ranges; must cover every axis.
    pub fn slice(&self, ranges: &[(usize, usize)]) -> Result<Var<T>> {
        if ranges.len() != self.shape.len() {
            return Err(Error::Invalid(format!(
                "slice wants {} ranges for shape {:?}, got {}",
                self.shape.len(),
                self.shape,
                ranges.len()
            )));
        }
        for (d, &(s, e)) in ranges.iter().enumerate() {
            if s >= e || e > self.shape[d] {
                return Err(Error::Invalid(format!(
                    "slice range {}..{} invalid on axis {} of extent {}",
                    s, e, d, self.shape[d]
                )));
            }
        }
        let t = self.value();
        let (shape, data) = gather_slice(t.data(), t.shape(), ranges);
        let value = Tensor::new(&shape, data)?;
        Ok(self.tape_handle().push(
            value,
            self.requires_grad(),
            Op::Slice {
                input: self.id,
                ranges: ranges.to_vec(),
            },
        ))
    }

    /// Zero-pad the last two axes of an NCHW tensor.
    pub fn pad2d(&self, top: usize, bottom: usize, left: usize, right: usize) -> Result<Var<T>> {
        if self.shape.len() != 4 {
            return Err(Error::Shape(format!(
                "pad2d wants NCHW, got shape {:?}",
                self.shape
            )));
        }
        let (n, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let (oh, ow) = (h + top + bottom, w + left + right);
        let t = self.value();
        let src = t.data();
        let mut data = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..h {
                let d = (p * oh + y + top) * ow + left;
                let s = (p * h + y) * w;
                data[d..d + w].copy_from_slice(&src[s..s + w]);
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], data)?;
        Ok(self.tape_handle().push(
            value,
            self.requires_grad(),
            Op::Pad2d {
                input: self.id,
                pads: [top, bottom, left, right],
            },
        ))
    }

    /// Nearest-neighbor 2x upsampling of an NCHW tensor.
    pub fn upsample_nearest2x(&self) -> Result<Var<T>> {
        if self.shape.len() != 4 {
            return Err(Error::Shape(format!(
                "upsample wants NCHW, got shape {:?}",
                self.shape
            )));
        }
        let (n, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let t = self.value();
        let src = t.data();
        let mut data = vec![T::zero(); n * c * 4 * h * w];
        for p in 0..n * c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    data[(p * 2 * h + y) * 2 * w + x] = src[(p * h + y / 2) * w + x / 2];
                }
            }
        }
        let value = Tensor::new(&[n, c, 2 * h, 2 * w], data)?;
        Ok(self.tape_handle().push(
            value,
            self.requires_grad(),
            Op::UpsampleNearest2x { input: self.id },
        ))
    }

    /// Column gather on a 2-D tensor: out[r, j] = self[r, idx[j]].
    pub fn gather_cols(&self, idx: Arc<Vec<usize>>) -> Result<Var<T>> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "gather_cols wants a 2-D tensor, got {:?}",
                self.shape
            )));
        }
        let (rows, cols) = (self.shape[0], self.shape[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(Error::Invalid(format!(
                "gather index {} out of range for {} columns",
                bad, cols
            )));
        }
        let t = self.value();
        let src = t.data();
        let mut data = Vec::with_capacity(rows * idx.len());
        for r in 0..rows {
            for &j in idx.iter() {
                data.push(src[r * cols + j]);
            }
        }
        let value = Tensor::new(&[rows, idx.len()], data)?;
        Ok(self.tape_handle().push(
            value,
            self.requires_grad(),
            Op::GatherCols {
                input: self.id,
                idx,
            },
        ))
    }

    /// Sum over the given axes; `keepdim` keeps them as size-1 axes.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Var<T>> {
        for &a in axes {
            if a >= self.shape.len() {
                return Err(Error::Invalid(format!(
                    "reduce axis {} out of range for shape {:?}",
                    a, self.shape
                )));
            }
        }
        let mut keep_shape = self.shape.clone();
        for &a in axes {
            keep_shape[a] = 1;
        }
        let t = self.value();
        let data = reduce_to_shape(t.data(), t.shape(), &keep_shape);
        let out_shape = if keepdim {
            keep_shape.clone()
        } else {
            self.shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &s)| s)
                .collect()
        };
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.tape_handle().push(
            value,
            self.requires_grad(),
            Op::SumAxes {
                input: self.id,
                keep_shape,
            },
        ))
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Var<T>> {
        let count: usize = axes.iter().map(|&a| self.shape[a]).product();
        Ok(self
            .sum_axes(axes, keepdim)?
            .mul_scalar(T::one() / lit::<T>(count as f64)))
    }

    pub fn sum_all(&self) -> Result<Var<T>> {
        let axes: Vec<usize> = (0..self.shape.len()).collect();
        self.sum_axes(&axes, false)
    }

    pub fn mean_all(&self) -> Result<Var<T>> {
        Ok(self
            .sum_all()?
            .mul_scalar(T::one() / lit::<T>(self.numel() as f64)))
    }

    pub fn conv2d(
        &self,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Var<T>> {
        self.same_tape(weight)?;
        if let Some(b) = bias {
            self.same_tape(b)?;
        }
        if stride < 1 || dilation < 1 {
            return Err(Error::Invalid(format!(
                "conv2d stride/dilation must be >= 1, got {}/{}",
                stride, dilation
            )));
        }
        if self.shape.len() != 4 || weight.shape.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d wants NCHW input and OIKK weight, got {:?} and {:?}",
                self.shape, weight.shape
            )));
        }
        let (n, in_c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let (out_c, w_in_c, kh, kw) = (
            weight.shape[0],
            weight.shape[1],
            weight.shape[2],
            weight.shape[3],
        );
        if w_in_c != in_c {
            return Err(Error::Shape(format!(
                "conv2d input channels {} != weight input channels {}",
                in_c, w_in_c
            )));
        }
        if kh != kw {
            return Err(Error::Shape(format!(
                "conv2d wants square kernels, got {}x{}",
                kh, kw
            )));
        }
        if let Some(b) = bias {
            if b.shape != [out_c] {
                return Err(Error::Shape(format!(
                    "conv2d bias shape {:?} != [{}]",
                    b.shape, out_c
                )));
            }
        }
        if h + 2 * padding < dilation * (kh - 1) + 1 || w + 2 * padding < dilation * (kw - 1) + 1 {
            return Err(Error::Shape(format!(
                "conv2d kernel {} (dilation {}) larger than padded input {}x{}",
                kh,
                dilation,
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let geom = ConvGeom {
            in_h: h,
            in_w: w,
            k: kh,
            stride,
            pad: padding,
            dilation,
        };
        let bias_val = bias.map(|b| b.value());
        let out = kernels::conv2d_fwd(
            self.value().data(),
            weight.value().data(),
            bias_val.as_ref().map(|b| b.data()),
            n,
            in_c,
            out_c,
            &geom,
        );
        let value = Tensor::new(&[n, out_c, geom.out_h(), geom.out_w()], out)?;
        let rg = self.requires_grad()
            || weight.requires_grad()
            || bias.map_or(false, |b| b.requires_grad());
        Ok(self.tape_handle().push(
            value,
            rg,
            Op::Conv2d {
                input: self.id,
                weight: weight.id,
                bias: bias.map(|b| b.id),
                geom,
            },
        ))
    }

    /// Transposed convolution; weight layout is (in_channels, out_channels, k, k).
    pub fn conv_transpose2d(
        &self,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<T>> {
        self.same_tape(weight)?;
        if let Some(b) = bias {
            self.same_tape(b)?;
        }
        if stride < 1 {
            return Err(Error::Invalid(format!(
                "conv_transpose2d stride must be >= 1, got {}",
                stride
            )));
        }
        if self.shape.len() != 4 || weight.shape.len() != 4 {
            return Err(Error::Shape(format!(
                "conv_transpose2d wants NCHW input and IOKK weight, got {:?} and {:?}",
                self.shape, weight.shape
            )));
        }
        let (n, in_c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let (w_in_c, out_c, kh, kw) = (
            weight.shape[0],
            weight.shape[1],
            weight.shape[2],
            weight.shape[3],
        );
        if w_in_c != in_c {
            return Err(Error::Shape(format!(
                "conv_transpose2d input channels {} != weight input channels {}",
                in_c, w_in_c
            )));
        }
        if kh != kw {
            return Err(Error::Shape(format!(
                "conv_transpose2d wants square kernels, got {}x{}",
                kh, kw
            )));
        }
        let oh = (h - 1) * stride + kh;
        let ow = (w - 1) * stride + kw;
        if oh < 2 * padding + 1 || ow < 2 * padding + 1 {
            return Err(Error::Shape(format!(
                "conv_transpose2d padding {} consumes the whole {}x{} output",
                padding, oh, ow
            )));
        }
        let (oh, ow) = (oh - 2 * padding, ow - 2 * padding);
        // Geometry of the equivalent forward conv out -> in.
        let geom = ConvGeom {
            in_h: oh,
            in_w: ow,
            k: kh,
            stride,
            pad: padding,
            dilation: 1,
        };
        if geom.out_h() != h || geom.out_w() != w {
            return Err(Error::Shape(format!(
                "conv_transpose2d geometry does not round-trip: {}x{} -> {}x{}",
                h,
                w,
                geom.out_h(),
                geom.out_w()
            )));
        }
        if let Some(b) = bias {
            if b.shape != [out_c] {
                return Err(Error::Shape(format!(
                    "conv_transpose2d bias shape {:?} != [{}]",
                    b.shape, out_c
                )));
            }
        }
        let bias_val = bias.map(|b| b.value());
        let out = kernels::conv_transpose2d_fwd(
            self.value().data(),
            weight.value().data(),
            bias_val.as_ref().map(|b| b.data()),
            n,
            in_c,
            out_c,
            &geom,
        );
        let value = Tensor::new(&[n, out_c, oh, ow], out)?;
        let rg = self.requires_grad()
            || weight.requires_grad()
            || bias.map_or(false, |b| b.requires_grad());
        Ok(self.tape_handle().push(
            value,
            rg,
            Op::ConvTranspose2d {
                input: self.id,
                weight: weight.id,
                bias: bias.map(|b| b.id),
                geom,
            },
        ))
    }

    /// Depthwise convolution; weight layout is (channels, 1, k, k).
    pub fn dwconv2d(
        &self,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<T>> {
        self.same_tape(weight)?;
        if self.shape.len() != 4 || weight.shape.len() != 4 {
            return Err(Error::Shape(format!(
                "dwconv2d wants NCHW input and C1KK weight, got {:?} and {:?}",
                self.shape, weight.shape
            )));
        }
        let (n, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        if weight.shape[0] != c || weight.shape[1] != 1 {
            return Err(Error::Shape(format!(
                "dwconv2d weight {:?} does not match {} channels",
                weight.shape, c
            )));
        }
        let k = weight.shape[2];
        let geom = ConvGeom {
            in_h: h,
            in_w: w,
            k,
            stride,
            pad: padding,
            dilation: 1,
        };
        let bias_val = bias.map(|b| b.value());
        let out = kernels::dwconv2d_fwd(
            self.value().data(),
            weight.value().data(),
            bias_val.as_ref().map(|b| b.data()),
            n,
            c,
            &geom,
        );
        let value = Tensor::new(&[n, c, geom.out_h(), geom.out_w()], out)?;
        let rg = self.requires_grad()
            || weight.requires_grad()
            || bias.map_or(false, |b| b.requires_grad());
        Ok(self.tape_handle().push(
            value,
            rg,
            Op::DwConv2d {
                input: self.id,
                weight: weight.id,
                bias: bias.map(|b| b.id),
                geom,
            },
        ))
    }

    pub fn maxpool2d(&self, kernel: usize, stride: usize, padding: usize) -> Result<Var<T>> {
        if kernel < 1 {
            return Err(Error::Invalid("maxpool2d kernel must be >= 1".into()));
        }
        if self.shape.len() != 4 {
            return Err(Error::Shape(format!(
                "maxpool2d wants NCHW, got {:?}",
                self.shape
            )));
        }
        let (n, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        if kernel > h + 2 * padding || kernel > w + 2 * padding {
            return Err(Error::Shape(format!(
                "maxpool2d window {} larger than padded input {}x{}",
                kernel,
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let geom = ConvGeom {
            in_h: h,
            in_w: w,
            k: kernel,
            stride,
            pad: padding,
            dilation: 1,
        };
        let (out, argmax) = kernels::maxpool2d_fwd(self.value().data(), n, c, &geom);
        let value = Tensor::new(&[n, c, geom.out_h(), geom.out_w()], out)?;
        Ok(self.tape_handle().push(
            value,
            self.requires_grad(),
            Op::MaxPool2d {
                input: self.id,
                argmax,
            },
        ))
    }
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat<T: Scalar>(vars: &[&Var<T>], axis: usize) -> Result<Var<T>> {
    if vars.is_empty() {
        return Err(Error::Invalid("concat of zero tensors".into()));
    }
    let first = vars[0];
    for v in &vars[1..] {
        first.same_tape(v)?;
        if v.shape.len() != first.shape.len() {
            return Err(Error::Shape(format!(
                "concat rank mismatch: {:?} vs {:?}",
                first.shape, v.shape
            )));
        }
        for d in 0..first.shape.len() {
            if d != axis && v.shape[d] != first.shape[d] {
                return Err(Error::Shape(format!(
                    "concat axis {} differs: {:?} vs {:?}",
                    d, first.shape, v.shape
                )));
            }
        }
    }
    if axis >= first.shape.len() {
        return Err(Error::Invalid(format!(
            "concat axis {} out of range for shape {:?}",
            axis, first.shape
        )));
    }
    let mut out_shape = first.shape.clone();
    out_shape[axis] = vars.iter().map(|v| v.shape[axis]).sum();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let outer: usize = out_shape[..axis].iter().product();
    let total_axis = out_shape[axis];
    let values: Vec<Tensor<T>> = vars.iter().map(|v| v.value()).collect();
    let mut data = vec![T::zero(); outer * total_axis * inner];
    let mut offset = 0usize;
    for (v, val) in vars.iter().zip(&values) {
        let len = v.shape[axis];
        let src = val.data();
        for o in 0..outer {
            let d = (o * total_axis + offset) * inner;
            let s = o * len * inner;
            data[d..d + len * inner].copy_from_slice(&src[s..s + len * inner]);
        }
        offset += len;
    }
    let value = Tensor::new(&out_shape, data)?;
    let rg = vars.iter().any(|v| v.requires_grad());
    Ok(first.tape_handle().push(
        value,
        rg,
        Op::Concat {
            inputs: vars.iter().map(|v| v.id).collect(),
            axis,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn backward_sum_gives_ones() {
        let tape = Tape::new();
        let x = tape.leaf(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = x.sum_all().unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(tape.grad(&x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.leaf(t64(&[3], &[1.0, -2.0, 3.0]));
        let y = x.mul(&x).unwrap().sum_all().unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(tape.grad(&x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        // y = a + a => grad(a) = 2
        let tape = Tape::new();
        let a = tape.leaf(t64(&[1], &[5.0]));
        let y = a.add(&a).unwrap().sum_all().unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(tape.grad(&a).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let tape = Tape::new();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(&x), Err(Error::Autodiff(_))));
    }

    #[test]
    fn second_backward_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(t64(&[1], &[1.0]));
        let y = x.mul(&x).unwrap().sum_all().unwrap();
        tape.backward(&y).unwrap();
        assert!(matches!(tape.backward(&y), Err(Error::Autodiff(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]));
        let c = tape.constant(t64(&[2], &[3.0, 4.0]));
        let y = x.mul(&c).unwrap().sum_all().unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(tape.grad(&x).unwrap().data(), &[3.0, 4.0]);
        assert!(tape.grad(&c).is_none());
    }

    #[test]
    fn mish_reference_values() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[3], &[0.0, 1.0, 20.0]));
        let y = x.mish();
        let v = y.value();
        assert_eq!(v.data()[0], 0.0);
        assert!((v.data()[1] - 0.8650983882673103).abs() < 1e-9);
        assert!((v.data()[2] - 20.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_closed_form_and_shift_invariance() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[2], &[0.0, 3f64.ln()]));
        let y = x.softmax(0).unwrap().value();
        assert!((y.data()[0] - 0.25).abs() < 1e-12);
        assert!((y.data()[1] - 0.75).abs() < 1e-12);

        let shifted = x.add_scalar(123.456).softmax(0).unwrap().value();
        for (a, b) in y.data().iter().zip(shifted.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_stable_at_large_magnitude() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(&[4], vec![1e4f32, -1e4, 5e3, 0.0]).unwrap());
        let y = x.softmax(0).unwrap().value();
        let s: f32 = y.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(y.is_finite());
    }

    #[test]
    fn conv2d_identity_kernel() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[1, 1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let w = tape.constant(t64(&[1, 1, 1, 1], &[1.0]));
        let y = x.conv2d(&w, None, 1, 0, 1).unwrap();
        assert!(y.value().bitwise_eq(&x.value()));
    }

    #[test]
    fn conv2d_dilated_delta_taps() {
        // Delta at the center of a 9x9 input, 3x3 kernel with dilation 2:
        // nonzero outputs only at offsets that are multiples of 2 from center.
        let mut img = vec![0.0f64; 81];
        img[4 * 9 + 4] = 1.0;
        let tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[1, 1, 9, 9], &img));
        let w = tape.constant(t64(&[1, 1, 3, 3], &[1.0; 9]));
        let y = x.conv2d(&w, None, 1, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 9, 9]);
        let out = y.value();
        for yy in 0..9usize {
            for xx in 0..9usize {
                let v = out.data()[yy * 9 + xx];
                let dy = yy as isize - 4;
                let dx = xx as isize - 4;
                let on_tap = dy.abs() <= 2 && dx.abs() <= 2 && dy % 2 == 0 && dx % 2 == 0;
                if on_tap {
                    assert_eq!(v, 1.0, "expected tap at ({yy},{xx})");
                } else {
                    assert_eq!(v, 0.0, "unexpected tap at ({yy},{xx})");
                }
            }
        }
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[8, 4, 3, 3]));
        let err = x.conv2d(&w, None, 1, 1, 1).unwrap_err();
        assert!(err.to_string().contains("channels"));
    }

    #[test]
    fn conv_transpose_replicates_blocks() {
        // stride 2, k 2, all-ones weight: each input value becomes a 2x2 block.
        let tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t64(&[1, 1, 2, 2], &[1.0; 4]));
        let y = x.conv_transpose2d(&w, None, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        let expect = [
            1.0, 1.0, 2.0, 2.0, //
            1.0, 1.0, 2.0, 2.0, //
            3.0, 3.0, 4.0, 4.0, //
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(y.value().data(), &expect);
    }

    #[test]
    fn conv_transpose_identity() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[1, 1, 2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let w = tape.constant(t64(&[1, 1, 1, 1], &[1.0]));
        let y = x.conv_transpose2d(&w, None, 1, 0).unwrap();
        assert!(y.value().bitwise_eq(&x.value()));
    }

    #[test]
    fn conv_dim_round_trip() {
        // conv_transpose2d(stride s) then conv2d(stride s) maps H back to H.
        for (h, k, s, p) in [(5usize, 2usize, 2usize, 0usize), (7, 3, 2, 1), (4, 4, 4, 0)] {
            let tape = Tape::<f32>::new();
            let x = tape.constant(Tensor::zeros(&[1, 1, h, h]));
            let w_t = tape.constant(Tensor::zeros(&[1, 1, k, k]));
            let up = x.conv_transpose2d(&w_t, None, s, p).unwrap();
            let w = tape.constant(Tensor::zeros(&[1, 1, k, k]));
            let down = up.conv2d(&w, None, s, p, 1).unwrap();
            assert_eq!(down.shape(), &[1, 1, h, h]);
        }
    }

    #[test]
    fn maxpool_and_backward_routing() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[1, 1, 2, 2], &[1.0, 5.0, 2.0, 3.0]));
        let y = x.maxpool2d(2, 2, 0).unwrap();
        assert_eq!(y.value().data(), &[5.0]);
        let s = y.sum_all().unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(tape.grad(&x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_constant_same_size_with_pad() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[1, 1, 4, 4], 2.5));
        let y = x.maxpool2d(3, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert!(y.value().data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn maxpool_rejects_oversized_window() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(x.maxpool2d(5, 1, 1).is_err());
    }

    #[test]
    fn matmul_identity_and_mismatch() {
        let tape = Tape::<f64>::new();
        let eye = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let c = eye.matmul(&b).unwrap();
        assert!(c.value().bitwise_eq(&b.value()));
        let bad = tape.constant(t64(&[3, 2], &[0.0; 6]));
        assert!(eye.matmul(&bad).is_err());
    }

    #[test]
    fn concat_shapes() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let b = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[1, 5, 4, 4]);
        let d = tape.constant(Tensor::zeros(&[1, 3, 5, 4]));
        assert!(concat(&[&a, &d], 1).is_err());
    }

    #[test]
    fn reshape_round_trip_preserves_order() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = x.reshape(&[3, 2]).unwrap().reshape(&[2, 3]).unwrap();
        assert!(y.value().bitwise_eq(&x.value()));
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = x.pad2d(1, 2, 3, 0).unwrap();
        assert_eq!(p.shape(), &[1, 1, 5, 5]);
        let c = p.slice(&[(0, 1), (0, 1), (1, 3), (3, 5)]).unwrap();
        assert!(c.value().bitwise_eq(&x.value()));
    }

    #[test]
    fn flop_count_covers_matmul() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[3, 4]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        let _ = a.matmul(&b).unwrap();
        assert_eq!(tape.flop_count(), 2 * 3 * 4 * 5);
    }
}
