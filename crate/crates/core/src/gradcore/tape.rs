use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use super::kernels;
use super::tensor::{check_same, check_same_len};
use super::{GradError, LinearOperator, Tensor};
use crate::regularizer::{smoothed_relu, smoothed_relu_deriv, smoothed_relu_second};

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    MulConst(usize, Rc<Tensor>),
    ScalarMul { scalar: usize, tensor: usize },
    Sum(usize),
    Dot(usize, usize),
    Exp(usize),
    Conv2d { input: usize, kernel: usize },
    Conv2dTranspose { input: usize, kernel: usize },
    SmoothedRelu(usize, f64),
    SmoothedReluGrad(usize, f64),
    ClipMin(usize, f64),
    MatVec { input: usize, op: Arc<dyn LinearOperator>, transpose: bool },
    ChannelNorm(usize),
    BroadcastChannels(usize),
    Rot90(usize, i32),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Records primitive operations in evaluation order so that a single reverse sweep
/// can propagate adjoints. Node ids are assigned in creation order, which is a
/// topological order of the graph.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.adjoints.get(v.id).and_then(|a| a.as_ref())
    }

    /// Adjoint of `v`, or zeros of its shape when the output does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match self.get(v) {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.id]),
        }
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
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Input or parameter node.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Same as [`Tape::leaf`]; named for call sites that never read its gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn backward(&self, output: Var<'_>) -> Result<Gradients, GradError> {
        let v = output.value();
        if v.len() != 1 {
            return Err(GradError::NonScalar(v.shape().to_vec()));
        }
        self.backward_with_seed(output, Tensor::full(v.shape(), 1.0))
    }

    /// Reverse sweep starting from `output` with incoming adjoint `seed`.
    pub fn backward_with_seed(&self, output: Var<'_>, seed: Tensor) -> Result<Gradients, GradError> {
        let nodes = self.nodes.borrow();
        if output.id >= nodes.len() {
            return Err(GradError::Shape("output does not belong to this tape".into()));
        }
        check_same(&nodes[output.id].value, &seed)?;
        let mut adj: Vec<Option<Tensor>> = vec![None; output.id + 1];
        adj[output.id] = Some(seed);

        for id in (0..=output.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            match &node.op {
                Op::Leaf => {
                    adj[id] = Some(g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, &g, 1.0)?;
                    accumulate(&mut adj, *b, &g, 1.0)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *a, &g, 1.0)?;
                    accumulate(&mut adj, *b, &g, -1.0)?;
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(val(*b), |p, q| p * q)?;
                    let gb = g.zip_map(val(*a), |p, q| p * q)?;
                    accumulate(&mut adj, *a, &ga, 1.0)?;
                    accumulate(&mut adj, *b, &gb, 1.0)?;
                }
                Op::Div(a, b) => {
                    let q = val(*b);
                    let ga = g.zip_map(q, |p, d| p / d)?;
                    // d(a/b)/db = -(a/b)/b = -out/b
                    let gb = g.zip_map(&node.value, |p, o| p * o)?.zip_map(q, |p, d| -p / d)?;
                    accumulate(&mut adj, *a, &ga, 1.0)?;
                    accumulate(&mut adj, *b, &gb, 1.0)?;
                }
                Op::Scale(a, s) => accumulate(&mut adj, *a, &g, *s)?,
                Op::AddConst(a) => accumulate(&mut adj, *a, &g, 1.0)?,
                Op::MulConst(a, c) => {
                    let ga = g.zip_map(c, |p, q| p * q)?;
                    accumulate(&mut adj, *a, &ga, 1.0)?;
                }
                Op::ScalarMul { scalar, tensor } => {
                    let s = val(*scalar).item();
                    let gs = g.dot(val(*tensor))?;
                    accumulate(&mut adj, *tensor, &g, s)?;
                    accumulate(&mut adj, *scalar, &Tensor::full(val(*scalar).shape(), gs), 1.0)?;
                }
                Op::Sum(a) => {
                    let ga = Tensor::full(val(*a).shape(), g.item());
                    accumulate(&mut adj, *a, &ga, 1.0)?;
                }
                Op::Dot(a, b) => {
                    let s = g.item();
                    let (va, vb) = (val(*a).clone(), val(*b).clone());
                    accumulate(&mut adj, *a, &vb, s)?;
                    accumulate(&mut adj, *b, &va, s)?;
                }
                Op::Exp(a) => {
                    let ga = g.zip_map(&node.value, |p, e| p * e)?;
                    accumulate(&mut adj, *a, &ga, 1.0)?;
                }
                Op::Conv2d { input, kernel } => {
                    let k = val(*kernel);
                    let gi = kernels::conv2d_transpose(&g, k)?;
                    let gk = kernels::conv2d_kernel_grad(val(*input), &g, k.shape())?;
                    accumulate(&mut adj, *input, &gi, 1.0)?;
                    accumulate(&mut adj, *kernel, &gk, 1.0)?;
                }
                Op::Conv2dTranspose { input, kernel } => {
                    let k = val(*kernel);
                    let gi = kernels::conv2d(&g, k)?;
                    let gk = kernels::conv2d_kernel_grad(&g, val(*input), k.shape())?;
                    accumulate(&mut adj, *input, &gi, 1.0)?;
                    accumulate(&mut adj, *kernel, &gk, 1.0)?;
                }
                Op::SmoothedRelu(a, delta) => {
                    let d = *delta;
                    let ga = g.zip_map(val(*a), |p, x| p * smoothed_relu_deriv(x, d))?;
                    accumulate(&mut adj, *a, &ga, 1.0)?;
                }
                Op::SmoothedReluGrad(a, delta) => {
                    let d = *delta;
                    let ga = g.zip_map(val(*a), |p, x| p * smoothed_relu_second(x, d))?;
                    accumulate(&mut adj, *a, &ga, 1.0)?;
                }
                Op::ClipMin(a, floor) => {
                    let f = *floor;
                    let ga = g.zip_map(val(*a), |p, x| if x > f { p } else { 0.0 })?;
                    accumulate(&mut adj, *a, &ga, 1.0)?;
                }
                Op::MatVec { input, op, transpose } => {
                    let x = val(*input);
                    let mut gi = vec![0.0; x.len()];
                    if *transpose {
                        op.apply(g.data(), &mut gi);
                    } else {
                        op.apply_adjoint(g.data(), &mut gi);
                    }
                    let gi = Tensor::new(x.shape().to_vec(), gi)?;
                    accumulate(&mut adj, *input, &gi, 1.0)?;
                }
                Op::ChannelNorm(a) => {
                    let x = val(*a);
                    let s = x.shape();
                    let plane = s[1] * s[2];
                    let mut ga = vec![0.0; x.len()];
                    for (c, chunk) in ga.chunks_mut(plane).enumerate() {
                        for (p, out) in chunk.iter_mut().enumerate() {
                            let n = node.value.data()[p];
                            if n > 0.0 {
                                *out = g.data()[p] * x.data()[c * plane + p] / n;
                            }
                        }
                    }
                    let ga = Tensor::new(s.to_vec(), ga)?;
                    accumulate(&mut adj, *a, &ga, 1.0)?;
                }
                Op::BroadcastChannels(a) => {
                    let s = val(*a).shape().to_vec();
                    let plane = s[1] * s[2];
                    let mut ga = vec![0.0; plane];
                    for chunk in g.data().chunks(plane) {
                        for (o, v) in ga.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    accumulate(&mut adj, *a, &Tensor::new(s, ga)?, 1.0)?;
                }
                Op::Rot90(a, k) => {
                    let ga = kernels::rot90(&g, -k)?;
                    accumulate(&mut adj, *a, &ga, 1.0)?;
                }
            }
        }
        let shapes = nodes[..=output.id].iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { adjoints: adj, shapes })
    }
}

fn accumulate(
    adj: &mut [Option<Tensor>],
    id: usize,
    g: &Tensor,
    scale: f64,
) -> Result<(), GradError> {
    match &mut adj[id] {
        Some(existing) => existing.axpy(scale, g)?,
        slot @ None => {
            *slot = Some(if scale == 1.0 { g.clone() } else { g.map(|v| v * scale) });
        }
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<(), GradError> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(GradError::Shape("operands recorded on different tapes".into()))
        }
    }

    fn binary(
        self,
        other: Var<'t>,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>, GradError> {
        self.same_tape(&other)?;
        let out = self.value().zip_map(&other.value(), f)?;
        Ok(self.tape.push(out, op))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, GradError> {
        self.binary(other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, GradError> {
        self.binary(other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, GradError> {
        self.binary(other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// Elementwise quotient. Any zero in the denominator is rejected.
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>, GradError> {
        self.same_tape(&other)?;
        let den = other.value();
        if let Some(index) = den.data().iter().position(|&d| d == 0.0) {
            return Err(GradError::ZeroDivision { index });
        }
        self.binary(other, |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let out = self.value().map(|v| v * s);
        self.tape.push(out, Op::Scale(self.id, s))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_const(self, c: &Tensor) -> Result<Var<'t>, GradError> {
        let out = self.value().zip_map(c, |a, b| a + b)?;
        Ok(self.tape.push(out, Op::AddConst(self.id)))
    }

    pub fn sub_const(self, c: &Tensor) -> Result<Var<'t>, GradError> {
        let out = self.value().zip_map(c, |a, b| a - b)?;
        Ok(self.tape.push(out, Op::AddConst(self.id)))
    }

    pub fn mul_const(self, c: &Tensor) -> Result<Var<'t>, GradError> {
        let out = self.value().zip_map(c, |a, b| a * b)?;
        Ok(self.tape.push(out, Op::MulConst(self.id, Rc::new(c.clone()))))
    }

    /// `self` must hold exactly one element; multiplies every entry of `tensor` by it.
    pub fn scalar_mul(self, tensor: Var<'t>) -> Result<Var<'t>, GradError> {
        self.same_tape(&tensor)?;
        let s = self.value();
        if s.len() != 1 {
            return Err(GradError::NonScalar(s.shape().to_vec()));
        }
        let k = s.item();
        let out = tensor.value().map(|v| k * v);
        Ok(self.tape.push(out, Op::ScalarMul { scalar: self.id, tensor: tensor.id }))
    }

    pub fn sum(self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.push(out, Op::Sum(self.id))
    }

    pub fn dot(self, other: Var<'t>) -> Result<Var<'t>, GradError> {
        self.same_tape(&other)?;
        let v = self.value();
        let w = other.value();
        check_same_len(&v, &w)?;
        let out = Tensor::scalar(v.dot(&w)?);
        Ok(self.tape.push(out, Op::Dot(self.id, other.id)))
    }

    /// Squared Euclidean norm.
    pub fn sum_squares(self) -> Var<'t> {
        self.dot(self).expect("self-dot is shape compatible")
    }

    pub fn exp(self) -> Var<'t> {
        let out = self.value().map(f64::exp);
        self.tape.push(out, Op::Exp(self.id))
    }

    pub fn conv2d(self, kernel: Var<'t>) -> Result<Var<'t>, GradError> {
        self.same_tape(&kernel)?;
        let out = kernels::conv2d(&self.value(), &kernel.value())?;
        Ok(self.tape.push(out, Op::Conv2d { input: self.id, kernel: kernel.id }))
    }

    pub fn conv2d_transpose(self, kernel: Var<'t>) -> Result<Var<'t>, GradError> {
        self.same_tape(&kernel)?;
        let out = kernels::conv2d_transpose(&self.value(), &kernel.value())?;
        Ok(self.tape.push(out, Op::Conv2dTranspose { input: self.id, kernel: kernel.id }))
    }

    pub fn smoothed_relu(self, delta: f64) -> Var<'t> {
        let out = self.value().map(|x| smoothed_relu(x, delta));
        self.tape.push(out, Op::SmoothedRelu(self.id, delta))
    }

    /// Elementwise derivative of the smoothed ReLU, itself differentiable.
    pub fn smoothed_relu_grad(self, delta: f64) -> Var<'t> {
        let out = self.value().map(|x| smoothed_relu_deriv(x, delta));
        self.tape.push(out, Op::SmoothedReluGrad(self.id, delta))
    }

    /// `max(x, floor)` elementwise; the adjoint passes only where `x > floor`.
    pub fn clip_min(self, floor: f64) -> Var<'t> {
        let out = self.value().map(|x| x.max(floor));
        self.tape.push(out, Op::ClipMin(self.id, floor))
    }

    /// Apply a fixed linear map (`transpose` selects its adjoint).
    pub fn matvec(self, op: &Arc<dyn LinearOperator>, transpose: bool) -> Result<Var<'t>, GradError> {
        let x = self.value();
        let (in_shape, out_shape) = if transpose {
            (op.output_shape(), op.input_shape())
        } else {
            (op.input_shape(), op.output_shape())
        };
        if x.len() != in_shape.iter().product::<usize>() {
            return Err(GradError::Shape(format!(
                "linear map expects {:?}, got {:?}",
                in_shape,
                x.shape()
            )));
        }
        let mut out = vec![0.0; out_shape.iter().product()];
        if transpose {
            op.apply_adjoint(x.data(), &mut out);
        } else {
            op.apply(x.data(), &mut out);
        }
        let out = Tensor::new(out_shape, out)?;
        Ok(self.tape.push(
            out,
            Op::MatVec { input: self.id, op: Arc::clone(op), transpose },
        ))
    }

    /// Euclidean norm over the channel axis: `(C, H, W) -> (1, H, W)`.
    pub fn channel_norm(self) -> Result<Var<'t>, GradError> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 3 {
            return Err(GradError::Shape(format!("channel_norm needs (C, H, W), got {:?}", s)));
        }
        let plane = s[1] * s[2];
        let mut out = vec![0.0; plane];
        for chunk in x.data().chunks(plane) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v * v;
            }
        }
        out.iter_mut().for_each(|v| *v = v.sqrt());
        let out = Tensor::new(vec![1, s[1], s[2]], out)?;
        Ok(self.tape.push(out, Op::ChannelNorm(self.id)))
    }

    /// Repeat a `(1, H, W)` plane across `channels`.
    pub fn broadcast_channels(self, channels: usize) -> Result<Var<'t>, GradError> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 3 || s[0] != 1 {
            return Err(GradError::Shape(format!("broadcast needs (1, H, W), got {:?}", s)));
        }
        let mut out = Vec::with_capacity(channels * x.len());
        for _ in 0..channels {
            out.extend_from_slice(x.data());
        }
        let out = Tensor::new(vec![channels, s[1], s[2]], out)?;
        Ok(self.tape.push(out, Op::BroadcastChannels(self.id)))
    }

    pub fn rot90(self, quarter_turns: i32) -> Result<Var<'t>, GradError> {
        let out = kernels::rot90(&self.value(), quarter_turns)?;
        Ok(self.tape.push(out, Op::Rot90(self.id, quarter_turns)))
    }

    /// Copy of the current value as a new leaf; gradients stop here.
    pub fn detach(self) -> Var<'t> {
        let v = (*self.value()).clone();
        self.tape.constant(v)
    }
}
