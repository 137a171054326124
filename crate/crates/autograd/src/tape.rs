//! Define-by-run tape: every op appends a node, `backward` walks them in reverse.

use crate::element::Element;
use crate::error::{shape_err, AutogradError, Result};
use crate::tensor::Tensor;
use crate::{conv, nn, norm};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward-pass corruptions, used to prove the gradient checker
/// actually detects broken kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Negates the input gradient produced by `conv2d`.
    ConvInputGradSignFlip,
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    /// Threshold forward, identity backward.
    BinarizeSte(Var),
    ChannelScale {
        x: Var,
        s: Var,
    },
    SelectChannels {
        x: Var,
        index: Vec<usize>,
    },
    Conv2d {
        x: Var,
        k: Var,
        stride: usize,
        padding: usize,
    },
    BatchNormTrain(norm::TrainSaved<T>),
    BatchNormEval(norm::EvalSaved<T>),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Relu(a)
            | Op::Reshape(a)
            | Op::BinarizeSte(a)
            | Op::GlobalAvgPool(a) => vec![*a],
            Op::Concat(vs) => vs.clone(),
            Op::ChannelScale { x, s } => vec![*x, *s],
            Op::SelectChannels { x, .. } | Op::MaxPool { x, .. } => vec![*x],
            Op::Conv2d { x, k, .. } => vec![*x, *k],
            Op::BatchNormTrain(s) => vec![s.x, s.gamma, s.beta],
            Op::BatchNormEval(s) => vec![s.x, s.gamma, s.beta],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

pub(crate) struct Node<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub requires_grad: bool,
    pub op: Op<T>,
}

/// Records operations of one forward pass.
pub struct Tape<T: Element = f32> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) fault: Option<Fault>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the leaves, produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for `v`, or `None` when `v` does not require grad or is
    /// unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub(crate) fn accumulate<T: Element>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
        slot @ None => *slot = Some(g),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), fault: None }
    }

    pub fn with_fault(fault: Fault) -> Self {
        Self { nodes: Vec::new(), fault: Some(fault) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { shape, data, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Copies a tensor onto the tape; it is differentiated iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node { shape: t.shape().to_vec(), data: t.data().to_vec(), requires_grad: t.requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Moves a non-differentiable value onto the tape.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node { shape, data: t.into_data(), requires_grad: false, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First element of `v`; meant for scalars.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].data[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape is consistent")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?}"), sb));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let data = self.zip_map(a, b, |x, y| x / y);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let data = self.value(a).iter().map(|&x| x * c).collect();
        self.push(self.shape(a).to_vec(), data, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let data = self.value(a).iter().map(|&x| x + c).collect();
        self.push(self.shape(a).to_vec(), data, Op::AddScalar(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(vec![], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(AutogradError::Invalid { op: "mean", msg: "empty tensor".into() });
        }
        let s: T = self.value(a).iter().copied().sum();
        Ok(self.push(vec![], vec![s / T::lit(n as f64)], Op::Mean(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        self.push(self.shape(a).to_vec(), data, Op::Relu(a))
    }

    /// Concatenates 1-D tensors (scalars count as length 1).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            if self.shape(p).len() > 1 {
                return Err(shape_err("concat", "1-D inputs", self.shape(p)));
            }
            data.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![data.len()], data, Op::Concat(parts.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(shape_err("reshape", format!("{} elements", self.value(a).len()), &shape));
        }
        let data = self.value(a).to_vec();
        Ok(self.push(shape, data, Op::Reshape(a)))
    }

    /// `1` where `s > threshold`, else `0`; the backward pass is the identity.
    pub fn binarize_ste(&mut self, s: Var, threshold: T) -> Var {
        let data = self.value(s).iter().map(|&x| if x > threshold { T::one() } else { T::zero() }).collect();
        self.push(self.shape(s).to_vec(), data, Op::BinarizeSte(s))
    }

    /// Multiplies channel `c` of an `[N, C, ...]` tensor by `s[c]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(s) != [shape[1]] {
            return Err(shape_err("channel_scale", format!("scale of length C for input {shape:?}"), self.shape(s)));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let sv = self.value(s).to_vec();
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * inner;
                let f = sv[ci];
                for j in 0..inner {
                    out[base + j] = xv[base + j] * f;
                }
            }
        }
        Ok(self.push(shape, out, Op::ChannelScale { x, s }))
    }

    /// Gathers channels `index` (in order) from an `[N, C, ...]` tensor.
    pub fn select_channels(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err("select_channels", "[N, C, ...]", &shape));
        }
        let (n, c) = (shape[0], shape[1]);
        if let Some(&bad) = index.iter().find(|&&i| i >= c) {
            return Err(AutogradError::Invalid { op: "select_channels", msg: format!("channel {bad} out of range for {c} channels") });
        }
        let inner: usize = shape[2..].iter().product();
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * index.len() * inner);
        for ni in 0..n {
            for &ci in index {
                let base = (ni * c + ci) * inner;
                out.extend_from_slice(&xv[base..base + inner]);
            }
        }
        let mut oshape = shape;
        oshape[1] = index.len();
        Ok(self.push(oshape, out, Op::SelectChannels { x, index: index.to_vec() }))
    }

    /// Runs reverse-mode differentiation from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let loss_shape = &self.nodes[loss.0].shape;
        if self.nodes[loss.0].data.len() != 1 {
            return Err(AutogradError::NonScalarLoss(loss_shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        accumulate(grads, v, g.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = g.iter().zip(self.value(*b)).map(|(&gi, &bi)| gi * bi).collect();
                    accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = g.iter().zip(self.value(*a)).map(|(&gi, &ai)| gi * ai).collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    accumulate(grads, *a, g.iter().zip(bv).map(|(&gi, &bi)| gi / bi).collect());
                }
                if self.wants(*b) {
                    let d = g.iter().zip(av.iter().zip(bv)).map(|(&gi, (&ai, &bi))| -gi * ai / (bi * bi)).collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.iter().map(|&x| x * *c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) | Op::BinarizeSte(a) => accumulate(grads, *a, g.to_vec()),
            Op::Sum(a) => accumulate(grads, *a, vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                accumulate(grads, *a, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::Relu(a) => {
                let d = g.iter().zip(self.value(*a)).map(|(&gi, &x)| if x > T::zero() { gi } else { T::zero() }).collect();
                accumulate(grads, *a, d);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.wants(p) {
                        accumulate(grads, p, g[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::ChannelScale { x, s } => {
                let shape = self.shape(*x);
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let (xv, sv) = (self.value(*x), self.value(*s));
                if self.wants(*x) {
                    let mut d = vec![T::zero(); xv.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * inner;
                            for j in 0..inner {
                                d[base + j] = g[base + j] * sv[ci];
                            }
                        }
                    }
                    accumulate(grads, *x, d);
                }
                if self.wants(*s) {
                    let mut d = vec![T::zero(); c];
                    for ni in 0..n {
                        for (ci, dc) in d.iter_mut().enumerate() {
                            let base = (ni * c + ci) * inner;
                            let mut acc = T::zero();
                            for j in 0..inner {
                                acc = acc + g[base + j] * xv[base + j];
                            }
                            *dc = *dc + acc;
                        }
                    }
                    accumulate(grads, *s, d);
                }
            }
            Op::SelectChannels { x, index } => {
                let shape = self.shape(*x);
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let mut d = vec![T::zero(); self.value(*x).len()];
                for ni in 0..n {
                    for (k, &ci) in index.iter().enumerate() {
                        let src = (ni * index.len() + k) * inner;
                        let dst = (ni * c + ci) * inner;
                        for j in 0..inner {
                            d[dst + j] = d[dst + j] + g[src + j];
                        }
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::Conv2d { x, k, stride, padding } => conv::conv2d_backward(self, *x, *k, *stride, *padding, g, grads),
            Op::BatchNormTrain(saved) => norm::train_backward(self, saved, g, grads),
            Op::BatchNormEval(saved) => norm::eval_backward(self, saved, g, grads),
            Op::MaxPool { x, argmax } => {
                let mut d = vec![T::zero(); self.value(*x).len()];
                for (&src, &gi) in argmax.iter().zip(g) {
                    d[src] = d[src] + gi;
                }
                accumulate(grads, *x, d);
            }
            Op::GlobalAvgPool(x) => nn::global_avg_pool_backward(self, *x, g, grads),
            Op::Linear { x, w, b } => nn::linear_backward(self, *x, *w, *b, g, grads),
            Op::SoftmaxCrossEntropy { logits, probs, labels } => nn::softmax_ce_backward(self, *logits, probs, labels, g, grads),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0, 3.0]).with_grad());
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0]).with_grad());
        let y = tape.relu(x);
        assert_eq!(tape.backward(y).unwrap_err(), AutogradError::NonScalarLoss(vec![2]));
    }

    #[test]
    fn relu_forward_and_subgradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::from_vec(vec![-1.0, 0.0, 2.0]).with_grad());
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);

        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::from_vec(vec![-1.0, 2.0]).with_grad());
        let y = tape.relu(x);
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_is_identity_on_positive_input() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_vec(vec![0.5, 3.0, 7.25]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn binarize_passes_gradient_straight_through() {
        let mut tape = Tape::<f32>::new();
        let s = tape.leaf(&Tensor::from_vec(vec![0.001, -0.2, 0.5]).with_grad());
        let b = tape.binarize_ste(s, 0.0);
        assert_eq!(tape.value(b), &[1.0, 0.0, 1.0]);
        let w = tape.constant(Tensor::from_vec(vec![0.3, -1.5, 2.0]));
        let prod = tape.mul(b, w).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(s).unwrap(), &[0.3, -1.5, 2.0]);
    }

    #[test]
    fn elementwise_shape_mismatch_errors() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(a, b), Err(AutogradError::Shape { .. })));
    }

    #[test]
    fn accumulating_two_backward_passes_doubles_exactly() {
        let mut p = Tensor::from_vec(vec![0.7f32, -1.3, 2.1]).with_grad();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let x = tape.leaf(&p);
            let y = tape.mul(x, x).unwrap();
            let z = tape.relu(y);
            let loss = tape.sum(z);
            let grads = tape.backward(loss).unwrap();
            p.accumulate_grad(grads.get(x).unwrap()).unwrap();
        }
        let once: Vec<f32> = p.data().iter().map(|v| 2.0 * v).collect();
        let doubled: Vec<f32> = once.iter().map(|v| v + v).collect();
        assert_eq!(p.grad.as_deref().unwrap(), doubled.as_slice());
    }

    #[test]
    fn unreachable_leaves_get_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(&Tensor::from_vec(vec![1.0]).with_grad());
        let b = tape.leaf(&Tensor::from_vec(vec![1.0]).with_grad());
        let loss = tape.sum(a);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(a).is_some());
        assert!(grads.get(b).is_none());
    }
}
