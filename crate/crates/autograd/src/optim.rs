//! Parameter update rules. Each parameter carries its own state buffer, so
//! parameters that received no gradient in a step are simply skipped.

use crate::element::Element;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState<T> {
    velocity: Vec<T>,
}

/// `v <- momentum * v + g; p <- p - lr * v`. No-op when `param.grad` is empty.
pub fn sgd_momentum_step<T: Element>(param: &mut Tensor<T>, state: &mut SgdState<T>, lr: T, momentum: T) {
    let Some(grad) = param.grad.take() else { return };
    if state.velocity.len() != grad.len() {
        state.velocity = vec![T::zero(); grad.len()];
    }
    for ((p, v), &g) in param.data_mut().iter_mut().zip(state.velocity.iter_mut()).zip(&grad) {
        *v = momentum * *v + g;
        *p = *p - lr * *v;
    }
    param.grad = Some(grad);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Element> AdamConfig<T> {
    pub fn with_lr(lr: T) -> Self {
        Self { lr, beta1: T::lit(0.9), beta2: T::lit(0.999), eps: T::lit(1e-8) }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState<T> {
    m: Vec<T>,
    v: Vec<T>,
    step: u32,
}

impl<T> AdamState<T> {
    pub fn steps(&self) -> u32 {
        self.step
    }
}

/// Adam with bias correction. No-op when `param.grad` is empty.
pub fn adam_step<T: Element>(param: &mut Tensor<T>, state: &mut AdamState<T>, cfg: &AdamConfig<T>) {
    let Some(grad) = param.grad.take() else { return };
    if state.m.len() != grad.len() {
        state.m = vec![T::zero(); grad.len()];
        state.v = vec![T::zero(); grad.len()];
        state.step = 0;
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = T::one() - cfg.beta1.powi(t);
    let bc2 = T::one() - cfg.beta2.powi(t);
    for (i, p) in param.data_mut().iter_mut().enumerate() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (T::one() - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (T::one() - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        *p = *p - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    param.grad = Some(grad);
}
