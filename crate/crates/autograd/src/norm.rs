//! Per-channel batch normalization.

use crate::element::Element;
use crate::error::{shape_err, Result};
use crate::tape::{accumulate, Op, Tape, Var};

/// Added to the variance before the square root.
pub const BN_EPS: f64 = 1e-5;

/// Running statistics used in eval mode; updated by every train-mode call.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: T,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels], momentum: T::lit(0.1) }
    }
}

pub enum BatchNormMode<'a, T> {
    /// Normalize with batch statistics and fold them into the running estimate.
    Train(&'a mut RunningStats<T>),
    /// Normalize with the running estimate.
    Eval(&'a RunningStats<T>),
}

pub(crate) struct TrainSaved<T> {
    pub x: Var,
    pub gamma: Var,
    pub beta: Var,
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

pub(crate) struct EvalSaved<T> {
    pub x: Var,
    pub gamma: Var,
    pub beta: Var,
    mean: Vec<T>,
    inv_std: Vec<T>,
}

fn layout(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

impl<T: Element> Tape<T> {
    /// Batch norm over channel axis 1 of an `[N, C, ...]` input.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, mode: BatchNormMode<'_, T>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err("batchnorm", "[N, C, ...]", &shape));
        }
        let (n, c, inner) = layout(&shape);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(shape_err("batchnorm", format!("{name} of length {c}"), self.shape(v)));
            }
        }
        let eps = T::lit(BN_EPS);
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut out = vec![T::zero(); xv.len()];
        match mode {
            BatchNormMode::Train(running) => {
                if running.mean.len() != c {
                    return Err(shape_err("batchnorm", format!("running stats of length {c}"), &[running.mean.len()]));
                }
                let count = n * inner;
                let m = T::lit(count as f64);
                let mut xhat = vec![T::zero(); xv.len()];
                let mut inv_std = vec![T::zero(); c];
                for ci in 0..c {
                    let mut sum = T::zero();
                    for ni in 0..n {
                        sum = sum + xv[(ni * c + ci) * inner..][..inner].iter().copied().sum::<T>();
                    }
                    let mean = sum / m;
                    let mut sq = T::zero();
                    for ni in 0..n {
                        for &v in &xv[(ni * c + ci) * inner..][..inner] {
                            sq = sq + (v - mean) * (v - mean);
                        }
                    }
                    let var = sq / m;
                    let istd = T::one() / (var + eps).sqrt();
                    inv_std[ci] = istd;
                    for ni in 0..n {
                        let base = (ni * c + ci) * inner;
                        for j in 0..inner {
                            let h = (xv[base + j] - mean) * istd;
                            xhat[base + j] = h;
                            out[base + j] = gv[ci] * h + bv[ci];
                        }
                    }
                    let mom = running.momentum;
                    let unbiased = if count > 1 { sq / T::lit((count - 1) as f64) } else { var };
                    running.mean[ci] = (T::one() - mom) * running.mean[ci] + mom * mean;
                    running.var[ci] = (T::one() - mom) * running.var[ci] + mom * unbiased;
                }
                Ok(self.push(shape, out, Op::BatchNormTrain(TrainSaved { x, gamma, beta, xhat, inv_std })))
            }
            BatchNormMode::Eval(running) => {
                if running.mean.len() != c {
                    return Err(shape_err("batchnorm", format!("running stats of length {c}"), &[running.mean.len()]));
                }
                let inv_std: Vec<T> = running.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * inner;
                        for j in 0..inner {
                            out[base + j] = gv[ci] * (xv[base + j] - running.mean[ci]) * inv_std[ci] + bv[ci];
                        }
                    }
                }
                let mean = running.mean.clone();
                Ok(self.push(shape, out, Op::BatchNormEval(EvalSaved { x, gamma, beta, mean, inv_std })))
            }
        }
    }
}

pub(crate) fn train_backward<T: Element>(tape: &Tape<T>, s: &TrainSaved<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let (n, c, inner) = layout(tape.shape(s.x));
    let m = T::lit((n * inner) as f64);
    let gv = tape.value(s.gamma);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * inner;
            for j in 0..inner {
                dbeta[ci] = dbeta[ci] + g[base + j];
                dgamma[ci] = dgamma[ci] + g[base + j] * s.xhat[base + j];
            }
        }
    }
    if tape.requires_grad(s.x) {
        let mut dx = vec![T::zero(); g.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * inner;
                let f = gv[ci] * s.inv_std[ci] / m;
                for j in 0..inner {
                    dx[base + j] = f * (m * g[base + j] - dbeta[ci] - s.xhat[base + j] * dgamma[ci]);
                }
            }
        }
        accumulate(grads, s.x, dx);
    }
    if tape.requires_grad(s.gamma) {
        accumulate(grads, s.gamma, dgamma);
    }
    if tape.requires_grad(s.beta) {
        accumulate(grads, s.beta, dbeta);
    }
}

pub(crate) fn eval_backward<T: Element>(tape: &Tape<T>, s: &EvalSaved<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let (n, c, inner) = layout(tape.shape(s.x));
    let (xv, gv) = (tape.value(s.x), tape.value(s.gamma));
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = vec![T::zero(); g.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * inner;
            for j in 0..inner {
                let h = (xv[base + j] - s.mean[ci]) * s.inv_std[ci];
                dbeta[ci] = dbeta[ci] + g[base + j];
                dgamma[ci] = dgamma[ci] + g[base + j] * h;
                dx[base + j] = g[base + j] * gv[ci] * s.inv_std[ci];
            }
        }
    }
    if tape.requires_grad(s.x) {
        accumulate(grads, s.x, dx);
    }
    if tape.requires_grad(s.gamma) {
        accumulate(grads, s.gamma, dgamma);
    }
    if tape.requires_grad(s.beta) {
        accumulate(grads, s.beta, dbeta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    #[test]
    fn constant_channel_in_eval_mode_maps_to_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(vec![2, 1, 3, 3], 4.5));
        let g = tape.constant(Tensor::from_vec(vec![1.0]));
        let b = tape.constant(Tensor::from_vec(vec![0.0]));
        let rs = RunningStats { mean: vec![4.5], var: vec![1.0], momentum: 0.1 };
        let y = tape.batchnorm(x, g, b, BatchNormMode::Eval(&rs)).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn train_mode_standardizes_each_channel() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
        let data: Vec<f32> = (0..8 * 3 * 4 * 4).map(|_| rng.gen_range(-3.0..5.0)).collect();
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![8, 3, 4, 4], data).unwrap());
        let g = tape.constant(Tensor::full(vec![3], 1.0));
        let b = tape.constant(Tensor::zeros(vec![3]));
        let mut rs = RunningStats::new(3);
        let y = tape.batchnorm(x, g, b, BatchNormMode::Train(&mut rs)).unwrap();
        let yv = tape.value(y);
        for c in 0..3 {
            let vals: Vec<f64> = (0..8).flat_map(|n| yv[(n * 3 + c) * 16..][..16].iter().map(|&v| v as f64)).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-4, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
        assert!(rs.mean.iter().all(|&m| m != 0.0), "running mean updated");
    }

    #[test]
    fn eval_mode_leaves_running_stats_alone() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(vec![2, 2], 3.0));
        let g = tape.constant(Tensor::full(vec![2], 1.0));
        let b = tape.constant(Tensor::zeros(vec![2]));
        let rs = RunningStats::<f32>::new(2);
        let before = rs.clone();
        tape.batchnorm(x, g, b, BatchNormMode::Eval(&rs)).unwrap();
        assert_eq!(rs, before);
    }

    #[test]
    fn gamma_length_checked() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![2, 3, 2, 2]));
        let g = tape.constant(Tensor::full(vec![2], 1.0));
        let b = tape.constant(Tensor::zeros(vec![3]));
        let mut rs = RunningStats::new(3);
        assert!(tape.batchnorm(x, g, b, BatchNormMode::Train(&mut rs)).is_err());
    }
}
