//! Central finite-difference verification of tape gradients.
//!
//! Every op output is projected to a scalar through fixed random weights, the
//! analytic gradient comes from [`Tape::backward`], and the numeric gradient
//! from `(f(x + h) - f(x - h)) / 2h` with `h = 1e-3`. The reported error is the
//! infinity-norm relative error `max|a - n| / max(max|a|, max|n|)` per input,
//! maximized over inputs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::element::Element;
use crate::error::Result;
use crate::norm::{BatchNormMode, RunningStats};
use crate::tape::{Fault, Tape, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-3;

/// Pass threshold on the relative error for element type `T`.
pub fn tolerance<T: Element>() -> f64 {
    if std::mem::size_of::<T>() >= 8 {
        1e-5
    } else {
        1e-2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub op: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < self.tolerance
    }
}

fn projected<T: Element, F>(
    inputs: &[Tensor<T>],
    f: &F,
    weights: &Option<Tensor<T>>,
    fault: Option<Fault>,
) -> Result<(Tape<T>, Var, Vec<Var>)>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = match fault {
        Some(fault) => Tape::with_fault(fault),
        None => Tape::new(),
    };
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    let loss = match weights {
        None => out,
        Some(w) => {
            let wv = tape.constant(w.clone());
            let prod = tape.mul(out, wv)?;
            tape.sum(prod)
        }
    };
    Ok((tape, loss, vars))
}

/// Compares analytic and numeric gradients of `f` w.r.t. every input.
pub fn check<T: Element, F>(name: &str, inputs: &[Tensor<T>], f: F, fault: Option<Fault>, seed: u64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let inputs: Vec<Tensor<T>> = inputs.iter().map(|t| t.clone().with_grad()).collect();
    let mut probe = Tape::new();
    let pv: Vec<Var> = inputs.iter().map(|t| probe.leaf(t)).collect();
    let out = f(&mut probe, &pv)?;
    let out_shape = probe.shape(out).to_vec();
    let weights = if out_shape.iter().product::<usize>() == 1 {
        None
    } else {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ 0x9e37_79b9);
        let n = out_shape.iter().product();
        Some(Tensor::new(out_shape, (0..n).map(|_| T::lit(rng.gen_range(-1.0..1.0))).collect())?)
    };

    let (tape, loss, vars) = projected(&inputs, &f, &weights, fault)?;
    let grads = tape.backward(loss)?;

    let h = T::lit(STEP);
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(*v) {
            Some(g) => g.iter().map(|x| x.to_f64().unwrap()).collect(),
            None => vec![0.0; inputs[i].numel()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] = plus[i].data()[j] + h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] = minus[i].data()[j] - h;
            let (tp, lp, _) = projected(&plus, &f, &weights, None)?;
            let (tm, lm, _) = projected(&minus, &f, &weights, None)?;
            let diff = tp.item(lp).to_f64().unwrap() - tm.item(lm).to_f64().unwrap();
            numeric.push(diff / (2.0 * STEP));
        }
        let scale = analytic.iter().chain(&numeric).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let err = analytic.iter().zip(&numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        worst = worst.max(err / scale);
    }
    Ok(GradCheck { op: name.to_string(), max_rel_error: worst, tolerance: tolerance::<T>() })
}

fn uniform<T: Element>(rng: &mut Xoshiro256PlusPlus, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::lit(rng.gen_range(lo..hi))).collect()).unwrap()
}

/// Values with magnitude in `[0.2, 1]`, away from the ReLU kink.
fn off_kink<T: Element>(rng: &mut Xoshiro256PlusPlus, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.2..1.0);
            T::lit(if rng.gen_bool(0.5) { m } else { -m })
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values spaced 0.05 apart, so pooling windows have clear winners.
fn spaced<T: Element>(rng: &mut Xoshiro256PlusPlus, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    vals.shuffle(rng);
    Tensor::new(shape.to_vec(), vals.into_iter().map(T::lit).collect()).unwrap()
}

/// The straight-through estimator is not differentiable in the finite-difference
/// sense; instead its gradient must equal the upstream gradient exactly.
fn straight_through_check<T: Element>(rng: &mut Xoshiro256PlusPlus) -> Result<GradCheck> {
    let s: Tensor<T> = uniform(rng, &[7], -1.0, 1.0).with_grad();
    let w: Tensor<T> = uniform(rng, &[7], -1.0, 1.0);
    let mut tape = Tape::new();
    let sv = tape.leaf(&s);
    let b = tape.binarize_ste(sv, T::zero());
    let wv = tape.constant(w.clone());
    let p = tape.mul(b, wv)?;
    let loss = tape.sum(p);
    let grads = tape.backward(loss)?;
    let exact = grads.get(sv).map(|g| g == w.data()).unwrap_or(false);
    Ok(GradCheck { op: "binarize_ste".into(), max_rel_error: if exact { 0.0 } else { f64::INFINITY }, tolerance: tolerance::<T>() })
}

/// Runs the finite-difference check for every differentiable op plus a small
/// masked CNN built from them.
pub fn run_suite<T: Element>(fault: Option<Fault>) -> Result<Vec<GradCheck>> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(2024);
    let mut out = Vec::new();
    let mut seed = 0u64;
    let mut next_seed = || {
        seed += 1;
        seed
    };

    let a: Tensor<T> = uniform(&mut rng, &[2, 3], -1.0, 1.0);
    let b: Tensor<T> = uniform(&mut rng, &[2, 3], 0.5, 1.5);
    out.push(check("add", &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]), fault, next_seed())?);
    out.push(check("sub", &[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]), fault, next_seed())?);
    out.push(check("mul", &[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]), fault, next_seed())?);
    out.push(check("div", &[a.clone(), b.clone()], |t, v| t.div(v[0], v[1]), fault, next_seed())?);
    out.push(check("scale", std::slice::from_ref(&a), |t, v| Ok(t.scale(v[0], T::lit(-2.5))), fault, next_seed())?);
    out.push(check("add_scalar", std::slice::from_ref(&a), |t, v| Ok(t.add_scalar(v[0], T::lit(0.75))), fault, next_seed())?);
    out.push(check("sum", std::slice::from_ref(&a), |t, v| Ok(t.sum(v[0])), fault, next_seed())?);
    out.push(check("mean", std::slice::from_ref(&a), |t, v| t.mean(v[0]), fault, next_seed())?);
    let k: Tensor<T> = off_kink(&mut rng, &[3, 4]);
    out.push(check("relu", &[k], |t, v| Ok(t.relu(v[0])), fault, next_seed())?);
    let c1: Tensor<T> = uniform(&mut rng, &[3], -1.0, 1.0);
    let c2: Tensor<T> = uniform(&mut rng, &[4], -1.0, 1.0);
    out.push(check("concat", &[c1, c2], |t, v| t.concat(v), fault, next_seed())?);
    out.push(check("reshape", std::slice::from_ref(&a), |t, v| t.reshape(v[0], vec![3, 2]), fault, next_seed())?);

    let img: Tensor<T> = uniform(&mut rng, &[2, 3, 5, 5], -1.0, 1.0);
    let sc: Tensor<T> = uniform(&mut rng, &[3], -1.0, 1.0);
    out.push(check("channel_scale", &[img.clone(), sc], |t, v| t.channel_scale(v[0], v[1]), fault, next_seed())?);
    out.push(check("select_channels", std::slice::from_ref(&img), |t, v| t.select_channels(v[0], &[2, 0, 2]), fault, next_seed())?);

    let ker: Tensor<T> = uniform(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
    out.push(check("conv2d", &[img.clone(), ker.clone()], |t, v| t.conv2d(v[0], v[1], 1, 1), fault, next_seed())?);
    out.push(check("conv2d_strided", &[img.clone(), ker], |t, v| t.conv2d(v[0], v[1], 2, 0), fault, next_seed())?);

    let bn_x: Tensor<T> = uniform(&mut rng, &[4, 3, 2, 2], -2.0, 2.0);
    let gamma: Tensor<T> = uniform(&mut rng, &[3], 0.5, 1.5);
    let beta: Tensor<T> = uniform(&mut rng, &[3], -0.5, 0.5);
    out.push(check(
        "batchnorm_train",
        &[bn_x.clone(), gamma.clone(), beta.clone()],
        |t, v| {
            let mut rs = RunningStats::new(3);
            t.batchnorm(v[0], v[1], v[2], BatchNormMode::Train(&mut rs))
        },
        fault,
        next_seed(),
    )?);
    let rs = RunningStats {
        mean: vec![T::lit(0.1), T::lit(-0.3), T::lit(0.2)],
        var: vec![T::lit(0.8), T::lit(1.5), T::lit(0.6)],
        momentum: T::lit(0.1),
    };
    out.push(check(
        "batchnorm_eval",
        &[bn_x, gamma, beta],
        |t, v| t.batchnorm(v[0], v[1], v[2], BatchNormMode::Eval(&rs)),
        fault,
        next_seed(),
    )?);

    let pool_x: Tensor<T> = spaced(&mut rng, &[2, 2, 4, 6]);
    out.push(check("maxpool2d", std::slice::from_ref(&pool_x), |t, v| t.maxpool2d(v[0], 2), fault, next_seed())?);
    out.push(check("global_avg_pool", std::slice::from_ref(&pool_x), |t, v| t.global_avg_pool(v[0]), fault, next_seed())?);
    out.push(check("flatten", &[pool_x], |t, v| t.flatten(v[0]), fault, next_seed())?);

    let lx: Tensor<T> = uniform(&mut rng, &[3, 5], -1.0, 1.0);
    let lw: Tensor<T> = uniform(&mut rng, &[5, 4], -1.0, 1.0);
    let lb: Tensor<T> = uniform(&mut rng, &[4], -1.0, 1.0);
    out.push(check("linear", &[lx, lw, lb], |t, v| t.linear(v[0], v[1], v[2]), fault, next_seed())?);
    let logits: Tensor<T> = uniform(&mut rng, &[4, 5], -2.0, 2.0);
    out.push(check("softmax_cross_entropy", &[logits], |t, v| t.softmax_cross_entropy(v[0], &[0, 4, 2, 2]), fault, next_seed())?);

    out.push(straight_through_check::<T>(&mut rng)?);
    out.push(mini_net_check::<T>(&mut rng, fault)?);
    Ok(out)
}

/// conv -> BN -> ReLU -> pool -> channel gate -> conv -> BN -> ReLU -> GAP -> linear -> CE.
fn mini_net_check<T: Element>(rng: &mut Xoshiro256PlusPlus, fault: Option<Fault>) -> Result<GradCheck> {
    let inputs: Vec<Tensor<T>> = vec![
        uniform(rng, &[3, 2, 6, 6], -1.0, 1.0),
        uniform(rng, &[3, 2, 3, 3], -0.5, 0.5),
        uniform(rng, &[3], 0.5, 1.5),
        uniform(rng, &[3], -0.2, 0.2),
        uniform(rng, &[3], 0.5, 1.5),
        uniform(rng, &[4, 3, 3, 3], -0.5, 0.5),
        uniform(rng, &[4], 0.5, 1.5),
        uniform(rng, &[4], -0.2, 0.2),
        uniform(rng, &[4, 3], -1.0, 1.0),
        uniform(rng, &[3], -0.1, 0.1),
    ];
    check(
        "mini_net",
        &inputs,
        |t, v| {
            let mut rs1 = RunningStats::new(3);
            let mut rs2 = RunningStats::new(4);
            let h = t.conv2d(v[0], v[1], 1, 1)?;
            let h = t.batchnorm(h, v[2], v[3], BatchNormMode::Train(&mut rs1))?;
            let h = t.relu(h);
            let h = t.maxpool2d(h, 2)?;
            let h = t.channel_scale(h, v[4])?;
            let h = t.conv2d(h, v[5], 1, 1)?;
            let h = t.batchnorm(h, v[6], v[7], BatchNormMode::Train(&mut rs2))?;
            let h = t.relu(h);
            let h = t.global_avg_pool(h)?;
            let logits = t.linear(h, v[8], v[9])?;
            t.softmax_cross_entropy(logits, &[0, 2, 1])
        },
        fault,
        99,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_in_f32() {
        for r in run_suite::<f32>(None).unwrap() {
            assert!(r.passed(), "{} rel err {:.3e}", r.op, r.max_rel_error);
        }
    }

    #[test]
    fn suite_passes_at_tight_tolerance_in_f64() {
        for r in run_suite::<f64>(None).unwrap() {
            assert_eq!(r.tolerance, 1e-5);
            assert!(r.passed(), "{} rel err {:.3e}", r.op, r.max_rel_error);
        }
    }

    #[test]
    fn conv_sign_flip_is_caught() {
        let results = run_suite::<f32>(Some(Fault::ConvInputGradSignFlip)).unwrap();
        let conv = results.iter().find(|r| r.op == "conv2d").unwrap();
        assert!(!conv.passed());
        assert!(!results.iter().find(|r| r.op == "mini_net").unwrap().passed());
        assert!(results.iter().find(|r| r.op == "linear").unwrap().passed());
    }
}
