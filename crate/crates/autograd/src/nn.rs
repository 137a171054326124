//! Pooling, affine, and loss ops.

use crate::element::{gemm, Element, Mat};
use crate::error::{shape_err, AutogradError, Result};
use crate::tape::{accumulate, Op, Tape, Var};

impl<T: Element> Tape<T> {
    /// Non-overlapping `size x size` max pooling (window == stride, floor).
    pub fn maxpool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(shape_err("maxpool2d", "[N, C, H, W]", &shape));
        }
        let [n, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
        if size == 0 || size > h || size > w {
            return Err(AutogradError::Invalid { op: "maxpool2d", msg: format!("window {size} does not fit {h}x{w}") });
        }
        let (oh, ow) = (h / size, w / size);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * size * w + ox * size;
                    for i in 0..size {
                        for j in 0..size {
                            let idx = base + (oy * size + i) * w + ox * size + j;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.push(vec![n, c, oh, ow], out, Op::MaxPool { x, argmax }))
    }

    /// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(shape_err("global_avg_pool", "[N, C, H, W]", &shape));
        }
        let (nc, hw) = (shape[0] * shape[1], shape[2] * shape[3]);
        let scale = T::one() / T::lit(hw as f64);
        let out = self.value(x).chunks(hw).take(nc).map(|p| p.iter().copied().sum::<T>() * scale).collect();
        Ok(self.push(vec![shape[0], shape[1]], out, Op::GlobalAvgPool(x)))
    }

    /// Flattens everything after the batch axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(shape_err("flatten", "[N, ...]", &shape));
        }
        let rest = shape[1..].iter().product();
        self.reshape(x, vec![shape[0], rest])
    }

    /// `x: [N, F] * w: [F, K] + b: [K]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if xs.len() != 2 {
            return Err(shape_err("linear", "input [N, F]", &xs));
        }
        if ws.len() != 2 || ws[0] != xs[1] {
            return Err(shape_err("linear", format!("weight [{}, K]", xs[1]), &ws));
        }
        if bs != [ws[1]] {
            return Err(shape_err("linear", format!("bias [{}]", ws[1]), &bs));
        }
        let (n, f, k) = (xs[0], xs[1], ws[1]);
        let mut out = vec![T::zero(); n * k];
        for row in out.chunks_mut(k) {
            row.copy_from_slice(self.value(b));
        }
        gemm(Mat::new(self.value(x), n, f), Mat::new(self.value(w), f, k), &mut out, true);
        Ok(self.push(vec![n, k], out, Op::Linear { x, w, b }))
    }

    /// Mean negative log-softmax of the true class, stabilized by max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(shape_err("softmax_cross_entropy", format!("logits [{}, K]", labels.len()), &shape));
        }
        let (n, k) = (shape[0], shape[1]);
        if n == 0 {
            return Err(AutogradError::Invalid { op: "softmax_cross_entropy", msg: "empty batch".into() });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(AutogradError::LabelOutOfRange { label, classes: k });
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &lv[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - max).exp() / z;
            }
            total = total + (z.ln() - (row[label] - max));
        }
        let loss = total / T::lit(n as f64);
        Ok(self.push(vec![], vec![loss], Op::SoftmaxCrossEntropy { logits, probs, labels: labels.to_vec() }))
    }
}

pub(crate) fn global_avg_pool_backward<T: Element>(tape: &Tape<T>, x: Var, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let shape = tape.shape(x);
    let hw = shape[2] * shape[3];
    let scale = T::one() / T::lit(hw as f64);
    let d = g.iter().flat_map(|&gi| std::iter::repeat_n(gi * scale, hw)).collect();
    accumulate(grads, x, d);
}

pub(crate) fn linear_backward<T: Element>(tape: &Tape<T>, x: Var, w: Var, b: Var, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let (n, f) = (tape.shape(x)[0], tape.shape(x)[1]);
    let k = tape.shape(w)[1];
    if tape.requires_grad(x) {
        let mut dx = vec![T::zero(); n * f];
        gemm(Mat::new(g, n, k), Mat::t(tape.value(w), k, f), &mut dx, false);
        accumulate(grads, x, dx);
    }
    if tape.requires_grad(w) {
        let mut dw = vec![T::zero(); f * k];
        gemm(Mat::t(tape.value(x), f, n), Mat::new(g, n, k), &mut dw, false);
        accumulate(grads, w, dw);
    }
    if tape.requires_grad(b) {
        let mut db = vec![T::zero(); k];
        for row in g.chunks(k) {
            db.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
        }
        accumulate(grads, b, db);
    }
}

pub(crate) fn softmax_ce_backward<T: Element>(
    tape: &Tape<T>,
    logits: Var,
    probs: &[T],
    labels: &[usize],
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let n = labels.len();
    let k = probs.len() / n;
    let scale = g[0] / T::lit(n as f64);
    let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
    for (i, &label) in labels.iter().enumerate() {
        d[i * k + label] = d[i * k + label] - scale;
    }
    let _ = tape;
    accumulate(grads, logits, d);
}
