//! 2-D cross-correlation via im2col and gemm.

use crate::element::{gemm, Element, Mat};
use crate::error::{shape_err, AutogradError, Result};
use crate::tape::{accumulate, Fault, Op, Tape, Var};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if x.len() != 4 {
            return Err(shape_err("conv2d", "input [N, C, H, W]", x));
        }
        if k.len() != 4 {
            return Err(shape_err("conv2d", "kernel [C_out, C, kh, kw]", k));
        }
        if x[1] != k[1] {
            return Err(shape_err("conv2d", format!("kernel with {} input channels", x[1]), k));
        }
        if stride == 0 {
            return Err(AutogradError::Invalid { op: "conv2d", msg: "stride must be >= 1".into() });
        }
        let (h, w) = (x[2] + 2 * padding, x[3] + 2 * padding);
        if k[2] > h || k[3] > w {
            return Err(shape_err("conv2d", format!("kernel no larger than the padded input {h}x{w}"), k));
        }
        Ok(Self {
            n: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            out_c: k[0],
            kh: k[2],
            kw: k[3],
            oh: (h - k[2]) / stride + 1,
            ow: (w - k[3]) / stride + 1,
            stride,
            padding,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn spatial(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one image `[C, H, W]` into `[C*kh*kw, oh*ow]`.
fn im2col<T: Element>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let sp = g.spatial();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &mut cols[((c * g.kh + i) * g.kw + j) * sp..][..sp];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + i) as isize - g.padding as isize;
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if y < 0 || y >= g.h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &img[(c * g.h + y as usize) * g.w..][..g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let x = (ox * g.stride + j) as isize - g.padding as isize;
                        *d = if x < 0 || x >= g.w as isize { T::zero() } else { src[x as usize] };
                    }
                }
            }
        }
    }
}

/// Folds `[C*kh*kw, oh*ow]` columns back into an image, accumulating overlaps.
fn col2im<T: Element>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let sp = g.spatial();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &cols[((c * g.kh + i) * g.kw + j) * sp..][..sp];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + i) as isize - g.padding as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.h + y as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let x = (ox * g.stride + j) as isize - g.padding as isize;
                        if x >= 0 && x < g.w as isize {
                            dst[x as usize] = dst[x as usize] + row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Element> Tape<T> {
    /// Cross-correlation of `x: [N, C, H, W]` with `k: [C_out, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let g = ConvGeom::new(self.shape(x), self.shape(k), stride, padding)?;
        let (patch, sp) = (g.patch(), g.spatial());
        let mut out = vec![T::zero(); g.n * g.out_c * sp];
        let mut cols = vec![T::zero(); patch * sp];
        let (xv, kv) = (self.value(x), self.value(k));
        for n in 0..g.n {
            im2col(&g, &xv[n * g.c * g.h * g.w..][..g.c * g.h * g.w], &mut cols);
            gemm(Mat::new(kv, g.out_c, patch), Mat::new(&cols, patch, sp), &mut out[n * g.out_c * sp..][..g.out_c * sp], false);
        }
        Ok(self.push(vec![g.n, g.out_c, g.oh, g.ow], out, Op::Conv2d { x, k, stride, padding }))
    }
}

pub(crate) fn conv2d_backward<T: Element>(
    tape: &Tape<T>,
    x: Var,
    k: Var,
    stride: usize,
    padding: usize,
    gout: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let g = ConvGeom::new(tape.shape(x), tape.shape(k), stride, padding).expect("validated in forward");
    let (patch, sp) = (g.patch(), g.spatial());
    let img = g.c * g.h * g.w;
    let (xv, kv) = (tape.value(x), tape.value(k));
    let want_x = tape.requires_grad(x);
    let want_k = tape.requires_grad(k);
    let mut cols = vec![T::zero(); patch * sp];
    let mut dx = if want_x { vec![T::zero(); xv.len()] } else { Vec::new() };
    let mut dk = if want_k { vec![T::zero(); kv.len()] } else { Vec::new() };
    for n in 0..g.n {
        let gy = &gout[n * g.out_c * sp..][..g.out_c * sp];
        if want_x {
            gemm(Mat::t(kv, patch, g.out_c), Mat::new(gy, g.out_c, sp), &mut cols, false);
            col2im(&g, &cols, &mut dx[n * img..][..img]);
        }
        if want_k {
            im2col(&g, &xv[n * img..][..img], &mut cols);
            gemm(Mat::new(gy, g.out_c, sp), Mat::t(&cols, sp, patch), &mut dk, true);
        }
    }
    if want_x {
        if tape.fault == Some(Fault::ConvInputGradSignFlip) {
            dx.iter_mut().for_each(|v| *v = -*v);
        }
        accumulate(grads, x, dx);
    }
    if want_k {
        accumulate(grads, k, dk);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    /// Direct six-loop cross-correlation.
    fn naive_conv(x: &[f64], xs: [usize; 4], k: &[f64], ks: [usize; 4], stride: usize, pad: usize) -> (Vec<f64>, [usize; 4]) {
        let [n, c, h, w] = xs;
        let [o, _, kh, kw] = ks;
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * o * oh * ow];
        for ni in 0..n {
            for oi in 0..o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (y * stride + i) as isize - pad as isize;
                                    let ix = (xx * stride + j) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += k[((oi * c + ci) * kh + i) * kw + j] * x[((ni * c + ci) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        out[((ni * o + oi) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        (out, [n, o, oh, ow])
    }

    fn conv_f32(x: &Tensor<f32>, k: &Tensor<f32>, stride: usize, pad: usize) -> Tensor<f32> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let kv = tape.leaf(k);
        let y = tape.conv2d(xv, kv, stride, pad).unwrap();
        tape.to_tensor(y)
    }

    #[test]
    fn ones_sum_to_nine() {
        let x = Tensor::full(vec![1, 1, 3, 3], 1.0f32);
        let k = Tensor::full(vec![1, 1, 3, 3], 1.0f32);
        let y = conv_f32(&x, &k, 1, 0);
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn centered_delta_kernel_is_identity() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        let data: Vec<f32> = (0..2 * 5 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::new(vec![1, 2, 5, 5], data).unwrap();
        let mut k = Tensor::zeros(vec![2, 2, 3, 3]);
        k.data_mut()[4] = 1.0; // out 0 <- in 0 center
        k.data_mut()[(2 + 1) * 9 + 4] = 1.0; // out 1 <- in 1 center
        let y = conv_f32(&x, &k, 1, 1);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn random_case_matches_nested_loops() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
        let xd: Vec<f32> = (0..2 * 3 * 5 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kd: Vec<f32> = (0..4 * 3 * 3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::new(vec![2, 3, 5, 5], xd.clone()).unwrap();
        let k = Tensor::new(vec![4, 3, 3, 3], kd.clone()).unwrap();
        let y = conv_f32(&x, &k, 1, 0);
        let xd64: Vec<f64> = xd.iter().map(|&v| v as f64).collect();
        let kd64: Vec<f64> = kd.iter().map(|&v| v as f64).collect();
        let (want, shape) = naive_conv(&xd64, [2, 3, 5, 5], &kd64, [4, 3, 3, 3], 1, 0);
        assert_eq!(y.shape(), &shape);
        for (a, b) in y.data().iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn matches_nested_loops_on_100_random_small_shapes() {
        for seed in 0..100u64 {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
            let n = rng.gen_range(1..=6);
            let c = rng.gen_range(1..=6);
            let h = rng.gen_range(1..=6);
            let w = rng.gen_range(1..=6);
            let o = rng.gen_range(1..=6);
            let stride = rng.gen_range(1..=3);
            let pad = rng.gen_range(0..=2);
            let kh = rng.gen_range(1..=(h + 2 * pad).min(6));
            let kw = rng.gen_range(1..=(w + 2 * pad).min(6));
            let xd: Vec<f64> = (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let kd: Vec<f64> = (0..o * c * kh * kw).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut tape = Tape::<f64>::new();
            let xv = tape.constant(Tensor::new(vec![n, c, h, w], xd.clone()).unwrap());
            let kv = tape.constant(Tensor::new(vec![o, c, kh, kw], kd.clone()).unwrap());
            let y = tape.conv2d(xv, kv, stride, pad).unwrap();
            let (want, shape) = naive_conv(&xd, [n, c, h, w], &kd, [o, c, kh, kw], stride, pad);
            assert_eq!(tape.shape(y), &shape, "seed {seed}");
            for (a, b) in tape.value(y).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "seed {seed}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3, 4, 4]));
        let k = tape.constant(Tensor::zeros(vec![2, 2, 3, 3]));
        let err = tape.conv2d(x, k, 1, 0).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
    }

    #[test]
    fn zero_stride_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 4, 4]));
        let k = tape.constant(Tensor::zeros(vec![1, 1, 3, 3]));
        assert!(tape.conv2d(x, k, 0, 0).is_err());
    }
}
