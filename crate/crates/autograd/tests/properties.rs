use mdlprune_autograd::gradcheck::{check, run_suite, tolerance};
use mdlprune_autograd::{Fault, Tape, Tensor};
use proptest::prelude::*;

/// Direct nested-loop convolution, zero padding.
fn naive_conv(x: &[f64], xs: [usize; 4], k: &[f64], ks: [usize; 4], stride: usize, pad: usize) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, w] = xs;
    let [co, ci, kh, kw] = ks;
    assert_eq!(c, ci);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let (y, xx) = ((i * stride + u) as isize - pad as isize, (j * stride + v) as isize - pad as isize);
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                acc += x[((b * c + ch) * h + y as usize) * w + xx as usize] * k[((o * ci + ch) * kh + u) * kw + v];
                            }
                        }
                    }
                    out[((b * co + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    (out, [n, co, oh, ow])
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-1.0f64..1.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_nested_loops(
        (n, c, h, w, co, k, stride, pad) in (1usize..3, 1usize..4, 1usize..7, 1usize..7, 1usize..4, 1usize..4, 1usize..3, 0usize..2)
            .prop_filter("kernel fits", |&(_, _, h, w, _, k, _, p)| k <= h + 2 * p && k <= w + 2 * p),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(seed);
        let xs = [n, c, h, w];
        let ks = [co, c, k, k];
        let x: Vec<f64> = (0..xs.iter().product()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kv: Vec<f64> = (0..ks.iter().product()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (want, shape) = naive_conv(&x, xs, &kv, ks, stride, pad);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(Tensor::new(xs.to_vec(), x).unwrap());
        let kk = tape.constant(Tensor::new(ks.to_vec(), kv).unwrap());
        let y = tape.conv2d(xv, kk, stride, pad).unwrap();
        prop_assert_eq!(tape.shape(y), &shape[..]);
        for (a, b) in tape.value(y).iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn random_shape_conv_and_linear_gradients(c in 1usize..3, h in 2usize..5, f in 1usize..4, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut t = |shape: Vec<usize>| {
            let n = shape.iter().product();
            Tensor::<f64>::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let inputs = [t(vec![2, c, h, h]), t(vec![f, c, 2, 2]), t(vec![f, 3]), t(vec![3])];
        let r = check("conv_gap_linear", &inputs, |tape, v| {
            let y = tape.conv2d(v[0], v[1], 1, 1)?;
            let g = tape.global_avg_pool(y)?;
            tape.linear(g, v[2], v[3])
        }, None, seed).unwrap();
        prop_assert!(r.max_rel_error < tolerance::<f64>(), "{:?}", r);
    }

    #[test]
    fn ste_gradient_is_identity(s in values(6), g in values(6)) {
        let mut tape = Tape::<f64>::new();
        let sw = tape.leaf(&Tensor::from_vec(s).with_grad());
        let b = tape.binarize_ste(sw, 0.0);
        let gv = tape.constant(Tensor::from_vec(g.clone()));
        let p = tape.mul(b, gv).unwrap();
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        prop_assert_eq!(grads.get(sw).unwrap(), g.as_slice());
    }

    #[test]
    fn binarize_output_is_zero_or_one(s in values(8), thr in -0.5f64..0.5) {
        let mut tape = Tape::<f64>::new();
        let sw = tape.constant(Tensor::from_vec(s.clone()));
        let b = tape.binarize_ste(sw, thr);
        for (bi, si) in tape.value(b).iter().zip(&s) {
            prop_assert_eq!(*bi, if *si > thr { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn two_backward_passes_double_gradients(x in values(5)) {
        let mut p = Tensor::from_vec(x).with_grad();
        let mut first = None;
        for _ in 0..2 {
            let mut tape = Tape::<f64>::new();
            let v = tape.leaf(&p);
            let sq = tape.mul(v, v).unwrap();
            let loss = tape.sum(sq);
            let grads = tape.backward(loss).unwrap();
            first.get_or_insert_with(|| grads.get(v).unwrap().to_vec());
            p.accumulate_grad(grads.get(v).unwrap()).unwrap();
        }
        let doubled: Vec<f64> = first.unwrap().iter().map(|g| g + g).collect();
        prop_assert_eq!(p.grad.as_deref().unwrap(), doubled.as_slice());
    }
}

#[test]
fn suite_covers_every_op_in_both_precisions() {
    let f32s = run_suite::<f32>(None).unwrap();
    let f64s = run_suite::<f64>(None).unwrap();
    assert_eq!(f32s.len(), f64s.len());
    for r in f32s {
        assert!(r.max_rel_error < 1e-2, "{r:?}");
    }
    for r in f64s {
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }
}

#[test]
fn injected_conv_fault_fails_only_conv_checks() {
    let results = run_suite::<f64>(Some(Fault::ConvInputGradSignFlip)).unwrap();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.op.as_str()).collect();
    assert!(failed.contains(&"conv2d"), "{failed:?}");
    assert!(results.iter().find(|r| r.op == "linear").unwrap().passed());
}
