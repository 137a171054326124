mod common;

use common::*;
use mdlprune::checkpoint::{load_checkpoint, save_model};
use mdlprune::model::{LayerSpec, MaskAggregation, MultiDomainNet, NetConfig};
use mdlprune::Checkpoint;
use mdlprune_autograd::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

fn two_masked_layers() -> NetConfig {
    NetConfig {
        input: [3, 6, 6],
        layers: vec![
            LayerSpec::Conv { out: 4, k: 3, stride: 1, padding: 1, masked: true },
            LayerSpec::Conv { out: 5, k: 3, stride: 1, padding: 1, masked: true },
        ],
        classes: vec![3, 2],
        threshold: 0.0,
        switch_init: 1e-3,
        aggregation: MaskAggregation::PerLayer,
        backbone_seed: 21,
    }
}

/// Randomizes domain switches in place, leaving masks trainable.
fn scramble_switches(net: &mut MultiDomainNet, seed: u64) {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    for d in 0..net.num_domains() {
        for s in &mut net.domain_mut(d).unwrap().switches {
            for v in s.data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn switch_gradients_equal_gate_gradients(seed in any::<u64>(), d in 0usize..2) {
        let mut net = MultiDomainNet::new(two_masked_layers()).unwrap();
        scramble_switches(&mut net, seed);
        let x = random_inputs(net.config(), 4, seed ^ 7);
        let labels: Vec<usize> = (0..4).map(|i| i % net.config().classes[d]).collect();

        // Straight-through build.
        let mut a = net.clone();
        let mut tape = Tape::new();
        let sw = a.bind_switches(&mut tape).unwrap();
        let vars = a.bind_domain(&mut tape, d).unwrap();
        let xv = tape.constant(x.clone());
        let out = a.forward_train(&mut tape, d, xv, &sw.binary[d], &vars).unwrap();
        let loss = tape.softmax_cross_entropy(out, &labels).unwrap();
        let ste = tape.backward(loss).unwrap();

        // Same forward with the binary gates as plain leaves.
        let mut b = net.clone();
        let mut tape = Tape::new();
        let gates: Vec<_> = b.masks(d).unwrap().iter().map(|m| tape.leaf(&Tensor::from_vec(m.as_f32()).with_grad())).collect();
        let vars = b.bind_domain(&mut tape, d).unwrap();
        let xv = tape.constant(x);
        let out = b.forward_train(&mut tape, d, xv, &gates, &vars).unwrap();
        let loss = tape.softmax_cross_entropy(out, &labels).unwrap();
        let plain = tape.backward(loss).unwrap();

        for (slot, g) in gates.iter().enumerate() {
            let want = plain.get(*g).unwrap();
            prop_assert_eq!(ste.get(sw.raw[d][slot]).unwrap(), want);
        }
        // Switches of other domains get nothing from this domain's loss.
        prop_assert!(ste.get(sw.raw[1 - d][0]).is_none());
    }

    #[test]
    fn masked_conv_equals_conv_of_masked_input(seed in any::<u64>(), c in 1usize..5) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let x = uniform(&mut rng, vec![2, c, 5, 5], -1.0, 1.0);
        let k = uniform(&mut rng, vec![3, c, 3, 3], -1.0, 1.0);
        let m: Vec<f32> = (0..c).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mv = tape.constant(Tensor::from_vec(m.clone()));
        let kv = tape.constant(k.clone());
        let gated = tape.channel_scale(xv, mv).unwrap();
        let y = tape.conv2d(gated, kv, 1, 1).unwrap();

        let mut xm = x.data().to_vec();
        for (i, v) in xm.iter_mut().enumerate() {
            *v *= m[(i / 25) % c];
        }
        let mut oracle = Tape::new();
        let xv = oracle.constant(Tensor::new(vec![2, c, 5, 5], xm).unwrap());
        let kv = oracle.constant(k);
        let z = oracle.conv2d(xv, kv, 1, 1).unwrap();
        for (a, b) in tape.value(y).iter().zip(oracle.value(z)) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn eval_outputs_are_identical_after_reload() {
    let dir = tempfile::tempdir().unwrap();
    let net = random_frozen_net(small_config(2), 31, 0.6);
    let path = dir.path().join("n.ckpt");
    save_model(&net, &path).unwrap();
    let Checkpoint::Model(back) = load_checkpoint(&path).unwrap() else { panic!("expected a model") };
    let x = random_inputs(net.config(), 8, 32);
    for d in 0..2 {
        let a = net.logits(d, &x).unwrap();
        let b = back.logits(d, &x).unwrap();
        assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn fresh_switches_are_all_active_under_zero_threshold() {
    let net = MultiDomainNet::new(two_masked_layers()).unwrap();
    for d in 0..2 {
        assert_eq!(net.mask_mean(d).unwrap(), 1.0);
    }
}
