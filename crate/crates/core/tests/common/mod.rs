#![allow(dead_code)]

use mdlprune::model::{LayerSpec, MaskAggregation, MultiDomainNet, NetConfig};
use mdlprune_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

/// Small three-conv net: an unmasked stem, then two masked convs around a pool.
pub fn small_config(domains: usize) -> NetConfig {
    NetConfig {
        input: [3, 8, 8],
        layers: vec![
            LayerSpec::Conv { out: 4, k: 3, stride: 1, padding: 1, masked: false },
            LayerSpec::Conv { out: 6, k: 3, stride: 1, padding: 1, masked: true },
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Conv { out: 5, k: 3, stride: 1, padding: 1, masked: true },
        ],
        classes: (0..domains).map(|d| 3 + d).collect(),
        threshold: 0.0,
        switch_init: 1e-3,
        aggregation: MaskAggregation::PerLayer,
        backbone_seed: 3,
    }
}

pub fn uniform(rng: &mut Xoshiro256PlusPlus, shape: Vec<usize>, lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// A net with random switches (each on with probability `p_on`), random
/// batch norm and heads, masks frozen.
pub fn random_frozen_net(cfg: NetConfig, seed: u64, p_on: f64) -> MultiDomainNet {
    let mut net = MultiDomainNet::new(cfg).unwrap();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    for d in 0..net.num_domains() {
        let p = net.domain_mut(d).unwrap();
        for s in &mut p.switches {
            for v in s.data_mut() {
                *v = if rng.gen_bool(p_on) { rng.gen_range(0.01..1.0) } else { rng.gen_range(-1.0..-0.01) };
            }
        }
        for i in 0..p.gamma.len() {
            let c = p.gamma[i].numel();
            p.gamma[i] = uniform(&mut rng, vec![c], 0.5, 1.5);
            p.beta[i] = uniform(&mut rng, vec![c], -0.3, 0.3);
            p.stats[i].mean = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
            p.stats[i].var = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
        }
        let w = p.head_w.shape().to_vec();
        p.head_w = uniform(&mut rng, w, -1.0, 1.0);
        let b = p.head_b.shape().to_vec();
        p.head_b = uniform(&mut rng, b, -0.5, 0.5);
    }
    net.freeze_masks();
    net
}

pub fn random_inputs(cfg: &NetConfig, n: usize, seed: u64) -> Tensor {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let [c, h, w] = cfg.input;
    uniform(&mut rng, vec![n, c, h, w], 0.0, 1.0)
}

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let k = t.shape()[1];
    t.data().chunks(k).map(|r| r.iter().enumerate().fold(0, |best, (i, v)| if *v > r[best] { i } else { best })).collect()
}

/// Tiny experiment on 8x8 images with the `small_config` layers.
pub fn tiny_experiment(domains: usize, epochs: usize) -> mdlprune::ExperimentConfig {
    use mdlprune::datagen::{DomainSpec, GeneratorKind};
    let kinds = [GeneratorKind::Shapes, GeneratorKind::Textures, GeneratorKind::Glyphs, GeneratorKind::NoisyDigits];
    let mut cfg = mdlprune::ExperimentConfig::desk_suite();
    cfg.net.layers = Some(small_config(domains).layers);
    cfg.domains = (0..domains)
        .map(|d| DomainSpec { train: 48, val: 12, test: 24, ..DomainSpec::new(kinds[d % 4], 3 + d, 8, 50 + d as u64) })
        .collect();
    cfg.train.epochs = epochs;
    cfg.train.batch_size = 16;
    cfg.train.decay_epochs = if epochs > 2 { vec![2] } else { vec![] };
    cfg
}
