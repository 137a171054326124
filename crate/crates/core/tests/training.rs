mod common;

use common::*;
use mdlprune::checkpoint::model_container;
use mdlprune::datagen::{Dataset, Split};
use mdlprune::experiment::{run_experiment, test_accuracy, test_sets, training_sets};
use mdlprune::trainer::{evaluate_with, train};
use mdlprune::{Error, MultiDomainNet};
use mdlprune_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

#[test]
fn zero_epochs_leave_the_network_untouched() {
    let cfg = tiny_experiment(2, 0);
    let data = cfg.generate().unwrap();
    let mut net = MultiDomainNet::new(cfg.net_config().unwrap()).unwrap();
    let before = net.clone();
    let record = train(&mut net, &training_sets(&data), &cfg.train).unwrap();
    assert!(record.entries.is_empty());
    assert_eq!(net, before);
    assert!(!net.is_frozen());
}

#[test]
fn one_entry_per_epoch_and_domain_with_nonnegative_multipliers() {
    let cfg = tiny_experiment(2, 3);
    let data = cfg.generate().unwrap();
    let run = run_experiment(&cfg, &data, "t", |_| {}).unwrap();
    assert_eq!(run.record.entries.len(), 6);
    for (e, chunk) in run.record.entries.chunks(2).enumerate() {
        let mut domains: Vec<usize> = chunk.iter().map(|r| r.domain).collect();
        domains.sort();
        assert_eq!(domains, [0, 1]);
        assert!(chunk.iter().all(|r| r.epoch == e));
    }
    for r in &run.record.entries {
        assert!(r.lambdas.iter().all(|&l| l >= 0.0) && r.lambda_ps >= 0.0);
        assert!(r.mask_means.iter().all(|m| (0.0..=1.0).contains(m)));
        assert!(r.ce.is_finite());
    }
    assert!(run.net.is_frozen());
}

#[test]
fn single_domain_runs_without_a_sharing_term() {
    let cfg = tiny_experiment(1, 2);
    assert!(cfg.train.sharing.is_some());
    let data = cfg.generate().unwrap();
    let run = run_experiment(&cfg, &data, "single", |_| {}).unwrap();
    for r in &run.record.entries {
        assert_eq!(r.sharing_loss, 0.0);
        assert_eq!(r.lambda_ps, 0.0);
    }
}

#[test]
fn identical_seeds_give_identical_logs_and_checkpoints() {
    let cfg = tiny_experiment(2, 2);
    let data = cfg.generate().unwrap();
    let a = run_experiment(&cfg, &data, "a", |_| {}).unwrap();
    let b = run_experiment(&cfg, &data, "a", |_| {}).unwrap();
    assert_eq!(a.record.to_jsonl(), b.record.to_jsonl());
    assert_eq!(model_container(&a.net).to_bytes(), model_container(&b.net).to_bytes());
    assert_eq!(a.summary, b.summary);

    let mut other = cfg.clone();
    other.train.seed = 1;
    let c = run_experiment(&other, &data, "a", |_| {}).unwrap();
    assert_ne!(a.record.to_jsonl(), c.record.to_jsonl());
}

#[test]
fn learning_rates_drop_tenfold_at_the_decay_epoch() {
    let cfg = tiny_experiment(2, 4);
    let data = cfg.generate().unwrap();
    let run = run_experiment(&cfg, &data, "decay", |_| {}).unwrap();
    for r in &run.record.entries {
        let (head, mask) =
            if r.epoch < 2 { (cfg.train.head_lr, cfg.train.mask_lr) } else { (cfg.train.head_lr * 0.1, cfg.train.mask_lr * 0.1) };
        assert_eq!(r.head_lr, head, "epoch {}", r.epoch);
        assert_eq!(r.mask_lr, mask, "epoch {}", r.epoch);
    }
}

#[test]
fn training_never_touches_the_backbone() {
    let cfg = tiny_experiment(3, 2);
    let data = cfg.generate().unwrap();
    let fresh = MultiDomainNet::new(cfg.net_config().unwrap()).unwrap();
    let run = run_experiment(&cfg, &data, "frozen", |_| {}).unwrap();
    assert_eq!(run.net.backbone_checksum(), fresh.backbone_checksum());
    assert_eq!(run.net.kernels(), fresh.kernels());
}

fn one_sample(label: usize) -> Dataset {
    Dataset { split: Split::Test, shape: [1, 1, 1], images: vec![0.5], labels: vec![label], indices: vec![0], mirror: false, crop: false }
}

#[test]
fn evaluation_counts_top1_hits() {
    let logits = |_: &Tensor| Ok(Tensor::new(vec![1, 3], vec![0.1, 2.0, -1.0]).unwrap());
    assert_eq!(evaluate_with(&one_sample(1), logits).unwrap(), 1.0);
    assert_eq!(evaluate_with(&one_sample(2), logits).unwrap(), 0.0);
}

#[test]
fn labels_independent_of_images_score_chance() {
    let cfg = tiny_experiment(1, 2);
    let data = cfg.generate().unwrap();
    let run = run_experiment(&cfg, &data, "chance", |_| {}).unwrap();
    let k = cfg.domains[0].classes;
    let n = 900;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(77);
    let per = 3 * 8 * 8;
    let images: Vec<f32> = (0..n * per).map(|_| rng.gen_range(0.0..1.0)).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    let ds = Dataset { split: Split::Test, shape: [3, 8, 8], images, labels, indices: (0..n as u64).collect(), mirror: false, crop: false };
    let acc = mdlprune::evaluate(&run.net, &ds, 0).unwrap();
    let p = 1.0 / k as f64;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    assert!((acc - p).abs() < 4.0 * sigma, "{acc} vs {p} +- {}", 4.0 * sigma);
}

#[test]
fn accuracy_survives_a_checkpoint_round_trip() {
    let cfg = tiny_experiment(2, 2);
    let data = cfg.generate().unwrap();
    let run = run_experiment(&cfg, &data, "reload", |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    mdlprune::save_model(&run.net, &path).unwrap();
    let mdlprune::Checkpoint::Model(back) = mdlprune::load_checkpoint(&path).unwrap() else { panic!("expected a model") };
    let tests = test_sets(&data);
    assert_eq!(test_accuracy(&back, &tests).unwrap(), test_accuracy(&run.net, &tests).unwrap());
    assert_eq!(run.summary.accuracy, test_accuracy(&run.net, &tests).unwrap());
}

#[test]
fn empty_training_set_is_rejected() {
    let cfg = tiny_experiment(2, 1);
    let data = cfg.generate().unwrap();
    let mut sets = training_sets(&data);
    sets[1] = Dataset { images: vec![], labels: vec![], indices: vec![], ..sets[1].clone() };
    let mut net = MultiDomainNet::new(cfg.net_config().unwrap()).unwrap();
    assert!(matches!(train(&mut net, &sets, &cfg.train), Err(Error::EmptyDataset(1))));
}
