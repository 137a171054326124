//! Acceptance run: every criterion once, serially, one line each.
//!
//! Trains five configurations of the three-domain desk suite (about half a
//! minute each on one core) and two tiny runs for determinism.

mod common;

use std::time::Instant;

use common::*;
use mdlprune::checkpoint::model_container;
use mdlprune::experiment::{run_experiment, TrainedRun};
use mdlprune::losses::{sharing_loss, soft_union, LambdaMode, SharingKind, SharingState};
use mdlprune::metrics::{check_fixtures, count_macs, count_param_bits, mean_macs, parse_fixtures, s_e, s_o, MaskView, BUILTIN_FIXTURES};
use mdlprune::model::{LayerSpec, MaskAggregation, NetConfig};
use mdlprune::pruner::{current_union, sparsity};
use mdlprune::{ExperimentConfig, MultiDomainNet};
use mdlprune_autograd::gradcheck::run_suite;
use mdlprune_autograd::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let f32s = run_suite::<f32>(None).map_err(|e| e.to_string())?;
    let f64s = run_suite::<f64>(None).map_err(|e| e.to_string())?;
    let worst = |rs: &[mdlprune_autograd::gradcheck::GradCheck]| rs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let (w32, w64) = (worst(&f32s), worst(&f64s));
    let secs = start.elapsed().as_secs_f64();
    let all = f32s.iter().chain(&f64s).all(|r| r.passed());
    check(
        all && w32 < 1e-2 && w64 < 1e-5 && secs < 60.0,
        format!("{} ops, worst f32 {w32:.2e}, worst f64 {w64:.2e}, {secs:.1}s", f32s.len()),
    )
}

fn straight_through() -> Outcome {
    let cfg = NetConfig {
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
    };
    let mut compared = 0;
    for seed in 0..8u64 {
        let mut net = MultiDomainNet::new(cfg.clone()).map_err(|e| e.to_string())?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        for d in 0..2 {
            for s in &mut net.domain_mut(d).unwrap().switches {
                s.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            }
        }
        let x = random_inputs(&cfg, 4, seed);
        for d in 0..2 {
            let labels: Vec<usize> = (0..4).map(|i| i % cfg.classes[d]).collect();
            let mut a = net.clone();
            let mut tape = Tape::new();
            let sw = a.bind_switches(&mut tape).unwrap();
            let vars = a.bind_domain(&mut tape, d).unwrap();
            let xv = tape.constant(x.clone());
            let out = a.forward_train(&mut tape, d, xv, &sw.binary[d], &vars).unwrap();
            let loss = tape.softmax_cross_entropy(out, &labels).unwrap();
            let ste = tape.backward(loss).unwrap();

            let mut b = net.clone();
            let mut tape = Tape::new();
            let gates: Vec<_> = b.masks(d).unwrap().iter().map(|m| tape.leaf(&Tensor::from_vec(m.as_f32()).with_grad())).collect();
            let vars = b.bind_domain(&mut tape, d).unwrap();
            let xv = tape.constant(x.clone());
            let out = b.forward_train(&mut tape, d, xv, &gates, &vars).unwrap();
            let loss = tape.softmax_cross_entropy(out, &labels).unwrap();
            let plain = tape.backward(loss).unwrap();
            for (slot, g) in gates.iter().enumerate() {
                if ste.get(sw.raw[d][slot]) != plain.get(*g) {
                    return Err(format!("seed {seed} domain {d} slot {slot}: switch gradient differs"));
                }
                compared += 1;
            }
        }
    }
    Ok(format!("{compared} switch tensors equal their gate gradients exactly"))
}

fn mask_algebra() -> Outcome {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_vec(vec![0.0, 0.0, 1.0, 1.0]));
    let b = tape.constant(Tensor::from_vec(vec![0.0, 1.0, 0.0, 1.0]));
    let u = soft_union(&mut tape, a, b).map_err(|e| e.to_string())?;
    if tape.value(u) != [0.0, 1.0, 1.0, 1.0] {
        return Err(format!("soft union {:?}", tape.value(u)));
    }
    let cases: [(SharingKind, &[&str], f64, f64, f32); 8] = [
        (SharingKind::Intersection, &["1100", "1010", "1001"], 0.5, 1.0, 0.5),
        (SharingKind::Intersection, &["1111", "1111"], 1.0, 1.0, 0.0),
        (SharingKind::Intersection, &["1000", "0100"], 0.5, 1.0, 1.0),
        (SharingKind::Union, &["1100", "0011"], 0.5, 1.0, 0.5),
        (SharingKind::Union, &["1100", "1100"], 0.5, 1.0, 0.0),
        (SharingKind::Jaccard, &["1110", "0111"], 0.5, 1.0, 0.5),
        (SharingKind::Jaccard, &["1110", "0001"], 0.5, 0.7, 0.7),
        (SharingKind::Jaccard, &["0000", "0000"], 0.5, 1.0, 0.0),
    ];
    for (kind, masks, beta, lambda, want) in cases {
        let mut tape = Tape::new();
        let vars: Vec<_> =
            masks.iter().map(|m| tape.constant(Tensor::from_vec(m.chars().map(|c| if c == '1' { 1.0 } else { 0.0 }).collect()))).collect();
        let state = SharingState::new(kind, LambdaMode::Fixed(lambda), 0.1, 4).map_err(|e| e.to_string())?;
        let t = sharing_loss(&mut tape, &vars, &state, beta).map_err(|e| e.to_string())?;
        if tape.item(t.loss) != want {
            return Err(format!("{kind:?} {masks:?}: {} != {want}", tape.item(t.loss)));
        }
    }
    Ok(format!("OR on all 4 binary pairs, {} sharing fixtures exact", cases.len()))
}

fn fixtures() -> Outcome {
    let start = Instant::now();
    let tables = parse_fixtures(BUILTIN_FIXTURES, "efficiency_scores.dat").map_err(|e| e.to_string())?;
    let checks = check_fixtures(&tables).map_err(|e| e.to_string())?;
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed()).map(|c| format!("{}/{}", c.table, c.method)).collect();
    let examples = s_o(2538.0, 0.325).unwrap().round() == 7809.0
        && (s_e(10085.0, 5215.0, 544.0, 544.0).unwrap() - 177.72).abs() <= 0.01
        && (s_e(2500.0, 250.0, 544.0, 544.0).unwrap() - 2.11).abs() <= 0.01;
    let secs = start.elapsed().as_secs_f64();
    check(
        failed.is_empty() && examples && secs < 1.0,
        format!(
            "{} rows checked, mismatches {failed:?}, worked examples {}, {secs:.3}s",
            checks.len(),
            if examples { "ok" } else { "off" }
        ),
    )
}

fn desk(budget: f64, sharing: Option<SharingKind>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk_suite();
    cfg.train.budget = budget;
    cfg.train.sharing = sharing;
    cfg
}

struct Trained {
    label: String,
    budget: f64,
    run: TrainedRun,
    secs: f64,
}

fn train_desk(budget: f64, sharing: Option<SharingKind>, data: &[mdlprune::datagen::DomainData]) -> Trained {
    let label = format!("beta={budget} {}", sharing.map_or("none", SharingKind::name));
    let start = Instant::now();
    let run = run_experiment(&desk(budget, sharing), data, &label, |_| {}).expect("training run");
    let secs = start.elapsed().as_secs_f64();
    println!(
        "  trained {label}: means {:?}, accuracy {:?}, sparsity {:.3}, {secs:.1}s",
        (0..3).map(|d| round3(run.net.mask_mean(d).unwrap())).collect::<Vec<_>>(),
        run.summary.accuracy.iter().map(|&a| round3(a)).collect::<Vec<_>>(),
        run.summary.sparsity,
    );
    Trained { label, budget, run, secs }
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

fn budgets(runs: &[Trained]) -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for t in runs.iter().filter(|t| t.budget < 1.0) {
        let worst = (0..3).map(|d| t.run.net.mask_mean(d).unwrap()).fold(0.0, f64::max);
        ok &= worst <= t.budget + 0.02 && t.secs < 600.0;
        lines.push(format!("{}: max mean {worst:.3}", t.label));
    }
    check(ok, lines.join("; "))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sharing_efficacy(shared: &Trained, alone: &Trained) -> Outcome {
    let (s, n) = (shared.run.summary.sparsity, alone.run.summary.sparsity);
    let drop = mean(&alone.run.summary.accuracy) - mean(&shared.run.summary.accuracy);
    check(
        s >= 0.30 && s > n && drop <= 0.10 && shared.secs + alone.secs < 900.0,
        format!("union sparsity {s:.3} vs {n:.3} without sharing, accuracy drop {:.1} points", 100.0 * drop),
    )
}

fn equivalence(runs: &[&TrainedRun]) -> Outcome {
    for (i, run) in runs.iter().enumerate() {
        let (net, pm) = (&run.net, &run.pruned);
        let x = random_inputs(net.config(), 100, 1000 + i as u64);
        let mut worst = 0.0f32;
        for d in 0..net.num_domains() {
            let a = net.logits(d, &x).map_err(|e| e.to_string())?;
            let b = pm.forward(d, &x).map_err(|e| e.to_string())?;
            worst = a.data().iter().zip(b.data()).map(|(u, v)| (u - v).abs()).fold(worst, f32::max);
            if argmax_rows(&a) != argmax_rows(&b) {
                return Err(format!("{}: argmax differs on domain {d}", run.summary.label));
            }
        }
        if worst >= 1e-5 {
            return Err(format!("{}: logits differ by {worst:e}", run.summary.label));
        }
        let union = current_union(net);
        let dropped: usize = net.masked_convs().map(|c| (c.c_in - union[c.slot.unwrap()].active()) * c.k * c.k * c.c_out).sum();
        let before: usize = net.kernels().iter().map(|k| k.numel()).sum();
        if before - pm.kernel_weights() != dropped || count_param_bits(net, false) - count_param_bits(pm, false) != 32 * dropped as u64 {
            return Err(format!("{}: parameter delta does not match the accounting", run.summary.label));
        }
    }
    Ok(format!("{} configurations, 100 inputs each, all domains", runs.len()))
}

fn monotone(sweep: &[&Trained]) -> Outcome {
    let macs: Vec<f64> = sweep.iter().map(|t| mean_macs(&t.run.pruned, MaskView::Union).unwrap()).collect();
    let bits: Vec<u64> = sweep.iter().map(|t| count_param_bits(&t.run.pruned, true)).collect();
    for t in sweep {
        let net_macs = mean_macs(&t.run.net, MaskView::Union).unwrap();
        let pm_macs = mean_macs(&t.run.pruned, MaskView::Union).unwrap();
        if net_macs != pm_macs || count_macs(&t.run.pruned, 0, MaskView::Union).is_err() {
            return Err(format!("{}: union MACs disagree between masked and pruned models", t.label));
        }
    }
    let ok = macs.windows(2).all(|w| w[1] <= w[0]) && bits.windows(2).all(|w| w[1] <= w[0]);
    let betas: Vec<f64> = sweep.iter().map(|t| t.budget).collect();
    check(ok, format!("beta {betas:?}: union MACs {macs:?}, param bits {bits:?}"))
}

fn determinism() -> Outcome {
    let cfg = tiny_experiment(3, 3);
    let data = cfg.generate().map_err(|e| e.to_string())?;
    let a = run_experiment(&cfg, &data, "a", |_| {}).map_err(|e| e.to_string())?;
    let b = run_experiment(&cfg, &data, "a", |_| {}).map_err(|e| e.to_string())?;
    let (ca, cb) = (model_container(&a.net).to_bytes(), model_container(&b.net).to_bytes());
    let (la, lb) = (a.record.to_jsonl(), b.record.to_jsonl());
    let pruned =
        mdlprune::checkpoint::pruned_container(&a.pruned).to_bytes() == mdlprune::checkpoint::pruned_container(&b.pruned).to_bytes();
    check(ca == cb && la == lb && pruned, format!("{} checkpoint bytes, {} log lines", ca.len(), la.lines().count()))
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("gradient correctness", gradients()),
        ("straight-through contract", straight_through()),
        ("mask-algebra oracles", mask_algebra()),
        ("metric reproduction", fixtures()),
    ];

    let data = ExperimentConfig::desk_suite().generate().expect("desk data");
    let sweep: Vec<Trained> = [1.0, 0.75, 0.5, 0.25].iter().map(|&b| train_desk(b, Some(SharingKind::Union), &data)).collect();
    let alone = train_desk(0.25, None, &data);

    results.push(("budget satisfaction", budgets(&sweep)));
    results.push(("sharing efficacy", sharing_efficacy(&sweep[3], &alone)));
    let mut all: Vec<&TrainedRun> = sweep.iter().map(|t| &t.run).collect();
    all.push(&alone.run);
    results.push(("pruned equivalence", equivalence(&all)));
    results.push(("cost monotonicity", monotone(&sweep.iter().collect::<Vec<_>>())));
    results.push(("determinism", determinism()));
    // Union sparsity is only meaningful on frozen masks; make sure every run ended frozen.
    assert!(all.iter().all(|r| sparsity(&r.net).is_ok()));

    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
