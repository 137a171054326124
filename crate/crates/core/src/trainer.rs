//! Simultaneous multi-domain training in round-robin order.
//!
//! Each epoch visits every domain once, in an order reshuffled per epoch.
//! A batch holds samples of one domain only, but the budget and sharing
//! losses see the switches of all domains, so every domain's switches move at
//! every step. Batch-norm affine parameters and heads use SGD with momentum;
//! switches use Adam.

use std::sync::mpsc;

use log::{debug, warn};
use mdlprune_autograd::optim::{adam_step, sgd_momentum_step, AdamConfig, AdamState, SgdState};
use mdlprune_autograd::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::datagen::{augment, sample_rng, Dataset};
use crate::error::{Error, Result};
use crate::losses::{self, BudgetState, LambdaMode, SharingKind, SharingState};
use crate::model::MultiDomainNet;
use crate::pruner::{current_union, SparsityReport};

/// How per-domain budget losses combine in one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BudgetReduction {
    #[default]
    Sum,
    Mean,
}

/// Which domains' budget terms enter a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BudgetScope {
    /// Every domain, whatever the batch.
    AllDomains,
    /// Only the domain the batch was drawn from.
    #[default]
    BatchDomain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Round-robin epochs; each one covers every domain once.
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate of heads and batch-norm parameters.
    pub head_lr: f64,
    pub mask_lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Epochs at whose start both learning rates are multiplied by `decay_factor`.
    #[serde(default)]
    pub decay_epochs: Vec<usize>,
    #[serde(default = "default_decay")]
    pub decay_factor: f64,
    pub budget: f64,
    /// Ascent step of the budget multipliers.
    #[serde(default = "default_multiplier_lr")]
    pub budget_lr: f64,
    #[serde(default)]
    pub budget_reduction: BudgetReduction,
    #[serde(default)]
    pub budget_scope: BudgetScope,
    /// `None` disables the sharing loss; written `none` in configs.
    #[serde(with = "sharing_choice")]
    pub sharing: Option<SharingKind>,
    #[serde(default = "default_lambda_mode")]
    pub lambda_ps_mode: LambdaMode,
    /// Ascent step of a learned sharing weight.
    #[serde(default = "default_multiplier_lr")]
    pub lambda_ps_lr: f64,
    #[serde(default = "default_true")]
    pub augment: bool,
    /// Batches built ahead of the optimizer.
    #[serde(default = "default_prefetch")]
    pub prefetch: usize,
    #[serde(default)]
    pub seed: u64,
}

mod sharing_choice {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    use crate::losses::{parse_sharing, SharingKind};

    pub fn serialize<S: Serializer>(v: &Option<SharingKind>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(v.map_or("none", SharingKind::name))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<SharingKind>, D::Error> {
        let s = String::deserialize(d)?;
        parse_sharing(&s).map_err(D::Error::custom)
    }
}

fn default_momentum() -> f64 {
    0.9
}
fn default_decay() -> f64 {
    0.1
}
fn default_multiplier_lr() -> f64 {
    0.1
}
fn default_lambda_mode() -> LambdaMode {
    LambdaMode::Learned
}
fn default_true() -> bool {
    true
}
fn default_prefetch() -> usize {
    2
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            head_lr: 0.05,
            mask_lr: 1e-4,
            momentum: default_momentum(),
            decay_epochs: vec![15],
            decay_factor: default_decay(),
            budget: 1.0,
            budget_lr: default_multiplier_lr(),
            budget_reduction: BudgetReduction::Sum,
            budget_scope: BudgetScope::BatchDomain,
            sharing: Some(SharingKind::Union),
            lambda_ps_mode: LambdaMode::Learned,
            lambda_ps_lr: default_multiplier_lr(),
            augment: true,
            prefetch: default_prefetch(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The long schedule: 60 epochs with a tenfold decay at epoch 45.
    pub fn long_schedule() -> Self {
        Self { epochs: 60, decay_epochs: vec![45], ..Self::default() }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        let at = |f: &str| format!("{path}.{f}");
        let positive = |v: f64, f: &str| -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(at(f), format!("must be positive and finite, got {v}")))
            }
        };
        if self.batch_size == 0 {
            return Err(Error::config(at("batch_size"), "must be positive"));
        }
        positive(self.head_lr, "head_lr")?;
        positive(self.mask_lr, "mask_lr")?;
        positive(self.decay_factor, "decay_factor")?;
        positive(self.budget_lr, "budget_lr")?;
        positive(self.lambda_ps_lr, "lambda_ps_lr")?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(at("momentum"), "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.budget) {
            return Err(Error::config(at("budget"), format!("budget must lie in [0, 1], got {}", self.budget)));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(at("decay_epochs"), "must be strictly increasing"));
        }
        if let Some(&e) = self.decay_epochs.iter().find(|&&e| e == 0 || e >= self.epochs.max(1)) {
            return Err(Error::config(at("decay_epochs"), format!("epoch {e} is outside 1..{}", self.epochs)));
        }
        if self.sharing == Some(SharingKind::Intersection) && self.budget == 0.0 {
            return Err(Error::config(at("budget"), "the intersection loss needs a positive budget"));
        }
        if let LambdaMode::Fixed(v) = self.lambda_ps_mode {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(at("lambda_ps_mode"), "fixed weight must be >= 0"));
            }
        }
        Ok(())
    }
}

/// One (epoch, domain) entry of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub domain: usize,
    pub steps: usize,
    /// Accuracy on the (augmented) training batches of this epoch.
    pub train_accuracy: f64,
    pub ce: f64,
    pub budget_loss: f64,
    pub sharing_loss: f64,
    /// Mask means of all domains after this domain's epoch.
    pub mask_means: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub lambda_ps: f64,
    /// Union sparsity after this domain's epoch.
    pub sparsity: f64,
    pub head_lr: f64,
    pub mask_lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunRecord {
    pub entries: Vec<EpochRecord>,
}

impl RunRecord {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.entries.iter().map(|e| serde_json::to_string(e).expect("record serializes") + "\n").collect()
    }
}

struct DomainOpt {
    gamma: Vec<SgdState<f32>>,
    beta: Vec<SgdState<f32>>,
    head_w: SgdState<f32>,
    head_b: SgdState<f32>,
}

/// Optimizer and multiplier state carried across epochs.
pub struct Trainer {
    cfg: TrainConfig,
    pub budgets: Vec<BudgetState>,
    pub sharing: Option<SharingState>,
    head_lr: f64,
    mask_lr: f64,
    sgd: Vec<DomainOpt>,
    adam: Vec<Vec<AdamState<f32>>>,
    order_rng: Xoshiro256PlusPlus,
}

impl Trainer {
    pub fn new(net: &MultiDomainNet, cfg: TrainConfig) -> Result<Self> {
        cfg.validate("train")?;
        let n = net.num_domains();
        let budgets = (0..n).map(|_| BudgetState::new(cfg.budget, cfg.budget_lr)).collect::<Result<_>>()?;
        let sharing = match cfg.sharing {
            Some(_) if n < 2 => {
                warn!("sharing loss needs at least 2 domains; skipping it for this single-domain run");
                None
            }
            Some(kind) => Some(SharingState::new(kind, cfg.lambda_ps_mode, cfg.lambda_ps_lr, net.switch_count())?),
            None => None,
        };
        let sgd = (0..n)
            .map(|d| {
                let p = net.domain(d).expect("domain in range");
                DomainOpt {
                    gamma: p.gamma.iter().map(|_| SgdState::default()).collect(),
                    beta: p.beta.iter().map(|_| SgdState::default()).collect(),
                    head_w: SgdState::default(),
                    head_b: SgdState::default(),
                }
            })
            .collect();
        let adam =
            (0..n).map(|d| net.domain(d).expect("domain in range").switches.iter().map(|_| AdamState::default()).collect()).collect();
        Ok(Self {
            head_lr: cfg.head_lr,
            mask_lr: cfg.mask_lr,
            order_rng: Xoshiro256PlusPlus::seed_from_u64(cfg.seed),
            cfg,
            budgets,
            sharing,
            sgd,
            adam,
        })
    }

    pub fn head_lr(&self) -> f64 {
        self.head_lr
    }

    pub fn mask_lr(&self) -> f64 {
        self.mask_lr
    }

    /// One epoch over every domain in a freshly shuffled order.
    pub fn round_robin_epoch(&mut self, net: &mut MultiDomainNet, data: &[Dataset], epoch: usize) -> Result<Vec<EpochRecord>> {
        if data.len() != net.num_domains() {
            return Err(Error::State(format!("{} datasets for {} domains", data.len(), net.num_domains())));
        }
        if let Some(d) = data.iter().position(Dataset::is_empty) {
            return Err(Error::EmptyDataset(d));
        }
        if self.cfg.decay_epochs.contains(&epoch) {
            self.head_lr *= self.cfg.decay_factor;
            self.mask_lr *= self.cfg.decay_factor;
            debug!("epoch {epoch}: learning rates decayed to {} / {}", self.head_lr, self.mask_lr);
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.order_rng);
        order.into_iter().map(|d| self.domain_epoch(net, &data[d], d, epoch)).collect()
    }

    fn domain_epoch(&mut self, net: &mut MultiDomainNet, data: &Dataset, d: usize, epoch: usize) -> Result<EpochRecord> {
        let stream = (self.cfg.seed ^ 0x5EED_0000_0000).wrapping_add((epoch * 1_000_003 + d) as u64);
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut sample_rng(stream, u64::MAX));
        let batches: Vec<Vec<usize>> = idx.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect();
        let do_augment = self.cfg.augment;
        let (mirror, crop) = (data.mirror, data.crop);

        let mut sums = Sums::default();
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = mpsc::sync_channel::<(Tensor, Vec<usize>)>(self.cfg.prefetch.max(1));
            let batches = &batches;
            scope.spawn(move || {
                for (b, ids) in batches.iter().enumerate() {
                    let (x, y) = data.batch(ids);
                    let x = if do_augment { augment(&x, mirror, crop, sample_rng(stream, b as u64).gen()) } else { x };
                    if tx.send((x, y)).is_err() {
                        return;
                    }
                }
            });
            for (x, y) in rx {
                self.step(net, d, x, &y, &mut sums)?;
            }
            Ok(())
        })?;

        let n = sums.samples.max(1) as f64;
        let steps = batches.len();
        Ok(EpochRecord {
            epoch,
            domain: d,
            steps,
            train_accuracy: sums.correct as f64 / n,
            ce: sums.ce / steps as f64,
            budget_loss: sums.budget / steps as f64,
            sharing_loss: sums.sharing / steps as f64,
            mask_means: (0..net.num_domains()).map(|e| net.mask_mean(e)).collect::<Result<_>>()?,
            lambdas: self.budgets.iter().map(|b| b.lambda).collect(),
            lambda_ps: self.sharing.as_ref().map_or(0.0, |s| s.lambda_ps),
            sparsity: SparsityReport::from_union(&current_union(net)).mean,
            head_lr: self.head_lr,
            mask_lr: self.mask_lr,
        })
    }

    fn step(&mut self, net: &mut MultiDomainNet, d: usize, x: Tensor, y: &[usize], sums: &mut Sums) -> Result<()> {
        let mut tape = Tape::new();
        let sv = net.bind_switches(&mut tape)?;
        let dv = net.bind_domain(&mut tape, d)?;
        let xv = tape.constant(x);
        let logits = net.forward_train(&mut tape, d, xv, &sv.binary[d], &dv)?;
        sums.correct += count_correct(tape.value(logits), tape.shape(logits)[1], y);
        sums.samples += y.len();
        let ce = tape.softmax_cross_entropy(logits, y)?;

        let agg = net.config().aggregation;
        let mut means = Vec::with_capacity(sv.binary.len());
        let mut lb: Option<Var> = None;
        let scoped: Vec<usize> = match self.cfg.budget_scope {
            BudgetScope::AllDomains => (0..sv.binary.len()).collect(),
            BudgetScope::BatchDomain => vec![d],
        };
        for &e in &scoped {
            let mm = losses::mask_mean(&mut tape, &sv.binary[e], agg)?;
            means.push(tape.item(mm) as f64);
            let t = losses::budget_loss(&mut tape, mm, &self.budgets[e]);
            lb = Some(match lb {
                None => t.loss,
                Some(acc) => tape.add(acc, t.loss)?,
            });
        }
        let mut lb = lb.expect("at least one domain");
        if self.cfg.budget_reduction == BudgetReduction::Mean {
            lb = tape.scale(lb, 1.0 / scoped.len() as f32);
        }
        let (lps, sharing_term) = match &self.sharing {
            Some(st) => {
                let flat = sv.binary.iter().map(|l| tape.concat(l)).collect::<std::result::Result<Vec<_>, _>>()?;
                let t = losses::sharing_loss(&mut tape, &flat, st, self.cfg.budget)?;
                (t.loss, Some(t.constraint))
            }
            None => (tape.constant(Tensor::scalar(0.0)), None),
        };
        let total = losses::total_loss(&mut tape, ce, lb, lps)?;
        sums.ce += tape.item(ce) as f64;
        sums.budget += tape.item(lb) as f64;
        sums.sharing += tape.item(lps) as f64;

        let mut grads = tape.backward(total)?;
        let (head_lr, mask_lr) = (self.head_lr as f32, self.mask_lr as f32);
        let momentum = self.cfg.momentum as f32;
        let p = &mut net.domains[d];
        let o = &mut self.sgd[d];
        let pairs = p
            .gamma
            .iter_mut()
            .zip(&dv.gamma)
            .zip(o.gamma.iter_mut())
            .chain(p.beta.iter_mut().zip(&dv.beta).zip(o.beta.iter_mut()))
            .chain([((&mut p.head_w, &dv.head_w), &mut o.head_w), ((&mut p.head_b, &dv.head_b), &mut o.head_b)]);
        for ((param, var), state) in pairs {
            param.grad = grads.take(*var);
            sgd_momentum_step(param, state, head_lr, momentum);
            param.grad = None;
        }
        let adam_cfg = AdamConfig::with_lr(mask_lr);
        for (e, raws) in sv.raw.iter().enumerate() {
            for (l, var) in raws.iter().enumerate() {
                let s = &mut net.domains[e].switches[l];
                s.grad = grads.take(*var);
                adam_step(s, &mut self.adam[e][l], &adam_cfg);
                s.grad = None;
            }
        }

        let sharing = match (self.sharing.as_mut(), sharing_term) {
            (Some(st), Some(t)) => Some((st, t)),
            _ => None,
        };
        match self.cfg.budget_scope {
            BudgetScope::AllDomains => losses::update_multipliers(&mut self.budgets, &means, sharing),
            BudgetScope::BatchDomain => losses::update_multipliers(&mut self.budgets[d..=d], &means, sharing),
        }
        Ok(())
    }
}

#[derive(Default)]
struct Sums {
    correct: usize,
    samples: usize,
    ce: f64,
    budget: f64,
    sharing: f64,
}

fn argmax(row: &[f32]) -> usize {
    row.iter().enumerate().fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0
}

fn count_correct(logits: &[f32], k: usize, labels: &[usize]) -> usize {
    logits.chunks(k).zip(labels).filter(|(row, &y)| argmax(row) == y).count()
}

/// Runs `cfg.epochs` round-robin epochs and freezes the masks.
///
/// `observe` sees each record as it is produced. With zero epochs the network
/// is returned untouched, masks included.
pub fn train_observed(
    net: &mut MultiDomainNet,
    data: &[Dataset],
    cfg: &TrainConfig,
    mut observe: impl FnMut(&EpochRecord),
) -> Result<RunRecord> {
    let mut trainer = Trainer::new(net, cfg.clone())?;
    if let Some(d) = data.iter().position(Dataset::is_empty) {
        return Err(Error::EmptyDataset(d));
    }
    let mut record = RunRecord::default();
    if cfg.epochs == 0 {
        return Ok(record);
    }
    for epoch in 0..cfg.epochs {
        for e in trainer.round_robin_epoch(net, data, epoch)? {
            observe(&e);
            record.entries.push(e);
        }
    }
    net.freeze_masks();
    Ok(record)
}

pub fn train(net: &mut MultiDomainNet, data: &[Dataset], cfg: &TrainConfig) -> Result<RunRecord> {
    train_observed(net, data, cfg, |_| {})
}

/// Top-1 accuracy of domain `d` on `data`, single view.
pub fn evaluate(net: &MultiDomainNet, data: &Dataset, d: usize) -> Result<f64> {
    evaluate_with(data, |x| net.logits(d, x))
}

/// Top-1 accuracy of any logits function over `data` in chunks of 128.
pub fn evaluate_with(data: &Dataset, mut logits: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(128) {
        let (x, y) = data.batch(chunk);
        let out = logits(&x)?;
        correct += count_correct(out.data(), out.shape()[1], &y);
    }
    Ok(correct as f64 / data.len() as f64)
}
