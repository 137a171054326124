//! One experiment end to end: train on every domain, evaluate on the test
//! splits and summarize the costs of the pruned model.

use crate::config::ExperimentConfig;
use crate::datagen::{Dataset, DomainData, Split};
use crate::error::Result;
use crate::metrics::{backbone_param_bits, count_param_bits, dense_macs, mean_macs, Costed, MaskView, RunSummary};
use crate::model::MultiDomainNet;
use crate::pruner::{prune, sparsity, PrunedModel};
use crate::trainer::{evaluate, train_observed, EpochRecord, RunRecord};

/// Train and val merged, one set per domain.
pub fn training_sets(data: &[DomainData]) -> Vec<Dataset> {
    data.iter().map(|d| d.train.merged(&d.val, Split::TrainVal)).collect()
}

pub fn test_sets(data: &[DomainData]) -> Vec<Dataset> {
    data.iter().map(|d| d.test.clone()).collect()
}

/// Top-1 test accuracy of every domain.
pub fn test_accuracy(net: &MultiDomainNet, tests: &[Dataset]) -> Result<Vec<f64>> {
    tests.iter().enumerate().map(|(d, t)| evaluate(net, t, d)).collect()
}

/// Costs of `m` under the union view, with switches counted.
pub fn summarize<M: Costed + ?Sized>(label: &str, m: &M, accuracy: Vec<f64>, union_sparsity: f64) -> Result<RunSummary> {
    let config = m.net_config();
    let macs = mean_macs(m, MaskView::Union)?;
    let dense: f64 = (0..config.domains()).map(|d| dense_macs(config, d).map(|v| v as f64)).sum::<Result<f64>>()? / config.domains() as f64;
    let param_bits = count_param_bits(m, true);
    Ok(RunSummary {
        label: label.to_string(),
        accuracy,
        macs,
        param_bits,
        relative_flop: macs / dense,
        relative_params: param_bits as f64 / backbone_param_bits(config)? as f64,
        sparsity: union_sparsity,
    })
}

pub struct TrainedRun {
    pub net: MultiDomainNet,
    pub record: RunRecord,
    pub pruned: PrunedModel,
    /// Costs and accuracy of the pruned model.
    pub summary: RunSummary,
}

/// Builds the net from `cfg`, trains it on `data` and prunes it.
pub fn run_experiment(cfg: &ExperimentConfig, data: &[DomainData], label: &str, observe: impl FnMut(&EpochRecord)) -> Result<TrainedRun> {
    cfg.validate()?;
    let mut net = MultiDomainNet::new(cfg.net_config()?)?;
    let record = train_observed(&mut net, &training_sets(data), &cfg.train, observe)?;
    if !net.is_frozen() {
        // Zero epochs: the fresh switches are all on.
        net.freeze_masks();
    }
    let accuracy = test_accuracy(&net, &test_sets(data))?;
    let pruned = prune(&net)?;
    let summary = summarize(label, &pruned, accuracy, sparsity(&net)?.mean)?;
    Ok(TrainedRun { net, record, pruned, summary })
}
