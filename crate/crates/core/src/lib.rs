//! Budget-aware multi-domain channel pruning.
//!
//! A frozen convolutional backbone is shared by several domains. Each domain
//! learns binary input-channel switches, its own batch norm and a linear head;
//! a budget loss caps each domain's active switches and a sharing loss pulls
//! the domains toward a common subset, so the channels nobody uses can be
//! removed from the deployed model.

pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pruner;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_model, save_pruned, Checkpoint};
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use experiment::{run_experiment, TrainedRun};
pub use metrics::{count_macs, count_param_bits, CostReport, MaskView, ScoreInputs};
pub use model::{ChannelMask, LayerSpec, MaskAggregation, MaskState, MultiDomainNet, NetConfig};
pub use pruner::{prune, PrunedModel, SparsityReport};
pub use trainer::{evaluate, train, RunRecord, TrainConfig};
