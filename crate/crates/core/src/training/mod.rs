//! Pretraining, fine-tuning, evaluation, the label-efficiency sweep and the
//! gradient checker.

mod checkpoint;
mod config;
mod finetune;
mod gradcheck;
mod metrics;
mod optim;
mod pretrain;
mod sweep;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_MAGIC};
pub use config::{ModelConfig, Optimizer, Phase, TrainConfig};
pub use finetune::{evaluate, finetune_classifier, finetune_classifier_with, Classifier, ClassifierConfig, ClassifierInput, FinetuneInit};
pub use gradcheck::{gradient_check, gradient_check_store, toy_gradcheck_config, GradCheckConfig, GradReport, GroupError};
pub use metrics::{EpochReport, History, MetricRecord};
pub use optim::Adam;
pub use pretrain::{pretrain_cpc, pretrain_cpc_observed};
pub use sweep::{run_sweep, run_sweep_observed, SweepAggregate, SweepConfig, SweepResult, SweepRow, Variant};

/// Mixes integers into one seed (splitmix64 finaliser over the sequence).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}
