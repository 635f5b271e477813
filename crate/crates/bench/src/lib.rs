//! Fixtures shared by the benchmarks: a model and a synthetic batch of a
//! given size.

use grn_core::model::{init_params, ModelConfig, ModelParams};
use grn_core::synthetic::random_batch;
use grn_core::{Batch, FusionKind};

pub const LABELS: [&str; 9] = ["O", "B-PER", "I-PER", "E-PER", "S-PER", "B-LOC", "I-LOC", "E-LOC", "S-LOC"];

/// Model at the default dimensions with `fusion`, plus a `batch x seq_len` batch.
pub fn setup(fusion: FusionKind, batch: usize, seq_len: usize) -> (ModelConfig, ModelParams<f32>, Batch) {
    let mut config = ModelConfig::new(5000, 80, LABELS.iter().map(|s| s.to_string()).collect());
    config.fusion = fusion;
    let params = init_params(&config, 0).expect("valid default config");
    let batch = random_batch(&config, batch, seq_len, 1);
    (config, params, batch)
}
