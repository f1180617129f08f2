#![allow(dead_code)]

use std::path::Path;

use mifo::experiment::{BaseConfig, EvalConfig, ExperimentConfig, Mode};
use mifo::grpo::GrpoConfig;
use mifo::model::ModelConfig;
use mifo::sft::SftConfig;
use mifo::task::{SeedRange, TaskConfig};

/// A run small enough to finish in a couple of seconds: 16 RL steps and an
/// SFT phase after nearly every one of them.
pub fn tiny(mode: Mode, dir: &Path) -> ExperimentConfig {
    let base = BaseConfig {
        sft_steps: 30,
        batch_size: 4,
        ..BaseConfig::default()
    };
    ExperimentConfig {
        mode,
        model: ModelConfig {
            vocab_size: 32,
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            max_seq_len: 48,
            init_seed: 1,
        },
        task: TaskConfig {
            train_seeds: SeedRange { start: 0, end: 32 },
            ..TaskConfig::default()
        },
        grpo: GrpoConfig {
            rollouts_per_query: 4,
            rollout_batch_size: 4,
            update_batch_size: 2,
            max_new_tokens: 16,
            learning_rate: 1e-3,
            ..GrpoConfig::default()
        },
        sft: SftConfig {
            p: 0.25,
            s: 4,
            training_batch_size: 2,
            ..SftConfig::default()
        },
        base,
        eval: EvalConfig {
            questions: 8,
            k: 2,
            ..EvalConfig::default()
        },
        epochs: 2,
        master_seed: 11,
        output_dir: dir.to_path_buf(),
        ..ExperimentConfig::default()
    }
}
