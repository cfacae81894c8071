#![allow(dead_code)]

use clearflow_cli::dataset::RenderJobConfig;
use clearflow_core::backbone::BackboneConfig;
use clearflow_core::optim::AdamWConfig;
use clearflow_core::trainer::{Target, TrainConfig};

pub fn render_config(train: usize, test: usize, image: usize) -> RenderJobConfig {
    RenderJobConfig {
        train_scenes: train,
        test_scenes: test,
        image_scenes: image,
        ..RenderJobConfig::default()
    }
}

/// A model small enough to train in seconds.
pub fn tiny_train_config(steps: u64, target: Target) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        target,
        checkpoint_every: 0,
        model: BackboneConfig {
            n_blocks: 1,
            model_dim: 16,
            n_heads: 2,
            mlp_ratio: 2,
            time_freqs: 8,
            lora_rank: 4,
            lora_alpha: 4.0,
            ..BackboneConfig::default()
        },
        optimizer: AdamWConfig {
            lr: 1e-3,
            ..AdamWConfig::default()
        },
        ..TrainConfig::default()
    }
}
