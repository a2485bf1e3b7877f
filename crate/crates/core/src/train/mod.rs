//! Two-stage training: continual pre-training of the dense model, then
//! tuning of experts and routers with the non-MoE weights frozen.

pub mod checkpoint;
pub mod config;
pub mod optimizer;
pub mod trainer;

pub use checkpoint::{Checkpoint, Header, ManifestEntry, FORMAT_VERSION};
pub use config::{Stage, TrainConfig};
pub use optimizer::{learning_rate, AdamW, AdamWConfig, Schedule};
pub use trainer::{
    continual_pretrain, corpus_data, instruction_data, moe_tune, write_loss_csv, RngState, StepRecord, TrainData,
    Trainer,
};
