//! Optimization loops, Adam, checkpoints and training configuration.

pub mod checkpoint;
pub mod config;
pub mod loops;
pub mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, Manifest, TensorEntry};
pub use config::{FreezeSpec, Imputation, Objective, TrainConfig, DEFAULT_PROBE_K, DESK_CROP, DESK_PATCH};
pub use loops::{
    corpus_order, curve_csv, finetune, linear_probe, mae_loss, masked_reconstruction, pretrain, pretrain_with,
    smoothed, subset_size, validation_split, write_curve_csv, CurveRow, MaskedRecon, TrainOutcome,
};
pub use optim::{adam_step, cosine_lr, AdamState};
