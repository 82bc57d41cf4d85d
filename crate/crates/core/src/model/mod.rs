//! The assembled network: a small convolutional backbone with the three
//! fusion blocks attached, each behind its own toggle, plus training and
//! the ablation grid.

mod ablate;
mod config;
mod diagnostics;
mod network;
mod train;

pub use ablate::{ablate_grid, format_table, run_rows, thread_cap, AblationRow, THREADS_ENV};
pub use config::{HeadKind, ModelConfig, Preset, StageSpec, Toggles, DIST_BUCKETS, IMAGE_CHANNELS};
pub use diagnostics::{gradient_suite, micro_config, GradCheckEntry, GRAD_TOLERANCE};
pub use network::{ForwardOut, M2fn, Prediction};
pub use train::{dataset_loss, evaluate_model, predict_dataset, split_indices, train, Dataset, EpochLog, TrainConfig, TrainReport};
