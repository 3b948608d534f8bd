//! Training pipeline: repeat sampling, masked pre-training, restoration fine-tuning.

pub mod config;
pub mod data;
pub mod log;
pub mod sampler;
pub mod train;

pub use config::{CorpusConfig, ExperimentConfig, TrainConfig, TrainMode};
pub use data::{holdout_split, prepare_batch, random_crop_pair, TrainItem};
pub use log::{LogRow, LossLog, LOSS_LOG_FILE, PROBE_LOG_FILE};
pub use sampler::{effective_counts, make_repeat_sampler, reference_repeat_factors, parse_factors, RepeatSampler};
pub use train::{
    finetune_run, finetune_step, init_restoration, load_restoration, pretrain_run, pretrain_run_with, pretrain_step,
    FinetuneInit, FinetuneOutcome, PretrainOutcome, FINAL_CHECKPOINT, RESTORATION_CHECKPOINT,
};
