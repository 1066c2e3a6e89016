//! Experiment plumbing: configuration, checkpoints, run logs, training
//! loops, generation and scoring.

pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod generate;
pub mod lock;
pub mod runlog;
pub mod train;

pub use checkpoint::{store_digest, Checkpoint, CheckpointMeta, RngState};
pub use config::{digest, TrainConfig};
pub use evaluate::{run_evaluate, EvalOptions};
pub use generate::{run_generate, GenerateOutput, StageChain, TextToImage};
pub use lock::OutputLock;
pub use runlog::{RunLog, RunLogHeader, StepRecord};
pub use train::{
    load_captioner, load_classifier, load_refine, load_stage1, load_textenc, open_dataset, run_train_captioner,
    run_train_classifier, run_train_refine, run_train_stage1, run_train_textenc, train_refine, train_stage1,
    StageRun, TrainOptions,
};
