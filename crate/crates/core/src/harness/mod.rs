//! Experiment orchestration: configuration, the train/validate/test
//! loop, checkpoints, ensembling and metrics files.

mod checkpoint;
mod config;
mod eval;
mod metrics;
mod train;

pub use checkpoint::{
    decode_checkpoint, digest_status, encode_checkpoint, load_any_checkpoint, load_checkpoint,
    save_checkpoint, AnyCheckpoint, Checkpoint, DigestStatus, RngState,
};
pub use config::{
    hex, DatasetConfig, ExperimentConfig, KeepCheckpoints, NetworkConfig, Precision, RunConfig,
    Source, SynthOptions, ENV_DATA_ROOT, ENV_OUT_DIR, PRESETS,
};
pub use eval::{
    average_probabilities, evaluate, mean_and_std_error, select_top3, EpochSummary, EvalResult,
};
pub use metrics::{
    read_metrics, truncate_metrics, MetricsRecord, MetricsWriter, RecordKind, COLUMNS,
    METRICS_HEADER,
};
pub use train::{
    build_learner, epoch_checkpoint_path, run_training, seed_dir, test_with_ensemble, Observer,
    RunSummary, SeedSummary, Silent, TaskData, Trainer,
};
