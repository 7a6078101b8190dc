//! Experiment orchestration: splits, synthetic data, configs and the
//! pretrain → fuse → evaluate pipeline.

mod config;
mod experiment;
mod split;
mod synthetic;

pub use config::{
    ConfigError, DataSource, EvalConfig, ExperimentConfig, ModelConfig, ReliabilitySettings,
    SweepConfig, TrainPhases,
};
pub use experiment::{
    derive_seed, evaluate_model, fold_split_spec, fuse_branches, ingest_reviews, prepare_store,
    pretrain_mf_branch, pretrain_mlp_branch, run_experiment, run_fold, run_sweep, train_pipeline,
    write_sweep_csv, ExperimentResult, FoldResult, HarnessError, PipelineModels, SweepRow,
};
pub use split::{split, split_fold, Split, SplitSpec};
pub use synthetic::{
    gen_synthetic, write_reviews_jsonl, GroundTruth, SyntheticData, SyntheticSpec,
};
