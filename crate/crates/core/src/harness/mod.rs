//! Training, unknown-inference pipeline, persistence and experiments.

mod checkpoint;
mod config;
mod experiment;
mod model;
mod pipeline;
mod render;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Record, MAGIC, VERSION};
pub use config::{ScoringConfig, TrainConfig, GAUSSIAN_FEATURE_DIM, GAUSSIAN_LATENT_DIM, IMAGE_LATENT_DIM};
pub use experiment::{run_experiment, run_trial, ExperimentReport, MetricSummary, TrialOutcome, TrialReport};
pub use model::{Model, SampleOutput, INFER_BATCH};
pub use pipeline::{
    fit_score_stats, primary_score, raw_scores, report_for, run_unknown_inference_pipeline, score_dataset,
    PipelineOutput, SampleResult, ScoreAuroc,
};
pub use render::{render_open_space_map, Bounds, OpenSpaceMap};
pub use train::{augment_sample, augment_seed, train, train_model, EpochLog};
