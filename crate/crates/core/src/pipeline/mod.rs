//! Orchestration of the four stages, the stage-3/stage-4 cycle, ablation
//! cases and mixed-source runs.
//!
//! Training stages see only source data and unlabeled target videos. Test
//! labels and hidden target labels reach a run through [`RunData`] and are
//! used for metrics alone.

mod config;
mod metrics;
mod runner;
mod stages;

pub use config::{
    AblationCase, BetaSchedule, CycleMode, KeepRatios, LearningRates, Stage3Strategy, StageConfig, StageEpochs,
    VideoInit,
};
pub use metrics::{
    evaluate, evaluate_frame_majority, evaluate_image_model, EpochRecord, EvalReport, Stage, StageRecord,
};
pub use runner::{
    plain_source, run_ablation, run_ablation_on, run_cycda, run_cycda_on, run_iterations, run_mixed_source,
    run_prefix, CycleState, RunData,
};
pub use stages::{
    align_image_model, image_pseudo_labels, run_self_training, run_stage1, run_stage2, run_stage3, run_stage4,
    train_video_model, AlignOutput, MixedSourceData, StageOutput,
};
