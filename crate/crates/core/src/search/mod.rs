//! Policy search on a frozen encoder, baselines and the three-step pipeline.

pub mod objective;
pub mod pipeline;
pub mod run;

pub use objective::{
    rotate_batch, train_rotation_head, DdaObjective, ObjectiveKind, ObjectiveValue, RotationConfig, RotationHead,
    SearchObjective, SelfAugmentObjective,
};
pub use pipeline::{
    evaluate_arm, pretrain_stage, representation_lid, retrain_stage, run_pipeline, ArmResult, Baseline, DataConfig,
    PipelineArtifacts, PipelineConfig, PipelineReport,
};
pub use run::{dda_search, random_policy, search_with, selfaugment_search, SearchConfig, SearchEpochLog, SearchOutput};
