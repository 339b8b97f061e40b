//! SimCLR encoder, NT-Xent pretraining and linear-probe evaluation.

pub mod checkpoint;
pub mod loss;
pub mod model;
pub mod optim;
pub mod probe;
pub mod train;

pub use checkpoint::{Checkpoint, RngState};
pub use loss::{cross_entropy, ntxent};
pub use model::{ConvBlock, Encoder, EncoderConfig, Linear, Mode, Projector, ProjectorConfig, SimClr};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use probe::{linear_probe, probe_features, stratified_split, ProbeConfig, ProbeResult};
pub use train::{make_views, pretrain, stream_rng, streams, EpochLog, PretrainOutput, TrainConfig, ViewSource};
