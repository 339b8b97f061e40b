//! Datasets, synthetic generators, evaluation drivers and metric logs.

pub mod corpus;
pub mod knn;
pub mod manifold;
pub mod metrics;

pub use corpus::{ingest, make_toy_corpus, read_packed, write_packed, ImageCorpus, SplitManifest};
pub use knn::{accuracy, knn_classify, knn_eval};
pub use manifold::{make_manifold, ManifoldKind};
pub use metrics::{MetricsLog, MetricsRecord, CSV_HEADER};
