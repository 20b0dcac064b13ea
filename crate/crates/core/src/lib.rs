//! Evolutionary feature interaction selection for click-through-rate models.
//!
//! Three stages share one embedding table:
//!
//! 1. [`dna_search`] learns, per feature pair, a softmax fitness over four
//!    interaction operations and keeps the argmax.
//! 2. [`genome_search`] learns sparse relevance for every feature and pair with
//!    RDA, mutating the operation of pairs whose relevance stays small.
//! 3. [`model_functioning`] trains an MLP on the surviving features and pairs,
//!    scaled by their frozen relevance.
//!
//! [`pipeline`] wires the stages together and [`checkpoint`] persists them.

pub mod checkpoint;
pub mod dataset;
pub mod dna_search;
pub mod embedding;
pub mod error;
pub mod genemap;
pub mod genome_search;
pub mod interactions;
pub mod metrics;
pub mod model_functioning;
pub mod optim;
pub mod pairs;
pub mod pipeline;
pub mod util;

pub use dataset::{Dataset, GroundTruth, Instance, SyntheticConfig, ThresholdMode};
pub use dna_search::{DnaConfig, OperationAssignment, ThetaFitness};
pub use embedding::EmbeddingTable;
pub use error::{CellError, Result};
pub use genemap::GeneMapFrame;
pub use genome_search::{GenomeConfig, MutationConfig, MutationEvent};
pub use interactions::{FFParams, OperationKind};
pub use metrics::EvalReport;
pub use model_functioning::{FinalModel, FunctioningConfig};
pub use optim::{AdamConfig, RdaConfig};
pub use pairs::Pair;
pub use pipeline::PipelineConfig;
