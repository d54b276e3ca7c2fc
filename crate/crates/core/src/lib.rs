//! Sparse probing of neuron activations: neuron scoring, k-sparse logistic
//! probes, optimal sparse probing by cutting planes, evaluation analyses and a
//! superposition lab with planted-feature generators.

pub mod error;
pub mod eval;
pub mod experiment;
pub mod lab;
pub mod osp;
pub mod pipeline;
pub mod probe;
pub mod scoring;
pub(crate) mod serde_float;
pub mod store;

pub use error::{ProbeError, Result};
pub use eval::{evaluate, EvalReport, NeuronWeightStats};
pub use experiment::{run_experiment, summarize, ExperimentConfig, Grouping, RunOptions};
pub use osp::{solve_osp, OspConfig, OspResult, OspStatus};
pub use pipeline::{ExperimentRecord, MethodSettings, ProbeMethod};
pub use probe::{predict, train_logistic, SparseProbe, TrainConfig};
pub use scoring::{Method, SelectionResult};
pub use store::{ActivationDataset, FeatureManifest, ProbeTask, RowMeta, Span};
