//! JSON bodies exchanged with the triple-store server.
//!
//! Text formats (`.nt`, `.rules`, split files) travel verbatim as strings.
//! Binary weights and embeddings travel base64-encoded (standard alphabet,
//! padded).

use serde::{Deserialize, Serialize};
use uuid::Uuid;

pub const HEALTH: &str = "/v1/health";
pub const GENERATE: &str = "/v1/generate";
pub const REASON: &str = "/v1/reason";
pub const SPLIT: &str = "/v1/split";
pub const TRAIN: &str = "/v1/train";
pub const MATERIALIZE: &str = "/v1/materialize";
pub const EVAL: &str = "/v1/eval";
pub const STORES: &str = "/v1/stores";

pub fn store_path(id: Uuid) -> String {
    format!("{STORES}/{id}")
}

pub fn store_query_path(id: Uuid) -> String {
    format!("{STORES}/{id}/query")
}

/// Whether a failure was the caller's fault.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    /// Bad input: malformed files, unknown names, invalid options.
    User,
    /// A bug or resource failure on the server side.
    Internal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub kind: ErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

/// A knowledge base as uploaded: facts plus optional rules.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KbSource {
    pub facts: String,
    #[serde(default)]
    pub rules: Option<String>,
    /// Minimum share of individuals a predicate must cover. Defaults to 0.05.
    #[serde(default)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateRequest {
    /// `family` or `university`.
    pub template: String,
    pub individuals: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub facts: String,
    pub rules: String,
}

/// Wall times of the two stages the store reports separately.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    /// Parsing and graph construction.
    pub import_seconds: f64,
    /// Embedding passes; zero when no materialization ran.
    pub materialization_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonRequest {
    #[serde(flatten)]
    pub kb: KbSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonResponse {
    /// Positive facts of the closure as N-Triples.
    pub closure: String,
    pub input_facts: usize,
    pub closure_facts: usize,
    pub derivations: usize,
    /// Parser diagnostics and dropped rules, one per line.
    pub diagnostics: Vec<String>,
    pub timings: Timings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRequest {
    #[serde(flatten)]
    pub kb: KbSource,
    pub test: usize,
    pub validation: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitResponse {
    pub split: String,
    pub test_queries: usize,
    pub validation_queries: usize,
}

/// Overrides on the default model and training configuration. Unset fields
/// keep their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub balanced_fraction: Option<f64>,
    pub negative_ratio: Option<f64>,
    pub phase1_batches: Option<usize>,
    pub validation_rounds: Option<usize>,
    pub negatives_as_false: Option<bool>,
    pub dim: Option<usize>,
    pub slices: Option<usize>,
    pub horizon: Option<usize>,
    pub init_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRequest {
    #[serde(flatten)]
    pub kb: KbSource,
    /// A split file. Without one, `validation` individuals are held out for
    /// epoch selection and nothing is reserved for testing.
    #[serde(default)]
    pub split: Option<String>,
    #[serde(default)]
    pub validation: Option<usize>,
    pub seed: u64,
    #[serde(default)]
    pub options: TrainOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResponse {
    /// Base64 of the `.rtnw` file.
    pub weights: String,
    pub report_table: String,
    pub report_csv: String,
    pub best_epoch: Option<usize>,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterializeRequest {
    #[serde(flatten)]
    pub kb: KbSource,
    /// Base64 of the `.rtnw` file.
    pub weights: String,
    pub rounds: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterializeResponse {
    /// Base64 of the `.rtne` file.
    pub embeddings: String,
    pub individuals: usize,
    pub timings: Timings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Predictions of the trained network.
    #[default]
    Learned,
    /// Exact lookups in the reasoner's closure.
    Oracle,
}

/// How a store answers: which backend, and for the learned one where the
/// embeddings come from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    #[serde(default)]
    pub backend: BackendKind,
    /// Base64 `.rtnw`; required for the learned backend.
    #[serde(default)]
    pub weights: Option<String>,
    /// Base64 `.rtne`; materialized on the fly when absent.
    #[serde(default)]
    pub embeddings: Option<String>,
    #[serde(default)]
    pub rounds: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Candidate radius in hops for relation answers; `None` keeps the
    /// default, a negative value means every pair.
    #[serde(default)]
    pub radius: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    #[serde(flatten)]
    pub kb: KbSource,
    pub split: String,
    #[serde(flatten)]
    pub backend: BackendSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResponse {
    pub table: String,
    pub csv: String,
    pub class_accuracy: f64,
    pub class_f1: f64,
    pub relation_accuracy: f64,
    pub relation_f1: f64,
    pub timings: Timings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenStoreRequest {
    #[serde(flatten)]
    pub kb: KbSource,
    #[serde(flatten)]
    pub backend: BackendSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenStoreResponse {
    pub id: Uuid,
    pub individuals: usize,
    pub classes: Vec<String>,
    pub relations: Vec<String>,
    pub timings: Timings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Table,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub query: String,
    #[serde(default)]
    pub format: OutputFormat,
    /// Evaluate atoms on separate threads.
    #[serde(default)]
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryResponse {
    /// Rendered result, ready to print.
    pub output: String,
    pub rows: usize,
    /// Warnings such as disconnected atoms producing a cross product.
    pub warnings: Vec<String>,
}
