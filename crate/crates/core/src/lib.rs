//! Neural triple store: a relational tensor network trained to emulate a
//! forward-chaining reasoner, with persistence and a conjunctive query engine.

pub mod evalgen;
pub mod ingest;
pub mod okb;
pub mod oracle;
pub mod pipeline;
pub mod report;
pub mod rtn;
pub mod splitfile;
pub mod store;
pub mod tensor;
pub mod training;

/// Any failure surfaced by the library, for callers that do not care which
/// stage produced it.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] okb::OkbError),
    #[error(transparent)]
    Ingest(#[from] ingest::IngestError),
    #[error(transparent)]
    Oracle(#[from] oracle::OracleError),
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Model(#[from] rtn::ModelError),
    #[error(transparent)]
    Store(#[from] store::StoreError),
    #[error(transparent)]
    Train(#[from] training::TrainError),
    #[error(transparent)]
    Score(#[from] evalgen::ScoreError),
    #[error(transparent)]
    Pipeline(#[from] pipeline::PipelineError),
    #[error(transparent)]
    SplitFile(#[from] splitfile::SplitFileError),
}
