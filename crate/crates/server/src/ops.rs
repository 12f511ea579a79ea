//! Request handlers as plain synchronous functions. The HTTP layer only moves
//! them onto the blocking pool and maps errors to status codes.

use std::time::Instant;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use thiserror::Error;

use nets_api::{
    BackendKind, BackendSpec, ErrorKind, EvalRequest, EvalResponse, GenerateRequest, GenerateResponse, KbSource,
    MaterializeRequest, MaterializeResponse, OutputFormat, QueryRequest, QueryResponse, ReasonRequest, ReasonResponse,
    SplitRequest, SplitResponse, Timings, TrainOptions, TrainRequest, TrainResponse,
};
use nets_core::evalgen::{generate as generate_kb, GenConfig, Template};
use nets_core::ingest::{graph_to_doc, parse_ntriples_str, parse_rules_str, serialize_ntriples, serialize_rules};
use nets_core::oracle::{holdout_split, Closure, OracleError};
use nets_core::pipeline::{restrict, KnowledgeBase, DEFAULT_FREQUENCY_THRESHOLD};
use nets_core::report::eval_report;
use nets_core::rtn::{ModelError, RtnConfig, RtnParameters};
use nets_core::splitfile::{format_split, parse_split};
use nets_core::store::{
    check_embeddings, decode_embeddings, decode_weights, encode_embeddings, encode_weights, eval_conjunctive_with,
    format_csv, format_table, materialize, parse_query, CandidateRadius, LearnedBackend, Store,
    StoreError,
};
use nets_core::training::{train, TrainConfig, TrainError};
use nets_core::Error as CoreError;

/// Default materialization passes when a request does not say.
pub const DEFAULT_ROUNDS: usize = 2;

/// Validation individuals held out by `train` when no split is given: one in
/// twenty, at most this many.
pub const MAX_DEFAULT_VALIDATION: usize = 100;

#[derive(Debug, Error)]
pub enum OpError {
    #[error("{0}")]
    User(String),
    #[error("{0}")]
    Internal(String),
    #[error("no open store with id {0}")]
    NoSuchStore(uuid::Uuid),
}

impl OpError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            OpError::User(_) | OpError::NoSuchStore(_) => ErrorKind::User,
            OpError::Internal(_) => ErrorKind::Internal,
        }
    }
}

fn is_internal(e: &CoreError) -> bool {
    match e {
        CoreError::Tensor(_) => true,
        CoreError::Model(m) => !matches!(m, ModelError::SchemaMismatch { .. } | ModelError::Config(_)),
        CoreError::Train(t) => matches!(t, TrainError::NonFinite { .. } | TrainError::Shape(_) | TrainError::Model(_)),
        CoreError::Store(StoreError::Io { .. }) => true,
        _ => false,
    }
}

impl From<CoreError> for OpError {
    fn from(e: CoreError) -> Self {
        if is_internal(&e) {
            OpError::Internal(e.to_string())
        } else {
            OpError::User(e.to_string())
        }
    }
}

macro_rules! via_core {
    ($($t:ty),*) => {$(
        impl From<$t> for OpError {
            fn from(e: $t) -> Self {
                OpError::from(CoreError::from(e))
            }
        }
    )*};
}

via_core!(
    nets_core::ingest::IngestError,
    OracleError,
    ModelError,
    StoreError,
    TrainError,
    nets_core::evalgen::ScoreError,
    nets_core::pipeline::PipelineError,
    nets_core::splitfile::SplitFileError
);

fn user(msg: impl Into<String>) -> OpError {
    OpError::User(msg.into())
}

fn decode_b64(field: &str, data: &str) -> Result<Vec<u8>, OpError> {
    STANDARD.decode(data.trim()).map_err(|e| user(format!("{field} is not valid base64: {e}")))
}

/// A parsed, closed and schema-restricted knowledge base.
pub struct LoadedKb {
    pub kb: KnowledgeBase,
    pub closed: Closure,
    pub diagnostics: Vec<String>,
    pub import_seconds: f64,
}

fn parse_and_build(src: &KbSource) -> Result<(KnowledgeBase, Vec<String>, f64), OpError> {
    let start = Instant::now();
    let doc = parse_ntriples_str(&src.facts);
    let rules = src.rules.as_deref().map(parse_rules_str).unwrap_or_default();
    let kb = KnowledgeBase::load(&doc, &rules)?;
    let import_seconds = start.elapsed().as_secs_f64();

    let mut diagnostics: Vec<String> = doc.diagnostics.iter().map(|d| format!("facts {d}")).collect();
    diagnostics.extend(rules.diagnostics.iter().map(|d| format!("rules {d}")));
    diagnostics.extend(kb.unlinked_rules.iter().map(|r| format!("rule `{r}` names a predicate absent from the facts; ignored")));
    if kb.skipped_triples > 0 {
        diagnostics.push(format!("{} triples skipped", kb.skipped_triples));
    }
    Ok((kb, diagnostics, import_seconds))
}

fn checked_threshold(threshold: f64) -> Result<f64, OpError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(user(format!("threshold {threshold} outside [0, 1]")));
    }
    Ok(threshold)
}

pub fn load_kb(src: &KbSource) -> Result<LoadedKb, OpError> {
    let threshold = checked_threshold(src.threshold.unwrap_or(DEFAULT_FREQUENCY_THRESHOLD))?;
    let (kb, diagnostics, import_seconds) = parse_and_build(src)?;
    let closed = restrict(&kb.close()?, threshold);
    Ok(LoadedKb { kb, closed, diagnostics, import_seconds })
}

fn schema_matches(loaded: &LoadedKb, params: &RtnParameters) -> Result<(), OpError> {
    params.check_schema(loaded.closed.graph.schema()).map_err(|e| {
        user(format!(
            "{e}; pass the facts, rules and threshold the weights were trained with"
        ))
    })
}

pub fn generate(req: &GenerateRequest) -> Result<GenerateResponse, OpError> {
    let template: Template = req.template.parse().map_err(|e: String| user(e))?;
    let config = match template {
        Template::Family => GenConfig::family(req.individuals, req.seed),
        Template::University => GenConfig::university(req.individuals, req.seed),
    };
    let (doc, rules) = generate_kb(&config);
    Ok(GenerateResponse { facts: serialize_ntriples(&doc), rules: serialize_rules(&rules) })
}

/// Full closure; restricted to frequent predicates only when a threshold is given.
pub fn reason(req: &ReasonRequest) -> Result<ReasonResponse, OpError> {
    let threshold = req.kb.threshold.map(checked_threshold).transpose()?;
    let (kb, diagnostics, import_seconds) = parse_and_build(&req.kb)?;
    let mut closed = kb.close()?;
    if let Some(t) = threshold {
        closed = restrict(&closed, t);
    }
    Ok(ReasonResponse {
        closure: serialize_ntriples(&graph_to_doc(&closed.graph)),
        input_facts: kb.graph.n_facts(),
        closure_facts: closed.graph.n_facts(),
        derivations: closed.derivation_count,
        diagnostics,
        timings: Timings { import_seconds, materialization_seconds: 0.0 },
    })
}

pub fn split(req: &SplitRequest) -> Result<SplitResponse, OpError> {
    let loaded = load_kb(&req.kb)?;
    let split = holdout_split(&loaded.closed, req.test, req.validation, req.seed)?;
    Ok(SplitResponse {
        split: format_split(&split),
        test_queries: split.test.len(),
        validation_queries: split.validation.len(),
    })
}

/// Applies overrides to the defaults derived from the schema.
pub fn configs(schema: &nets_core::okb::OkbSchema, seed: u64, o: &TrainOptions) -> (RtnConfig, TrainConfig) {
    let mut rtn = RtnConfig { seed, ..RtnConfig::for_schema(schema) };
    if let Some(v) = o.dim {
        rtn.d = v;
    }
    if let Some(v) = o.slices {
        rtn.k_slices = v;
    }
    if let Some(v) = o.horizon {
        rtn.truncation_horizon = v;
    }
    if let Some(v) = o.init_scale {
        rtn.init_scale = v;
    }
    let d = TrainConfig::default();
    let train = TrainConfig {
        phase1_batches: o.phase1_batches.or(d.phase1_batches),
        batch_size: o.batch_size.unwrap_or(d.batch_size),
        balanced_fraction: o.balanced_fraction.unwrap_or(d.balanced_fraction),
        learning_rate: o.learning_rate.unwrap_or(d.learning_rate),
        epochs: o.epochs.unwrap_or(d.epochs),
        negative_ratio: o.negative_ratio.unwrap_or(d.negative_ratio),
        seed,
        validation_rounds: o.validation_rounds.unwrap_or(d.validation_rounds),
        negatives_as_false: o.negatives_as_false.unwrap_or(d.negatives_as_false),
        near_pairs: d.near_pairs,
    };
    (rtn, train)
}

pub fn default_validation(n_individuals: usize) -> usize {
    (n_individuals / 20).min(MAX_DEFAULT_VALIDATION)
}

pub fn train_model(req: &TrainRequest) -> Result<TrainResponse, OpError> {
    let loaded = load_kb(&req.kb)?;
    let closed = &loaded.closed;
    let split = match &req.split {
        Some(text) => parse_split(text, closed)?,
        None => {
            let n_valid = req.validation.unwrap_or_else(|| default_validation(closed.graph.n_individuals()));
            holdout_split(closed, 0, n_valid, req.seed)?
        }
    };
    let (rtn, config) = configs(closed.graph.schema(), req.seed, &req.options);
    let outcome = train(&split, rtn, &config)?;
    let mut diagnostics = loaded.diagnostics;
    diagnostics.extend(outcome.report.diagnostics.iter().cloned());
    Ok(TrainResponse {
        weights: STANDARD.encode(encode_weights(&outcome.params)),
        report_table: outcome.report.to_table(),
        report_csv: outcome.report.to_csv(),
        best_epoch: outcome.report.best_epoch,
        diagnostics,
    })
}

pub fn materialize_kb(req: &MaterializeRequest) -> Result<MaterializeResponse, OpError> {
    let loaded = load_kb(&req.kb)?;
    let params = decode_weights(&decode_b64("weights", &req.weights)?)?;
    schema_matches(&loaded, &params)?;
    let graph = &loaded.closed.base;
    let start = Instant::now();
    let table = materialize(graph, &params, req.rounds, req.seed)?;
    let materialization_seconds = start.elapsed().as_secs_f64();
    Ok(MaterializeResponse {
        embeddings: STANDARD.encode(encode_embeddings(&table, &params.schema_digest)),
        individuals: graph.n_individuals(),
        timings: Timings { import_seconds: loaded.import_seconds, materialization_seconds },
    })
}

fn radius_of(spec: &BackendSpec) -> CandidateRadius {
    match spec.radius {
        None => CandidateRadius::default(),
        Some(r) if r < 0 => CandidateRadius::All,
        Some(r) => CandidateRadius::Hops(r as usize),
    }
}

/// Builds the query store a backend spec describes. Returns it with the
/// materialization time (zero when embeddings were supplied or unused).
pub fn build_store(loaded: &LoadedKb, spec: &BackendSpec) -> Result<(Store, f64), OpError> {
    match spec.backend {
        BackendKind::Oracle => Ok((Store::oracle(loaded.closed.graph.clone()), 0.0)),
        BackendKind::Learned => {
            let weights = spec.weights.as_deref().ok_or_else(|| user("the learned backend needs weights"))?;
            let params = decode_weights(&decode_b64("weights", weights)?)?;
            schema_matches(loaded, &params)?;
            let graph = loaded.closed.base.clone();
            let (table, seconds) = match &spec.embeddings {
                Some(e) => {
                    let (table, digest) = decode_embeddings(&decode_b64("embeddings", e)?)?;
                    check_embeddings(&table, &digest, &graph, &params)?;
                    (table, 0.0)
                }
                None => {
                    let start = Instant::now();
                    let table = materialize(&graph, &params, spec.rounds.unwrap_or(DEFAULT_ROUNDS), spec.seed)?;
                    (table, start.elapsed().as_secs_f64())
                }
            };
            let backend = LearnedBackend::new(graph.clone(), params, table, radius_of(spec))?;
            Ok((Store::new(graph, Box::new(backend)), seconds))
        }
    }
}

pub fn eval(req: &EvalRequest) -> Result<EvalResponse, OpError> {
    let loaded = load_kb(&req.kb)?;
    let split = parse_split(&req.split, &loaded.closed)?;
    let (store, materialization_seconds) = build_store(&loaded, &req.backend)?;
    let report = eval_report(loaded.closed.graph.schema(), store.backend(), &split.test)?;
    let (c, r) = (report.metrics.classes(), report.metrics.relations());
    Ok(EvalResponse {
        table: report.to_table(),
        csv: report.to_csv(),
        class_accuracy: c.accuracy,
        class_f1: c.f1,
        relation_accuracy: r.accuracy,
        relation_f1: r.f1,
        timings: Timings { import_seconds: loaded.import_seconds, materialization_seconds },
    })
}

pub fn open_store(req: &nets_api::OpenStoreRequest) -> Result<(Store, Timings), OpError> {
    let loaded = load_kb(&req.kb)?;
    let (store, materialization_seconds) = build_store(&loaded, &req.backend)?;
    Ok((store, Timings { import_seconds: loaded.import_seconds, materialization_seconds }))
}

/// Evaluates one conjunctive query. Table output starts with any warnings
/// and a blank line, the layout the shell prints.
pub fn query(store: &Store, req: &QueryRequest) -> Result<QueryResponse, OpError> {
    let query = parse_query(&req.query)?;
    let table = eval_conjunctive_with(store, &query, req.parallel)?;
    let warnings = query.connectivity_warnings();
    let output = match req.format {
        OutputFormat::Table => {
            let mut out = String::new();
            for w in &warnings {
                out.push_str(w);
                out.push('\n');
            }
            out.push('\n');
            out.push_str(&format_table(store.graph(), &table));
            out
        }
        OutputFormat::Csv => format_csv(store.graph(), &table),
    };
    Ok(QueryResponse { output, rows: table.len(), warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nets_core::store::{shell_eval, ShellOutcome};

    const FACTS: &str = "dbpedia:Aristotle rdf:type dbpedia:Philosopher .\n\
        dbpedia:Aristotle dbpedia:placeOfBirth dbpedia:Stagira_(ancient_city) .\n\
        dbpedia:Albert_Einstein rdf:type dbpedia:Scientist .\n\
        dbpedia:Albert_Einstein dbpedia:placeOfBirth dbpedia:Ulm .\n\
        dbpedia:Ulm rdf:type dbpedia:City .\n";
    const RULES: &str = "subClassOf dbpedia:Philosopher dbpedia:Person\nsubClassOf dbpedia:Scientist dbpedia:Person\n";

    fn kb() -> KbSource {
        KbSource { facts: FACTS.into(), rules: Some(RULES.into()), threshold: None }
    }

    #[test]
    fn query_output_matches_the_shell() {
        let (store, _) =
            open_store(&nets_api::OpenStoreRequest { kb: kb(), backend: BackendSpec { backend: BackendKind::Oracle, ..Default::default() } })
                .unwrap();
        let q = "dbpedia:Person(?X),dbpedia:placeOfBirth(?X,?Y)";
        let resp = query(&store, &QueryRequest { query: q.into(), format: OutputFormat::Table, parallel: true }).unwrap();
        assert_eq!(ShellOutcome::Output(resp.output.clone()), shell_eval(&store, q));
        assert_eq!(resp.rows, 2);
        let err = query(&store, &QueryRequest { query: "Unknown(?X)".into(), format: OutputFormat::Table, parallel: false })
            .unwrap_err();
        assert_eq!(err.to_string(), "unknown predicate: Unknown");
        assert_eq!(err.kind(), ErrorKind::User);
    }

    #[test]
    fn errors_are_classified() {
        let bad = KbSource { facts: FACTS.into(), rules: None, threshold: Some(2.0) };
        assert_eq!(load_kb(&bad).err().unwrap().kind(), ErrorKind::User);
        let req = MaterializeRequest { kb: kb(), weights: "not base64!".into(), rounds: 1, seed: 0 };
        assert!(materialize_kb(&req).unwrap_err().to_string().contains("base64"));
        let req = GenerateRequest { template: "zoo".into(), individuals: 3, seed: 0 };
        assert_eq!(generate(&req).unwrap_err().kind(), ErrorKind::User);
    }

    #[test]
    fn weights_from_another_schema_are_refused() {
        let resp = train_model(&TrainRequest {
            kb: kb(),
            split: None,
            validation: None,
            seed: 1,
            options: TrainOptions { epochs: Some(1), ..Default::default() },
        })
        .unwrap();
        let other = KbSource { facts: FACTS.into(), rules: None, threshold: None };
        let err = materialize_kb(&MaterializeRequest { kb: other, weights: resp.weights.clone(), rounds: 1, seed: 0 })
            .unwrap_err();
        assert_eq!(err.kind(), ErrorKind::User);
        assert!(err.to_string().contains("schema"), "{err}");
        let ok = materialize_kb(&MaterializeRequest { kb: kb(), weights: resp.weights, rounds: 2, seed: 0 }).unwrap();
        assert_eq!(ok.individuals, 4);
    }

    #[test]
    fn reason_reports_derivations() {
        let resp = reason(&ReasonRequest { kb: kb() }).unwrap();
        assert_eq!(resp.derivations, 2);
        assert!(resp.closure.contains("dbpedia:Aristotle rdf:type dbpedia:Person ."));
        assert!(resp.diagnostics.is_empty());
    }
}
