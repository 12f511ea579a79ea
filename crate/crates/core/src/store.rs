//! Materialization, persistence and query evaluation.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::okb::{IndividualId, OkbGraph, OkbSchema, ThreeValued};
use crate::oracle::LabeledQuery;
use crate::rtn::{self, apply_update, init_embeddings, EmbeddingTable, Endpoint, ModelError, RtnConfig, RtnParameters};
use crate::tensor::{Activation, Mat, PairLayer, Tensor3, UpdateLayer};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"RTNW";
pub const EMBEDDINGS_MAGIC: [u8; 4] = *b"RTNE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {found}, this build reads version {supported}")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("schema digest mismatch: file was written for a different schema")]
    DigestMismatch,
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("embedding file holds {file} individuals, graph has {graph}")]
    IndividualCount { file: usize, graph: usize },
    #[error("embedding width {file} does not match model dimension {model}")]
    Width { file: usize, model: usize },
    #[error("unknown predicate: {0}")]
    UnknownPredicate(String),
    #[error("unknown individual: {0}")]
    UnknownIndividual(String),
    #[error("{predicate} takes {expected} argument(s), got {found}")]
    Arity { predicate: String, expected: usize, found: usize },
    #[error("parse error at column {column}: {message}")]
    Parse { column: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Initializes from features, then for each round visits every positive edge
/// once in a seeded order, rewriting a coin-chosen endpoint.
pub fn materialize(
    graph: &OkbGraph,
    params: &RtnParameters,
    rounds: usize,
    seed: u64,
) -> Result<EmbeddingTable, StoreError> {
    let mut table = init_embeddings(graph, params)?;
    let edges: Vec<(IndividualId, usize, IndividualId)> =
        graph.positive_edges().map(|e| (e.source, e.relation, e.target)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..edges.len()).collect();
    for _ in 0..rounds {
        order.shuffle(&mut rng);
        for &i in &order {
            let (s, r, t) = edges[i];
            let endpoint = if rng.random_bool(0.5) { Endpoint::Source } else { Endpoint::Target };
            apply_update(params, &mut table, s, r, t, endpoint)?;
        }
    }
    Ok(table)
}

struct Writer(Vec<u8>);

impl Writer {
    fn new(magic: [u8; 4], digest: &[u8; 32]) -> Self {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(&magic);
        w.0.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        w.0.extend_from_slice(digest);
        w
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic and version; returns the reader and the stored digest.
    fn open(bytes: &'a [u8], magic: [u8; 4]) -> Result<(Self, [u8; 32]), StoreError> {
        let mut r = Reader { bytes, pos: 0 };
        let found = r.take(4).map_err(|_| StoreError::BadMagic {
            expected: String::from_utf8_lossy(&magic).into(),
            found: String::from_utf8_lossy(bytes).into(),
        })?;
        if found != magic {
            return Err(StoreError::BadMagic {
                expected: String::from_utf8_lossy(&magic).into(),
                found: String::from_utf8_lossy(found).into(),
            });
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(StoreError::UnsupportedVersion { found: version, supported: FORMAT_VERSION });
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        Ok((r, digest))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            StoreError::Corrupt(format!("truncated at byte {}, needed {n} more", self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self, what: &str) -> Result<usize, StoreError> {
        let v = self.u64()?;
        usize::try_from(v).ok().filter(|&v| v <= 1 << 32).ok_or_else(|| StoreError::Corrupt(format!("{what} = {v}")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, StoreError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| StoreError::Corrupt("payload size overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn finish(&self) -> Result<(), StoreError> {
        if self.pos != self.bytes.len() {
            return Err(StoreError::Corrupt(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn activation_code(a: Activation) -> u64 {
    match a {
        Activation::Tanh => 0,
        Activation::Identity => 1,
    }
}

/// Weights file: magic, version, schema digest, shape header
/// `(d, k_slices, horizon, n_classes, n_relations, activation, has_projection,
/// seed, init_scale bits)` as u64 LE, then every tensor in storage order.
pub fn encode_weights(params: &RtnParameters) -> Vec<u8> {
    let c = &params.config;
    let mut w = Writer::new(WEIGHTS_MAGIC, &params.schema_digest);
    for v in [
        c.d as u64,
        c.k_slices as u64,
        c.truncation_horizon as u64,
        params.n_classes as u64,
        params.n_relations as u64,
        activation_code(c.activation),
        params.projection.is_some() as u64,
        c.seed,
        c.init_scale.to_bits(),
    ] {
        w.u64(v);
    }
    for t in params.trainable() {
        w.f64s(t);
    }
    if let Some(p) = &params.projection {
        w.f64s(p.data());
    }
    w.0
}

pub fn decode_weights(bytes: &[u8]) -> Result<RtnParameters, StoreError> {
    let (mut r, digest) = Reader::open(bytes, WEIGHTS_MAGIC)?;
    let d = r.usize("d")?;
    let k = r.usize("k_slices")?;
    let horizon = r.usize("truncation_horizon")?;
    let nc = r.usize("n_classes")?;
    let nr = r.usize("n_relations")?;
    let activation = match r.u64()? {
        0 => Activation::Tanh,
        1 => Activation::Identity,
        other => return Err(StoreError::Corrupt(format!("activation code {other}"))),
    };
    let has_projection = match r.u64()? {
        0 => false,
        1 => true,
        other => return Err(StoreError::Corrupt(format!("projection flag {other}"))),
    };
    let seed = r.u64()?;
    let init_scale = f64::from_bits(r.u64()?);
    let config = RtnConfig { d, k_slices: k, truncation_horizon: horizon, init_scale, seed, activation };
    config.validate().map_err(|e| StoreError::Corrupt(e.to_string()))?;
    if has_projection == (d == nc) {
        return Err(StoreError::Corrupt(format!("projection flag {has_projection} with d={d}, n_classes={nc}")));
    }
    let mat = |r: &mut Reader, rows: usize, cols: usize| -> Result<Mat, StoreError> {
        Ok(Mat::from_vec(rows, cols, r.f64s(rows * cols)?).expect("sized read"))
    };
    let mut updates = Vec::with_capacity(2 * nr);
    for _ in 0..2 * nr {
        let u = mat(&mut r, d, k)?;
        let w = Tensor3::from_vec(d, d, k, r.f64s(d * d * k)?).expect("sized read");
        let v = mat(&mut r, k, d)?;
        updates.push(UpdateLayer { u, w, v });
    }
    let class_head = mat(&mut r, 3 * nc, d)?;
    let class_bias = r.f64s(3 * nc)?;
    let pair = PairLayer {
        u: mat(&mut r, d, k)?,
        w: Tensor3::from_vec(d, d, k, r.f64s(d * d * k)?).expect("sized read"),
        v: mat(&mut r, k, 2 * d)?,
        b: r.f64s(k)?,
    };
    let relation_head = mat(&mut r, 3 * nr, d)?;
    let relation_bias = r.f64s(3 * nr)?;
    let projection = if has_projection { Some(mat(&mut r, d, nc)?) } else { None };
    r.finish()?;
    Ok(RtnParameters {
        config,
        n_classes: nc,
        n_relations: nr,
        schema_digest: digest,
        updates,
        class_head,
        class_bias,
        pair,
        relation_head,
        relation_bias,
        projection,
    })
}

fn read(path: &Path) -> Result<Vec<u8>, StoreError> {
    fs::read(path).map_err(|source| StoreError::Io { path: path.display().to_string(), source })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    fs::write(path, bytes).map_err(|source| StoreError::Io { path: path.display().to_string(), source })
}

pub fn save_weights(params: &RtnParameters, path: &Path) -> Result<(), StoreError> {
    write(path, &encode_weights(params))
}

pub fn load_weights(path: &Path) -> Result<RtnParameters, StoreError> {
    decode_weights(&read(path)?)
}

/// [`load_weights`] that refuses files written for another schema.
pub fn load_weights_for(path: &Path, schema: &OkbSchema) -> Result<RtnParameters, StoreError> {
    let params = load_weights(path)?;
    if params.schema_digest != schema.digest() {
        return Err(StoreError::DigestMismatch);
    }
    Ok(params)
}

/// Embeddings file: magic, version, schema digest, `(n, d)` as u64 LE, one
/// dirty byte per individual, then `n·d` reals.
pub fn encode_embeddings(table: &EmbeddingTable, schema_digest: &[u8; 32]) -> Vec<u8> {
    let mut w = Writer::new(EMBEDDINGS_MAGIC, schema_digest);
    w.u64(table.len() as u64);
    w.u64(table.dim() as u64);
    w.0.extend(table.dirty_flags().iter().map(|&b| b as u8));
    w.f64s(table.values());
    w.0
}

/// Returns the table and the digest it was written under.
pub fn decode_embeddings(bytes: &[u8]) -> Result<(EmbeddingTable, [u8; 32]), StoreError> {
    let (mut r, digest) = Reader::open(bytes, EMBEDDINGS_MAGIC)?;
    let n = r.usize("individual count")?;
    let d = r.usize("dimension")?;
    let dirty = r
        .take(n)?
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(StoreError::Corrupt(format!("dirty flag {other}"))),
        })
        .collect::<Result<Vec<bool>, _>>()?;
    let values = r.f64s(n.checked_mul(d).ok_or_else(|| StoreError::Corrupt("size overflow".into()))?)?;
    r.finish()?;
    let table = EmbeddingTable::from_parts(d, values, dirty).map_err(|e| StoreError::Corrupt(e.to_string()))?;
    Ok((table, digest))
}

pub fn save_embeddings(table: &EmbeddingTable, schema_digest: &[u8; 32], path: &Path) -> Result<(), StoreError> {
    write(path, &encode_embeddings(table, schema_digest))
}

pub fn load_embeddings(path: &Path) -> Result<(EmbeddingTable, [u8; 32]), StoreError> {
    decode_embeddings(&read(path)?)
}

/// Loads embeddings and checks them against the graph and model.
pub fn load_embeddings_for(path: &Path, graph: &OkbGraph, params: &RtnParameters) -> Result<EmbeddingTable, StoreError> {
    let (table, digest) = load_embeddings(path)?;
    check_embeddings(&table, &digest, graph, params)?;
    Ok(table)
}

pub fn check_embeddings(
    table: &EmbeddingTable,
    digest: &[u8; 32],
    graph: &OkbGraph,
    params: &RtnParameters,
) -> Result<(), StoreError> {
    if *digest != graph.schema().digest() {
        return Err(StoreError::DigestMismatch);
    }
    if table.len() != graph.n_individuals() {
        return Err(StoreError::IndividualCount { file: table.len(), graph: graph.n_individuals() });
    }
    if table.dim() != params.config.d {
        return Err(StoreError::Width { file: table.dim(), model: params.config.d });
    }
    Ok(())
}

/// Argmax over one `(p1, p0, p-1)` row; any tie for the maximum is unknown.
pub fn decide(row: &[f64; 3]) -> ThreeValued {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let winners: Vec<usize> = (0..3).filter(|&c| row[c] == max).collect();
    match winners.as_slice() {
        [only] => ThreeValued::from_category(*only),
        _ => ThreeValued::Unknown,
    }
}

/// How far from a source the learned backend looks for relation targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateRadius {
    Hops(usize),
    All,
}

impl Default for CandidateRadius {
    fn default() -> Self {
        CandidateRadius::Hops(2)
    }
}

/// Source of truth values for query atoms.
pub trait Backend: Send + Sync {
    fn class_value(&self, who: IndividualId, class: usize) -> ThreeValued;

    /// All relation values for the ordered pair, one per relation.
    fn relation_values(&self, source: IndividualId, target: IndividualId) -> Vec<ThreeValued>;

    fn relation_value(&self, source: IndividualId, relation: usize, target: IndividualId) -> ThreeValued {
        self.relation_values(source, target)[relation]
    }

    /// Whether the backend would ever score the ordered pair.
    fn is_candidate(&self, _source: IndividualId, _target: IndividualId) -> bool {
        true
    }

    /// Ordered pairs worth scoring for `relation`, restricted by the bound ends.
    fn candidates(
        &self,
        relation: usize,
        source: Option<IndividualId>,
        target: Option<IndividualId>,
    ) -> Vec<(IndividualId, IndividualId)>;
}

/// Predictions from the trained heads over materialized embeddings.
pub struct LearnedBackend {
    graph: OkbGraph,
    params: RtnParameters,
    table: EmbeddingTable,
    radius: CandidateRadius,
}

impl LearnedBackend {
    pub fn new(
        graph: OkbGraph,
        params: RtnParameters,
        table: EmbeddingTable,
        radius: CandidateRadius,
    ) -> Result<Self, StoreError> {
        rtn::check_table(&graph, &params, &table)?;
        Ok(LearnedBackend { graph, params, table, radius })
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }

    pub fn params(&self) -> &RtnParameters {
        &self.params
    }

    fn targets_of(&self, source: IndividualId) -> Vec<IndividualId> {
        match self.radius {
            CandidateRadius::All => self.graph.individuals().collect(),
            CandidateRadius::Hops(h) => {
                let mut near = self.graph.neighborhood(source, h);
                if let Err(at) = near.binary_search(&source) {
                    near.insert(at, source);
                }
                near
            }
        }
    }
}

impl Backend for LearnedBackend {
    fn class_value(&self, who: IndividualId, class: usize) -> ThreeValued {
        let logits = rtn::class_logits(&self.params, self.table.get(who)).expect("checked shapes");
        let p = crate::tensor::softmax(&logits[3 * class..3 * class + 3]);
        decide(&[p[0], p[1], p[2]])
    }

    fn relation_values(&self, source: IndividualId, target: IndividualId) -> Vec<ThreeValued> {
        rtn::predict_relations(&self.params, self.table.get(source), self.table.get(target))
            .expect("checked shapes")
            .iter()
            .map(decide)
            .collect()
    }

    fn is_candidate(&self, source: IndividualId, target: IndividualId) -> bool {
        match self.radius {
            CandidateRadius::All => true,
            CandidateRadius::Hops(h) => {
                source == target || self.graph.neighborhood(source, h).binary_search(&target).is_ok()
            }
        }
    }

    fn candidates(
        &self,
        _relation: usize,
        source: Option<IndividualId>,
        target: Option<IndividualId>,
    ) -> Vec<(IndividualId, IndividualId)> {
        let sources: Vec<IndividualId> = match source {
            Some(s) => vec![s],
            None => self.graph.individuals().collect(),
        };
        let mut out = Vec::new();
        for s in sources {
            match target {
                Some(t) => {
                    if self.is_candidate(s, t) {
                        out.push((s, t));
                    }
                }
                None => out.extend(self.targets_of(s).into_iter().map(|t| (s, t))),
            }
        }
        out
    }
}

/// Exact answers read off a closed graph.
pub struct OracleBackend {
    graph: OkbGraph,
}

impl OracleBackend {
    pub fn new(closed: OkbGraph) -> Self {
        OracleBackend { graph: closed }
    }
}

impl Backend for OracleBackend {
    fn class_value(&self, who: IndividualId, class: usize) -> ThreeValued {
        self.graph.class_label(who, class)
    }

    fn relation_values(&self, source: IndividualId, target: IndividualId) -> Vec<ThreeValued> {
        (0..self.graph.schema().n_relations()).map(|r| self.graph.relation_label(source, r, target)).collect()
    }

    fn relation_value(&self, source: IndividualId, relation: usize, target: IndividualId) -> ThreeValued {
        self.graph.relation_label(source, relation, target)
    }

    fn candidates(
        &self,
        relation: usize,
        source: Option<IndividualId>,
        target: Option<IndividualId>,
    ) -> Vec<(IndividualId, IndividualId)> {
        let edges: Box<dyn Iterator<Item = (IndividualId, IndividualId)>> = match (source, target) {
            (Some(s), _) => Box::new(
                self.graph.adjacency(s).iter().filter(|i| i.relation == relation).map(move |i| (s, i.counterpart)),
            ),
            (None, Some(t)) => Box::new(
                self.graph.adjacency(t).iter().filter(|i| i.relation == relation).map(move |i| (i.counterpart, t)),
            ),
            (None, None) => Box::new(
                self.graph.positive_edges().filter(|e| e.relation == relation).map(|e| (e.source, e.target)),
            ),
        };
        let set: BTreeSet<(IndividualId, IndividualId)> =
            edges.filter(|&(s, t)| target.is_none_or(|want| want == t) && source.is_none_or(|want| want == s)).collect();
        set.into_iter().collect()
    }
}

/// The backend's decision on each labeled cell. Pairs the backend would not
/// enumerate are answered unknown.
pub fn predict_queries(backend: &dyn Backend, queries: &[LabeledQuery]) -> Vec<LabeledQuery> {
    let mut cache = PairCache::default();
    queries
        .iter()
        .map(|q| match *q {
            LabeledQuery::Class { individual, class, .. } => {
                LabeledQuery::Class { individual, class, label: backend.class_value(individual, class).as_i8() }
            }
            LabeledQuery::Relation { source, relation, target, .. } => {
                let v = if backend.is_candidate(source, target) {
                    cache.get(backend, source, relation, target)
                } else {
                    ThreeValued::Unknown
                };
                LabeledQuery::Relation { source, relation, target, label: v.as_i8() }
            }
        })
        .collect()
}

/// A query answering service over one graph and one backend.
pub struct Store {
    graph: OkbGraph,
    backend: Box<dyn Backend>,
}

impl Store {
    /// `graph` supplies names and the schema; it must intern individuals in
    /// the same order as the backend's graph.
    pub fn new(graph: OkbGraph, backend: Box<dyn Backend>) -> Self {
        Store { graph, backend }
    }

    pub fn learned(
        graph: OkbGraph,
        params: RtnParameters,
        table: EmbeddingTable,
        radius: CandidateRadius,
    ) -> Result<Self, StoreError> {
        let backend = LearnedBackend::new(graph.clone(), params, table, radius)?;
        Ok(Store::new(graph, Box::new(backend)))
    }

    pub fn oracle(closed: OkbGraph) -> Self {
        Store::new(closed.clone(), Box::new(OracleBackend::new(closed)))
    }

    pub fn graph(&self) -> &OkbGraph {
        &self.graph
    }

    pub fn backend(&self) -> &dyn Backend {
        self.backend.as_ref()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    Var(String),
    Const(String),
}

impl Term {
    fn var(&self) -> Option<&str> {
        match self {
            Term::Var(v) => Some(v),
            Term::Const(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Atom {
    pub predicate: String,
    pub terms: Vec<Term>,
}

/// A conjunction of atoms, as typed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub atoms: Vec<Atom>,
}

impl Query {
    /// Variables in order of first appearance.
    pub fn variables(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for a in &self.atoms {
            for v in a.terms.iter().filter_map(Term::var) {
                if !out.iter().any(|o| o == v) {
                    out.push(v.to_string());
                }
            }
        }
        out
    }

    /// One warning per atom that shares no variable with the rest.
    pub fn connectivity_warnings(&self) -> Vec<String> {
        if self.atoms.len() < 2 {
            return Vec::new();
        }
        let mut out = Vec::new();
        for (i, a) in self.atoms.iter().enumerate() {
            let mine: BTreeSet<&str> = a.terms.iter().filter_map(Term::var).collect();
            let shared = self
                .atoms
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .any(|(_, b)| b.terms.iter().filter_map(Term::var).any(|v| mine.contains(v)));
            if !shared {
                out.push(format!("warning: {} shares no variable with the rest of the query; taking a cross product", a.predicate));
            }
        }
        out
    }
}

fn parse_error(column: usize, message: impl Into<String>) -> StoreError {
    StoreError::Parse { column: column + 1, message: message.into() }
}

/// Parses `Pred(term, ...)` atoms separated by commas. Terms starting with
/// `?` are variables; anything else is an individual name. Parentheses inside
/// names must balance.
pub fn parse_query(text: &str) -> Result<Query, StoreError> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    let skip_ws = |i: &mut usize| {
        while *i < chars.len() && chars[*i].1.is_whitespace() {
            *i += 1;
        }
    };
    let col = |i: usize| if i < chars.len() { chars[i].0 } else { text.len() };
    let mut atoms = Vec::new();
    loop {
        skip_ws(&mut i);
        let start = i;
        while i < chars.len() && chars[i].1 != '(' && chars[i].1 != ',' && !chars[i].1.is_whitespace() {
            i += 1;
        }
        let predicate = &text[col(start)..col(i)];
        if predicate.is_empty() {
            return Err(parse_error(col(start), "expected a predicate name"));
        }
        skip_ws(&mut i);
        if i >= chars.len() || chars[i].1 != '(' {
            return Err(parse_error(col(i), format!("expected '(' after {predicate}")));
        }
        i += 1;
        let mut terms = Vec::new();
        let mut depth = 0usize;
        let mut term_start = i;
        loop {
            if i >= chars.len() {
                return Err(parse_error(col(i), format!("unclosed argument list of {predicate}")));
            }
            match chars[i].1 {
                '(' => depth += 1,
                ')' if depth > 0 => depth -= 1,
                c @ (')' | ',') => {
                    let raw = text[col(term_start)..col(i)].trim();
                    if raw.is_empty() {
                        return Err(parse_error(col(term_start), format!("empty argument in {predicate}")));
                    }
                    terms.push(match raw.strip_prefix('?') {
                        Some("") => return Err(parse_error(col(term_start), "variable without a name")),
                        Some(_) => Term::Var(raw.to_string()),
                        None => Term::Const(raw.to_string()),
                    });
                    term_start = i + 1;
                    if c == ')' {
                        i += 1;
                        break;
                    }
                }
                _ => {}
            }
            i += 1;
        }
        atoms.push(Atom { predicate: predicate.to_string(), terms });
        skip_ws(&mut i);
        if i >= chars.len() {
            break;
        }
        if chars[i].1 != ',' {
            return Err(parse_error(col(i), "expected ',' between atoms"));
        }
        i += 1;
    }
    Ok(Query { atoms })
}

/// Variables and result rows. Rows are sorted and distinct.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BindingTable {
    pub variables: Vec<String>,
    pub rows: Vec<Vec<IndividualId>>,
}

impl BindingTable {
    fn normalized(mut self) -> Self {
        self.rows.sort_unstable();
        self.rows.dedup();
        self
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Same rows with columns rearranged into `order`.
    pub fn project(&self, order: &[String]) -> BindingTable {
        let idx: Vec<usize> =
            order.iter().map(|v| self.variables.iter().position(|w| w == v).expect("variable present")).collect();
        BindingTable {
            variables: order.to_vec(),
            rows: self.rows.iter().map(|r| idx.iter().map(|&i| r[i]).collect()).collect(),
        }
        .normalized()
    }
}

enum Resolved {
    Class(usize),
    Relation(usize),
}

fn resolve(store: &Store, atom: &Atom) -> Result<(Resolved, Vec<Option<IndividualId>>), StoreError> {
    let schema = store.graph.schema();
    let (kind, arity) = if let Some(c) = schema.class(&atom.predicate) {
        (Resolved::Class(c), 1)
    } else if let Some(r) = schema.relation(&atom.predicate) {
        (Resolved::Relation(r), 2)
    } else {
        return Err(StoreError::UnknownPredicate(atom.predicate.clone()));
    };
    if atom.terms.len() != arity {
        return Err(StoreError::Arity { predicate: atom.predicate.clone(), expected: arity, found: atom.terms.len() });
    }
    let consts = atom
        .terms
        .iter()
        .map(|t| match t {
            Term::Var(_) => Ok(None),
            Term::Const(name) => {
                store.graph.lookup(name).map(Some).ok_or_else(|| StoreError::UnknownIndividual(name.clone()))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((kind, consts))
}

/// Pair predictions memoized for the duration of one query.
#[derive(Default)]
struct PairCache(HashMap<(IndividualId, IndividualId), Vec<ThreeValued>>);

impl PairCache {
    fn get(&mut self, backend: &dyn Backend, s: IndividualId, r: usize, t: IndividualId) -> ThreeValued {
        self.0.entry((s, t)).or_insert_with(|| backend.relation_values(s, t))[r]
    }
}

fn eval_atom_cached(store: &Store, atom: &Atom, cache: &mut PairCache) -> Result<BindingTable, StoreError> {
    let (kind, consts) = resolve(store, atom)?;
    let mut variables: Vec<String> = Vec::new();
    for v in atom.terms.iter().filter_map(Term::var) {
        if !variables.iter().any(|w| w == v) {
            variables.push(v.to_string());
        }
    }
    let backend = store.backend();
    let mut rows = Vec::new();
    match kind {
        Resolved::Class(c) => {
            let who: Vec<IndividualId> = match consts[0] {
                Some(x) => vec![x],
                None => store.graph.individuals().collect(),
            };
            for x in who {
                if backend.class_value(x, c) == ThreeValued::True {
                    rows.push(if variables.is_empty() { vec![] } else { vec![x] });
                }
            }
        }
        Resolved::Relation(r) => {
            let same_var = matches!((&atom.terms[0], &atom.terms[1]), (Term::Var(a), Term::Var(b)) if a == b);
            for (s, t) in backend.candidates(r, consts[0], consts[1]) {
                if same_var && s != t {
                    continue;
                }
                if cache.get(backend, s, r, t) != ThreeValued::True {
                    continue;
                }
                let row = match (consts[0], consts[1]) {
                    (Some(_), Some(_)) => vec![],
                    (Some(_), None) => vec![t],
                    (None, Some(_)) => vec![s],
                    (None, None) if same_var => vec![s],
                    (None, None) => vec![s, t],
                };
                rows.push(row);
            }
        }
    }
    Ok(BindingTable { variables, rows }.normalized())
}

pub fn eval_atom(store: &Store, atom: &Atom) -> Result<BindingTable, StoreError> {
    eval_atom_cached(store, atom, &mut PairCache::default())
}

/// Hash join of two tables on their shared variables.
pub fn hash_join(left: &BindingTable, right: &BindingTable) -> BindingTable {
    let shared: Vec<(usize, usize)> = left
        .variables
        .iter()
        .enumerate()
        .filter_map(|(i, v)| right.variables.iter().position(|w| w == v).map(|j| (i, j)))
        .collect();
    let extra: Vec<usize> = (0..right.variables.len()).filter(|j| !shared.iter().any(|&(_, sj)| sj == *j)).collect();
    let mut variables = left.variables.clone();
    variables.extend(extra.iter().map(|&j| right.variables[j].clone()));

    let mut index: HashMap<Vec<IndividualId>, Vec<&Vec<IndividualId>>> = HashMap::new();
    for row in &right.rows {
        index.entry(shared.iter().map(|&(_, j)| row[j]).collect()).or_default().push(row);
    }
    let mut rows = Vec::new();
    for l in &left.rows {
        let key: Vec<IndividualId> = shared.iter().map(|&(i, _)| l[i]).collect();
        if let Some(matches) = index.get(&key) {
            for r in matches {
                let mut row = l.clone();
                row.extend(extra.iter().map(|&j| r[j]));
                rows.push(row);
            }
        }
    }
    BindingTable { variables, rows }.normalized()
}

/// Evaluates every atom, joins them smallest first, and returns columns in
/// order of first appearance in the query.
pub fn eval_conjunctive(store: &Store, query: &Query) -> Result<BindingTable, StoreError> {
    eval_conjunctive_with(store, query, false)
}

/// [`eval_conjunctive`], optionally evaluating each atom on its own thread.
/// The result does not depend on `parallel`.
pub fn eval_conjunctive_with(store: &Store, query: &Query, parallel: bool) -> Result<BindingTable, StoreError> {
    if query.atoms.is_empty() {
        return Err(parse_error(0, "empty query"));
    }
    let tables: Vec<Result<BindingTable, StoreError>> = if parallel && query.atoms.len() > 1 {
        std::thread::scope(|scope| {
            let handles: Vec<_> = query
                .atoms
                .iter()
                .map(|a| scope.spawn(move || eval_atom_cached(store, a, &mut PairCache::default())))
                .collect();
            handles.into_iter().map(|h| h.join().expect("atom evaluation panicked")).collect()
        })
    } else {
        let mut cache = PairCache::default();
        query.atoms.iter().map(|a| eval_atom_cached(store, a, &mut cache)).collect()
    };
    let mut tables = tables.into_iter().collect::<Result<Vec<_>, _>>()?;
    tables.sort_by_key(|t| t.len());
    let mut acc = tables.remove(0);
    for t in &tables {
        if acc.is_empty() {
            break;
        }
        acc = hash_join(&acc, t);
    }
    let order = query.variables();
    if acc.is_empty() {
        return Ok(BindingTable { variables: order, rows: vec![] });
    }
    Ok(acc.project(&order))
}

/// Plain-text table: header of variable names, `=` rules as wide as each
/// column, then one line per row. Columns are five spaces apart and lines
/// carry no trailing spaces. A query without variables prints `true` or
/// `false`.
pub fn format_table(graph: &OkbGraph, table: &BindingTable) -> String {
    if table.variables.is_empty() {
        return format!("{}\n", if table.rows.is_empty() { "false" } else { "true" });
    }
    let cells: Vec<Vec<&str>> = table.rows.iter().map(|r| r.iter().map(|&id| graph.name(id)).collect()).collect();
    let widths: Vec<usize> = (0..table.variables.len())
        .map(|c| cells.iter().map(|r| r[c].chars().count()).chain([table.variables[c].chars().count()]).max().unwrap_or(0))
        .collect();
    let line = |items: Vec<String>| -> String {
        let mut s = String::new();
        for (c, item) in items.iter().enumerate() {
            if c > 0 {
                s.push_str("     ");
            }
            s.push_str(item);
            let pad = widths[c] - item.chars().count();
            s.extend(std::iter::repeat_n(' ', pad));
        }
        format!("{}\n", s.trim_end())
    };
    let mut out = line(table.variables.clone());
    out.push_str(&line(widths.iter().map(|&w| "=".repeat(w)).collect()));
    for r in cells {
        out.push_str(&line(r.into_iter().map(String::from).collect()));
    }
    out
}

/// Comma-separated export of a binding table, header first.
pub fn format_csv(graph: &OkbGraph, table: &BindingTable) -> String {
    let mut out = table.variables.join(",");
    out.push('\n');
    for r in &table.rows {
        let names: Vec<&str> = r.iter().map(|&id| graph.name(id)).collect();
        out.push_str(&names.join(","));
        out.push('\n');
    }
    out
}

/// Result of one shell line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ShellOutcome {
    Output(String),
    Quit,
}

pub const PROMPT: &str = "NeTS> ";

/// Evaluates one shell line. Errors become one-line diagnostics.
pub fn shell_eval(store: &Store, line: &str) -> ShellOutcome {
    let line = line.trim();
    if line.is_empty() {
        return ShellOutcome::Output(String::new());
    }
    if line == ":quit" || line == ":q" {
        return ShellOutcome::Quit;
    }
    let query = match parse_query(line) {
        Ok(q) => q,
        Err(e) => return ShellOutcome::Output(format!("{e}\n")),
    };
    match eval_conjunctive(store, &query) {
        Ok(table) => {
            let mut out = String::new();
            for w in query.connectivity_warnings() {
                out.push_str(&w);
                out.push('\n');
            }
            out.push('\n');
            out.push_str(&format_table(store.graph(), &table));
            ShellOutcome::Output(out)
        }
        Err(e) => ShellOutcome::Output(format!("{e}\n")),
    }
}
