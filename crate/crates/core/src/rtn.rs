//! The relational tensor network.
//!
//! Each relation owns two residual update layers, one rewriting the source
//! endpoint and one rewriting the target. Predictions come from a per-class
//! three-way softmax over an affine map of the embedding, and from a shared
//! pair-scoring layer followed by a per-relation three-way softmax.
//!
//! Category order in every logit or probability row is `(1, 0, -1)`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::okb::{Direction, IndividualId, OkbGraph, OkbSchema};
use crate::tensor::{
    self, axpy, Activation, Mat, PairLayer, PairLayerGrads, TensorError, UpdateLayer,
};

pub const CATEGORIES: usize = 3;

/// Smallest default embedding width. With only a handful of classes the
/// feature width alone leaves too little room to encode update history.
pub const MIN_DEFAULT_DIM: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("schema mismatch: model has {model_classes} classes and {model_relations} relations, graph has {graph_classes} and {graph_relations}")]
    SchemaMismatch {
        model_classes: usize,
        model_relations: usize,
        graph_classes: usize,
        graph_relations: usize,
    },
    #[error("embedding table has {table} individuals, graph has {graph}")]
    TableSize { table: usize, graph: usize },
    #[error("update history missing for {0}, which was updated")]
    MissingHistory(IndividualId),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RtnConfig {
    pub d: usize,
    pub k_slices: usize,
    pub truncation_horizon: usize,
    pub init_scale: f64,
    pub seed: u64,
    pub activation: Activation,
}

impl RtnConfig {
    /// Defaults with `d` equal to the class count, so embeddings start as
    /// incidence vectors.
    /// Width is at least [`MIN_DEFAULT_DIM`]; narrower feature vectors are
    /// lifted by the fixed projection.
    pub fn for_schema(schema: &OkbSchema) -> Self {
        RtnConfig {
            d: schema.n_classes().max(MIN_DEFAULT_DIM),
            k_slices: 4,
            truncation_horizon: 2,
            init_scale: 0.05,
            seed: 0,
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 || self.k_slices == 0 || self.truncation_horizon == 0 {
            return Err(ModelError::Config(format!(
                "d={}, k_slices={}, truncation_horizon={} must all be at least 1",
                self.d, self.k_slices, self.truncation_horizon
            )));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(ModelError::Config(format!("init_scale {} must be finite and non-negative", self.init_scale)));
        }
        Ok(())
    }
}

/// All learned weights. The same shape doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct RtnParameters {
    pub config: RtnConfig,
    pub n_classes: usize,
    pub n_relations: usize,
    pub schema_digest: [u8; 32],
    /// Index `2 * relation + direction`.
    pub updates: Vec<UpdateLayer>,
    /// `3·n_classes x d`
    pub class_head: Mat,
    pub class_bias: Vec<f64>,
    /// Output dimension `d`.
    pub pair: PairLayer,
    /// `3·n_relations x d`
    pub relation_head: Mat,
    pub relation_bias: Vec<f64>,
    /// `d x n_classes` feature projection; absent when `d == n_classes`. Not trained.
    pub projection: Option<Mat>,
}

fn uniform(rng: &mut ChaCha8Rng, scale: f64, out: &mut [f64]) {
    if scale == 0.0 {
        out.fill(0.0);
        return;
    }
    for v in out {
        *v = rng.random_range(-scale..=scale);
    }
}

const PROJECTION_STREAM: u64 = 0x5052_4f4a;

impl RtnParameters {
    pub fn zeros(schema: &OkbSchema, config: RtnConfig) -> Self {
        let (d, k) = (config.d, config.k_slices);
        let (nc, nr) = (schema.n_classes(), schema.n_relations());
        RtnParameters {
            config,
            n_classes: nc,
            n_relations: nr,
            schema_digest: schema.digest(),
            updates: (0..2 * nr).map(|_| UpdateLayer::zeros(d, k)).collect(),
            class_head: Mat::zeros(CATEGORIES * nc, d),
            class_bias: vec![0.0; CATEGORIES * nc],
            pair: PairLayer::zeros(d, k, d),
            relation_head: Mat::zeros(CATEGORIES * nr, d),
            relation_bias: vec![0.0; CATEGORIES * nr],
            projection: (d != nc).then(|| Mat::zeros(d, nc)),
        }
    }

    /// Zeroed copy with the same shapes, for gradient accumulation.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.trainable_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn update_layer(&self, relation: usize, direction: Direction) -> &UpdateLayer {
        &self.updates[2 * relation + direction.index()]
    }

    /// Trainable tensors in storage order.
    pub fn trainable(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(3 * self.updates.len() + 8);
        for u in &self.updates {
            out.extend([u.u.data(), u.w.data(), u.v.data()]);
        }
        out.extend([self.class_head.data(), &self.class_bias[..]]);
        out.extend([self.pair.u.data(), self.pair.w.data(), self.pair.v.data(), &self.pair.b[..]]);
        out.extend([self.relation_head.data(), &self.relation_bias[..]]);
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(3 * self.updates.len() + 8);
        for u in &mut self.updates {
            out.push(u.u.data_mut());
            out.push(u.w.data_mut());
            out.push(u.v.data_mut());
        }
        out.push(self.class_head.data_mut());
        out.push(&mut self.class_bias);
        out.push(self.pair.u.data_mut());
        out.push(self.pair.w.data_mut());
        out.push(self.pair.v.data_mut());
        out.push(&mut self.pair.b);
        out.push(self.relation_head.data_mut());
        out.push(&mut self.relation_bias);
        out
    }

    pub fn n_trainable(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    /// `self += scale · other` over trainable tensors.
    pub fn add_scaled(&mut self, scale: f64, other: &RtnParameters) {
        for (dst, src) in self.trainable_mut().into_iter().zip(other.trainable()) {
            axpy(dst, scale, src);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.trainable().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn check_schema(&self, schema: &OkbSchema) -> Result<(), ModelError> {
        if self.n_classes != schema.n_classes()
            || self.n_relations != schema.n_relations()
            || self.schema_digest != schema.digest()
        {
            return Err(ModelError::SchemaMismatch {
                model_classes: self.n_classes,
                model_relations: self.n_relations,
                graph_classes: schema.n_classes(),
                graph_relations: schema.n_relations(),
            });
        }
        Ok(())
    }
}

/// Uniform draws from `[-init_scale, init_scale]` in storage order. The
/// projection, when needed, comes from a separate stream with unit scale so
/// that features survive `init_scale == 0`.
pub fn init_params(schema: &OkbSchema, config: RtnConfig) -> Result<RtnParameters, ModelError> {
    config.validate()?;
    if schema.is_empty() {
        return Err(ModelError::Config("schema has no classes and no relations".into()));
    }
    let mut p = RtnParameters::zeros(schema, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for t in p.trainable_mut() {
        uniform(&mut rng, config.init_scale, t);
    }
    if let Some(proj) = &mut p.projection {
        let mut prng = ChaCha8Rng::seed_from_u64(config.seed ^ PROJECTION_STREAM);
        let scale = 1.0 / (schema.n_classes().max(1) as f64).sqrt();
        uniform(&mut prng, scale, proj.data_mut());
    }
    Ok(p)
}

/// One embedding per individual plus a flag recording whether it has been
/// updated since initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    d: usize,
    values: Vec<f64>,
    dirty: Vec<bool>,
}

impl EmbeddingTable {
    pub fn from_parts(d: usize, values: Vec<f64>, dirty: Vec<bool>) -> Result<Self, ModelError> {
        if d == 0 || values.len() != d * dirty.len() {
            return Err(ModelError::Config(format!(
                "{} values do not form {} rows of width {d}",
                values.len(),
                dirty.len()
            )));
        }
        Ok(EmbeddingTable { d, values, dirty })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.dirty.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirty.is_empty()
    }

    pub fn get(&self, who: IndividualId) -> &[f64] {
        let i = who.index();
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn is_dirty(&self, who: IndividualId) -> bool {
        self.dirty[who.index()]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dirty_flags(&self) -> &[bool] {
        &self.dirty
    }

    fn write(&mut self, who: IndividualId, v: &[f64]) {
        let i = who.index();
        self.values[i * self.d..(i + 1) * self.d].copy_from_slice(v);
        self.dirty[i] = true;
    }
}

/// Feature vectors: the incidence vector itself when `d == n_classes`, its
/// fixed projection otherwise.
pub fn init_embeddings(graph: &OkbGraph, params: &RtnParameters) -> Result<EmbeddingTable, ModelError> {
    params.check_schema(graph.schema())?;
    let d = params.config.d;
    let n = graph.n_individuals();
    let mut values = Vec::with_capacity(n * d);
    for who in graph.individuals() {
        let labels = graph.labels_of(who);
        match &params.projection {
            None => values.extend(labels.iter().map(|&v| v as f64)),
            Some(p) => {
                let x: Vec<f64> = labels.iter().map(|&v| v as f64).collect();
                // -0.0 would turn into +0.0 under a zero residual; keep zeros positive
                values.extend(p.matvec(&x)?.into_iter().map(|v| v + 0.0));
            }
        }
    }
    Ok(EmbeddingTable { d, values, dirty: vec![false; n] })
}

pub fn check_table(graph: &OkbGraph, params: &RtnParameters, table: &EmbeddingTable) -> Result<(), ModelError> {
    params.check_schema(graph.schema())?;
    if table.len() != graph.n_individuals() || table.dim() != params.config.d {
        return Err(ModelError::TableSize { table: table.len(), graph: graph.n_individuals() });
    }
    Ok(())
}

/// Which endpoint of an edge an update rewrites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Endpoint {
    Source,
    Target,
}

impl Endpoint {
    fn resolve(self, source: IndividualId, target: IndividualId) -> (IndividualId, IndividualId, Direction) {
        match self {
            Endpoint::Source => (source, target, Direction::SourceSide),
            Endpoint::Target => (target, source, Direction::TargetSide),
        }
    }
}

/// Rewrites one endpoint of `(source, relation, target)` in place.
pub fn apply_update(
    params: &RtnParameters,
    table: &mut EmbeddingTable,
    source: IndividualId,
    relation: usize,
    target: IndividualId,
    endpoint: Endpoint,
) -> Result<(), ModelError> {
    let (who, other, dir) = endpoint.resolve(source, target);
    let layer = params.update_layer(relation, dir);
    let next = tensor::rtn_update(table.get(who), table.get(other), layer, params.config.activation)?;
    table.write(who, &next);
    Ok(())
}

#[derive(Debug, Clone)]
struct UpdateEvent {
    individual: IndividualId,
    layer: usize,
    /// Event that produced `input`, if any.
    previous: Option<usize>,
    /// Event that produced `counterpart`, if any.
    counterpart_event: Option<usize>,
    input: Vec<f64>,
    counterpart: Vec<f64>,
}

/// History of updates applied to a table, enough to backpropagate through
/// the most recent steps of every individual.
#[derive(Debug, Clone, Default)]
pub struct UpdateLog {
    events: Vec<UpdateEvent>,
    latest: Vec<Option<usize>>,
}

impl UpdateLog {
    pub fn new(n_individuals: usize) -> Self {
        UpdateLog { events: Vec::new(), latest: vec![None; n_individuals] }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn was_updated(&self, who: IndividualId) -> bool {
        self.latest[who.index()].is_some()
    }

    /// Individuals with at least one logged update, ascending.
    pub fn updated(&self) -> Vec<IndividualId> {
        (0..self.latest.len()).filter(|&i| self.latest[i].is_some()).map(|i| IndividualId(i as u32)).collect()
    }
}

/// [`apply_update`] that also records the step in `log`.
pub fn apply_update_logged(
    params: &RtnParameters,
    table: &mut EmbeddingTable,
    log: &mut UpdateLog,
    source: IndividualId,
    relation: usize,
    target: IndividualId,
    endpoint: Endpoint,
) -> Result<(), ModelError> {
    let (who, other, dir) = endpoint.resolve(source, target);
    let event = UpdateEvent {
        individual: who,
        layer: 2 * relation + dir.index(),
        previous: log.latest[who.index()],
        counterpart_event: log.latest[other.index()],
        input: table.get(who).to_vec(),
        counterpart: table.get(other).to_vec(),
    };
    apply_update(params, table, source, relation, target, endpoint)?;
    log.latest[who.index()] = Some(log.events.len());
    log.events.push(event);
    Ok(())
}

pub fn class_logits(params: &RtnParameters, embedding: &[f64]) -> Result<Vec<f64>, ModelError> {
    let mut z = params.class_head.matvec(embedding)?;
    axpy(&mut z, 1.0, &params.class_bias);
    Ok(z)
}

pub fn relation_logits(params: &RtnParameters, source: &[f64], target: &[f64]) -> Result<Vec<f64>, ModelError> {
    let h = tensor::rntn_layer(source, target, &params.pair, params.config.activation)?;
    let mut z = params.relation_head.matvec(&h)?;
    axpy(&mut z, 1.0, &params.relation_bias);
    Ok(z)
}

fn rows(logits: &[f64]) -> Vec<[f64; CATEGORIES]> {
    logits
        .chunks_exact(CATEGORIES)
        .map(|c| {
            let p = tensor::softmax(c);
            [p[0], p[1], p[2]]
        })
        .collect()
}

/// One probability row `(p1, p0, p-1)` per class.
pub fn predict_classes(params: &RtnParameters, embedding: &[f64]) -> Result<Vec<[f64; CATEGORIES]>, ModelError> {
    Ok(rows(&class_logits(params, embedding)?))
}

/// One probability row per relation for the ordered pair `(source, target)`.
pub fn predict_relations(
    params: &RtnParameters,
    source: &[f64],
    target: &[f64],
) -> Result<Vec<[f64; CATEGORIES]>, ModelError> {
    Ok(rows(&relation_logits(params, source, target)?))
}

/// Upstream gradient on the logits of one prediction.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadGradient {
    Class { individual: IndividualId, logits: Vec<f64> },
    Relation { source: IndividualId, target: IndividualId, logits: Vec<f64> },
}

/// Gradients of the heads and of the update layers reached within the
/// truncation horizon. Embeddings older than the horizon are constants.
pub fn backward_pass(
    params: &RtnParameters,
    table: &EmbeddingTable,
    log: &UpdateLog,
    heads: &[HeadGradient],
) -> Result<RtnParameters, ModelError> {
    let mut grads = params.zeros_like();
    let d = params.config.d;
    let f = params.config.activation;
    let mut emb_grads: BTreeMap<IndividualId, Vec<f64>> = BTreeMap::new();

    for head in heads {
        match head {
            HeadGradient::Class { individual, logits } => {
                let e = table.get(*individual);
                grads.class_head.add_outer(1.0, logits, e);
                axpy(&mut grads.class_bias, 1.0, logits);
                let de = params.class_head.matvec_t(logits)?;
                axpy(emb_grads.entry(*individual).or_insert_with(|| vec![0.0; d]), 1.0, &de);
            }
            HeadGradient::Relation { source, target, logits } => {
                let (es, et) = (table.get(*source), table.get(*target));
                let h = tensor::rntn_layer(es, et, &params.pair, f)?;
                grads.relation_head.add_outer(1.0, logits, &h);
                axpy(&mut grads.relation_bias, 1.0, logits);
                let dh = params.relation_head.matvec_t(logits)?;
                let mut pg = PairLayerGrads {
                    x: vec![0.0; d],
                    y: vec![0.0; d],
                    weights: std::mem::replace(&mut grads.pair, PairLayer::zeros(0, 0, 0)),
                };
                tensor::rntn_layer_backward_into(es, et, &params.pair, f, &dh, &mut pg)?;
                grads.pair = pg.weights;
                axpy(emb_grads.entry(*source).or_insert_with(|| vec![0.0; d]), 1.0, &pg.x);
                axpy(emb_grads.entry(*target).or_insert_with(|| vec![0.0; d]), 1.0, &pg.y);
            }
        }
    }

    let horizon = params.config.truncation_horizon;
    for (who, g) in emb_grads {
        match log.latest.get(who.index()).copied().flatten() {
            Some(event) => backprop_event(params, log, event, &g, horizon, &mut grads)?,
            None if table.is_dirty(who) => return Err(ModelError::MissingHistory(who)),
            None => {}
        }
    }
    Ok(grads)
}

fn backprop_event(
    params: &RtnParameters,
    log: &UpdateLog,
    event: usize,
    upstream: &[f64],
    depth: usize,
    grads: &mut RtnParameters,
) -> Result<(), ModelError> {
    if depth == 0 {
        return Ok(());
    }
    let e = &log.events[event];
    let d = upstream.len();
    let (mut dx, mut dy) = (vec![0.0; d], vec![0.0; d]);
    tensor::rtn_update_backward_into(
        &e.input,
        &e.counterpart,
        &params.updates[e.layer],
        params.config.activation,
        upstream,
        &mut dx,
        &mut dy,
        &mut grads.updates[e.layer],
    )?;
    if let Some(prev) = e.previous {
        debug_assert_eq!(log.events[prev].individual, e.individual);
        backprop_event(params, log, prev, &dx, depth - 1, grads)?;
    }
    if let Some(cp) = e.counterpart_event {
        backprop_event(params, log, cp, &dy, depth - 1, grads)?;
    }
    Ok(())
}

pub fn describe(params: &RtnParameters) -> String {
    let (d, k) = (params.config.d, params.config.k_slices);
    format!(
        "d={d} k={k} classes={} relations={} update-layers={} trainable={}",
        params.n_classes,
        params.n_relations,
        params.updates.len(),
        params.n_trainable()
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::okb::{OkbSchema, ThreeValued};
    use crate::tensor::{grad_check, softmax_xent, softmax_xent_backward};

    fn schema(nc: usize, nr: usize) -> OkbSchema {
        OkbSchema::new((0..nc).map(|i| format!("ex:C{i}")).collect(), (0..nr).map(|i| format!("ex:r{i}")).collect())
            .unwrap()
    }

    fn cfg(s: &OkbSchema, seed: u64) -> RtnConfig {
        // feature-width embeddings keep hand-checked vectors short
        RtnConfig { seed, d: s.n_classes().max(1), ..RtnConfig::for_schema(s) }
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let s = schema(3, 3);
        let a = init_params(&s, cfg(&s, 4)).unwrap();
        assert_eq!(a, init_params(&s, cfg(&s, 4)).unwrap());
        assert_ne!(a, init_params(&s, cfg(&s, 5)).unwrap());
        assert_eq!(a.updates.len(), 6);
        assert!(a.projection.is_none());
        assert_eq!(RtnConfig::for_schema(&s).d, MIN_DEFAULT_DIM);
        assert!(init_params(&s, RtnConfig::for_schema(&s)).unwrap().projection.is_some());
        assert!(a.trainable().iter().flat_map(|t| t.iter()).all(|v| v.abs() <= 0.05));
        let z = init_params(&s, RtnConfig { init_scale: 0.0, ..cfg(&s, 4) }).unwrap();
        assert!(z.trainable().iter().flat_map(|t| t.iter()).all(|&v| v == 0.0));
        assert!(init_params(&OkbSchema::new(vec![], vec![]).unwrap(), cfg(&s, 1)).is_err());
        assert!(init_params(&s, RtnConfig { truncation_horizon: 0, ..cfg(&s, 1) }).is_err());
    }

    fn toy_graph() -> OkbGraph {
        let s = OkbSchema::new(vec!["ex:Woman".into(), "ex:Robot".into(), "ex:Human".into()], vec!["ex:knows".into()])
            .unwrap();
        let mut g = OkbGraph::new(s);
        let alice = g.intern("ex:alice").unwrap();
        let bob = g.intern("ex:bob").unwrap();
        g.intern("ex:loner").unwrap();
        g.set_class(alice, 0, ThreeValued::True).unwrap();
        g.set_class(alice, 1, ThreeValued::False).unwrap();
        g.set_class(bob, 2, ThreeValued::True).unwrap();
        g.add_edge(alice, 0, bob, ThreeValued::True).unwrap();
        g
    }

    #[test]
    fn embeddings_start_from_features() {
        let g = toy_graph();
        let p = init_params(g.schema(), cfg(g.schema(), 1)).unwrap();
        let t = init_embeddings(&g, &p).unwrap();
        assert_eq!(t.get(IndividualId(0)), &[1.0, -1.0, 0.0]);
        assert_eq!(t.get(IndividualId(2)), &[0.0, 0.0, 0.0]);
        assert!(!t.is_dirty(IndividualId(0)));

        let wide = RtnConfig { d: 7, ..cfg(g.schema(), 1) };
        let p = init_params(g.schema(), wide).unwrap();
        let t = init_embeddings(&g, &p).unwrap();
        assert_eq!(t.dim(), 7);
        assert!(t.get(IndividualId(2)).iter().all(|&v| v == 0.0));
        assert!(t.get(IndividualId(0)).iter().any(|&v| v != 0.0));
        assert_eq!(t, init_embeddings(&g, &init_params(g.schema(), wide).unwrap()).unwrap());
    }

    #[test]
    fn updates_are_one_sided_and_match_the_kernel() {
        let g = toy_graph();
        let p = init_params(g.schema(), RtnConfig { init_scale: 0.5, ..cfg(g.schema(), 3) }).unwrap();
        let mut t = init_embeddings(&g, &p).unwrap();
        let (a, b) = (IndividualId(0), IndividualId(1));
        let before_b = t.get(b).to_vec();
        let expected =
            tensor::rtn_update(t.get(a), t.get(b), p.update_layer(0, Direction::SourceSide), Activation::Tanh).unwrap();
        apply_update(&p, &mut t, a, 0, b, Endpoint::Source).unwrap();
        assert_eq!(t.get(a), &expected[..]);
        assert_eq!(t.get(b), &before_b[..]);
        assert!(t.is_dirty(a) && !t.is_dirty(b));

        let expected =
            tensor::rtn_update(t.get(b), t.get(a), p.update_layer(0, Direction::TargetSide), Activation::Tanh).unwrap();
        apply_update(&p, &mut t, a, 0, b, Endpoint::Target).unwrap();
        assert_eq!(t.get(b), &expected[..]);
    }

    #[test]
    fn zero_weights_leave_embeddings_alone() {
        let g = toy_graph();
        let p = init_params(g.schema(), RtnConfig { init_scale: 0.0, ..cfg(g.schema(), 3) }).unwrap();
        let init = init_embeddings(&g, &p).unwrap();
        let mut t = init.clone();
        for i in 0..50 {
            let ep = if i % 3 == 0 { Endpoint::Target } else { Endpoint::Source };
            apply_update(&p, &mut t, IndividualId(0), 0, IndividualId(1), ep).unwrap();
        }
        assert_eq!(t.values(), init.values());
        assert!(t.is_dirty(IndividualId(0)) && t.is_dirty(IndividualId(1)) && !t.is_dirty(IndividualId(2)));
    }

    #[test]
    fn predictions_are_distributions() {
        let g = toy_graph();
        let p = init_params(g.schema(), RtnConfig { init_scale: 0.0, ..cfg(g.schema(), 3) }).unwrap();
        for row in predict_classes(&p, &[1.0, -1.0, 0.0]).unwrap() {
            assert_eq!(row, [1.0 / 3.0; 3]);
        }
        for row in predict_relations(&p, &[1.0, -1.0, 0.0], &[0.0, 2.0, 1.0]).unwrap() {
            assert_eq!(row, [1.0 / 3.0; 3]);
        }
        let p = init_params(g.schema(), RtnConfig { init_scale: 2.0, ..cfg(g.schema(), 3) }).unwrap();
        let x = [0.3, -0.2, 0.9];
        let y = [-1.0, 0.1, 0.4];
        for row in predict_classes(&p, &x).unwrap().into_iter().chain(predict_relations(&p, &x, &y).unwrap()) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_ne!(predict_relations(&p, &x, &y).unwrap(), predict_relations(&p, &y, &x).unwrap());
        assert!(predict_classes(&p, &[1.0]).is_err());

        // hand-composed reference: pair layer, then affine map, then softmax
        let h = tensor::rntn_layer(&x, &y, &p.pair, Activation::Tanh).unwrap();
        let mut z = p.relation_head.matvec(&h).unwrap();
        for (zi, bi) in z.iter_mut().zip(&p.relation_bias) {
            *zi += bi;
        }
        let reference = tensor::softmax(&z[0..3]);
        let got = predict_relations(&p, &x, &y).unwrap()[0];
        for c in 0..3 {
            assert!((got[c] - reference[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn never_updated_individual_only_touches_heads() {
        let g = toy_graph();
        let p = init_params(g.schema(), RtnConfig { truncation_horizon: 1, init_scale: 0.3, ..cfg(g.schema(), 3) }).unwrap();
        let t = init_embeddings(&g, &p).unwrap();
        let log = UpdateLog::new(3);
        let grads = backward_pass(
            &p,
            &t,
            &log,
            &[HeadGradient::Class { individual: IndividualId(0), logits: vec![0.1; 9] }],
        )
        .unwrap();
        assert!(grads.updates.iter().all(|u| *u == UpdateLayer::zeros(3, 4)));
        assert!(grads.class_head.data().iter().any(|&v| v != 0.0));

        let zero = backward_pass(
            &p,
            &t,
            &log,
            &[HeadGradient::Relation { source: IndividualId(0), target: IndividualId(1), logits: vec![0.0; 3] }],
        )
        .unwrap();
        assert_eq!(zero, p.zeros_like());
    }

    #[test]
    fn dirty_entry_without_history_is_an_error() {
        let g = toy_graph();
        let p = init_params(g.schema(), cfg(g.schema(), 3)).unwrap();
        let mut t = init_embeddings(&g, &p).unwrap();
        apply_update(&p, &mut t, IndividualId(0), 0, IndividualId(1), Endpoint::Source).unwrap();
        let err = backward_pass(
            &p,
            &t,
            &UpdateLog::new(3),
            &[HeadGradient::Class { individual: IndividualId(0), logits: vec![1.0; 9] }],
        )
        .unwrap_err();
        assert_eq!(err, ModelError::MissingHistory(IndividualId(0)));
    }

    // Finite differences over the untruncated computation: a chain whose
    // depth never exceeds the horizon, recomputed from the features for
    // every perturbation.
    fn chain_loss(p: &RtnParameters, g: &OkbGraph, steps: &[(u32, u32, Endpoint)], targets: &[(u32, usize)]) -> f64 {
        let mut t = init_embeddings(g, p).unwrap();
        for &(s, o, ep) in steps {
            apply_update(p, &mut t, IndividualId(s), 0, IndividualId(o), ep).unwrap();
        }
        let mut loss = 0.0;
        for &(who, cat) in targets {
            let z = class_logits(p, t.get(IndividualId(who))).unwrap();
            loss += softmax_xent(&z[0..3], cat);
        }
        let z = relation_logits(p, t.get(IndividualId(0)), t.get(IndividualId(1))).unwrap();
        loss + softmax_xent(&z[0..3], 0)
    }

    fn flatten(p: &RtnParameters) -> Vec<f64> {
        p.trainable().concat()
    }

    fn unflatten(template: &RtnParameters, flat: &[f64]) -> RtnParameters {
        let mut p = template.clone();
        let mut off = 0;
        for t in p.trainable_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        p
    }

    fn chain_fixture(seed: u64, horizon: usize) -> (OkbGraph, RtnParameters) {
        let s = OkbSchema::new(vec!["ex:C".into()], vec!["ex:r".into()]).unwrap();
        let mut g = OkbGraph::new(s);
        for i in 0..3 {
            let who = g.intern(&format!("ex:i{i}")).unwrap();
            g.set_class(who, 0, if i == 1 { ThreeValued::False } else { ThreeValued::True }).unwrap();
        }
        let cfg = RtnConfig { d: 4, k_slices: 2, truncation_horizon: horizon, init_scale: 0.4, seed, activation: Activation::Tanh };
        (g.clone(), init_params(g.schema(), cfg).unwrap())
    }

    fn analytic(p: &RtnParameters, g: &OkbGraph, steps: &[(u32, u32, Endpoint)], targets: &[(u32, usize)]) -> Vec<f64> {
        let mut t = init_embeddings(g, p).unwrap();
        let mut log = UpdateLog::new(g.n_individuals());
        for &(s, o, ep) in steps {
            apply_update_logged(p, &mut t, &mut log, IndividualId(s), 0, IndividualId(o), ep).unwrap();
        }
        let mut heads = Vec::new();
        for &(who, cat) in targets {
            let z = class_logits(p, t.get(IndividualId(who))).unwrap();
            let mut logits = softmax_xent_backward(&z[0..3], cat, 1.0).unwrap();
            logits.resize(3 * p.n_classes, 0.0);
            heads.push(HeadGradient::Class { individual: IndividualId(who), logits });
        }
        let z = relation_logits(p, t.get(IndividualId(0)), t.get(IndividualId(1))).unwrap();
        heads.push(HeadGradient::Relation {
            source: IndividualId(0),
            target: IndividualId(1),
            logits: softmax_xent_backward(&z[0..3], 0, 1.0).unwrap(),
        });
        flatten(&backward_pass(p, &t, &log, &heads).unwrap())
    }

    #[test]
    fn depth_two_chain_matches_finite_differences() {
        // i2 -> i1 then i1 -> i0: i0's final embedding is two updates deep
        let steps = [(1, 2, Endpoint::Source), (0, 1, Endpoint::Source)];
        let targets = [(0, 0), (1, 2), (2, 1)];
        for seed in 0..20 {
            let (g, p) = chain_fixture(seed, 2);
            let a = analytic(&p, &g, &steps, &targets);
            let err = grad_check(|f| chain_loss(&unflatten(&p, f), &g, &steps, &targets), &flatten(&p), &a, 1e-5).unwrap();
            assert!(err < 1e-5, "seed {seed}: {err:e}");
        }
    }

    #[test]
    fn each_horizon_is_exact_on_chains_it_covers() {
        let one = vec![(0, 1, Endpoint::Source)];
        let three = vec![(2, 1, Endpoint::Target), (1, 2, Endpoint::Source), (0, 1, Endpoint::Source)];
        for (horizon, steps) in [(1, one), (3, three)] {
            let targets = [(0, 0), (1, 1)];
            for seed in 0..5 {
                let (g, p) = chain_fixture(seed, horizon);
                let a = analytic(&p, &g, &steps, &targets);
                let err =
                    grad_check(|f| chain_loss(&unflatten(&p, f), &g, &steps, &targets), &flatten(&p), &a, 1e-5).unwrap();
                assert!(err < 1e-5, "horizon {horizon} seed {seed}: {err:e}");
            }
        }
    }

    #[test]
    fn truncation_drops_older_steps() {
        // with horizon 1 only the last update of i0 carries gradient, so
        // layer 0 (source side) sees exactly one application
        let steps = [(1, 2, Endpoint::Source), (0, 1, Endpoint::Source)];
        let (g, p1) = chain_fixture(7, 1);
        let mut t = init_embeddings(&g, &p1).unwrap();
        let mut log = UpdateLog::new(3);
        for &(s, o, ep) in &steps {
            apply_update_logged(&p1, &mut t, &mut log, IndividualId(s), 0, IndividualId(o), ep).unwrap();
        }
        let z = class_logits(&p1, t.get(IndividualId(0))).unwrap();
        let heads = [HeadGradient::Class { individual: IndividualId(0), logits: softmax_xent_backward(&z, 0, 1.0).unwrap() }];
        let g1 = backward_pass(&p1, &t, &log, &heads).unwrap();

        let single = tensor::rtn_update_backward(
            &log.events[1].input,
            &log.events[1].counterpart,
            &p1.updates[0],
            Activation::Tanh,
            &p1.class_head.matvec_t(&heads[0].logits()).unwrap(),
        )
        .unwrap();
        assert_eq!(g1.updates[0], single.weights);

        let mut p2 = p1.clone();
        p2.config.truncation_horizon = 2;
        let g2 = backward_pass(&p2, &t, &log, &heads).unwrap();
        assert_ne!(g2.updates[0], g1.updates[0]);
    }

    impl HeadGradient {
        fn logits(&self) -> Vec<f64> {
            match self {
                HeadGradient::Class { logits, .. } | HeadGradient::Relation { logits, .. } => logits.clone(),
            }
        }
    }
}
