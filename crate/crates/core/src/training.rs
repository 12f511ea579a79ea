//! Two-phase training.
//!
//! Every epoch starts from the feature vectors. Phase 1 rewrites random
//! endpoints of random edges. Phase 2 then draws mini-batches mixing updated
//! and pristine individuals, scores their class rows and a few relation rows
//! around them, and takes one SGD step per batch until every updated
//! individual has been drawn once.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::evalgen::{score, ScoreError};
use crate::okb::{Direction, IndividualId, OkbGraph, ThreeValued};
use crate::oracle::{sample_negatives_with, Split, UNKNOWN_PAIR_HOPS};
use crate::rtn::{
    self, apply_update_logged, backward_pass, init_embeddings, init_params, EmbeddingTable, Endpoint, HeadGradient,
    ModelError, RtnConfig, RtnParameters, UpdateLog, CATEGORIES,
};
use crate::store::{self, materialize, predict_queries, CandidateRadius, LearnedBackend, StoreError};
use crate::tensor::{softmax_xent, softmax_xent_backward};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("phase-2 batch is empty: no individual is available for sampling")]
    EmptyBatch,
    #[error("every loss cell is masked")]
    AllMasked,
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize },
    #[error("target shapes do not match prediction rows: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Mini-batches of edges per phase-1 round. `None` picks enough for about
    /// two updates per individual.
    pub phase1_batches: Option<usize>,
    pub batch_size: usize,
    /// Share of each phase-2 batch drawn from updated individuals.
    pub balanced_fraction: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub negative_ratio: f64,
    pub seed: u64,
    /// Materialization rounds used to embed the validation graph.
    pub validation_rounds: usize,
    /// Train corrupted cells toward false instead of their closure label.
    pub negatives_as_false: bool,
    /// Add one pair from each individual's neighborhood to its relation samples.
    pub near_pairs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase1_batches: None,
            batch_size: 64,
            balanced_fraction: 0.5,
            learning_rate: 0.1,
            epochs: 400,
            negative_ratio: 1.0,
            seed: 0,
            validation_rounds: 2,
            negatives_as_false: false,
            near_pairs: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.balanced_fraction) {
            return Err(TrainError::Config(format!("balanced_fraction {} outside [0, 1]", self.balanced_fraction)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning_rate {} must be finite and non-negative", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.negative_ratio >= 0.0 && self.negative_ratio.is_finite()) {
            return Err(TrainError::Config(format!("negative_ratio {} must be finite and non-negative", self.negative_ratio)));
        }
        Ok(())
    }

    pub fn phase1_batches_for(&self, n_individuals: usize) -> usize {
        self.phase1_batches.unwrap_or_else(|| (2 * n_individuals).div_ceil(self.batch_size))
    }
}

/// Draws `phase1_batches · batch_size` edges with replacement and rewrites a
/// coin-chosen endpoint of each. Returns the individuals rewritten.
pub fn phase1_update_round<R: Rng>(
    graph: &OkbGraph,
    params: &RtnParameters,
    table: &mut EmbeddingTable,
    log: &mut UpdateLog,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<BTreeSet<IndividualId>, TrainError> {
    let edges: Vec<(IndividualId, usize, IndividualId)> =
        graph.positive_edges().map(|e| (e.source, e.relation, e.target)).collect();
    let mut updated = BTreeSet::new();
    if edges.is_empty() {
        return Ok(updated);
    }
    let draws = config.phase1_batches_for(graph.n_individuals()) * config.batch_size;
    for _ in 0..draws {
        let (s, r, t) = edges[rng.random_range(0..edges.len())];
        let endpoint = if rng.random_bool(0.5) { Endpoint::Source } else { Endpoint::Target };
        apply_update_logged(params, table, log, s, r, t, endpoint)?;
        updated.insert(if endpoint == Endpoint::Source { s } else { t });
    }
    Ok(updated)
}

/// Mean over unmasked cells of `-log p(target)`, per kind, summed. `None`
/// masks a cell. A kind with no unmasked cells contributes nothing.
pub fn loss(
    class_rows: &[[f64; CATEGORIES]],
    class_targets: &[Option<ThreeValued>],
    relation_rows: &[[f64; CATEGORIES]],
    relation_targets: &[Option<ThreeValued>],
) -> Result<f64, TrainError> {
    if class_rows.len() != class_targets.len() || relation_rows.len() != relation_targets.len() {
        return Err(TrainError::Shape(format!(
            "{} class rows for {} targets, {} relation rows for {} targets",
            class_rows.len(),
            class_targets.len(),
            relation_rows.len(),
            relation_targets.len()
        )));
    }
    let term = |rows: &[[f64; CATEGORIES]], targets: &[Option<ThreeValued>]| -> Option<f64> {
        let cells: Vec<f64> =
            rows.iter().zip(targets).filter_map(|(row, t)| t.map(|t| -row[t.category()].ln())).collect();
        (!cells.is_empty()).then(|| cells.iter().sum::<f64>() / cells.len() as f64)
    };
    match (term(class_rows, class_targets), term(relation_rows, relation_targets)) {
        (None, None) => Err(TrainError::AllMasked),
        (a, b) => Ok(a.unwrap_or(0.0) + b.unwrap_or(0.0)),
    }
}

/// Inputs shared by every phase-2 step of one training run.
pub struct Phase2Context<'a> {
    /// Closure facts of the training individuals.
    pub targets: &'a OkbGraph,
    /// Individuals that may appear in a batch.
    pub eligible: &'a [IndividualId],
    /// Per-individual neighbors in the input graph, for near-pair samples.
    pub neighborhoods: &'a [Vec<IndividualId>],
}

/// Which individuals are left to draw in the current round.
#[derive(Debug, Clone, Default)]
pub struct Phase2Pool {
    /// Updated individuals not yet drawn.
    pub unsampled: Vec<IndividualId>,
    /// Individuals not updated this round.
    pub pristine: Vec<IndividualId>,
}

impl Phase2Pool {
    pub fn new(eligible: &[IndividualId], updated: &BTreeSet<IndividualId>) -> Self {
        let (unsampled, pristine) = eligible.iter().partition(|i| updated.contains(i));
        Phase2Pool { unsampled, pristine }
    }

    pub fn is_exhausted(&self) -> bool {
        self.unsampled.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub gradients: RtnParameters,
    pub batch: Vec<IndividualId>,
    /// Set when no updated individual was available and the batch came from
    /// pristine individuals only.
    pub fell_back: bool,
}

fn draw_batch<R: Rng>(pool: &mut Phase2Pool, config: &TrainConfig, rng: &mut R) -> (Vec<IndividualId>, bool) {
    let b = config.batch_size;
    let want_updated = ((config.balanced_fraction * b as f64).ceil() as usize).min(b);
    let fell_back = pool.unsampled.is_empty() && want_updated > 0;
    let mut batch = Vec::with_capacity(b);
    let from_updated = want_updated.min(pool.unsampled.len());
    for _ in 0..from_updated {
        let i = rng.random_range(0..pool.unsampled.len());
        batch.push(pool.unsampled.swap_remove(i));
    }
    let rest = b - batch.len();
    let from_pristine = rest.min(pool.pristine.len());
    for i in index::sample(rng, pool.pristine.len(), from_pristine) {
        batch.push(pool.pristine[i]);
    }
    // top up from the updated pool when pristine individuals run short
    while batch.len() < b && !pool.unsampled.is_empty() {
        let i = rng.random_range(0..pool.unsampled.len());
        batch.push(pool.unsampled.swap_remove(i));
    }
    (batch, fell_back)
}

fn relation_row(targets: &OkbGraph, s: IndividualId, t: IndividualId) -> Vec<ThreeValued> {
    (0..targets.schema().n_relations()).map(|r| targets.relation_label(s, r, t)).collect()
}

/// Builds one balanced batch from `pool`, computes the joint loss and its
/// gradient. Does not change the parameters.
pub fn phase2_step<R: Rng>(
    ctx: &Phase2Context<'_>,
    params: &RtnParameters,
    table: &EmbeddingTable,
    log: &UpdateLog,
    pool: &mut Phase2Pool,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<StepOutput, TrainError> {
    let (batch, fell_back) = draw_batch(pool, config, rng);
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let targets = ctx.targets;
    let nc = targets.schema().n_classes();
    let nr = targets.schema().n_relations();

    let mut pairs: Vec<(IndividualId, IndividualId, Vec<ThreeValued>)> = Vec::new();
    for &x in &batch {
        let incident: Vec<(IndividualId, usize, IndividualId)> = targets
            .adjacency(x)
            .iter()
            .map(|inc| match inc.direction {
                Direction::SourceSide => (x, inc.relation, inc.counterpart),
                Direction::TargetSide => (inc.counterpart, inc.relation, x),
            })
            .filter(|&(s, r, t)| targets.relation_label(s, r, t) == ThreeValued::True)
            .collect();
        if !incident.is_empty() {
            let (s, r, t) = incident[rng.random_range(0..incident.len())];
            pairs.push((s, t, relation_row(targets, s, t)));
            for neg in sample_negatives_with(targets, &[(s, r, t)], config.negative_ratio, rng) {
                let mut row = relation_row(targets, neg.source, neg.target);
                if config.negatives_as_false {
                    row[neg.relation] = neg.label();
                }
                pairs.push((neg.source, neg.target, row));
            }
        }
        if config.near_pairs {
            let near = &ctx.neighborhoods[x.index()];
            if !near.is_empty() {
                let y = near[rng.random_range(0..near.len())];
                let (s, t) = if rng.random_bool(0.5) { (x, y) } else { (y, x) };
                pairs.push((s, t, relation_row(targets, s, t)));
            }
        }
    }

    let n_class_cells = batch.len() * nc;
    let n_relation_cells = pairs.len() * nr;
    if n_class_cells + n_relation_cells == 0 {
        return Err(TrainError::AllMasked);
    }
    let mut total = 0.0;
    let mut heads = Vec::with_capacity(batch.len() + pairs.len());
    if n_class_cells > 0 {
        let scale = 1.0 / n_class_cells as f64;
        let mut class_loss = 0.0;
        for &x in &batch {
            let logits = rtn::class_logits(params, table.get(x))?;
            let mut grad = Vec::with_capacity(logits.len());
            for c in 0..nc {
                let cat = targets.class_label(x, c).category();
                let row = &logits[CATEGORIES * c..CATEGORIES * (c + 1)];
                class_loss += softmax_xent(row, cat);
                grad.extend(softmax_xent_backward(row, cat, scale).map_err(ModelError::from)?);
            }
            heads.push(HeadGradient::Class { individual: x, logits: grad });
        }
        total += class_loss * scale;
    }
    if n_relation_cells > 0 {
        let scale = 1.0 / n_relation_cells as f64;
        let mut relation_loss = 0.0;
        for (s, t, row_targets) in &pairs {
            let logits = rtn::relation_logits(params, table.get(*s), table.get(*t))?;
            let mut grad = Vec::with_capacity(logits.len());
            for (r, target) in row_targets.iter().enumerate() {
                let row = &logits[CATEGORIES * r..CATEGORIES * (r + 1)];
                relation_loss += softmax_xent(row, target.category());
                grad.extend(softmax_xent_backward(row, target.category(), scale).map_err(ModelError::from)?);
            }
            heads.push(HeadGradient::Relation { source: *s, target: *t, logits: grad });
        }
        total += relation_loss * scale;
    }
    let gradients = backward_pass(params, table, log, &heads)?;
    Ok(StepOutput { loss: total, gradients, batch, fell_back })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
    pub updated: usize,
    pub validation_class_f1: Option<f64>,
    pub validation_relation_f1: Option<f64>,
    pub seconds: f64,
}

impl EpochStats {
    /// Mean of the available validation F1 values.
    pub fn selection_score(&self) -> Option<f64> {
        let vals: Vec<f64> = [self.validation_class_f1, self.validation_relation_f1].into_iter().flatten().collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose parameters were returned.
    pub best_epoch: Option<usize>,
    pub wall_seconds: f64,
    pub diagnostics: Vec<String>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl TrainReport {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:>5}  {:>10}  {:>6}  {:>8}  {:>9}  {:>9}  {:>8}\n",
            "epoch", "loss", "steps", "updated", "val-c-f1", "val-r-f1", "seconds"
        );
        for e in &self.epochs {
            let mark = if Some(e.epoch) == self.best_epoch { " *" } else { "" };
            let _ = writeln!(
                out,
                "{:>5}  {:>10.6}  {:>6}  {:>8}  {:>9}  {:>9}  {:>8.2}{mark}",
                e.epoch,
                e.mean_loss,
                e.steps,
                e.updated,
                opt(e.validation_class_f1),
                opt(e.validation_relation_f1),
                e.seconds
            );
        }
        let _ = writeln!(out, "wall time: {:.2}s", self.wall_seconds);
        out
    }

    /// Machine-readable form. Timings are left out so the file depends only
    /// on inputs and seed.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,steps,updated,validation_class_f1,validation_relation_f1,best\n");
        for e in &self.epochs {
            let f = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x}"));
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                e.epoch,
                e.mean_loss,
                e.steps,
                e.updated,
                f(e.validation_class_f1),
                f(e.validation_relation_f1),
                u8::from(Some(e.epoch) == self.best_epoch)
            );
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: RtnParameters,
    pub report: TrainReport,
}

/// Trains on `split.train_input` (features and edges) toward `split.train`
/// (closure labels), validating on the validation queries each epoch.
pub fn train(split: &Split, rtn_config: RtnConfig, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with(split, rtn_config, config, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with(
    split: &Split,
    rtn_config: RtnConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let started = Instant::now();
    let input = &split.train_input;
    let mut params = init_params(input.schema(), rtn_config)?;
    let mut report = TrainReport::default();
    if config.epochs == 0 {
        return Ok(TrainOutcome { params, report });
    }

    let eligible = split.train_individuals();
    let neighborhoods: Vec<Vec<IndividualId>> = input
        .individuals()
        .map(|i| if config.near_pairs { input.neighborhood(i, UNKNOWN_PAIR_HOPS) } else { Vec::new() })
        .collect();
    let ctx = Phase2Context { targets: &split.train, eligible: &eligible, neighborhoods: &neighborhoods };
    let validation_graph = split.validation_input();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<(f64, usize, RtnParameters)> = None;
    for epoch in 0..config.epochs {
        let epoch_start = Instant::now();
        let mut table = init_embeddings(input, &params)?;
        let mut log = UpdateLog::new(input.n_individuals());
        let updated = phase1_update_round(input, &params, &mut table, &mut log, config, &mut rng)?;
        let mut pool = Phase2Pool::new(ctx.eligible, &updated);
        if pool.unsampled.is_empty() {
            // nothing was rewritten: one pass over every eligible individual
            pool.unsampled = std::mem::take(&mut pool.pristine);
            if epoch == 0 {
                report.diagnostics.push("no individual was updated in phase 1; phase 2 draws pristine individuals only".into());
            }
        }

        let mut losses = Vec::new();
        while !pool.is_exhausted() {
            let out = phase2_step(&ctx, &params, &table, &log, &mut pool, config, &mut rng)?;
            if !out.loss.is_finite() || !out.gradients.is_finite() {
                return Err(TrainError::NonFinite { epoch, step: losses.len() });
            }
            params.add_scaled(-config.learning_rate, &out.gradients);
            losses.push(out.loss);
        }

        let (class_f1, relation_f1) = if split.validation.is_empty() {
            (None, None)
        } else {
            let table = materialize(&validation_graph, &params, config.validation_rounds, config.seed)?;
            let backend = LearnedBackend::new(validation_graph.clone(), params.clone(), table, CandidateRadius::default())?;
            let predicted = predict_queries(&backend, &split.validation);
            let m = score(&predicted, &split.validation)?;
            let (c, r) = (m.classes(), m.relations());
            ((c.predicates_with_positives > 0).then_some(c.f1), (r.predicates_with_positives > 0).then_some(r.f1))
        };
        let mean_loss = if losses.is_empty() { 0.0 } else { losses.iter().sum::<f64>() / losses.len() as f64 };
        let stats = EpochStats {
            epoch,
            mean_loss,
            steps: losses.len(),
            updated: updated.len(),
            validation_class_f1: class_f1,
            validation_relation_f1: relation_f1,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        // higher validation F1 wins; without validation, lower loss wins
        let key = stats.selection_score().unwrap_or(-mean_loss);
        if best.as_ref().is_none_or(|(k, _, _)| key > *k) {
            best = Some((key, epoch, params.clone()));
        }
        on_epoch(&stats);
        report.epochs.push(stats);
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch ran");
    report.best_epoch = Some(best_epoch);
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok(TrainOutcome { params: best_params, report })
}

/// Materializes `graph` and scores the learned backend on `queries`.
pub fn evaluate(
    graph: &OkbGraph,
    params: &RtnParameters,
    queries: &[crate::oracle::LabeledQuery],
    rounds: usize,
    seed: u64,
    radius: CandidateRadius,
) -> Result<crate::evalgen::Metrics, TrainError> {
    let table = store::materialize(graph, params, rounds, seed)?;
    let backend = LearnedBackend::new(graph.clone(), params.clone(), table, radius)?;
    Ok(score(&predict_queries(&backend, queries), queries)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalgen::{generate, GenConfig};
    use crate::ingest::{build_graph, link_rules, parse_ntriples_str, parse_rules_str, schema_from};
    use crate::oracle::{closure, holdout_split};
    use crate::store::encode_weights;

    fn family_split(n: usize, seed: u64, n_test: usize, n_valid: usize) -> Split {
        let (doc, rules) = generate(&GenConfig::family(n, seed));
        let schema = schema_from(&doc, &rules).unwrap();
        let (g, _) = build_graph(&doc, &schema).unwrap();
        let (linked, _) = link_rules(&rules, &schema);
        holdout_split(&closure(&g, &linked).unwrap(), n_test, n_valid, seed).unwrap()
    }

    fn rows(p: &[[f64; 3]]) -> Vec<[f64; 3]> {
        p.to_vec()
    }

    #[test]
    fn loss_examples() {
        let uniform = [[1.0 / 3.0; 3]; 4];
        let t = [Some(ThreeValued::True), Some(ThreeValued::False)];
        let l = loss(&uniform[..2], &t, &uniform[2..], &t).unwrap();
        assert!((l - 2.0 * 3f64.ln()).abs() < 1e-12);

        let onehot = rows(&[[1.0, 0.0, 0.0], [0.2, 0.3, 0.5]]);
        assert_eq!(loss(&onehot, &[Some(ThreeValued::True), None], &[], &[]).unwrap(), 0.0);
        assert!(matches!(loss(&onehot, &[None, None], &[], &[]), Err(TrainError::AllMasked)));

        // class cells: -ln 0.5, -ln 0.25; relation cell: -ln 0.8
        let class_rows = rows(&[[0.5, 0.25, 0.25], [0.25, 0.25, 0.5]]);
        let relation_rows = rows(&[[0.1, 0.8, 0.1]]);
        let l = loss(
            &class_rows,
            &[Some(ThreeValued::True), Some(ThreeValued::Unknown)],
            &relation_rows,
            &[Some(ThreeValued::Unknown)],
        )
        .unwrap();
        let expected = (-(0.5f64.ln()) - 0.25f64.ln()) / 2.0 - 0.8f64.ln();
        assert!((l - expected).abs() < 1e-12);
    }

    #[test]
    fn phase1_examples() {
        let split = family_split(60, 2, 0, 0);
        let g = &split.train_input;
        let zero = init_params(g.schema(), RtnConfig { init_scale: 0.0, ..RtnConfig::for_schema(g.schema()) }).unwrap();
        let init = init_embeddings(g, &zero).unwrap();

        let mut t = init.clone();
        let cfg = TrainConfig { phase1_batches: Some(0), ..TrainConfig::default() };
        let set = phase1_update_round(g, &zero, &mut t, &mut UpdateLog::new(60), &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(set.is_empty());
        assert_eq!(t, init);

        let cfg = TrainConfig { phase1_batches: Some(2), batch_size: 8, ..TrainConfig::default() };
        let mut log = UpdateLog::new(60);
        let set = phase1_update_round(g, &zero, &mut t, &mut log, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(!set.is_empty());
        assert_eq!(set.iter().copied().collect::<Vec<_>>(), log.updated());
        assert_eq!(t.values(), init.values());

        let mut t2 = init.clone();
        let set2 = phase1_update_round(g, &zero, &mut t2, &mut UpdateLog::new(60), &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(set, set2);
    }

    #[test]
    fn phase2_falls_back_and_terminates() {
        let split = family_split(60, 2, 0, 0);
        let g = &split.train_input;
        let params = init_params(g.schema(), RtnConfig::for_schema(g.schema())).unwrap();
        let table = init_embeddings(g, &params).unwrap();
        let log = UpdateLog::new(60);
        let eligible = split.train_individuals();
        let neighborhoods: Vec<_> = g.individuals().map(|i| g.neighborhood(i, 2)).collect();
        let ctx = Phase2Context { targets: &split.train, eligible: &eligible, neighborhoods: &neighborhoods };
        let cfg = TrainConfig { balanced_fraction: 1.0, batch_size: 8, ..TrainConfig::default() };
        let mut pool = Phase2Pool::new(&eligible, &BTreeSet::new());
        let out = phase2_step(&ctx, &params, &table, &log, &mut pool, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(out.fell_back);
        assert_eq!(out.batch.len(), 8);
        assert!(out.loss.is_finite() && out.loss > 0.0);

        let updated: BTreeSet<_> = eligible.iter().copied().take(20).collect();
        let mut pool = Phase2Pool::new(&eligible, &updated);
        let mut steps = 0;
        let mut seen = BTreeSet::new();
        while !pool.is_exhausted() {
            let out = phase2_step(&ctx, &params, &table, &log, &mut pool, &cfg, &mut ChaCha8Rng::seed_from_u64(steps)).unwrap();
            seen.extend(out.batch);
            steps += 1;
            assert!(steps <= 20);
        }
        assert!(updated.is_subset(&seen));

        let mut empty = Phase2Pool::default();
        assert!(matches!(
            phase2_step(&ctx, &params, &table, &log, &mut empty, &cfg, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(TrainError::EmptyBatch)
        ));
    }

    #[test]
    fn phase2_loss_matches_hand_computation() {
        // two individuals, one class, no relations: with zero weights every
        // row is uniform, so the loss is ln 3
        let doc = parse_ntriples_str("ex:a rdf:type ex:C .\nex:b rdf:type ex:D .\n");
        let rules = parse_rules_str("disjointWith ex:C ex:D\n");
        let schema = schema_from(&doc, &rules).unwrap();
        let (g, _) = build_graph(&doc, &schema).unwrap();
        let (linked, _) = link_rules(&rules, &schema);
        let split = holdout_split(&closure(&g, &linked).unwrap(), 0, 0, 0).unwrap();
        let mut params = init_params(g.schema(), RtnConfig { init_scale: 0.0, ..RtnConfig::for_schema(g.schema()) }).unwrap();
        // bias the class head so p(true) for ex:C is 0.5 and the rest split evenly
        params.class_bias[0] = 2f64.ln();
        let table = init_embeddings(&split.train_input, &params).unwrap();
        let eligible = split.train_individuals();
        let neighborhoods = vec![Vec::new(); 2];
        let ctx = Phase2Context { targets: &split.train, eligible: &eligible, neighborhoods: &neighborhoods };
        let cfg = TrainConfig { batch_size: 2, balanced_fraction: 0.0, ..TrainConfig::default() };
        let mut pool = Phase2Pool::new(&eligible, &BTreeSet::new());
        let out = phase2_step(&ctx, &params, &table, &UpdateLog::new(2), &mut pool, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // cells: C(a)=1 -> p 0.5; D(a)=-1 -> 1/3; C(b)=-1 -> 0.25; D(b)=1 -> 1/3
        let expected = -(0.5f64.ln() + (1.0f64 / 3.0).ln() + 0.25f64.ln() + (1.0f64 / 3.0).ln()) / 4.0;
        assert!((out.loss - expected).abs() < 1e-12, "{} vs {expected}", out.loss);
    }

    #[test]
    fn one_small_step_lowers_the_batch_loss() {
        let split = family_split(60, 4, 0, 0);
        let g = &split.train_input;
        let params = init_params(g.schema(), RtnConfig { init_scale: 0.3, ..RtnConfig::for_schema(g.schema()) }).unwrap();
        let mut table = init_embeddings(g, &params).unwrap();
        let mut log = UpdateLog::new(60);
        let cfg = TrainConfig { batch_size: 16, ..TrainConfig::default() };
        let updated = phase1_update_round(g, &params, &mut table, &mut log, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let eligible = split.train_individuals();
        let neighborhoods: Vec<_> = g.individuals().map(|i| g.neighborhood(i, 2)).collect();
        let ctx = Phase2Context { targets: &split.train, eligible: &eligible, neighborhoods: &neighborhoods };
        let mut pool = Phase2Pool::new(&eligible, &updated);
        let out = phase2_step(&ctx, &params, &table, &log, &mut pool, &cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();

        // replay the same batch with stepped parameters: same rng seed and pool
        let mut stepped = params.clone();
        stepped.add_scaled(-1e-4, &out.gradients);
        let replay = |p: &RtnParameters| {
            let mut t = init_embeddings(g, p).unwrap();
            let mut l = UpdateLog::new(60);
            phase1_update_round(g, p, &mut t, &mut l, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            let mut pool = Phase2Pool::new(&eligible, &updated);
            phase2_step(&ctx, p, &t, &l, &mut pool, &cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap().loss
        };
        assert_eq!(replay(&params), out.loss);
        assert!(replay(&stepped) < out.loss);
    }

    #[test]
    fn zero_epochs_and_zero_rate_keep_initial_parameters() {
        let split = family_split(80, 1, 5, 5);
        let rc = RtnConfig { seed: 3, ..RtnConfig::for_schema(split.train.schema()) };
        let initial = init_params(split.train.schema(), rc).unwrap();
        let out = train(&split, rc, &TrainConfig { epochs: 0, ..TrainConfig::default() }).unwrap();
        assert_eq!(out.params, initial);
        assert!(out.report.epochs.is_empty());
        let out = train(&split, rc, &TrainConfig { epochs: 2, learning_rate: 0.0, ..TrainConfig::default() }).unwrap();
        assert_eq!(encode_weights(&out.params), encode_weights(&initial));
        for e in &out.report.epochs {
            for f in [e.validation_class_f1, e.validation_relation_f1].into_iter().flatten() {
                assert!((0.0..=1.0).contains(&f));
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let split = family_split(80, 1, 5, 5);
        let rc = RtnConfig { seed: 3, ..RtnConfig::for_schema(split.train.schema()) };
        let cfg = TrainConfig { epochs: 3, seed: 11, ..TrainConfig::default() };
        let a = train(&split, rc, &cfg).unwrap();
        let b = train(&split, rc, &cfg).unwrap();
        assert_eq!(encode_weights(&a.params), encode_weights(&b.params));
        assert_eq!(a.report.to_csv(), b.report.to_csv());
        assert_eq!(a.report.epochs.len(), 3);
    }

    #[test]
    fn single_batch_overfit() {
        // 10 individuals and one rule; the whole population fits in one batch
        let mut facts = String::new();
        for i in 0..10 {
            if i % 2 == 0 {
                facts.push_str(&format!("ex:p{i} rdf:type ex:Woman .\n"));
            } else {
                facts.push_str(&format!("ex:p{i} rdf:type ex:Robot .\n"));
            }
        }
        let doc = parse_ntriples_str(&facts);
        let rules = parse_rules_str("subClassOf ex:Woman ex:Human\n");
        let schema = schema_from(&doc, &rules).unwrap();
        let (g, _) = build_graph(&doc, &schema).unwrap();
        let (linked, _) = link_rules(&rules, &schema);
        let split = holdout_split(&closure(&g, &linked).unwrap(), 0, 0, 0).unwrap();
        let rc = RtnConfig { seed: 1, ..RtnConfig::for_schema(g.schema()) };
        let mut params = init_params(g.schema(), rc).unwrap();
        let table = init_embeddings(&split.train_input, &params).unwrap();
        let eligible = split.train_individuals();
        let neighborhoods = vec![Vec::new(); 10];
        let ctx = Phase2Context { targets: &split.train, eligible: &eligible, neighborhoods: &neighborhoods };
        let cfg = TrainConfig { batch_size: 10, balanced_fraction: 0.0, learning_rate: 0.5, ..TrainConfig::default() };
        let mut first = None;
        let mut last = 0.0;
        for step in 0..300 {
            let mut pool = Phase2Pool::new(&eligible, &BTreeSet::new());
            let out =
                phase2_step(&ctx, &params, &table, &UpdateLog::new(10), &mut pool, &cfg, &mut ChaCha8Rng::seed_from_u64(step)).unwrap();
            first.get_or_insert(out.loss);
            last = out.loss;
            params.add_scaled(-cfg.learning_rate, &out.gradients);
        }
        assert!(last < 0.1 * first.unwrap(), "{last} vs {first:?}");
    }
}
