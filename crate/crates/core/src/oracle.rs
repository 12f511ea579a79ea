//! Ground-truth reasoning.
//!
//! [`closure`] computes the least fixpoint of the rule fragment with a
//! semi-naive worklist: every fact enters the queue once, and firing it only
//! joins against facts already present. [`naive_closure`] is the plain
//! generate-and-test fixpoint kept as a reference.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ingest::LinkedRule;
use crate::okb::{Direction, Fact, IndividualId, OkbError, OkbGraph, ThreeValued};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("inconsistent knowledge base: {cell} derived both true and false")]
    Inconsistent { cell: String },
    #[error("holdout of {requested} individuals needs more than {available} individuals")]
    HoldoutTooLarge { requested: usize, available: usize },
    #[error(transparent)]
    Graph(#[from] OkbError),
}

/// A knowledge base together with everything the rules entail.
#[derive(Debug, Clone)]
pub struct Closure {
    /// The input facts.
    pub base: OkbGraph,
    /// Input facts plus all derived facts.
    pub graph: OkbGraph,
    pub derivation_count: usize,
}

#[derive(Default)]
struct RuleIndex {
    sub_class: Vec<Vec<usize>>,
    disjoint: Vec<Vec<usize>>,
    domain: Vec<Vec<usize>>,
    range: Vec<Vec<usize>>,
    sub_property: Vec<Vec<usize>>,
    inverse: Vec<Vec<usize>>,
    symmetric: Vec<bool>,
    transitive: Vec<bool>,
}

impl RuleIndex {
    fn new(n_classes: usize, n_relations: usize, rules: &[LinkedRule]) -> Self {
        let mut ix = RuleIndex {
            sub_class: vec![Vec::new(); n_classes],
            disjoint: vec![Vec::new(); n_classes],
            domain: vec![Vec::new(); n_relations],
            range: vec![Vec::new(); n_relations],
            sub_property: vec![Vec::new(); n_relations],
            inverse: vec![Vec::new(); n_relations],
            symmetric: vec![false; n_relations],
            transitive: vec![false; n_relations],
        };
        for rule in rules {
            match *rule {
                LinkedRule::SubClassOf(c, d) => ix.sub_class[c].push(d),
                LinkedRule::DisjointWith(c, d) => {
                    ix.disjoint[c].push(d);
                    ix.disjoint[d].push(c);
                }
                LinkedRule::Domain(r, c) => ix.domain[r].push(c),
                LinkedRule::Range(r, c) => ix.range[r].push(c),
                LinkedRule::SubPropertyOf(r, s) => ix.sub_property[r].push(s),
                LinkedRule::InverseOf(r, s) => {
                    ix.inverse[r].push(s);
                    ix.inverse[s].push(r);
                }
                LinkedRule::Symmetric(r) => ix.symmetric[r] = true,
                LinkedRule::Transitive(r) => ix.transitive[r] = true,
            }
        }
        ix
    }
}

struct Deriver {
    graph: OkbGraph,
    queue: VecDeque<Fact>,
    added: usize,
}

impl Deriver {
    fn class(&mut self, individual: IndividualId, class: usize, value: ThreeValued) -> Result<(), OracleError> {
        let existing = self.graph.class_label(individual, class);
        if existing == value {
            return Ok(());
        }
        if existing != ThreeValued::Unknown {
            return Err(OracleError::Inconsistent { cell: self.graph.class_cell(individual, class) });
        }
        self.graph.set_class(individual, class, value)?;
        self.added += 1;
        if value == ThreeValued::True {
            self.queue.push_back(Fact::Class { individual, class, value });
        }
        Ok(())
    }

    fn edge(&mut self, source: IndividualId, relation: usize, target: IndividualId) -> Result<(), OracleError> {
        match self.graph.relation_label(source, relation, target) {
            ThreeValued::True => Ok(()),
            ThreeValued::False => Err(OracleError::Inconsistent {
                cell: self.graph.relation_cell(source, relation, target),
            }),
            ThreeValued::Unknown => {
                self.graph.add_edge(source, relation, target, ThreeValued::True)?;
                self.added += 1;
                self.queue.push_back(Fact::Relation { source, relation, target, value: ThreeValued::True });
                Ok(())
            }
        }
    }
}

/// Least fixpoint of `rules` over `graph`.
pub fn closure(graph: &OkbGraph, rules: &[LinkedRule]) -> Result<Closure, OracleError> {
    let schema = graph.schema();
    let ix = RuleIndex::new(schema.n_classes(), schema.n_relations(), rules);
    let mut d = Deriver { graph: graph.clone(), queue: VecDeque::new(), added: 0 };
    for fact in graph.facts() {
        match fact {
            Fact::Class { value: ThreeValued::True, .. } | Fact::Relation { value: ThreeValued::True, .. } => {
                d.queue.push_back(fact)
            }
            _ => {}
        }
    }

    while let Some(fact) = d.queue.pop_front() {
        match fact {
            Fact::Class { individual, class, .. } => {
                for &sup in &ix.sub_class[class] {
                    d.class(individual, sup, ThreeValued::True)?;
                }
                for &other in &ix.disjoint[class] {
                    d.class(individual, other, ThreeValued::False)?;
                }
            }
            Fact::Relation { source, relation, target, .. } => {
                for &c in &ix.domain[relation] {
                    d.class(source, c, ThreeValued::True)?;
                }
                for &c in &ix.range[relation] {
                    d.class(target, c, ThreeValued::True)?;
                }
                for &s in &ix.sub_property[relation] {
                    d.edge(source, s, target)?;
                }
                for &s in &ix.inverse[relation] {
                    d.edge(target, s, source)?;
                }
                if ix.symmetric[relation] {
                    d.edge(target, relation, source)?;
                }
                if ix.transitive[relation] {
                    // (source, target) joined with edges leaving target ...
                    let forward: Vec<IndividualId> = d
                        .graph
                        .adjacency(target)
                        .iter()
                        .filter(|inc| inc.relation == relation && inc.direction == Direction::SourceSide)
                        .map(|inc| inc.counterpart)
                        .collect();
                    for z in forward {
                        if d.graph.has_edge(target, relation, z) {
                            d.edge(source, relation, z)?;
                        }
                    }
                    // ... and with edges entering source
                    let backward: Vec<IndividualId> = d
                        .graph
                        .adjacency(source)
                        .iter()
                        .filter(|inc| inc.relation == relation && inc.direction == Direction::TargetSide)
                        .map(|inc| inc.counterpart)
                        .collect();
                    for w in backward {
                        if d.graph.has_edge(w, relation, source) {
                            d.edge(w, relation, target)?;
                        }
                    }
                }
            }
        }
    }

    Ok(Closure { base: graph.clone(), graph: d.graph, derivation_count: d.added })
}

/// Set-based view of a graph's facts, used to compare closures.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FactSet {
    pub classes: BTreeMap<(IndividualId, usize), i8>,
    pub edges: BTreeMap<(IndividualId, usize, IndividualId), i8>,
}

impl FactSet {
    pub fn of(graph: &OkbGraph) -> Self {
        let mut s = FactSet::default();
        for (i, c, v) in graph.class_facts() {
            s.classes.insert((i, c), v.as_i8());
        }
        for e in graph.edges() {
            s.edges.insert((e.source, e.relation, e.target), e.value.as_i8());
        }
        s
    }

    pub fn len(&self) -> usize {
        self.classes.len() + self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_subset(&self, other: &FactSet) -> bool {
        self.classes.iter().all(|(k, v)| other.classes.get(k) == Some(v))
            && self.edges.iter().all(|(k, v)| other.edges.get(k) == Some(v))
    }
}

/// Reference fixpoint: apply every rule to every fact until nothing changes.
pub fn naive_closure(graph: &OkbGraph, rules: &[LinkedRule]) -> Result<FactSet, OracleError> {
    let mut facts = FactSet::of(graph);
    let cell = |i: IndividualId, c: usize| graph.class_cell(i, c);
    loop {
        let mut new_classes: Vec<((IndividualId, usize), i8)> = Vec::new();
        let mut new_edges: BTreeSet<(IndividualId, usize, IndividualId)> = BTreeSet::new();
        let pos_classes: Vec<(IndividualId, usize)> =
            facts.classes.iter().filter(|(_, v)| **v == 1).map(|(k, _)| *k).collect();
        let pos_edges: Vec<(IndividualId, usize, IndividualId)> =
            facts.edges.iter().filter(|(_, v)| **v == 1).map(|(k, _)| *k).collect();
        for rule in rules {
            match *rule {
                LinkedRule::SubClassOf(c, d) => {
                    for &(i, k) in &pos_classes {
                        if k == c {
                            new_classes.push(((i, d), 1));
                        }
                    }
                }
                LinkedRule::DisjointWith(c, d) => {
                    for &(i, k) in &pos_classes {
                        if k == c {
                            new_classes.push(((i, d), -1));
                        }
                        if k == d {
                            new_classes.push(((i, c), -1));
                        }
                    }
                }
                LinkedRule::Domain(r, c) => {
                    for &(s, q, _) in &pos_edges {
                        if q == r {
                            new_classes.push(((s, c), 1));
                        }
                    }
                }
                LinkedRule::Range(r, c) => {
                    for &(_, q, t) in &pos_edges {
                        if q == r {
                            new_classes.push(((t, c), 1));
                        }
                    }
                }
                LinkedRule::SubPropertyOf(r, s) => {
                    for &(a, q, b) in &pos_edges {
                        if q == r {
                            new_edges.insert((a, s, b));
                        }
                    }
                }
                LinkedRule::InverseOf(r, s) => {
                    for &(a, q, b) in &pos_edges {
                        if q == r {
                            new_edges.insert((b, s, a));
                        }
                        if q == s {
                            new_edges.insert((b, r, a));
                        }
                    }
                }
                LinkedRule::Symmetric(r) => {
                    for &(a, q, b) in &pos_edges {
                        if q == r {
                            new_edges.insert((b, r, a));
                        }
                    }
                }
                LinkedRule::Transitive(r) => {
                    for &(a, q, b) in &pos_edges {
                        if q != r {
                            continue;
                        }
                        for &(b2, q2, c) in &pos_edges {
                            if q2 == r && b2 == b {
                                new_edges.insert((a, r, c));
                            }
                        }
                    }
                }
            }
        }
        let mut changed = false;
        for (key, v) in new_classes {
            match facts.classes.get(&key) {
                Some(&old) if old == v => {}
                Some(_) => return Err(OracleError::Inconsistent { cell: cell(key.0, key.1) }),
                None => {
                    facts.classes.insert(key, v);
                    changed = true;
                }
            }
        }
        for key in new_edges {
            match facts.edges.get(&key) {
                Some(1) => {}
                Some(_) => {
                    return Err(OracleError::Inconsistent { cell: graph.relation_cell(key.0, key.1, key.2) })
                }
                None => {
                    facts.edges.insert(key, 1);
                    changed = true;
                }
            }
        }
        if !changed {
            return Ok(facts);
        }
    }
}

/// A held-out cell with its ground-truth label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LabeledQuery {
    Class {
        individual: IndividualId,
        class: usize,
        label: i8,
    },
    Relation {
        source: IndividualId,
        relation: usize,
        target: IndividualId,
        label: i8,
    },
}

impl LabeledQuery {
    pub fn label(&self) -> ThreeValued {
        let v = match self {
            LabeledQuery::Class { label, .. } | LabeledQuery::Relation { label, .. } => *label,
        };
        ThreeValued::from_i8(v).unwrap_or(ThreeValued::Unknown)
    }

    pub fn involves(&self, who: IndividualId) -> bool {
        match *self {
            LabeledQuery::Class { individual, .. } => individual == who,
            LabeledQuery::Relation { source, target, .. } => source == who || target == who,
        }
    }
}

/// Hops around a held-out individual from which unknown relation cells are
/// drawn. Matches the store's default candidate radius.
pub const UNKNOWN_PAIR_HOPS: usize = 2;

#[derive(Debug, Clone)]
pub struct Split {
    /// Input facts of every individual (the full knowledge base as given).
    pub base: OkbGraph,
    /// Input facts not involving a held-out individual.
    pub train_input: OkbGraph,
    /// Closure facts not involving a held-out individual (training targets).
    pub train: OkbGraph,
    pub test_individuals: Vec<IndividualId>,
    pub validation_individuals: Vec<IndividualId>,
    pub test: Vec<LabeledQuery>,
    pub validation: Vec<LabeledQuery>,
}

impl Split {
    /// Individuals that are neither test nor validation.
    pub fn train_individuals(&self) -> Vec<IndividualId> {
        let held: HashSet<IndividualId> =
            self.test_individuals.iter().chain(&self.validation_individuals).copied().collect();
        self.base.individuals().filter(|i| !held.contains(i)).collect()
    }

    /// Input graph with the test individuals' facts removed.
    pub fn validation_input(&self) -> OkbGraph {
        let test: HashSet<IndividualId> = self.test_individuals.iter().copied().collect();
        self.base.filtered(|f| !fact_involves(f, &test))
    }
}

fn fact_involves(fact: &Fact, who: &HashSet<IndividualId>) -> bool {
    match *fact {
        Fact::Class { individual, .. } => who.contains(&individual),
        Fact::Relation { source, target, .. } => who.contains(&source) || who.contains(&target),
    }
}

/// Holds out `n_test` and `n_valid` individuals with all facts they are
/// involved in. Removed facts become labeled queries, padded with an equal
/// number of sampled cells the closure leaves unknown.
pub fn holdout_split(closed: &Closure, n_test: usize, n_valid: usize, seed: u64) -> Result<Split, OracleError> {
    let n = closed.graph.n_individuals();
    let requested = n_test + n_valid;
    if requested > 0 && requested >= n {
        return Err(OracleError::HoldoutTooLarge { requested, available: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = index::sample(&mut rng, n, requested).into_vec();
    let mut test: Vec<IndividualId> = picked[..n_test].iter().map(|&i| IndividualId(i as u32)).collect();
    let mut valid: Vec<IndividualId> = picked[n_test..].iter().map(|&i| IndividualId(i as u32)).collect();
    test.sort_unstable();
    valid.sort_unstable();

    let test_set: HashSet<IndividualId> = test.iter().copied().collect();
    let valid_set: HashSet<IndividualId> = valid.iter().copied().collect();
    // a fact between a test and a validation individual is scored as test
    let test_queries = queries_for(closed, &test_set, &HashSet::new(), &mut rng);
    let valid_queries = queries_for(closed, &valid_set, &test_set, &mut rng);
    Ok(Split::from_parts(closed, test, valid, test_queries, valid_queries))
}

impl Split {
    /// Rebuilds the training graphs around already chosen held-out
    /// individuals and their queries.
    pub fn from_parts(
        closed: &Closure,
        test_individuals: Vec<IndividualId>,
        validation_individuals: Vec<IndividualId>,
        test: Vec<LabeledQuery>,
        validation: Vec<LabeledQuery>,
    ) -> Split {
        let held: HashSet<IndividualId> = test_individuals.iter().chain(&validation_individuals).copied().collect();
        Split {
            base: closed.base.clone(),
            train_input: closed.base.filtered(|f| !fact_involves(f, &held)),
            train: closed.graph.filtered(|f| !fact_involves(f, &held)),
            test_individuals,
            validation_individuals,
            test,
            validation,
        }
    }
}

fn queries_for(
    closed: &Closure,
    who: &HashSet<IndividualId>,
    exclude: &HashSet<IndividualId>,
    rng: &mut ChaCha8Rng,
) -> Vec<LabeledQuery> {
    if who.is_empty() {
        return Vec::new();
    }
    let g = &closed.graph;
    let schema = g.schema();
    let mut members: Vec<IndividualId> = who.iter().copied().collect();
    members.sort_unstable();

    let mut class_facts = Vec::new();
    let mut class_unknown = Vec::new();
    for &x in &members {
        for c in 0..schema.n_classes() {
            match g.class_label(x, c) {
                ThreeValued::Unknown => class_unknown.push(LabeledQuery::Class { individual: x, class: c, label: 0 }),
                v => class_facts.push(LabeledQuery::Class { individual: x, class: c, label: v.as_i8() }),
            }
        }
    }

    let mut relation_facts = Vec::new();
    for e in g.edges() {
        let touches = who.contains(&e.source) || who.contains(&e.target);
        let excluded = exclude.contains(&e.source) || exclude.contains(&e.target);
        if touches && !excluded {
            relation_facts.push(LabeledQuery::Relation {
                source: e.source,
                relation: e.relation,
                target: e.target,
                label: e.value.as_i8(),
            });
        }
    }

    let mut relation_unknown = BTreeSet::new();
    for &x in &members {
        for y in closed.base.neighborhood(x, UNKNOWN_PAIR_HOPS) {
            if exclude.contains(&y) {
                continue;
            }
            for (s, t) in [(x, y), (y, x)] {
                for r in 0..schema.n_relations() {
                    if g.relation_label(s, r, t) == ThreeValued::Unknown {
                        relation_unknown.insert(LabeledQuery::Relation { source: s, relation: r, target: t, label: 0 });
                    }
                }
            }
        }
    }
    let relation_unknown: Vec<LabeledQuery> = relation_unknown.into_iter().collect();

    let mut out = class_facts;
    out.extend(sample_up_to(&class_unknown, out.len(), rng));
    let n_rel = relation_facts.len();
    out.extend(relation_facts);
    out.extend(sample_up_to(&relation_unknown, n_rel, rng));
    out
}

fn sample_up_to<T: Copy>(pool: &[T], k: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let k = k.min(pool.len());
    let mut picked = index::sample(rng, pool.len(), k).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| pool[i]).collect()
}

/// A corrupted relation assertion. Labeled -1 for training only: it is not
/// entailed false, merely absent from the closure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SyntheticNegative {
    pub source: IndividualId,
    pub relation: usize,
    pub target: IndividualId,
}

impl SyntheticNegative {
    pub fn label(&self) -> ThreeValued {
        ThreeValued::False
    }
}

const MAX_REJECTIONS: usize = 100;

/// Emits `ceil(ratio)` corruptions per positive, replacing the source or the
/// target (fair coin) by a uniformly drawn individual and rejecting pairs the
/// closure holds true.
pub fn sample_negatives(
    closed: &OkbGraph,
    positives: &[(IndividualId, usize, IndividualId)],
    ratio: f64,
    seed: u64,
) -> Vec<SyntheticNegative> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_negatives_with(closed, positives, ratio, &mut rng)
}

pub fn sample_negatives_with<R: Rng>(
    closed: &OkbGraph,
    positives: &[(IndividualId, usize, IndividualId)],
    ratio: f64,
    rng: &mut R,
) -> Vec<SyntheticNegative> {
    let n = closed.n_individuals();
    if ratio <= 0.0 || n == 0 {
        return Vec::new();
    }
    let per = ratio.ceil() as usize;
    let mut out = Vec::with_capacity(positives.len() * per);
    for &(s, r, t) in positives {
        for _ in 0..per {
            for _ in 0..MAX_REJECTIONS {
                let other = IndividualId(rng.random_range(0..n as u32));
                let (s2, t2) = if rng.random_bool(0.5) { (other, t) } else { (s, other) };
                if !closed.has_edge(s2, r, t2) {
                    out.push(SyntheticNegative { source: s2, relation: r, target: t2 });
                    break;
                }
            }
        }
    }
    out
}
