//! Synthetic knowledge bases with known rule structure, and the three-way
//! scoring used by training and evaluation.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ingest::{Rule, RuleSet, Triple, TripleDoc, RDF_TYPE};
use crate::okb::IndividualId;
use crate::oracle::LabeledQuery;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Template {
    /// Three generations of couples; parentOf/ancestorOf/childOf with
    /// Woman/Man/Human and Parent/Child.
    Family,
    /// Students, professors and courses linked by advisor/teaches/enrolledIn.
    University,
}

impl std::str::FromStr for Template {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "family" => Ok(Template::Family),
            "university" => Ok(Template::University),
            other => Err(format!("unknown template {other:?}, expected family or university")),
        }
    }
}

impl std::fmt::Display for Template {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Template::Family => "family",
            Template::University => "university",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub n_individuals: usize,
    /// Base rate per asserted class. For the family template the rates of
    /// Woman and Man are exclusive shares; for university they are role shares.
    pub class_profile: Vec<(String, f64)>,
    /// Mean out-degree per base relation.
    pub relation_profile: Vec<(String, f64)>,
    pub template: Template,
    pub seed: u64,
}

const FAM: &str = "fam:";
const UNI: &str = "uni:";

impl GenConfig {
    pub fn family(n_individuals: usize, seed: u64) -> Self {
        GenConfig {
            n_individuals,
            class_profile: vec![("fam:Woman".into(), 0.45), ("fam:Man".into(), 0.45)],
            relation_profile: vec![("fam:parentOf".into(), 2.0)],
            template: Template::Family,
            seed,
        }
    }

    pub fn university(n_individuals: usize, seed: u64) -> Self {
        GenConfig {
            n_individuals,
            class_profile: vec![
                ("uni:Student".into(), 0.6),
                ("uni:Professor".into(), 0.1),
                ("uni:Course".into(), 0.3),
            ],
            relation_profile: vec![
                ("uni:advisor".into(), 1.0),
                ("uni:teaches".into(), 2.0),
                ("uni:enrolledIn".into(), 3.0),
            ],
            template: Template::University,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, rate) in &self.class_profile {
            if !(0.0..=1.0).contains(rate) {
                return Err(format!("class rate for {name} is {rate}, outside [0, 1]"));
            }
        }
        for (name, degree) in &self.relation_profile {
            if !(*degree >= 0.0 && degree.is_finite()) {
                return Err(format!("mean degree for {name} is {degree}, must be finite and non-negative"));
            }
        }
        Ok(())
    }

    fn rate(&self, name: &str, default: f64) -> f64 {
        self.class_profile.iter().find(|(n, _)| n == name).map_or(default, |(_, r)| *r)
    }

    fn degree(&self, name: &str, default: f64) -> f64 {
        self.relation_profile.iter().find(|(n, _)| n == name).map_or(default, |(_, d)| *d)
    }
}

fn triple(s: &str, p: &str, o: &str) -> Triple {
    Triple { subject: s.into(), predicate: p.into(), object: o.into() }
}

fn name(prefix: &str, local: &str) -> String {
    format!("{prefix}{local}")
}

/// `floor(mean)` plus one more with probability `frac(mean)`.
fn draw_count(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    let base = mean.floor();
    base as usize + usize::from(rng.random_bool((mean - base).clamp(0.0, 1.0)))
}

pub fn generate(config: &GenConfig) -> (TripleDoc, RuleSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    match config.template {
        Template::Family => generate_family(config, &mut rng),
        Template::University => generate_university(config, &mut rng),
    }
}

pub fn family_rules() -> RuleSet {
    let n = |s: &str| name(FAM, s);
    RuleSet::new(vec![
        Rule::SubClassOf(n("Woman"), n("Human")),
        Rule::SubClassOf(n("Man"), n("Human")),
        Rule::DisjointWith(n("Woman"), n("Man")),
        Rule::SubPropertyOf(n("parentOf"), n("ancestorOf")),
        Rule::Transitive(n("ancestorOf")),
        Rule::InverseOf(n("parentOf"), n("childOf")),
        Rule::Domain(n("parentOf"), n("Parent")),
        Rule::Range(n("parentOf"), n("Child")),
    ])
}

pub fn university_rules() -> RuleSet {
    let n = |s: &str| name(UNI, s);
    RuleSet::new(vec![
        Rule::Domain(n("advisor"), n("Student")),
        Rule::Range(n("advisor"), n("Professor")),
        Rule::Domain(n("teaches"), n("Professor")),
        Rule::Range(n("teaches"), n("Course")),
        Rule::Domain(n("enrolledIn"), n("Student")),
        Rule::Range(n("enrolledIn"), n("Course")),
        Rule::SubClassOf(n("Student"), n("Person")),
        Rule::SubClassOf(n("Professor"), n("Person")),
        Rule::DisjointWith(n("Person"), n("Course")),
    ])
}

/// Splits `n` into generation sizes `s, s·m/2, rest` with `s` even, so that
/// couples of one generation have on average `m` children in the next.
fn generation_sizes(n: usize, m: f64) -> [usize; 3] {
    if m <= 0.0 {
        return [n, 0, 0];
    }
    let ratio = m / 2.0;
    let s = (n as f64 / (1.0 + ratio + ratio * ratio)).round() as usize;
    let s = (s & !1).max(2.min(n));
    let g2 = ((s as f64 * ratio).round() as usize).min(n - s);
    [s, g2, n - s - g2]
}

fn generate_family(config: &GenConfig, rng: &mut ChaCha8Rng) -> (TripleDoc, RuleSet) {
    let n = config.n_individuals;
    let mut doc = TripleDoc::default();
    if n == 0 {
        return (doc, family_rules());
    }
    let woman = config.rate("fam:Woman", 0.45);
    let man = config.rate("fam:Man", 0.45);
    let m = config.degree("fam:parentOf", 2.0);
    let people: Vec<String> = (0..n).map(|i| format!("{FAM}person{i:05}")).collect();

    for p in &people {
        let u: f64 = rng.random();
        if u < woman {
            doc.triples.push(triple(p, RDF_TYPE, "fam:Woman"));
        } else if u < woman + man {
            doc.triples.push(triple(p, RDF_TYPE, "fam:Man"));
        }
    }

    let sizes = generation_sizes(n, m);
    let mut start = 0;
    let mut generations = Vec::new();
    for s in sizes {
        generations.push((start..start + s).collect::<Vec<usize>>());
        start += s;
    }
    for g in 0..2 {
        let mut parents = generations[g].clone();
        parents.shuffle(rng);
        let couples: Vec<(usize, usize)> = parents.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        let children = &generations[g + 1];
        if couples.is_empty() || children.is_empty() {
            continue;
        }
        // one child per couple first, the rest uniformly
        let mut order: Vec<usize> = (0..children.len()).collect();
        order.shuffle(rng);
        for (slot, &child) in order.iter().enumerate() {
            let couple = if slot < couples.len() { slot } else { rng.random_range(0..couples.len()) };
            let (a, b) = couples[couple];
            for parent in [a, b] {
                doc.triples.push(triple(&people[parent], "fam:parentOf", &people[children[child]]));
            }
        }
    }
    (doc, family_rules())
}

fn generate_university(config: &GenConfig, rng: &mut ChaCha8Rng) -> (TripleDoc, RuleSet) {
    let n = config.n_individuals;
    let mut doc = TripleDoc::default();
    if n == 0 {
        return (doc, university_rules());
    }
    let shares = [
        config.rate("uni:Student", 0.6),
        config.rate("uni:Professor", 0.1),
        config.rate("uni:Course", 0.3),
    ];
    let total: f64 = shares.iter().sum::<f64>().max(f64::MIN_POSITIVE);
    let mut counts = shares.map(|s| ((s / total) * n as f64).floor() as usize);
    counts[0] += n - counts.iter().sum::<usize>();
    let labels = ["student", "professor", "course"];
    let classes = ["uni:Student", "uni:Professor", "uni:Course"];
    let mut members: [Vec<String>; 3] = Default::default();
    for (role, &count) in counts.iter().enumerate() {
        for i in 0..count {
            let who = format!("{UNI}{}{i:05}", labels[role]);
            if rng.random_bool(0.5) {
                doc.triples.push(triple(&who, RDF_TYPE, classes[role]));
            }
            members[role].push(who);
        }
    }
    let [students, professors, courses] = &members;
    let mut link = |sources: &[String], targets: &[String], relation: &str, mean: f64, rng: &mut ChaCha8Rng| {
        if targets.is_empty() {
            return;
        }
        for s in sources {
            let k = draw_count(rng, mean).min(targets.len());
            let picked = rand::seq::index::sample(rng, targets.len(), k).into_vec();
            for t in picked {
                doc.triples.push(triple(s, relation, &targets[t]));
            }
        }
    };
    link(students, professors, "uni:advisor", config.degree("uni:advisor", 1.0), rng);
    link(professors, courses, "uni:teaches", config.degree("uni:teaches", 2.0), rng);
    link(students, courses, "uni:enrolledIn", config.degree("uni:enrolledIn", 3.0), rng);
    (doc, university_rules())
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScoreError {
    #[error("prediction and gold cell sets differ: {0}")]
    CellMismatch(String),
    #[error("no cells to score")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Predicate {
    Class(usize),
    Relation(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum CellKey {
    Class(IndividualId, usize),
    Relation(IndividualId, usize, IndividualId),
}

fn key_of(q: &LabeledQuery) -> (CellKey, i8) {
    match *q {
        LabeledQuery::Class { individual, class, label } => (CellKey::Class(individual, class), label),
        LabeledQuery::Relation { source, relation, target, label } => {
            (CellKey::Relation(source, relation, target), label)
        }
    }
}

/// Counts over one predicate; "positive" means label 1.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PredicateMetrics {
    pub cells: usize,
    pub correct: usize,
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
}

impl PredicateMetrics {
    pub fn accuracy(&self) -> f64 {
        if self.cells == 0 {
            0.0
        } else {
            self.correct as f64 / self.cells as f64
        }
    }

    pub fn precision(&self) -> f64 {
        ratio(self.true_positive, self.true_positive + self.false_positive)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.true_positive, self.true_positive + self.false_negative)
    }

    /// Zero when precision and recall are both zero.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn gold_positives(&self) -> usize {
        self.true_positive + self.false_negative
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Metrics {
    pub per_predicate: BTreeMap<Predicate, PredicateMetrics>,
}

/// Unweighted means over one predicate kind.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MacroScores {
    /// Mean accuracy over predicates with at least one cell.
    pub accuracy: f64,
    /// Mean F1 over predicates with at least one gold positive.
    pub f1: f64,
    pub predicates: usize,
    pub predicates_with_positives: usize,
}

impl Metrics {
    fn macro_over(&self, want_class: bool) -> MacroScores {
        let selected: Vec<&PredicateMetrics> = self
            .per_predicate
            .iter()
            .filter(|(p, m)| matches!(p, Predicate::Class(_)) == want_class && m.cells > 0)
            .map(|(_, m)| m)
            .collect();
        let positives: Vec<&&PredicateMetrics> = selected.iter().filter(|m| m.gold_positives() > 0).collect();
        let mean = |xs: Vec<f64>| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
        MacroScores {
            accuracy: mean(selected.iter().map(|m| m.accuracy()).collect()),
            f1: mean(positives.iter().map(|m| m.f1()).collect()),
            predicates: selected.len(),
            predicates_with_positives: positives.len(),
        }
    }

    pub fn classes(&self) -> MacroScores {
        self.macro_over(true)
    }

    pub fn relations(&self) -> MacroScores {
        self.macro_over(false)
    }
}

/// Scores predicted labels against gold labels on the same cells.
pub fn score(predictions: &[LabeledQuery], gold: &[LabeledQuery]) -> Result<Metrics, ScoreError> {
    if gold.is_empty() && predictions.is_empty() {
        return Err(ScoreError::Empty);
    }
    let mut predicted: HashMap<CellKey, i8> = HashMap::with_capacity(predictions.len());
    for p in predictions {
        let (k, v) = key_of(p);
        if predicted.insert(k, v).is_some() {
            return Err(ScoreError::CellMismatch(format!("duplicate predicted cell {k:?}")));
        }
    }
    if predicted.len() != gold.len() {
        return Err(ScoreError::CellMismatch(format!("{} predicted cells, {} gold cells", predicted.len(), gold.len())));
    }
    let mut metrics = Metrics::default();
    for g in gold {
        let (k, truth) = key_of(g);
        let Some(&guess) = predicted.get(&k) else {
            return Err(ScoreError::CellMismatch(format!("no prediction for gold cell {k:?}")));
        };
        let pred = match k {
            CellKey::Class(_, c) => Predicate::Class(c),
            CellKey::Relation(_, r, _) => Predicate::Relation(r),
        };
        let m = metrics.per_predicate.entry(pred).or_default();
        m.cells += 1;
        m.correct += usize::from(guess == truth);
        match (truth == 1, guess == 1) {
            (true, true) => m.true_positive += 1,
            (false, true) => m.false_positive += 1,
            (true, false) => m.false_negative += 1,
            (false, false) => {}
        }
    }
    Ok(metrics)
}
