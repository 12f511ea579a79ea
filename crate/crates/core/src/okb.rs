//! In-memory ontological knowledge base.
//!
//! Individuals are vertices of a labeled directed multigraph. Every vertex
//! carries a three-valued incidence vector over the classes of the schema,
//! and every binary fact is a directed edge labeled with its relation.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OkbError {
    #[error("invalid individual name {0:?}")]
    InvalidName(String),
    #[error("unknown individual {0}")]
    UnknownIndividual(String),
    #[error("class index {index} out of bounds for {len} classes")]
    ClassOutOfBounds { index: usize, len: usize },
    #[error("relation index {index} out of bounds for {len} relations")]
    RelationOutOfBounds { index: usize, len: usize },
    #[error("contradiction: {cell} is already {existing}, cannot store {new}")]
    Contradiction {
        cell: String,
        existing: ThreeValued,
        new: ThreeValued,
    },
    #[error("unknown is never stored explicitly ({0})")]
    UnknownValue(String),
    #[error("duplicate {kind} name {name:?} in schema")]
    DuplicateName { kind: &'static str, name: String },
}

/// Dense index of an interned individual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IndividualId(pub u32);

impl IndividualId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for IndividualId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Truth value under the open-world assumption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ThreeValued {
    True,
    Unknown,
    False,
}

impl ThreeValued {
    pub fn from_i8(v: i8) -> Option<Self> {
        match v {
            1 => Some(Self::True),
            0 => Some(Self::Unknown),
            -1 => Some(Self::False),
            _ => None,
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Self::True => 1,
            Self::Unknown => 0,
            Self::False => -1,
        }
    }

    /// Position of this value in a prediction row, ordered (1, 0, -1).
    pub fn category(self) -> usize {
        match self {
            Self::True => 0,
            Self::Unknown => 1,
            Self::False => 2,
        }
    }

    pub fn from_category(c: usize) -> Self {
        match c {
            0 => Self::True,
            1 => Self::Unknown,
            _ => Self::False,
        }
    }

    pub fn negate(self) -> Self {
        match self {
            Self::True => Self::False,
            Self::Unknown => Self::Unknown,
            Self::False => Self::True,
        }
    }
}

impl fmt::Display for ThreeValued {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_i8())
    }
}

/// Ordered class and relation names. Positions define vector components.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OkbSchema {
    classes: Vec<String>,
    relations: Vec<String>,
    class_index: HashMap<String, usize>,
    relation_index: HashMap<String, usize>,
}

impl OkbSchema {
    pub fn new(classes: Vec<String>, relations: Vec<String>) -> Result<Self, OkbError> {
        let mut class_index = HashMap::with_capacity(classes.len());
        for (i, c) in classes.iter().enumerate() {
            if class_index.insert(c.clone(), i).is_some() {
                return Err(OkbError::DuplicateName { kind: "class", name: c.clone() });
            }
        }
        let mut relation_index = HashMap::with_capacity(relations.len());
        for (i, r) in relations.iter().enumerate() {
            if relation_index.insert(r.clone(), i).is_some() {
                return Err(OkbError::DuplicateName { kind: "relation", name: r.clone() });
            }
        }
        Ok(Self { classes, relations, class_index, relation_index })
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn class(&self, name: &str) -> Option<usize> {
        self.class_index.get(name).copied()
    }

    pub fn relation(&self, name: &str) -> Option<usize> {
        self.relation_index.get(name).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty() && self.relations.is_empty()
    }

    /// SHA-256 over the ordered class and relation names.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"classes\0");
        for c in &self.classes {
            h.update((c.len() as u64).to_le_bytes());
            h.update(c.as_bytes());
        }
        h.update(b"relations\0");
        for r in &self.relations {
            h.update((r.len() as u64).to_le_bytes());
            h.update(r.as_bytes());
        }
        h.finalize().into()
    }
}

/// Which end of an edge an adjacency entry describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// The owner of the adjacency list is the edge source.
    SourceSide,
    /// The owner of the adjacency list is the edge target.
    TargetSide,
}

impl Direction {
    pub fn index(self) -> usize {
        match self {
            Self::SourceSide => 0,
            Self::TargetSide => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Incidence {
    pub relation: usize,
    pub direction: Direction,
    pub counterpart: IndividualId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Edge {
    pub source: IndividualId,
    pub relation: usize,
    pub target: IndividualId,
    pub value: ThreeValued,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Fact {
    Class {
        individual: IndividualId,
        class: usize,
        value: ThreeValued,
    },
    Relation {
        source: IndividualId,
        relation: usize,
        target: IndividualId,
        value: ThreeValued,
    },
}

/// Bijection between individual names and dense ids.
#[derive(Debug, Clone, Default)]
pub struct Interner {
    names: Vec<String>,
    ids: HashMap<String, IndividualId>,
}

impl Interner {
    pub fn intern(&mut self, name: &str) -> Result<IndividualId, OkbError> {
        if name.trim().is_empty() {
            return Err(OkbError::InvalidName(name.to_string()));
        }
        if let Some(&id) = self.ids.get(name) {
            return Ok(id);
        }
        let id = IndividualId(self.names.len() as u32);
        self.names.push(name.to_string());
        self.ids.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn get(&self, name: &str) -> Option<IndividualId> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: IndividualId) -> Option<&str> {
        self.names.get(id.index()).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Labeled directed multigraph with three-valued class labels.
#[derive(Debug, Clone)]
pub struct OkbGraph {
    schema: OkbSchema,
    interner: Interner,
    /// Row-major `individuals x classes`, values in {-1, 0, 1}.
    labels: Vec<i8>,
    edges: Vec<Edge>,
    edge_index: HashMap<(IndividualId, usize, IndividualId), usize>,
    adjacency: Vec<Vec<Incidence>>,
}

impl OkbGraph {
    pub fn new(schema: OkbSchema) -> Self {
        Self {
            schema,
            interner: Interner::default(),
            labels: Vec::new(),
            edges: Vec::new(),
            edge_index: HashMap::new(),
            adjacency: Vec::new(),
        }
    }

    /// An empty graph over the same schema and the same interned individuals.
    pub fn empty_like(&self) -> Self {
        let mut g = Self::new(self.schema.clone());
        g.interner = self.interner.clone();
        g.labels = vec![0; self.labels.len()];
        g.adjacency = vec![Vec::new(); self.adjacency.len()];
        g
    }

    pub fn schema(&self) -> &OkbSchema {
        &self.schema
    }

    pub fn interner(&self) -> &Interner {
        &self.interner
    }

    pub fn n_individuals(&self) -> usize {
        self.interner.len()
    }

    pub fn individuals(&self) -> impl Iterator<Item = IndividualId> + '_ {
        (0..self.n_individuals() as u32).map(IndividualId)
    }

    pub fn name(&self, id: IndividualId) -> &str {
        self.interner.name(id).unwrap_or("<unknown>")
    }

    pub fn lookup(&self, name: &str) -> Option<IndividualId> {
        self.interner.get(name)
    }

    pub fn intern(&mut self, name: &str) -> Result<IndividualId, OkbError> {
        let id = self.interner.intern(name)?;
        if id.index() == self.adjacency.len() {
            self.adjacency.push(Vec::new());
            self.labels.extend(std::iter::repeat_n(0, self.schema.n_classes()));
        }
        Ok(id)
    }

    fn check_individual(&self, id: IndividualId) -> Result<(), OkbError> {
        if id.index() < self.n_individuals() {
            Ok(())
        } else {
            Err(OkbError::UnknownIndividual(id.to_string()))
        }
    }

    fn check_class(&self, class: usize) -> Result<(), OkbError> {
        let len = self.schema.n_classes();
        if class < len {
            Ok(())
        } else {
            Err(OkbError::ClassOutOfBounds { index: class, len })
        }
    }

    fn check_relation(&self, relation: usize) -> Result<(), OkbError> {
        let len = self.schema.n_relations();
        if relation < len {
            Ok(())
        } else {
            Err(OkbError::RelationOutOfBounds { index: relation, len })
        }
    }

    pub fn add_fact(&mut self, fact: Fact) -> Result<(), OkbError> {
        match fact {
            Fact::Class { individual, class, value } => self.set_class(individual, class, value),
            Fact::Relation { source, relation, target, value } => {
                self.add_edge(source, relation, target, value).map(|_| ())
            }
        }
    }

    /// Stores a class label. Re-asserting the same value is a no-op; the
    /// opposite value is a contradiction and leaves the graph unchanged.
    pub fn set_class(
        &mut self,
        individual: IndividualId,
        class: usize,
        value: ThreeValued,
    ) -> Result<(), OkbError> {
        self.check_individual(individual)?;
        self.check_class(class)?;
        if value == ThreeValued::Unknown {
            return Err(OkbError::UnknownValue(self.class_cell(individual, class)));
        }
        let cell = individual.index() * self.schema.n_classes() + class;
        let existing = self.labels[cell];
        if existing != 0 && existing != value.as_i8() {
            return Err(OkbError::Contradiction {
                cell: self.class_cell(individual, class),
                existing: ThreeValued::from_i8(existing).unwrap_or(ThreeValued::Unknown),
                new: value,
            });
        }
        self.labels[cell] = value.as_i8();
        Ok(())
    }

    /// Appends an edge. Returns `true` if it was new.
    pub fn add_edge(
        &mut self,
        source: IndividualId,
        relation: usize,
        target: IndividualId,
        value: ThreeValued,
    ) -> Result<bool, OkbError> {
        self.check_individual(source)?;
        self.check_individual(target)?;
        self.check_relation(relation)?;
        if value == ThreeValued::Unknown {
            return Err(OkbError::UnknownValue(self.relation_cell(source, relation, target)));
        }
        if let Some(&i) = self.edge_index.get(&(source, relation, target)) {
            let existing = self.edges[i].value;
            if existing != value {
                return Err(OkbError::Contradiction {
                    cell: self.relation_cell(source, relation, target),
                    existing,
                    new: value,
                });
            }
            return Ok(false);
        }
        self.edge_index.insert((source, relation, target), self.edges.len());
        self.edges.push(Edge { source, relation, target, value });
        self.adjacency[source.index()].push(Incidence {
            relation,
            direction: Direction::SourceSide,
            counterpart: target,
        });
        self.adjacency[target.index()].push(Incidence {
            relation,
            direction: Direction::TargetSide,
            counterpart: source,
        });
        Ok(true)
    }

    pub fn class_label(&self, individual: IndividualId, class: usize) -> ThreeValued {
        let n = self.schema.n_classes();
        self.labels
            .get(individual.index() * n + class)
            .and_then(|&v| ThreeValued::from_i8(v))
            .unwrap_or(ThreeValued::Unknown)
    }

    pub fn relation_label(
        &self,
        source: IndividualId,
        relation: usize,
        target: IndividualId,
    ) -> ThreeValued {
        self.edge_index
            .get(&(source, relation, target))
            .map(|&i| self.edges[i].value)
            .unwrap_or(ThreeValued::Unknown)
    }

    pub fn has_edge(&self, source: IndividualId, relation: usize, target: IndividualId) -> bool {
        self.relation_label(source, relation, target) == ThreeValued::True
    }

    pub fn incidence_vector(&self, individual: IndividualId) -> Result<Vec<i8>, OkbError> {
        self.check_individual(individual)?;
        let n = self.schema.n_classes();
        let start = individual.index() * n;
        Ok(self.labels[start..start + n].to_vec())
    }

    /// Borrowed incidence row; panics on an unknown individual.
    pub fn labels_of(&self, individual: IndividualId) -> &[i8] {
        let n = self.schema.n_classes();
        let start = individual.index() * n;
        &self.labels[start..start + n]
    }

    pub fn neighbors(&self, individual: IndividualId) -> Result<&[Incidence], OkbError> {
        self.check_individual(individual)?;
        Ok(&self.adjacency[individual.index()])
    }

    /// Adjacency without bounds reporting; panics on an unknown individual.
    pub fn adjacency(&self, individual: IndividualId) -> &[Incidence] {
        &self.adjacency[individual.index()]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn positive_edges(&self) -> impl Iterator<Item = &Edge> + '_ {
        self.edges.iter().filter(|e| e.value == ThreeValued::True)
    }

    /// All stored class facts in individual-major order.
    pub fn class_facts(&self) -> impl Iterator<Item = (IndividualId, usize, ThreeValued)> + '_ {
        let n = self.schema.n_classes().max(1);
        self.labels.iter().enumerate().filter(|(_, v)| **v != 0).map(move |(cell, &v)| {
            (
                IndividualId((cell / n) as u32),
                cell % n,
                ThreeValued::from_i8(v).unwrap_or(ThreeValued::Unknown),
            )
        })
    }

    pub fn n_class_facts(&self) -> usize {
        self.labels.iter().filter(|v| **v != 0).count()
    }

    pub fn n_facts(&self) -> usize {
        self.n_class_facts() + self.edges.len()
    }

    /// All stored facts, class facts first.
    pub fn facts(&self) -> Vec<Fact> {
        let mut out: Vec<Fact> = self
            .class_facts()
            .map(|(individual, class, value)| Fact::Class { individual, class, value })
            .collect();
        out.extend(self.edges.iter().map(|e| Fact::Relation {
            source: e.source,
            relation: e.relation,
            target: e.target,
            value: e.value,
        }));
        out
    }

    pub fn is_isolated(&self, individual: IndividualId) -> bool {
        self.adjacency[individual.index()].is_empty()
    }

    /// Copy of this graph keeping only facts for which `keep` holds.
    pub fn filtered(&self, mut keep: impl FnMut(&Fact) -> bool) -> Self {
        let mut g = self.empty_like();
        for fact in self.facts() {
            if keep(&fact) {
                g.add_fact(fact).expect("facts of a consistent graph stay consistent");
            }
        }
        g
    }

    /// Re-expresses this graph over `schema`, dropping predicates it lacks.
    /// Individuals keep their ids.
    pub fn project(&self, schema: &OkbSchema) -> Self {
        let class_map: Vec<Option<usize>> =
            self.schema.classes().iter().map(|c| schema.class(c)).collect();
        let relation_map: Vec<Option<usize>> =
            self.schema.relations().iter().map(|r| schema.relation(r)).collect();
        let mut g = OkbGraph::new(schema.clone());
        for name in self.interner.names() {
            g.intern(name).expect("names were valid when first interned");
        }
        for fact in self.facts() {
            let mapped = match fact {
                Fact::Class { individual, class, value } => class_map[class]
                    .map(|class| Fact::Class { individual, class, value }),
                Fact::Relation { source, relation, target, value } => relation_map[relation]
                    .map(|relation| Fact::Relation { source, relation, target, value }),
            };
            if let Some(f) = mapped {
                g.add_fact(f).expect("projection preserves consistency");
            }
        }
        g
    }

    /// Individuals within `hops` undirected steps of `individual`, excluding
    /// itself, sorted by id.
    pub fn neighborhood(&self, individual: IndividualId, hops: usize) -> Vec<IndividualId> {
        let mut seen = std::collections::HashSet::from([individual]);
        let mut frontier = vec![individual];
        for _ in 0..hops {
            let mut next = Vec::new();
            for &v in &frontier {
                for inc in &self.adjacency[v.index()] {
                    if seen.insert(inc.counterpart) {
                        next.push(inc.counterpart);
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            frontier = next;
        }
        let mut out: Vec<IndividualId> = seen.into_iter().filter(|&v| v != individual).collect();
        out.sort_unstable();
        out
    }

    pub fn class_cell(&self, individual: IndividualId, class: usize) -> String {
        format!(
            "{}({})",
            self.schema.classes().get(class).map(String::as_str).unwrap_or("?"),
            self.name(individual)
        )
    }

    pub fn relation_cell(&self, source: IndividualId, relation: usize, target: IndividualId) -> String {
        format!(
            "{}({}, {})",
            self.schema.relations().get(relation).map(String::as_str).unwrap_or("?"),
            self.name(source),
            self.name(target)
        )
    }
}
