//! Fact and rule ingestion.
//!
//! Facts come from a subset of N-Triples: one `subject predicate object .`
//! statement per line, each term either an `<iri>` or a prefixed name such
//! as `dbpedia:Ulm`. `rdf:type` statements are class assertions, everything
//! else is a relation. Rules come from a line-oriented file with one keyword
//! and its arguments per line. Parsing is fail-soft: bad lines become
//! diagnostics carrying their 1-based line number.

use std::fmt;
use std::io::{self, BufRead};

use thiserror::Error;

use crate::okb::{OkbError, OkbGraph, OkbSchema, ThreeValued};

pub const RDF_TYPE: &str = "rdf:type";
const RDF_TYPE_IRI: &str = "<http://www.w3.org/1999/02/22-rdf-syntax-ns#type>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("{0}")]
    Syntax(Diagnostic),
    #[error("rule references {kind} {name:?} which is also used as a {other}")]
    KindClash {
        kind: &'static str,
        name: String,
        other: &'static str,
    },
    #[error(transparent)]
    Graph(#[from] OkbError),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    /// Abort on the first malformed line instead of collecting diagnostics.
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triple {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

impl Triple {
    pub fn is_class_assertion(&self) -> bool {
        is_type_predicate(&self.predicate)
    }
}

pub fn is_type_predicate(p: &str) -> bool {
    p == RDF_TYPE || p == RDF_TYPE_IRI || p == "a"
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TripleDoc {
    pub triples: Vec<Triple>,
    pub diagnostics: Vec<Diagnostic>,
}

fn check_term(term: &str) -> Result<(), String> {
    if term.starts_with('"') {
        return Err(format!("literals are not supported: {term}"));
    }
    if term.starts_with("_:") {
        return Err(format!("blank nodes are not supported: {term}"));
    }
    if let Some(inner) = term.strip_prefix('<') {
        let Some(iri) = inner.strip_suffix('>') else {
            return Err(format!("unterminated IRI: {term}"));
        };
        if iri.is_empty() || iri.contains(['<', '>', '"', '{', '}', '|', '^', '`', '\\']) {
            return Err(format!("malformed IRI: {term}"));
        }
        return Ok(());
    }
    match term.split_once(':') {
        Some((prefix, _)) if prefix.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '-') => {
            if term.contains(['<', '>', '"']) {
                Err(format!("malformed prefixed name: {term}"))
            } else {
                Ok(())
            }
        }
        _ => Err(format!("expected <iri> or prefix:name, found {term:?}")),
    }
}

fn parse_statement(line: &str) -> Result<Option<Triple>, String> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    if line.contains('"') {
        return Err("literals are not supported".to_string());
    }
    // drop a trailing comment after the terminating dot
    let body = match line.find(" #") {
        Some(i) if line[..i].trim_end().ends_with('.') => line[..i].trim_end(),
        _ => line,
    };
    let mut tokens: Vec<&str> = body.split_whitespace().collect();
    match tokens.last() {
        Some(&".") => {
            tokens.pop();
        }
        Some(last) if last.len() > 1 && last.ends_with('.') && tokens.len() == 3 => {
            let n = tokens.len() - 1;
            tokens[n] = &last[..last.len() - 1];
        }
        _ => return Err("statement must end with ' .'".to_string()),
    }
    if tokens.len() != 3 {
        return Err(format!("expected 3 terms, found {}", tokens.len()));
    }
    for t in &tokens {
        check_term(t)?;
    }
    Ok(Some(Triple {
        subject: tokens[0].to_string(),
        predicate: tokens[1].to_string(),
        object: tokens[2].to_string(),
    }))
}

/// Parses N-Triples from a line reader.
pub fn parse_ntriples<R: BufRead>(reader: R, opts: ParseOptions) -> Result<TripleDoc, IngestError> {
    let mut doc = TripleDoc::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        match parse_statement(&line) {
            Ok(Some(t)) => doc.triples.push(t),
            Ok(None) => {}
            Err(message) => {
                let d = Diagnostic { line: i + 1, message };
                if opts.strict {
                    return Err(IngestError::Syntax(d));
                }
                doc.diagnostics.push(d);
            }
        }
    }
    Ok(doc)
}

pub fn parse_ntriples_str(text: &str) -> TripleDoc {
    parse_ntriples(text.as_bytes(), ParseOptions::default()).expect("reading from memory cannot fail")
}

/// Canonical serialization: one statement per line in input order.
pub fn serialize_ntriples(doc: &TripleDoc) -> String {
    let mut out = String::new();
    for t in &doc.triples {
        out.push_str(&t.subject);
        out.push(' ');
        out.push_str(&t.predicate);
        out.push(' ');
        out.push_str(&t.object);
        out.push_str(" .\n");
    }
    out
}

/// Positive facts of a graph as a triple document: class facts, then edges.
pub fn graph_to_doc(graph: &OkbGraph) -> TripleDoc {
    let schema = graph.schema();
    let mut triples = Vec::new();
    for (ind, class, value) in graph.class_facts() {
        if value == ThreeValued::True {
            triples.push(Triple {
                subject: graph.name(ind).to_string(),
                predicate: RDF_TYPE.to_string(),
                object: schema.classes()[class].clone(),
            });
        }
    }
    for e in graph.positive_edges() {
        triples.push(Triple {
            subject: graph.name(e.source).to_string(),
            predicate: schema.relations()[e.relation].clone(),
            object: graph.name(e.target).to_string(),
        });
    }
    TripleDoc { triples, diagnostics: Vec::new() }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Rule {
    SubClassOf(String, String),
    DisjointWith(String, String),
    Domain(String, String),
    Range(String, String),
    SubPropertyOf(String, String),
    InverseOf(String, String),
    Symmetric(String),
    Transitive(String),
}

impl Rule {
    pub fn keyword(&self) -> &'static str {
        match self {
            Rule::SubClassOf(..) => "subClassOf",
            Rule::DisjointWith(..) => "disjointWith",
            Rule::Domain(..) => "domain",
            Rule::Range(..) => "range",
            Rule::SubPropertyOf(..) => "subPropertyOf",
            Rule::InverseOf(..) => "inverseOf",
            Rule::Symmetric(..) => "symmetric",
            Rule::Transitive(..) => "transitive",
        }
    }

    /// Class names this rule mentions.
    fn classes(&self) -> Vec<&str> {
        match self {
            Rule::SubClassOf(c, d) | Rule::DisjointWith(c, d) => vec![c, d],
            Rule::Domain(_, c) | Rule::Range(_, c) => vec![c],
            _ => vec![],
        }
    }

    /// Relation names this rule mentions.
    fn relations(&self) -> Vec<&str> {
        match self {
            Rule::Domain(r, _) | Rule::Range(r, _) => vec![r],
            Rule::SubPropertyOf(r, s) | Rule::InverseOf(r, s) => vec![r, s],
            Rule::Symmetric(r) | Rule::Transitive(r) => vec![r],
            _ => vec![],
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::SubClassOf(a, b)
            | Rule::DisjointWith(a, b)
            | Rule::Domain(a, b)
            | Rule::Range(a, b)
            | Rule::SubPropertyOf(a, b)
            | Rule::InverseOf(a, b) => write!(f, "{} {} {}", self.keyword(), a, b),
            Rule::Symmetric(a) | Rule::Transitive(a) => write!(f, "{} {}", self.keyword(), a),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RuleSet {
    pub rules: Vec<Rule>,
    pub diagnostics: Vec<Diagnostic>,
}

impl RuleSet {
    pub fn new(rules: Vec<Rule>) -> Self {
        Self { rules, diagnostics: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

fn parse_rule(line: &str) -> Result<Option<Rule>, String> {
    let line = match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    };
    let tokens: Vec<&str> = line.split_whitespace().collect();
    let Some((&keyword, args)) = tokens.split_first() else {
        return Ok(None);
    };
    let arity = match keyword {
        "subClassOf" | "disjointWith" | "domain" | "range" | "subPropertyOf" | "inverseOf" => 2,
        "symmetric" | "transitive" => 1,
        other => return Err(format!("unknown rule keyword {other:?}")),
    };
    if args.len() != arity {
        return Err(format!("{keyword} takes {arity} argument(s), found {}", args.len()));
    }
    let a = args[0].to_string();
    let b = args.get(1).map(|s| s.to_string()).unwrap_or_default();
    Ok(Some(match keyword {
        "subClassOf" => Rule::SubClassOf(a, b),
        "disjointWith" => Rule::DisjointWith(a, b),
        "domain" => Rule::Domain(a, b),
        "range" => Rule::Range(a, b),
        "subPropertyOf" => Rule::SubPropertyOf(a, b),
        "inverseOf" => Rule::InverseOf(a, b),
        "symmetric" => Rule::Symmetric(a),
        _ => Rule::Transitive(a),
    }))
}

pub fn parse_rules<R: BufRead>(reader: R, opts: ParseOptions) -> Result<RuleSet, IngestError> {
    let mut set = RuleSet::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        match parse_rule(&line) {
            Ok(Some(r)) => set.rules.push(r),
            Ok(None) => {}
            Err(message) => {
                let d = Diagnostic { line: i + 1, message };
                if opts.strict {
                    return Err(IngestError::Syntax(d));
                }
                set.diagnostics.push(d);
            }
        }
    }
    Ok(set)
}

pub fn parse_rules_str(text: &str) -> RuleSet {
    parse_rules(text.as_bytes(), ParseOptions::default()).expect("reading from memory cannot fail")
}

pub fn serialize_rules(rules: &RuleSet) -> String {
    rules.rules.iter().map(|r| format!("{r}\n")).collect()
}

/// A rule with names resolved to schema positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LinkedRule {
    SubClassOf(usize, usize),
    DisjointWith(usize, usize),
    Domain(usize, usize),
    Range(usize, usize),
    SubPropertyOf(usize, usize),
    InverseOf(usize, usize),
    Symmetric(usize),
    Transitive(usize),
}

/// Resolves rules against a schema. Rules mentioning predicates the schema
/// lacks are dropped and returned separately.
pub fn link_rules(rules: &RuleSet, schema: &OkbSchema) -> (Vec<LinkedRule>, Vec<Rule>) {
    let mut linked = Vec::new();
    let mut dropped = Vec::new();
    for rule in &rules.rules {
        let c = |n: &str| schema.class(n);
        let r = |n: &str| schema.relation(n);
        let l = match rule {
            Rule::SubClassOf(a, b) => c(a).zip(c(b)).map(|(a, b)| LinkedRule::SubClassOf(a, b)),
            Rule::DisjointWith(a, b) => c(a).zip(c(b)).map(|(a, b)| LinkedRule::DisjointWith(a, b)),
            Rule::Domain(a, b) => r(a).zip(c(b)).map(|(a, b)| LinkedRule::Domain(a, b)),
            Rule::Range(a, b) => r(a).zip(c(b)).map(|(a, b)| LinkedRule::Range(a, b)),
            Rule::SubPropertyOf(a, b) => r(a).zip(r(b)).map(|(a, b)| LinkedRule::SubPropertyOf(a, b)),
            Rule::InverseOf(a, b) => r(a).zip(r(b)).map(|(a, b)| LinkedRule::InverseOf(a, b)),
            Rule::Symmetric(a) => r(a).map(LinkedRule::Symmetric),
            Rule::Transitive(a) => r(a).map(LinkedRule::Transitive),
        };
        match l {
            Some(l) => linked.push(l),
            None => dropped.push(rule.clone()),
        }
    }
    (linked, dropped)
}

/// Schema of every predicate mentioned by the facts or the rules, in order
/// of first appearance (facts first).
pub fn schema_from(doc: &TripleDoc, rules: &RuleSet) -> Result<OkbSchema, IngestError> {
    let mut classes: Vec<String> = Vec::new();
    let mut relations: Vec<String> = Vec::new();
    let mut seen_c = std::collections::HashSet::new();
    let mut seen_r = std::collections::HashSet::new();
    for t in &doc.triples {
        if t.is_class_assertion() {
            if seen_c.insert(t.object.clone()) {
                classes.push(t.object.clone());
            }
        } else if seen_r.insert(t.predicate.clone()) {
            relations.push(t.predicate.clone());
        }
    }
    for rule in &rules.rules {
        for c in rule.classes() {
            if seen_c.insert(c.to_string()) {
                classes.push(c.to_string());
            }
        }
        for r in rule.relations() {
            if seen_r.insert(r.to_string()) {
                relations.push(r.to_string());
            }
        }
    }
    // A rule may only use a name in the role the facts give it.
    for rule in &rules.rules {
        for c in rule.classes() {
            if seen_r.contains(c) {
                return Err(IngestError::KindClash { kind: "class", name: c.to_string(), other: "relation" });
            }
        }
    }
    Ok(OkbSchema::new(classes, relations)?)
}

/// Builds the graph of a document over `schema`. Triples whose predicate
/// the schema lacks are skipped; the count of skipped triples is returned.
pub fn build_graph(doc: &TripleDoc, schema: &OkbSchema) -> Result<(OkbGraph, usize), IngestError> {
    let mut g = OkbGraph::new(schema.clone());
    let mut skipped = 0;
    for t in &doc.triples {
        let s = g.intern(&t.subject)?;
        if t.is_class_assertion() {
            match schema.class(&t.object) {
                Some(c) => g.set_class(s, c, ThreeValued::True)?,
                None => skipped += 1,
            }
        } else {
            let o = g.intern(&t.object)?;
            match schema.relation(&t.predicate) {
                Some(r) => {
                    g.add_edge(s, r, o, ThreeValued::True)?;
                }
                None => skipped += 1,
            }
        }
    }
    Ok((g, skipped))
}

/// Keeps the classes asserted (value != 0) for at least `threshold` of the
/// individuals and the relations incident to at least `threshold` of the
/// individuals. Relations count distinct incident individuals, not edges.
pub fn frequency_filter(graph: &OkbGraph, threshold: f64) -> OkbSchema {
    let n = graph.n_individuals();
    let schema = graph.schema();
    let cutoff = threshold * n as f64;
    let mut class_counts = vec![0usize; schema.n_classes()];
    for (_, c, _) in graph.class_facts() {
        class_counts[c] += 1;
    }
    let mut relation_counts = vec![0usize; schema.n_relations()];
    let mut marks = vec![usize::MAX; schema.n_relations()];
    for ind in graph.individuals() {
        for inc in graph.adjacency(ind) {
            if marks[inc.relation] != ind.index() {
                marks[inc.relation] = ind.index();
                relation_counts[inc.relation] += 1;
            }
        }
    }
    let classes = schema
        .classes()
        .iter()
        .zip(&class_counts)
        .filter(|(_, &k)| k as f64 >= cutoff)
        .map(|(c, _)| c.clone())
        .collect();
    let relations = schema
        .relations()
        .iter()
        .zip(&relation_counts)
        .filter(|(_, &k)| k as f64 >= cutoff)
        .map(|(r, _)| r.clone())
        .collect();
    OkbSchema::new(classes, relations).expect("subset of a valid schema")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::okb::IndividualId;
    use proptest::prelude::*;

    #[test]
    fn parses_prefixed_relation_triple() {
        let doc = parse_ntriples_str("dbpedia:Albert_Einstein dbpedia:placeOfBirth dbpedia:Ulm .\n");
        assert!(doc.diagnostics.is_empty());
        assert_eq!(
            doc.triples,
            vec![Triple {
                subject: "dbpedia:Albert_Einstein".into(),
                predicate: "dbpedia:placeOfBirth".into(),
                object: "dbpedia:Ulm".into(),
            }]
        );
        assert!(!doc.triples[0].is_class_assertion());
    }

    #[test]
    fn parses_iris_comments_and_crlf() {
        let text = "# header\r\n\r\n<http://x/a> <http://x/p> <http://x/b> .\r\n<http://x/a> rdf:type <http://x/C> . # trailing\n";
        let doc = parse_ntriples_str(text);
        assert!(doc.diagnostics.is_empty(), "{:?}", doc.diagnostics);
        assert_eq!(doc.triples.len(), 2);
        assert!(doc.triples[1].is_class_assertion());
        assert_eq!(doc.triples[1].object, "<http://x/C>");
    }

    #[test]
    fn empty_input_is_empty_doc() {
        assert_eq!(parse_ntriples_str(""), TripleDoc::default());
    }

    #[test]
    fn malformed_lines_become_diagnostics() {
        let doc = parse_ntriples_str("ex:a ex:p ex:b .\nfoo bar\nex:a ex:p \"lit\" .\n_:b ex:p ex:c .\n");
        assert_eq!(doc.triples.len(), 1);
        let lines: Vec<usize> = doc.diagnostics.iter().map(|d| d.line).collect();
        assert_eq!(lines, vec![2, 3, 4]);
    }

    #[test]
    fn strict_mode_stops_at_first_error() {
        let err = parse_ntriples("ex:a ex:p ex:b .\nfoo bar\n".as_bytes(), ParseOptions { strict: true })
            .unwrap_err();
        match err {
            IngestError::Syntax(d) => assert_eq!(d.line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn parses_rules_and_reports_arity() {
        let set = parse_rules_str("subClassOf Woman Human\ntransitive ancestorOf # note\nsubClassOf Woman\nfrobnicate a b\n");
        assert_eq!(
            set.rules,
            vec![
                Rule::SubClassOf("Woman".into(), "Human".into()),
                Rule::Transitive("ancestorOf".into())
            ]
        );
        assert_eq!(set.diagnostics.len(), 2);
        assert_eq!(set.diagnostics[0].line, 3);
        assert!(set.diagnostics[0].message.contains("argument"));
        assert_eq!(set.diagnostics[1].line, 4);
    }

    #[test]
    fn schema_links_rules_and_facts() {
        let doc = parse_ntriples_str("ex:alice rdf:type ex:Woman .\nex:alice ex:parentOf ex:bob .\n");
        let rules = parse_rules_str("subClassOf ex:Woman ex:Human\nsubPropertyOf ex:parentOf ex:ancestorOf\n");
        let schema = schema_from(&doc, &rules).unwrap();
        assert_eq!(schema.classes(), &["ex:Woman".to_string(), "ex:Human".to_string()]);
        assert_eq!(schema.relations(), &["ex:parentOf".to_string(), "ex:ancestorOf".to_string()]);
        let (linked, dropped) = link_rules(&rules, &schema);
        assert_eq!(linked, vec![LinkedRule::SubClassOf(0, 1), LinkedRule::SubPropertyOf(0, 1)]);
        assert!(dropped.is_empty());
        let (g, skipped) = build_graph(&doc, &schema).unwrap();
        assert_eq!(skipped, 0);
        assert_eq!(g.n_individuals(), 2);
        assert!(g.has_edge(IndividualId(0), 0, IndividualId(1)));
    }

    #[test]
    fn class_used_as_relation_is_rejected() {
        let doc = parse_ntriples_str("ex:a ex:knows ex:b .\n");
        let rules = parse_rules_str("subClassOf ex:knows ex:Thing\n");
        assert!(matches!(schema_from(&doc, &rules), Err(IngestError::KindClash { .. })));
    }

    fn brute_force_frequencies(g: &OkbGraph) -> (Vec<usize>, Vec<usize>) {
        let s = g.schema();
        let classes = (0..s.n_classes())
            .map(|c| g.individuals().filter(|&i| g.class_label(i, c) != ThreeValued::Unknown).count())
            .collect();
        let relations = (0..s.n_relations())
            .map(|r| {
                g.individuals()
                    .filter(|&i| g.edges().iter().any(|e| e.relation == r && (e.source == i || e.target == i)))
                    .count()
            })
            .collect();
        (classes, relations)
    }

    #[test]
    fn rare_class_is_dropped() {
        // 10 individuals, class Rare held by one of them, threshold 0.2
        let mut text = String::new();
        for i in 0..10 {
            text.push_str(&format!("ex:i{i} rdf:type ex:Common .\n"));
        }
        text.push_str("ex:i0 rdf:type ex:Rare .\n");
        let doc = parse_ntriples_str(&text);
        let schema = schema_from(&doc, &RuleSet::default()).unwrap();
        let (g, _) = build_graph(&doc, &schema).unwrap();
        let (counts, _) = brute_force_frequencies(&g);
        assert_eq!(counts, vec![10, 1]);
        let kept = frequency_filter(&g, 0.2);
        assert_eq!(kept.classes(), &["ex:Common".to_string()]);
        assert_eq!(frequency_filter(&g, 0.0), *g.schema());
    }

    fn arb_doc() -> impl Strategy<Value = TripleDoc> {
        let term = prop_oneof![
            "[a-z]{1,3}:[A-Za-z_()0-9]{1,6}".prop_map(|s| s),
            "<http://e/[a-z]{1,5}>".prop_map(|s| s),
        ];
        let triple = (term.clone(), prop_oneof![Just(RDF_TYPE.to_string()), term.clone()], term)
            .prop_map(|(subject, predicate, object)| Triple { subject, predicate, object });
        prop::collection::vec(triple, 0..20)
            .prop_map(|triples| TripleDoc { triples, diagnostics: vec![] })
    }

    fn arb_graph() -> impl Strategy<Value = OkbGraph> {
        (2usize..30, prop::collection::vec((0usize..30, 0usize..4), 0..60), prop::collection::vec((0usize..30, 0usize..3, 0usize..30), 0..60))
            .prop_map(|(n, classes, edges)| {
                let schema = OkbSchema::new(
                    (0..4).map(|c| format!("ex:C{c}")).collect(),
                    (0..3).map(|r| format!("ex:r{r}")).collect(),
                )
                .unwrap();
                let mut g = OkbGraph::new(schema);
                for i in 0..n {
                    g.intern(&format!("ex:i{i}")).unwrap();
                }
                for (i, c) in classes {
                    g.set_class(IndividualId((i % n) as u32), c, ThreeValued::True).unwrap();
                }
                for (s, r, t) in edges {
                    g.add_edge(IndividualId((s % n) as u32), r, IndividualId((t % n) as u32), ThreeValued::True)
                        .unwrap();
                }
                g
            })
    }

    proptest! {
        #[test]
        fn serialize_parse_is_a_fixpoint(doc in arb_doc()) {
            let text = serialize_ntriples(&doc);
            let reparsed = parse_ntriples_str(&text);
            prop_assert!(reparsed.diagnostics.is_empty(), "{:?}", reparsed.diagnostics);
            prop_assert_eq!(&reparsed, &doc);
            prop_assert_eq!(serialize_ntriples(&reparsed), text);
        }

        #[test]
        fn frequency_filter_is_monotone_and_sound(g in arb_graph(), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = frequency_filter(&g, lo);
            let b = frequency_filter(&g, hi);
            for c in b.classes() { prop_assert!(a.class(c).is_some()); }
            for r in b.relations() { prop_assert!(a.relation(r).is_some()); }
            let (cc, rc) = brute_force_frequencies(&g);
            let n = g.n_individuals() as f64;
            for (i, c) in g.schema().classes().iter().enumerate() {
                prop_assert_eq!(b.class(c).is_some(), cc[i] as f64 >= hi * n);
            }
            for (i, r) in g.schema().relations().iter().enumerate() {
                prop_assert_eq!(b.relation(r).is_some(), rc[i] as f64 >= hi * n);
            }
        }
    }
}
