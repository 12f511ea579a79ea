//! Glue from parsed documents to a closed, schema-restricted knowledge base.

use thiserror::Error;

use crate::ingest::{build_graph, frequency_filter, link_rules, schema_from, IngestError, LinkedRule, Rule, RuleSet, TripleDoc};
use crate::okb::OkbGraph;
use crate::oracle::{closure, Closure, OracleError};

/// Share of individuals a class or relation must cover to stay in the schema.
pub const DEFAULT_FREQUENCY_THRESHOLD: f64 = 0.05;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    pub graph: OkbGraph,
    pub rules: Vec<LinkedRule>,
    /// Rules naming a class or relation absent from the schema.
    pub unlinked_rules: Vec<Rule>,
    /// Triples whose predicate or class did not make it into the schema.
    pub skipped_triples: usize,
}

impl KnowledgeBase {
    pub fn load(doc: &TripleDoc, rules: &RuleSet) -> Result<Self, PipelineError> {
        let schema = schema_from(doc, rules)?;
        let (graph, skipped_triples) = build_graph(doc, &schema)?;
        let (rules, unlinked_rules) = link_rules(rules, &schema);
        Ok(KnowledgeBase { graph, rules, unlinked_rules, skipped_triples })
    }

    pub fn close(&self) -> Result<Closure, PipelineError> {
        Ok(closure(&self.graph, &self.rules)?)
    }
}

/// Drops classes and relations rarer than `threshold` in the closure and
/// projects both the input and the closure onto what remains.
pub fn restrict(closed: &Closure, threshold: f64) -> Closure {
    let schema = frequency_filter(&closed.graph, threshold);
    if &schema == closed.graph.schema() {
        return closed.clone();
    }
    Closure {
        base: closed.base.project(&schema),
        graph: closed.graph.project(&schema),
        derivation_count: closed.derivation_count,
    }
}

/// Load, close and restrict in one call.
pub fn prepare(doc: &TripleDoc, rules: &RuleSet, threshold: f64) -> Result<(KnowledgeBase, Closure), PipelineError> {
    let kb = KnowledgeBase::load(doc, rules)?;
    let closed = restrict(&kb.close()?, threshold);
    Ok((kb, closed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{parse_ntriples_str, parse_rules_str};

    #[test]
    fn rare_predicates_are_projected_away() {
        let mut nt = String::new();
        for i in 0..60 {
            nt.push_str(&format!("ex:p{i} rdf:type ex:Common .\n"));
        }
        nt.push_str("ex:p0 rdf:type ex:Rare .\nex:p0 ex:knows ex:p1 .\n");
        let rules = parse_rules_str("subClassOf ex:Rare ex:AlsoRare\n");
        let (kb, closed) = prepare(&parse_ntriples_str(&nt), &rules, 0.05).unwrap();
        assert_eq!(kb.graph.schema().n_classes(), 3);
        assert_eq!(closed.graph.schema().classes(), ["ex:Common".to_string()]);
        assert_eq!(closed.graph.schema().n_relations(), 0);
        assert_eq!(closed.base.schema(), closed.graph.schema());
        assert_eq!(closed.graph.n_individuals(), 60);
        let (_, kept) = prepare(&parse_ntriples_str(&nt), &rules, 0.0).unwrap();
        assert_eq!(kept.graph.schema().n_classes(), 3);
    }
}
