//! Test-set scoring of a store, laid out as per-predicate rows followed by a
//! four-column macro summary (class accuracy, class F1, relation accuracy,
//! relation F1).

use std::fmt::Write as _;

use crate::evalgen::{score, Metrics, Predicate, ScoreError};
use crate::okb::OkbSchema;
use crate::oracle::LabeledQuery;
use crate::store::{predict_queries, Backend};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metrics: Metrics,
    /// Predicate names in schema order, resolved once for printing.
    pub class_names: Vec<String>,
    pub relation_names: Vec<String>,
}

/// Predicts every test cell with `backend` and scores against the gold labels.
pub fn eval_report(schema: &OkbSchema, backend: &dyn Backend, test: &[LabeledQuery]) -> Result<EvalReport, ScoreError> {
    if test.is_empty() {
        return Err(ScoreError::Empty);
    }
    let predicted = predict_queries(backend, test);
    Ok(EvalReport {
        metrics: score(&predicted, test)?,
        class_names: schema.classes().to_vec(),
        relation_names: schema.relations().to_vec(),
    })
}

impl EvalReport {
    fn name(&self, p: Predicate) -> (&str, &'static str) {
        match p {
            Predicate::Class(c) => (&self.class_names[c], "class"),
            Predicate::Relation(r) => (&self.relation_names[r], "relation"),
        }
    }

    pub fn to_table(&self) -> String {
        let width = self
            .metrics
            .per_predicate
            .keys()
            .map(|&p| self.name(p).0.len())
            .max()
            .unwrap_or(0)
            .max("predicate".len());
        let mut out = format!("{:<width$}  {:<8}  {:>6}  {:>8}  {:>8}\n", "predicate", "kind", "cells", "accuracy", "F1");
        for (&p, m) in &self.metrics.per_predicate {
            let (name, kind) = self.name(p);
            let f1 = if m.gold_positives() > 0 { format!("{:.4}", m.f1()) } else { "-".into() };
            let _ = writeln!(out, "{name:<width$}  {kind:<8}  {:>6}  {:>8.4}  {f1:>8}", m.cells, m.accuracy());
        }
        let (c, r) = (self.metrics.classes(), self.metrics.relations());
        let _ = write!(
            out,
            "\n{:<10}{:>20}{:>22}\n{:<10}{:>10}{:>10}{:>12}{:>10}\n{:<10}{:>10.4}{:>10.4}{:>12.4}{:>10.4}\n",
            "",
            "classes",
            "relations",
            "",
            "accuracy",
            "F1",
            "accuracy",
            "F1",
            "macro",
            c.accuracy,
            c.f1,
            r.accuracy,
            r.f1
        );
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("predicate,kind,cells,accuracy,precision,recall,f1\n");
        for (&p, m) in &self.metrics.per_predicate {
            let (name, kind) = self.name(p);
            let _ = writeln!(
                out,
                "{name},{kind},{},{},{},{},{}",
                m.cells,
                m.accuracy(),
                m.precision(),
                m.recall(),
                m.f1()
            );
        }
        let (c, r) = (self.metrics.classes(), self.metrics.relations());
        let _ = writeln!(out, "macro,class,,{},,,{}", c.accuracy, c.f1);
        let _ = writeln!(out, "macro,relation,,{},,,{}", r.accuracy, r.f1);
        out
    }
}
