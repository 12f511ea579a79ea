//! Line-oriented text form of a holdout split.
//!
//! ```text
//! # comment
//! test fam:person00012
//! validation fam:person00400
//! query test class fam:person00012 fam:Woman 1
//! query test relation fam:person00003 fam:parentOf fam:person00012 1
//! ```
//!
//! Names resolve against the closed knowledge base the split was drawn from,
//! so the file stays valid as long as the facts, rules and frequency
//! threshold are the same.

use std::fmt::Write as _;

use thiserror::Error;

use crate::okb::{IndividualId, OkbGraph};
use crate::oracle::{Closure, LabeledQuery, Split};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("split file line {line}: {message}")]
pub struct SplitFileError {
    pub line: usize,
    pub message: String,
}

fn query_line(out: &mut String, set: &str, q: &LabeledQuery, g: &OkbGraph) {
    let schema = g.schema();
    let _ = match *q {
        LabeledQuery::Class { individual, class, label } => writeln!(
            out,
            "query {set} class {} {} {label}",
            g.name(individual),
            schema.classes()[class]
        ),
        LabeledQuery::Relation { source, relation, target, label } => writeln!(
            out,
            "query {set} relation {} {} {} {label}",
            g.name(source),
            schema.relations()[relation],
            g.name(target)
        ),
    };
}

pub fn format_split(split: &Split) -> String {
    let g = &split.base;
    let mut out = String::from("# holdout split\n");
    for &i in &split.test_individuals {
        let _ = writeln!(out, "test {}", g.name(i));
    }
    for &i in &split.validation_individuals {
        let _ = writeln!(out, "validation {}", g.name(i));
    }
    for q in &split.test {
        query_line(&mut out, "test", q, g);
    }
    for q in &split.validation {
        query_line(&mut out, "validation", q, g);
    }
    out
}

pub fn parse_split(text: &str, closed: &Closure) -> Result<Split, SplitFileError> {
    let g = &closed.graph;
    let schema = g.schema();
    let mut test_individuals = Vec::new();
    let mut validation_individuals = Vec::new();
    let mut test = Vec::new();
    let mut validation = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let err = |message: String| SplitFileError { line, message };
        let raw = raw.trim();
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split_whitespace().collect();
        let individual = |name: &str| -> Result<IndividualId, SplitFileError> {
            g.lookup(name).ok_or_else(|| err(format!("unknown individual {name}")))
        };
        let label = |v: &str| -> Result<i8, SplitFileError> {
            match v {
                "1" => Ok(1),
                "0" => Ok(0),
                "-1" => Ok(-1),
                other => Err(err(format!("label must be 1, 0 or -1, found {other}"))),
            }
        };
        match fields.as_slice() {
            ["test", name] => test_individuals.push(individual(name)?),
            ["validation", name] => validation_individuals.push(individual(name)?),
            ["query", set, "class", who, class, value] => {
                let class = schema.class(class).ok_or_else(|| err(format!("unknown class {class}")))?;
                let q = LabeledQuery::Class { individual: individual(who)?, class, label: label(value)? };
                match *set {
                    "test" => test.push(q),
                    "validation" => validation.push(q),
                    other => return Err(err(format!("unknown query set {other}"))),
                }
            }
            ["query", set, "relation", s, rel, t, value] => {
                let relation = schema.relation(rel).ok_or_else(|| err(format!("unknown relation {rel}")))?;
                let q = LabeledQuery::Relation {
                    source: individual(s)?,
                    relation,
                    target: individual(t)?,
                    label: label(value)?,
                };
                match *set {
                    "test" => test.push(q),
                    "validation" => validation.push(q),
                    other => return Err(err(format!("unknown query set {other}"))),
                }
            }
            _ => return Err(err(format!("unrecognized line: {raw}"))),
        }
    }
    Ok(Split::from_parts(closed, test_individuals, validation_individuals, test, validation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalgen::{generate, GenConfig};
    use crate::oracle::holdout_split;
    use crate::pipeline::prepare;

    #[test]
    fn round_trip_rebuilds_the_same_split() {
        let (doc, rules) = generate(&GenConfig::family(120, 5));
        let (_, closed) = prepare(&doc, &rules, 0.05).unwrap();
        let split = holdout_split(&closed, 6, 4, 9).unwrap();
        let text = format_split(&split);
        let back = parse_split(&text, &closed).unwrap();
        assert_eq!(back.test, split.test);
        assert_eq!(back.validation, split.validation);
        assert_eq!(back.test_individuals, split.test_individuals);
        assert_eq!(back.validation_individuals, split.validation_individuals);
        assert_eq!(back.train_input.n_facts(), split.train_input.n_facts());
        assert_eq!(back.train.n_facts(), split.train.n_facts());
        assert_eq!(format_split(&back), text);
    }

    #[test]
    fn bad_lines_name_their_position() {
        let (doc, rules) = generate(&GenConfig::family(30, 5));
        let (_, closed) = prepare(&doc, &rules, 0.05).unwrap();
        let e = parse_split("# ok\n\ntest fam:nobody\n", &closed).unwrap_err();
        assert_eq!(e.line, 3);
        let e = parse_split("query test class fam:person00000 fam:Woman 2\n", &closed).unwrap_err();
        assert!(e.message.contains("label"));
        assert!(parse_split("frobnicate\n", &closed).is_err());
    }
}
