//! Trains on a generated family corpus and scores the held-out individuals.
//!
//! `cargo run --release -p nets-core --example train_family -- [individuals] [epochs] [seed]`

use nets_core::evalgen::{generate, GenConfig};
use nets_core::pipeline::{prepare, DEFAULT_FREQUENCY_THRESHOLD};
use nets_core::oracle::holdout_split;
use nets_core::rtn::RtnConfig;
use nets_core::store::CandidateRadius;
use nets_core::training::{evaluate, train_with, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("numeric argument")).collect();
    let n = args.first().copied().unwrap_or(2000);
    let epochs = args.get(1).copied().unwrap_or(TrainConfig::default().epochs);
    let seed = args.get(2).copied().unwrap_or(0) as u64;
    let (doc, rules) = generate(&GenConfig::family(n, seed));
    let (_, closed) = prepare(&doc, &rules, DEFAULT_FREQUENCY_THRESHOLD)?;
    let split = holdout_split(&closed, 100, 100, seed)?;
    let rtn = RtnConfig { seed, ..RtnConfig::for_schema(closed.graph.schema()) };
    let config = TrainConfig { epochs, seed, ..TrainConfig::default() };
    let out = train_with(&split, rtn, &config, |e| {
        eprintln!(
            "epoch {:>3} loss {:.4} val-c {:?} val-r {:?} {:.1}s",
            e.epoch, e.mean_loss, e.validation_class_f1, e.validation_relation_f1, e.seconds
        )
    })?;
    let m = evaluate(&split.base, &out.params, &split.test, config.validation_rounds, seed, CandidateRadius::default())?;
    let (c, r) = (m.classes(), m.relations());
    println!("classes   acc {:.4} f1 {:.4}", c.accuracy, c.f1);
    for (p, pm) in &m.per_predicate {
        println!("  {p:?} acc {:.3} f1 {:.3} cells {}", pm.accuracy(), pm.f1(), pm.cells);
    }
    println!("relations acc {:.4} f1 {:.4}", r.accuracy, r.f1);
    Ok(())
}
