//! Per-target, pooled, macro and depth-bucket scores, plus a paired
//! bootstrap against a weaker system.
//!
//! cargo run --example evaluate_run

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use prism::eval::{bootstrap_significance, cross_target_plan, evaluate_run, Grouping, Prediction, PredictionRecord};
use prism::synthetic::TARGETS;
use prism::StanceLabel;

fn system(gold: &[(StanceLabel, &str, u32)], accuracy: f64, seed: u64) -> Vec<PredictionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gold.iter()
        .enumerate()
        .map(|(i, (g, t, d))| {
            let predicted = if rng.random_bool(accuracy) {
                Prediction::Label(*g)
            } else if rng.random_bool(0.1) {
                Prediction::Invalid
            } else {
                Prediction::Label(StanceLabel::ALL[rng.random_range(0..3)])
            };
            PredictionRecord {
                conversation_id: format!("c{i}"),
                target_id: t.to_string(),
                gold: *g,
                predicted,
                depth: *d,
            }
        })
        .collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gold: Vec<(StanceLabel, &str, u32)> = (0..600)
        .map(|_| {
            (
                StanceLabel::ALL[rng.random_range(0..3)],
                TARGETS[rng.random_range(0..TARGETS.len())],
                rng.random_range(1..=12),
            )
        })
        .collect();
    let strong = system(&gold, 0.75, 2);
    let weak = system(&gold, 0.55, 3);

    let mut report = evaluate_run(&strong)?;
    println!("{}", report.render_table(Grouping::PerTarget));
    println!("{}", report.render_table(Grouping::Depth));

    let p = bootstrap_significance(&strong, &weak, 2_000, 42)?;
    report.significance = Some(prism::eval::SignificanceResult {
        baseline: "weak".into(),
        iterations: 2_000,
        seed: 42,
        p_value: p,
    });
    println!("{}", report.render_table(Grouping::Pooled));

    println!("cross-target pairs:");
    for (train, test) in cross_target_plan().pairs() {
        println!("  train {train:<8} test {test}");
    }
    Ok(())
}
