//! Runs the full strategy comparison on simulator defaults and prints the
//! Test-1 and ground-truth curves' endpoints.
//!
//! cargo run --release -p semrank-core --example desk_run [seed]

use std::time::Instant;

use semrank::click_sim::{generate_corpus, ground_truth_pairs, simulate_sessions, SimConfig};
use semrank::evaluation::{compare_strategies, split_sessions, CompareConfig, TestOrigin};
use semrank::judgments::{distribution, Strategy};
use semrank::log_model::aggregate_ctr;

fn main() -> semrank::Result<()> {
    let seed: u64 = std::env::args()
        .nth(1)
        .map_or(0, |s| s.parse().expect("seed"));
    let started = Instant::now();
    let sim = SimConfig {
        seed,
        ..SimConfig::default()
    };
    let (corpus, truth) = generate_corpus(&sim)?;
    let sessions = simulate_sessions(&corpus, &sim);
    let gt = ground_truth_pairs(&corpus, &truth, 10, seed).pairs;
    let (train, holdout) = split_sessions(&sessions, 0.8, seed)?;
    let mut config = CompareConfig::default();
    config.training.seed = seed;
    config.test_seed = seed;

    let dist = distribution(&train, &aggregate_ctr(&train), config.ctr_params)?;
    for r in &dist.rows {
        println!("{:5} {:8} {:6.2}%", r.strategy.tag(), r.count, r.percentage);
    }

    let report = compare_strategies(&train, &holdout, &gt, &Strategy::ALL, &config)?;
    for o in &report.outcomes {
        for origin in [TestOrigin::Test1, TestOrigin::GroundTruth] {
            let curve = report.curve(o.strategy, origin);
            let tail = &curve[curve.len().saturating_sub(10)..];
            let spread = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - tail.iter().cloned().fold(f64::INFINITY, f64::min);
            println!(
                "{:5} {:5} n={:7} init={:.4} final={:.4} best={:.4} tail-spread={:.4}",
                o.strategy.tag(),
                origin.name(),
                o.judgments,
                report.initial(o.strategy, origin).unwrap_or(f64::NAN),
                curve.last().copied().unwrap_or(f64::NAN),
                curve.iter().cloned().fold(0.0, f64::max),
                spread
            );
        }
    }
    println!("elapsed {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}
