//! Shared fixtures for the criterion benches.

use semrank::click_sim::{generate_corpus, simulate_sessions, SimConfig};
use semrank::judgments::formulate;
use semrank::{PairwiseJudgment, SearchSession, SemModel, Strategy, TrainingConfig};

pub struct Fixture {
    pub sessions: Vec<SearchSession>,
    pub judgments: Vec<PairwiseJudgment>,
    pub model: SemModel,
}

/// A simulated log of `queries` queries, its C>NE judgments, and the
/// default-sized initial model over them.
pub fn fixture(queries: usize) -> Fixture {
    let config = SimConfig {
        query_count: queries,
        ..SimConfig::default()
    };
    let (corpus, _) = generate_corpus(&config).expect("valid simulator config");
    let sessions = simulate_sessions(&corpus, &config);
    let judgments =
        formulate(&sessions, Strategy::ClickedOverNonExamined, None).expect("atomic strategy");
    let model =
        semrank::train::initial_model(&judgments, &TrainingConfig::default()).expect("non-empty");
    Fixture {
        sessions,
        judgments,
        model,
    }
}
