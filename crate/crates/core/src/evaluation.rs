//! Pairwise precision on holdout click pairs and ground-truth pairs, and
//! the per-iteration strategy comparison.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::judgments::{formulate, CtrInputs, CtrParams, PairwiseJudgment, Source, Strategy};
use crate::log_model::{aggregate_ctr, SearchSession, TokenSeq};
use crate::model::SemModel;
use crate::seed;
use crate::train::{train_with_hook, TrainStats, TrainingConfig};

/// Anything that assigns a relevance score to a `(query, title)` pair.
pub trait Scorer {
    fn score(&self, query: &TokenSeq, title: &TokenSeq) -> f64;
}

impl Scorer for SemModel {
    fn score(&self, query: &TokenSeq, title: &TokenSeq) -> f64 {
        SemModel::score(self, query, title)
    }
}

impl<F: Fn(&TokenSeq, &TokenSeq) -> f64> Scorer for F {
    fn score(&self, query: &TokenSeq, title: &TokenSeq) -> f64 {
        self(query, title)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TestOrigin {
    /// One clicked-vs-non-clicked pair per holdout session.
    Test1,
    /// Simulator relevance grades.
    GroundTruth,
}

impl TestOrigin {
    pub fn name(self) -> &'static str {
        match self {
            TestOrigin::Test1 => "test1",
            TestOrigin::GroundTruth => "gt",
        }
    }
}

impl fmt::Display for TestOrigin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TestSet {
    pub pairs: Vec<PairwiseJudgment>,
    pub origin: TestOrigin,
}

/// Seeded split by session into `(train, holdout)`; both keep input order.
pub fn split_sessions(
    sessions: &[SearchSession],
    train_fraction: f64,
    master_seed: u64,
) -> Result<(Vec<SearchSession>, Vec<SearchSession>)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Config(format!(
            "train fraction must be in [0, 1], got {train_fraction}"
        )));
    }
    let mut rng = seed::rng(master_seed, "split", 0);
    let (mut train, mut holdout) = (Vec::new(), Vec::new());
    for s in sessions {
        if rng.random_bool(train_fraction) {
            train.push(s.clone());
        } else {
            holdout.push(s.clone());
        }
    }
    Ok((train, holdout))
}

pub fn check_disjoint(train: &[SearchSession], holdout: &[SearchSession]) -> Result<()> {
    let ids: HashSet<&str> = train.iter().map(|s| s.session_id.as_str()).collect();
    let overlap: Vec<&str> = holdout
        .iter()
        .map(|s| s.session_id.as_str())
        .filter(|id| ids.contains(id))
        .collect();
    match overlap.first() {
        None => Ok(()),
        Some(first) => Err(Error::Overlap {
            count: overlap.len(),
            first: first.to_string(),
        }),
    }
}

/// One uniformly chosen clicked and one uniformly chosen non-clicked result
/// per holdout session that has both.
pub fn build_test1(holdout: &[SearchSession], master_seed: u64) -> Result<TestSet> {
    let mut rng = seed::rng(master_seed, "test1", 0);
    let mut pairs = Vec::new();
    for s in holdout {
        let clicked: Vec<_> = s.results.iter().filter(|r| r.clicked).collect();
        let skipped: Vec<_> = s.results.iter().filter(|r| !r.clicked).collect();
        if clicked.is_empty() || skipped.is_empty() {
            continue;
        }
        let c = clicked[rng.random_range(0..clicked.len())];
        let n = skipped[rng.random_range(0..skipped.len())];
        if c.title == n.title {
            continue;
        }
        pairs.push(PairwiseJudgment {
            query: s.query.clone(),
            preferred: c.title.clone(),
            dispreferred: n.title.clone(),
            source: Source::Formulated(Strategy::ClickedOverNonClicked),
        });
    }
    if pairs.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    Ok(TestSet {
        pairs,
        origin: TestOrigin::Test1,
    })
}

/// Fraction of pairs whose preferred title scores strictly higher. Ties
/// count as wrong.
pub fn precision<S: Scorer + ?Sized>(scorer: &S, test: &TestSet) -> Result<f64> {
    if test.pairs.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let correct = test
        .pairs
        .iter()
        .filter(|p| scorer.score(&p.query, &p.preferred) > scorer.score(&p.query, &p.dispreferred))
        .count();
    Ok(correct as f64 / test.pairs.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub strategy: Strategy,
    pub iteration: usize,
    pub testset: TestOrigin,
    pub precision: f64,
    pub pairs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutcomeStatus {
    Trained,
    /// The strategy produced no judgments from the training sessions.
    Empty,
}

#[derive(Clone, Debug)]
pub struct StrategyOutcome {
    pub strategy: Strategy,
    pub judgments: usize,
    pub status: OutcomeStatus,
    pub model: Option<SemModel>,
    pub stats: Option<TrainStats>,
}

#[derive(Clone, Debug, Default)]
pub struct EvaluationReport {
    /// Precision after each training iteration, `1..=iterations`.
    pub rows: Vec<ReportRow>,
    /// Precision of each strategy's initial model (iteration 0).
    pub baseline: Vec<ReportRow>,
    pub outcomes: Vec<StrategyOutcome>,
}

impl EvaluationReport {
    pub fn curve(&self, strategy: Strategy, testset: TestOrigin) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.strategy == strategy && r.testset == testset)
            .map(|r| r.precision)
            .collect()
    }

    pub fn initial(&self, strategy: Strategy, testset: TestOrigin) -> Option<f64> {
        self.baseline
            .iter()
            .find(|r| r.strategy == strategy && r.testset == testset)
            .map(|r| r.precision)
    }

    pub fn outcome(&self, strategy: Strategy) -> Option<&StrategyOutcome> {
        self.outcomes.iter().find(|o| o.strategy == strategy)
    }

    /// `strategy,iteration,testset,precision,pairs`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "strategy,iteration,testset,precision,pairs")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{:.6},{}",
                r.strategy.tag(),
                r.iteration,
                r.testset,
                r.precision,
                r.pairs
            )?;
        }
        Ok(())
    }

    /// `strategy,status,judgments,initial_test1,initial_gt`.
    pub fn write_summary_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "strategy,status,judgments,initial_test1,initial_gt")?;
        for o in &self.outcomes {
            let cell = |t| {
                self.initial(o.strategy, t)
                    .map_or_else(String::new, |p| format!("{p:.6}"))
            };
            let status = match o.status {
                OutcomeStatus::Trained => "trained",
                OutcomeStatus::Empty => "empty",
            };
            writeln!(
                w,
                "{},{status},{},{},{}",
                o.strategy.tag(),
                o.judgments,
                cell(TestOrigin::Test1),
                cell(TestOrigin::GroundTruth)
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CompareConfig {
    pub training: TrainingConfig,
    pub ctr_params: CtrParams,
    /// Seed for drawing the Test-1 pairs.
    pub test_seed: u64,
}

/// Formulates judgments for each strategy from `train`, trains a model per
/// strategy from the same seed, and records precision on Test-1 (built from
/// `holdout`) and on `gt_pairs` after every iteration. Strategies train in
/// parallel; the report is in `strategies` order.
pub fn compare_strategies(
    train: &[SearchSession],
    holdout: &[SearchSession],
    gt_pairs: &[PairwiseJudgment],
    strategies: &[Strategy],
    config: &CompareConfig,
) -> Result<EvaluationReport> {
    check_disjoint(train, holdout)?;
    config.training.validate()?;
    let test1 = build_test1(holdout, config.test_seed)?;
    let mut tests = vec![test1];
    if !gt_pairs.is_empty() {
        tests.push(TestSet {
            pairs: gt_pairs.to_vec(),
            origin: TestOrigin::GroundTruth,
        });
    }
    let ctr = aggregate_ctr(train);
    let inputs = CtrInputs {
        table: &ctr,
        params: config.ctr_params,
    };

    let per_strategy: Vec<Result<(Vec<ReportRow>, StrategyOutcome)>> = strategies
        .par_iter()
        .map(|&strategy| {
            let judgments = formulate(train, strategy, Some(inputs))?;
            if judgments.is_empty() {
                return Ok((
                    Vec::new(),
                    StrategyOutcome {
                        strategy,
                        judgments: 0,
                        status: OutcomeStatus::Empty,
                        model: None,
                        stats: None,
                    },
                ));
            }
            let mut rows = Vec::new();
            let (model, stats) =
                train_with_hook(&judgments, &config.training, |iteration, model| {
                    for test in &tests {
                        rows.push(ReportRow {
                            strategy,
                            iteration,
                            testset: test.origin,
                            precision: precision(model, test).expect("test sets are non-empty"),
                            pairs: test.pairs.len(),
                        });
                    }
                })?;
            Ok((
                rows,
                StrategyOutcome {
                    strategy,
                    judgments: judgments.len(),
                    status: OutcomeStatus::Trained,
                    model: Some(model),
                    stats: Some(stats),
                },
            ))
        })
        .collect();

    let mut report = EvaluationReport::default();
    for result in per_strategy {
        let (rows, outcome) = result?;
        for row in rows {
            if row.iteration == 0 {
                report.baseline.push(row);
            } else {
                report.rows.push(row);
            }
        }
        report.outcomes.push(outcome);
    }
    Ok(report)
}

/// Standalone SVG line chart of one test set: one curve per trained
/// strategy, iteration on the horizontal axis.
pub fn write_svg_chart<W: Write>(
    report: &EvaluationReport,
    testset: TestOrigin,
    mut w: W,
) -> Result<()> {
    const WIDTH: f64 = 640.0;
    const HEIGHT: f64 = 400.0;
    const PAD: f64 = 50.0;
    const COLORS: [&str; 5] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd"];

    let curves: Vec<(Strategy, Vec<(usize, f64)>)> = report
        .outcomes
        .iter()
        .filter(|o| o.status == OutcomeStatus::Trained)
        .map(|o| {
            let points = report
                .baseline
                .iter()
                .chain(&report.rows)
                .filter(|r| r.strategy == o.strategy && r.testset == testset)
                .map(|r| (r.iteration, r.precision))
                .collect();
            (o.strategy, points)
        })
        .collect();
    let max_iter = curves
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|p| p.0))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let (lo, hi) = curves
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|p| p.1))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
            (a.min(p), b.max(p))
        });
    let (lo, hi) = if lo.is_finite() {
        ((lo - 0.02).max(0.0), (hi + 0.02).min(1.0))
    } else {
        (0.0, 1.0)
    };
    let span = (hi - lo).max(1e-6);
    let x = |i: usize| PAD + (WIDTH - 2.0 * PAD) * i as f64 / max_iter;
    let y = |p: f64| HEIGHT - PAD - (HEIGHT - 2.0 * PAD) * (p - lo) / span;

    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )?;
    writeln!(w, r#"<rect width="100%" height="100%" fill="white"/>"#)?;
    writeln!(
        w,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">Pairwise precision ({testset})</text>"#,
        WIDTH / 2.0
    )?;
    writeln!(
        w,
        r#"<polyline fill="none" stroke="black" points="{PAD},{PAD} {PAD},{b} {r},{b}"/>"#,
        b = HEIGHT - PAD,
        r = WIDTH - PAD
    )?;
    for k in 0..=4 {
        let p = lo + span * k as f64 / 4.0;
        writeln!(
            w,
            r#"<text x="{}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{p:.3}</text>"#,
            PAD - 6.0,
            y(p) + 4.0
        )?;
    }
    writeln!(
        w,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">iteration</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0
    )?;
    for (k, (strategy, pts)) in curves.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let coords: Vec<String> = pts
            .iter()
            .map(|&(i, p)| format!("{:.1},{:.1}", x(i), y(p)))
            .collect();
        writeln!(
            w,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        )?;
        writeln!(
            w,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="{color}">{}</text>"#,
            WIDTH - PAD + 4.0,
            PAD + 16.0 * k as f64,
            strategy.tag().replace('>', "&gt;")
        )?;
    }
    writeln!(w, "</svg>")?;
    Ok(())
}
