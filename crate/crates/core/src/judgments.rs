//! Pairwise judgments formulated from classified sessions.
//!
//! Four atomic strategies pair two disjoint label groups of the same session.
//! The hybrid `Clicked > Non-Clicked` strategy is the union of
//! `Clicked > Skipped` and `Clicked > Non-Examined`.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::log_model::{classify_results, CtrTable, ResultLabel, SearchSession, TokenSeq};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    ClickedOverSkipped,
    ClickedOverClicked,
    ClickedOverNonExamined,
    SkippedOverNonExamined,
    ClickedOverNonClicked,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::ClickedOverSkipped,
        Strategy::ClickedOverClicked,
        Strategy::ClickedOverNonExamined,
        Strategy::SkippedOverNonExamined,
        Strategy::ClickedOverNonClicked,
    ];

    /// The mutually exclusive strategies, in distribution-report order.
    pub const ATOMIC: [Strategy; 4] = [
        Strategy::ClickedOverClicked,
        Strategy::ClickedOverSkipped,
        Strategy::SkippedOverNonExamined,
        Strategy::ClickedOverNonExamined,
    ];

    /// Tag used in judgment files, e.g. `C>NE`.
    pub fn tag(self) -> &'static str {
        match self {
            Strategy::ClickedOverSkipped => "C>S",
            Strategy::ClickedOverClicked => "C>C",
            Strategy::ClickedOverNonExamined => "C>NE",
            Strategy::SkippedOverNonExamined => "S>NE",
            Strategy::ClickedOverNonClicked => "C>NC",
        }
    }

    /// Command-line spelling, e.g. `C-NE`.
    pub fn flag(self) -> &'static str {
        match self {
            Strategy::ClickedOverSkipped => "C-S",
            Strategy::ClickedOverClicked => "C-C",
            Strategy::ClickedOverNonExamined => "C-NE",
            Strategy::SkippedOverNonExamined => "S-NE",
            Strategy::ClickedOverNonClicked => "C-NC",
        }
    }

    pub fn is_atomic(self) -> bool {
        self != Strategy::ClickedOverNonClicked
    }

    fn label_pattern(self) -> Option<(ResultLabel, &'static [ResultLabel])> {
        use ResultLabel::*;
        match self {
            Strategy::ClickedOverSkipped => Some((Clicked, &[Skipped])),
            Strategy::ClickedOverNonExamined => Some((Clicked, &[NonExamined])),
            Strategy::SkippedOverNonExamined => Some((Skipped, &[NonExamined])),
            Strategy::ClickedOverNonClicked => Some((Clicked, &[Skipped, NonExamined])),
            Strategy::ClickedOverClicked => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// Accepts both the file tag (`C>NE`) and the flag spelling (`C-NE`).
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.tag().eq_ignore_ascii_case(s) || st.flag().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

/// Where a judgment came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Source {
    Formulated(Strategy),
    /// Simulator ground-truth relevance grades.
    GroundTruth,
}

impl Source {
    pub fn tag(self) -> &'static str {
        match self {
            Source::Formulated(s) => s.tag(),
            Source::GroundTruth => "GT",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("GT") {
            Ok(Source::GroundTruth)
        } else {
            s.parse().map(Source::Formulated)
        }
    }
}

/// `preferred > dispreferred` for `query`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PairwiseJudgment {
    pub query: TokenSeq,
    pub preferred: TokenSeq,
    pub dispreferred: TokenSeq,
    pub source: Source,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CtrParams {
    pub min_gap: f64,
    pub min_impressions: u64,
}

impl Default for CtrParams {
    fn default() -> Self {
        CtrParams {
            min_gap: 0.05,
            min_impressions: 5,
        }
    }
}

/// Corpus-level CTR evidence for `Clicked > Clicked`.
#[derive(Clone, Copy, Debug)]
pub struct CtrInputs<'a> {
    pub table: &'a CtrTable,
    pub params: CtrParams,
}

/// Ordered `(preferred, dispreferred)` result indices for one session.
/// Sessions without clicks produce nothing.
pub(crate) fn session_pairs(
    session: &SearchSession,
    strategy: Strategy,
    ctr: Option<CtrInputs<'_>>,
) -> Result<Vec<(usize, usize)>> {
    let labels = match classify_results(session) {
        Ok(labels) => labels,
        Err(Error::NoClicks) => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let results = &session.results;
    let mut pairs = Vec::new();
    match strategy.label_pattern() {
        Some((left, right)) => {
            for (i, li) in labels.iter().enumerate() {
                if *li != left {
                    continue;
                }
                for (j, lj) in labels.iter().enumerate() {
                    if right.contains(lj) && results[i].title != results[j].title {
                        pairs.push((i, j));
                    }
                }
            }
        }
        None => {
            let ctr = ctr.ok_or_else(|| {
                Error::Config("Clicked > Clicked needs a CTR table and thresholds".into())
            })?;
            let stats: Vec<_> = results
                .iter()
                .map(|r| ctr.table.get(&session.query, &r.title))
                .collect();
            let eligible = |k: usize| {
                results[k].clicked
                    && stats[k].is_some_and(|e| e.impressions >= ctr.params.min_impressions)
            };
            for i in (0..results.len()).filter(|&i| eligible(i)) {
                for j in (0..results.len()).filter(|&j| eligible(j)) {
                    if results[i].title == results[j].title {
                        continue;
                    }
                    let gap = stats[i].unwrap().ctr() - stats[j].unwrap().ctr();
                    if gap > 0.0 && gap >= ctr.params.min_gap {
                        pairs.push((i, j));
                    }
                }
            }
        }
    }
    Ok(pairs)
}

/// Emits every judgment `strategy` derives from `sessions`, in session
/// order, then rank of the preferred title, then rank of the dispreferred.
pub fn formulate(
    sessions: &[SearchSession],
    strategy: Strategy,
    ctr: Option<CtrInputs<'_>>,
) -> Result<Vec<PairwiseJudgment>> {
    if strategy == Strategy::ClickedOverClicked && ctr.is_none() {
        return Err(Error::Config(
            "Clicked > Clicked needs a CTR table and thresholds".into(),
        ));
    }
    let mut out = Vec::new();
    for s in sessions {
        for (i, j) in session_pairs(s, strategy, ctr)? {
            out.push(PairwiseJudgment {
                query: s.query.clone(),
                preferred: s.results[i].title.clone(),
                dispreferred: s.results[j].title.clone(),
                source: Source::Formulated(strategy),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistributionRow {
    pub strategy: Strategy,
    pub count: usize,
    pub percentage: f64,
}

/// Share of each atomic strategy in the pool of all atomic pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionReport {
    pub rows: Vec<DistributionRow>,
    pub total: usize,
}

impl DistributionReport {
    pub fn count(&self, strategy: Strategy) -> Option<usize> {
        self.rows
            .iter()
            .find(|r| r.strategy == strategy)
            .map(|r| r.count)
    }

    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        writeln!(writer, "strategy,count,percentage")?;
        for r in &self.rows {
            writeln!(
                writer,
                "{},{},{:.4}",
                r.strategy.tag(),
                r.count,
                r.percentage
            )?;
        }
        Ok(())
    }
}

pub fn distribution(
    sessions: &[SearchSession],
    ctr: &CtrTable,
    params: CtrParams,
) -> Result<DistributionReport> {
    let inputs = CtrInputs { table: ctr, params };
    let mut counts = [0usize; 4];
    for s in sessions {
        for (slot, strategy) in counts.iter_mut().zip(Strategy::ATOMIC) {
            *slot += session_pairs(s, strategy, Some(inputs))?.len();
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyLog);
    }
    let rows = Strategy::ATOMIC
        .into_iter()
        .zip(counts)
        .map(|(strategy, count)| DistributionRow {
            strategy,
            count,
            percentage: 100.0 * count as f64 / total as f64,
        })
        .collect();
    Ok(DistributionReport { rows, total })
}

/// Writes `query \t preferred \t dispreferred \t tag` rows.
pub fn write_judgments<W: Write>(judgments: &[PairwiseJudgment], mut writer: W) -> Result<()> {
    for j in judgments {
        writeln!(
            writer,
            "{}\t{}\t{}\t{}",
            j.query,
            j.preferred,
            j.dispreferred,
            j.source.tag()
        )?;
    }
    Ok(())
}

pub fn read_judgments<R: BufRead>(reader: R) -> Result<Vec<PairwiseJudgment>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let row = idx + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [query, preferred, dispreferred, tag] = fields[..] else {
            return Err(Error::parse(
                row,
                format!("expected 4 fields, got {}", fields.len()),
            ));
        };
        let source = tag
            .parse::<Source>()
            .map_err(|e| Error::parse(row, e.to_string()))?;
        let query = TokenSeq::parse(query);
        if query.is_empty() {
            return Err(Error::parse(row, "empty query"));
        }
        out.push(PairwiseJudgment {
            query,
            preferred: TokenSeq::parse(preferred),
            dispreferred: TokenSeq::parse(dispreferred),
            source,
        });
    }
    Ok(out)
}
