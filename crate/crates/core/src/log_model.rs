//! Search click logs: sessions, result classification and CTR aggregation.
//!
//! A session is one query with its ranked result list and per-result click
//! flags. Sessions are stored as JSONL, one object per line:
//!
//! ```text
//! {"sid":"s1","query":"red shoes","results":[{"title":"buy red shoes","clicked":1}]}
//! ```
//!
//! Array order defines rank, so the first result is rank 1.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum number of results kept per session (the top ten).
pub const MAX_RESULTS: usize = 10;

/// Lowercased, whitespace-free tokens of a query or title.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSeq(Vec<String>);

impl TokenSeq {
    /// Lowercases `text` and splits it on runs of whitespace.
    pub fn parse(text: &str) -> Self {
        TokenSeq(text.split_whitespace().map(|t| t.to_lowercase()).collect())
    }

    /// Builds a sequence from pre-split tokens. Tokens must be non-empty and
    /// free of whitespace; they are lowercased.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut out = Vec::new();
        for tok in tokens {
            let tok = tok.as_ref();
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid token {tok:?}")));
            }
            out.push(tok.to_lowercase());
        }
        Ok(TokenSeq(out))
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Tokens joined by single spaces.
    pub fn text(&self) -> String {
        self.0.join(" ")
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, tok) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            f.write_str(tok)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResultRecord {
    pub title: TokenSeq,
    /// 1-based position.
    pub rank: usize,
    pub clicked: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SearchSession {
    pub session_id: String,
    pub query: TokenSeq,
    pub results: Vec<ResultRecord>,
}

impl SearchSession {
    /// Builds a session from `(title, clicked)` pairs in rank order.
    pub fn new(
        session_id: impl Into<String>,
        query: TokenSeq,
        results: impl IntoIterator<Item = (TokenSeq, bool)>,
    ) -> Result<Self> {
        let session = SearchSession {
            session_id: session_id.into(),
            query,
            results: results
                .into_iter()
                .enumerate()
                .map(|(i, (title, clicked))| ResultRecord {
                    title,
                    rank: i + 1,
                    clicked,
                })
                .collect(),
        };
        session.validate()?;
        Ok(session)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::Validation {
            session_id: self.session_id.clone(),
            message,
        };
        if self.query.is_empty() {
            return Err(fail("empty query".into()));
        }
        if self.results.is_empty() || self.results.len() > MAX_RESULTS {
            return Err(fail(format!(
                "expected 1..={MAX_RESULTS} results, got {}",
                self.results.len()
            )));
        }
        if let Some(r) = self
            .results
            .iter()
            .enumerate()
            .find(|(i, r)| r.rank != i + 1)
        {
            return Err(fail(format!(
                "non-consecutive rank {} at position {}",
                r.1.rank, r.0
            )));
        }
        Ok(())
    }

    pub fn has_click(&self) -> bool {
        self.results.iter().any(|r| r.clicked)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ResultLabel {
    Clicked,
    /// Not clicked, ranked above some clicked result.
    Skipped,
    /// Ranked below all clicked results.
    NonExamined,
}

/// Labels every result of a session from its click pattern.
///
/// Sessions without any click have no anchor for the examination boundary
/// and yield [`Error::NoClicks`].
pub fn classify_results(session: &SearchSession) -> Result<Vec<ResultLabel>> {
    let last_click = session
        .results
        .iter()
        .filter(|r| r.clicked)
        .map(|r| r.rank)
        .max()
        .ok_or(Error::NoClicks)?;
    Ok(session
        .results
        .iter()
        .map(|r| {
            if r.clicked {
                ResultLabel::Clicked
            } else if r.rank < last_click {
                ResultLabel::Skipped
            } else {
                ResultLabel::NonExamined
            }
        })
        .collect())
}

#[derive(Deserialize, Serialize)]
struct WireResult {
    title: String,
    clicked: u8,
}

#[derive(Deserialize, Serialize)]
struct WireSession {
    sid: String,
    query: String,
    results: Vec<WireResult>,
}

/// Reads sessions from a JSONL stream. Blank lines are ignored.
pub fn parse_sessions<R: BufRead>(reader: R) -> Result<Vec<SearchSession>> {
    let mut sessions = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: WireSession =
            serde_json::from_str(&line).map_err(|e| Error::parse(line_no, e.to_string()))?;
        let mut results = Vec::with_capacity(wire.results.len());
        for r in wire.results {
            let clicked = match r.clicked {
                0 => false,
                1 => true,
                other => {
                    return Err(Error::parse(
                        line_no,
                        format!("clicked must be 0 or 1, got {other}"),
                    ))
                }
            };
            results.push((TokenSeq::parse(&r.title), clicked));
        }
        sessions.push(SearchSession::new(
            wire.sid,
            TokenSeq::parse(&wire.query),
            results,
        )?);
    }
    Ok(sessions)
}

pub fn write_sessions<W: Write>(sessions: &[SearchSession], mut writer: W) -> Result<()> {
    for s in sessions {
        let wire = WireSession {
            sid: s.session_id.clone(),
            query: s.query.text(),
            results: s
                .results
                .iter()
                .map(|r| WireResult {
                    title: r.title.text(),
                    clicked: u8::from(r.clicked),
                })
                .collect(),
        };
        serde_json::to_writer(&mut writer, &wire).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CtrEntry {
    pub impressions: u64,
    pub clicks: u64,
}

impl CtrEntry {
    pub fn ctr(&self) -> f64 {
        if self.impressions == 0 {
            0.0
        } else {
            self.clicks as f64 / self.impressions as f64
        }
    }
}

/// Click-through statistics keyed on the exact `(query text, title text)` pair.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CtrTable {
    entries: BTreeMap<(String, String), CtrEntry>,
}

impl CtrTable {
    pub fn get(&self, query: &TokenSeq, title: &TokenSeq) -> Option<CtrEntry> {
        self.entries.get(&(query.text(), title.text())).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in lexicographic `(query, title)` order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, CtrEntry)> {
        self.entries
            .iter()
            .map(|((q, t), e)| (q.as_str(), t.as_str(), *e))
    }

    /// Writes `query \t title \t impressions \t clicks` rows, sorted.
    pub fn write_tsv<W: Write>(&self, mut writer: W) -> Result<()> {
        for (q, t, e) in self.iter() {
            writeln!(writer, "{q}\t{t}\t{}\t{}", e.impressions, e.clicks)?;
        }
        Ok(())
    }
}

pub fn aggregate_ctr(sessions: &[SearchSession]) -> CtrTable {
    let mut entries: BTreeMap<(String, String), CtrEntry> = BTreeMap::new();
    for s in sessions {
        let q = s.query.text();
        for r in &s.results {
            let e = entries.entry((q.clone(), r.title.text())).or_default();
            e.impressions += 1;
            if r.clicked {
                e.clicks += 1;
            }
        }
    }
    CtrTable { entries }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn session(sid: &str, clicks: &[bool]) -> SearchSession {
        SearchSession::new(
            sid,
            TokenSeq::parse("q"),
            clicks
                .iter()
                .enumerate()
                .map(|(i, &c)| (TokenSeq::parse(&format!("title {i}")), c)),
        )
        .unwrap()
    }

    prop_compose! {
        pub(crate) fn arb_session()(
            sid in "[a-z0-9]{1,8}",
            query in proptest::collection::vec("[a-z]{1,5}", 1..4),
            results in proptest::collection::vec(
                (proptest::collection::vec("[a-z]{1,4}", 0..4), any::<bool>()), 1..=10),
        ) -> SearchSession {
            SearchSession::new(
                sid,
                TokenSeq::from_tokens(query).unwrap(),
                results.into_iter().map(|(t, c)| (TokenSeq::from_tokens(t).unwrap(), c)),
            ).unwrap()
        }
    }

    #[test]
    fn parses_documented_line() {
        let line = r#"{"sid":"s1","query":"red shoes","results":[{"title":"buy red shoes","clicked":1},{"title":"shoe history","clicked":0}]}"#;
        let sessions = parse_sessions(line.as_bytes()).unwrap();
        assert_eq!(sessions.len(), 1);
        let s = &sessions[0];
        assert_eq!(s.session_id, "s1");
        assert_eq!(s.query.tokens(), ["red", "shoes"]);
        assert_eq!(s.results.len(), 2);
        assert_eq!((s.results[0].rank, s.results[0].clicked), (1, true));
        assert_eq!((s.results[1].rank, s.results[1].clicked), (2, false));
    }

    #[test]
    fn empty_stream_is_empty_list() {
        assert!(parse_sessions(&b""[..]).unwrap().is_empty());
        assert!(parse_sessions(&b"\n\n"[..]).unwrap().is_empty());
    }

    #[test]
    fn empty_results_is_validation_error() {
        let err = parse_sessions(&br#"{"sid":"s9","query":"x","results":[]}"#[..]).unwrap_err();
        assert!(matches!(err, Error::Validation { ref session_id, .. } if session_id == "s9"));
    }

    #[test]
    fn too_many_results_and_empty_query_rejected() {
        let results: Vec<String> = (0..11)
            .map(|i| format!(r#"{{"title":"t{i}","clicked":0}}"#))
            .collect();
        let line = format!(
            r#"{{"sid":"big","query":"x","results":[{}]}}"#,
            results.join(",")
        );
        assert!(matches!(
            parse_sessions(line.as_bytes()),
            Err(Error::Validation { .. })
        ));
        let line = r#"{"sid":"nq","query":"   ","results":[{"title":"t","clicked":0}]}"#;
        assert!(matches!(
            parse_sessions(line.as_bytes()),
            Err(Error::Validation { .. })
        ));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let input = "{\"sid\":\"a\",\"query\":\"x\",\"results\":[{\"title\":\"t\",\"clicked\":0}]}\n{oops\n";
        match parse_sessions(input.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let bad_flag = r#"{"sid":"a","query":"x","results":[{"title":"t","clicked":2}]}"#;
        assert!(matches!(
            parse_sessions(bad_flag.as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn tokenization_lowercases_and_splits() {
        assert_eq!(
            TokenSeq::parse("  Red\tSHOES  now ").tokens(),
            ["red", "shoes", "now"]
        );
        assert!(TokenSeq::from_tokens(["a b"]).is_err());
        assert!(TokenSeq::from_tokens([""]).is_err());
    }

    #[test]
    fn classify_examples() {
        use ResultLabel::*;
        let s = session("a", &[false, true, false, true, false]);
        assert_eq!(
            classify_results(&s).unwrap(),
            [Skipped, Clicked, Skipped, Clicked, NonExamined]
        );
        let s = session("b", &[true, true, true]);
        assert_eq!(classify_results(&s).unwrap(), [Clicked, Clicked, Clicked]);
        let s = session("c", &[false, false]);
        assert!(matches!(classify_results(&s), Err(Error::NoClicks)));
    }

    #[test]
    fn ctr_counts() {
        let mut sessions = Vec::new();
        for i in 0..10 {
            sessions.push(session(&i.to_string(), &[i < 3]));
        }
        let table = aggregate_ctr(&sessions);
        let e = table
            .get(&TokenSeq::parse("q"), &TokenSeq::parse("title 0"))
            .unwrap();
        assert_eq!((e.impressions, e.clicks), (10, 3));
        assert!((e.ctr() - 0.3).abs() < 1e-15);
        assert!(aggregate_ctr(&[]).is_empty());
    }

    #[test]
    fn ctr_keyed_on_query_title_pair() {
        let title = TokenSeq::parse("shared title");
        let a = SearchSession::new("a", TokenSeq::parse("q one"), [(title.clone(), true)]).unwrap();
        let b =
            SearchSession::new("b", TokenSeq::parse("q two"), [(title.clone(), false)]).unwrap();
        let table = aggregate_ctr(&[a, b]);
        assert_eq!(table.len(), 2);
        let mut out = Vec::new();
        table.write_tsv(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "q one\tshared title\t1\t1\nq two\tshared title\t1\t0\n"
        );
    }

    /// Literal reading of the label definitions, scanning every clicked rank.
    fn brute_force_labels(s: &SearchSession) -> Vec<ResultLabel> {
        let clicked: Vec<usize> = s
            .results
            .iter()
            .filter(|r| r.clicked)
            .map(|r| r.rank)
            .collect();
        s.results
            .iter()
            .map(|r| {
                if r.clicked {
                    ResultLabel::Clicked
                } else if clicked.iter().any(|&c| r.rank < c) {
                    ResultLabel::Skipped
                } else {
                    assert!(clicked.iter().all(|&c| r.rank > c));
                    ResultLabel::NonExamined
                }
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn classify_matches_brute_force(s in arb_session()) {
            match classify_results(&s) {
                Ok(labels) => {
                    prop_assert_eq!(&labels, &brute_force_labels(&s));
                    for (r, l) in s.results.iter().zip(&labels) {
                        prop_assert_eq!(r.clicked, *l == ResultLabel::Clicked);
                    }
                    let min_click = s.results.iter().filter(|r| r.clicked).map(|r| r.rank).min().unwrap();
                    for (r, l) in s.results.iter().zip(&labels) {
                        if *l == ResultLabel::NonExamined {
                            prop_assert!(r.rank > min_click);
                        }
                    }
                }
                Err(Error::NoClicks) => prop_assert!(!s.has_click()),
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }

        #[test]
        fn sessions_round_trip(sessions in proptest::collection::vec(arb_session(), 0..20)) {
            let mut buf = Vec::new();
            write_sessions(&sessions, &mut buf).unwrap();
            prop_assert_eq!(parse_sessions(&buf[..]).unwrap(), sessions);
        }

        #[test]
        fn ctr_is_order_independent(
            mut sessions in proptest::collection::vec(arb_session(), 0..20),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let before = aggregate_ctr(&sessions);
            sessions.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(aggregate_ctr(&sessions), before);
        }
    }
}
