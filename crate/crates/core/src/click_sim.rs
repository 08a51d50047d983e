//! Synthetic corpora and cascade click logs with known relevance grades.
//!
//! Tokens are partitioned into topics. Each query draws its tokens from one
//! topic; its candidate titles are on-topic (grade 2), mixed (grade 1) or
//! off-topic (grade 0). A simulated user scans the ranked list from the top,
//! clicks an examined result with a grade-dependent probability, and keeps
//! scanning with one probability after a click and another after a skip.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::judgments::{PairwiseJudgment, Source};
use crate::log_model::{SearchSession, TokenSeq, MAX_RESULTS};
use crate::seed;

pub type Grade = u8;

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub vocab_size: usize,
    pub num_topics: usize,
    pub query_count: usize,
    pub results_per_query: usize,
    pub sessions_per_query: usize,
    pub tokens_per_query: usize,
    pub tokens_per_title: usize,
    /// Click probability of an examined result, indexed by grade.
    pub click_prob: [f64; 3],
    /// Probability of examining the next result after a non-click (λ).
    pub continue_after_nonclick: f64,
    /// Probability of examining the next result after a click (μ).
    pub continue_after_click: f64,
    /// Standard deviation of the Gaussian noise added to grades before ranking.
    pub rank_noise: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            vocab_size: 2000,
            num_topics: 20,
            query_count: 500,
            results_per_query: 10,
            sessions_per_query: 20,
            tokens_per_query: 3,
            tokens_per_title: 6,
            click_prob: [0.05, 0.3, 0.7],
            continue_after_nonclick: 0.8,
            continue_after_click: 0.6,
            rank_noise: 1.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_topics < 2 {
            return fail("at least 2 topics are needed to generate off-topic titles".into());
        }
        if !(1..=MAX_RESULTS).contains(&self.results_per_query) {
            return fail(format!(
                "results_per_query must be in 1..={MAX_RESULTS}, got {}",
                self.results_per_query
            ));
        }
        if self.tokens_per_query == 0 || self.tokens_per_title == 0 {
            return fail("queries and titles need at least one token".into());
        }
        let topic_size = self.vocab_size / self.num_topics;
        if topic_size < self.tokens_per_title.max(self.tokens_per_query) {
            return fail(format!(
                "vocab_size {} is too small for {} topics of {} tokens",
                self.vocab_size,
                self.num_topics,
                self.tokens_per_title.max(self.tokens_per_query)
            ));
        }
        let probs = self
            .click_prob
            .iter()
            .chain([&self.continue_after_click, &self.continue_after_nonclick]);
        for &p in probs {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("probability {p} outside [0, 1]"));
            }
        }
        if !self.rank_noise.is_finite() || self.rank_noise < 0.0 {
            return fail(format!(
                "rank_noise must be finite and >= 0, got {}",
                self.rank_noise
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub title: TokenSeq,
    pub grade: Grade,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimQuery {
    pub query: TokenSeq,
    pub topic: usize,
    pub candidates: Vec<Candidate>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub queries: Vec<SimQuery>,
}

/// Relevance grade of every generated `(query, title)` pair.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    grades: BTreeMap<(String, String), Grade>,
}

impl GroundTruth {
    pub fn grade(&self, query: &TokenSeq, title: &TokenSeq) -> Option<Grade> {
        self.grades.get(&(query.text(), title.text())).copied()
    }

    pub fn len(&self) -> usize {
        self.grades.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grades.is_empty()
    }

    /// `query \t title \t grade`, sorted by query then title.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        for ((q, t), g) in &self.grades {
            writeln!(w, "{q}\t{t}\t{g}")?;
        }
        Ok(())
    }
}

struct Topics {
    members: Vec<Vec<String>>,
}

impl Topics {
    /// Token `i` belongs to topic `i mod num_topics`.
    fn new(vocab_size: usize, num_topics: usize) -> Self {
        let mut members = vec![Vec::new(); num_topics];
        for i in 0..vocab_size {
            members[i % num_topics].push(format!("w{i}"));
        }
        Topics { members }
    }

    fn draw(&self, rng: &mut impl Rng, topic: usize, k: usize) -> Vec<String> {
        let pool = &self.members[topic];
        sample(rng, pool.len(), k)
            .iter()
            .map(|i| pool[i].clone())
            .collect()
    }

    fn other_topic(&self, rng: &mut impl Rng, topic: usize) -> usize {
        let n = self.members.len();
        (topic + 1 + rng.random_range(0..n - 1)) % n
    }
}

const MAX_ATTEMPTS: usize = 1000;

fn title_for(
    topics: &Topics,
    rng: &mut impl Rng,
    topic: usize,
    grade: Grade,
    len: usize,
) -> TokenSeq {
    let tokens = match grade {
        2 => topics.draw(rng, topic, len),
        1 => {
            let on = len.div_ceil(2);
            let other = topics.other_topic(rng, topic);
            let mut t = topics.draw(rng, topic, on);
            t.extend(topics.draw(rng, other, len - on));
            t
        }
        _ => {
            let other = topics.other_topic(rng, topic);
            topics.draw(rng, other, len)
        }
    };
    TokenSeq::from_tokens(tokens).expect("generated tokens are valid")
}

pub fn generate_corpus(config: &SimConfig) -> Result<(Corpus, GroundTruth)> {
    config.validate()?;
    let topics = Topics::new(config.vocab_size, config.num_topics);
    let mut rng = seed::rng(config.seed, "corpus", 0);
    let mut seen_queries = HashSet::new();
    let mut queries = Vec::with_capacity(config.query_count);
    let mut truth = GroundTruth::default();
    for _ in 0..config.query_count {
        let (topic, query) = (0..MAX_ATTEMPTS)
            .find_map(|_| {
                let topic = rng.random_range(0..config.num_topics);
                let q =
                    TokenSeq::from_tokens(topics.draw(&mut rng, topic, config.tokens_per_query))
                        .expect("generated tokens are valid");
                seen_queries.insert(q.clone()).then_some((topic, q))
            })
            .ok_or_else(|| Error::Config("vocabulary too small for distinct queries".into()))?;

        let mut seen_titles = HashSet::new();
        let mut candidates = Vec::with_capacity(config.results_per_query);
        for _ in 0..config.results_per_query {
            let grade: Grade = rng.random_range(0..3);
            let title = (0..MAX_ATTEMPTS)
                .find_map(|_| {
                    let t = title_for(&topics, &mut rng, topic, grade, config.tokens_per_title);
                    seen_titles.insert(t.clone()).then_some(t)
                })
                .ok_or_else(|| Error::Config("vocabulary too small for distinct titles".into()))?;
            truth.grades.insert((query.text(), title.text()), grade);
            candidates.push(Candidate { title, grade });
        }
        queries.push(SimQuery {
            query,
            topic,
            candidates,
        });
    }
    Ok((Corpus { queries }, truth))
}

/// One simulated session plus the number of results the user examined.
pub fn simulate_session(
    query: &SimQuery,
    session_id: String,
    config: &SimConfig,
    rng: &mut impl Rng,
) -> (SearchSession, usize) {
    let noise = Normal::new(0.0, config.rank_noise).expect("validated noise");
    let mut keyed: Vec<(f64, usize)> = query
        .candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let jitter = if config.rank_noise > 0.0 {
                noise.sample(rng)
            } else {
                0.0
            };
            (f64::from(c.grade) + jitter, i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut clicks = vec![false; keyed.len()];
    let mut examined = 0;
    for (pos, &(_, idx)) in keyed.iter().enumerate() {
        examined = pos + 1;
        let clicked = rng.random_bool(config.click_prob[usize::from(query.candidates[idx].grade)]);
        clicks[pos] = clicked;
        let keep_going = if clicked {
            config.continue_after_click
        } else {
            config.continue_after_nonclick
        };
        if !rng.random_bool(keep_going) {
            break;
        }
    }
    let session = SearchSession::new(
        session_id,
        query.query.clone(),
        keyed
            .iter()
            .zip(clicks)
            .map(|(&(_, idx), c)| (query.candidates[idx].title.clone(), c)),
    )
    .expect("simulated sessions satisfy the session invariants");
    (session, examined)
}

/// `sessions_per_query` sessions per query, query-major. Sessions without
/// clicks are kept.
pub fn simulate_sessions(corpus: &Corpus, config: &SimConfig) -> Vec<SearchSession> {
    let mut out = Vec::with_capacity(corpus.queries.len() * config.sessions_per_query);
    for (qi, q) in corpus.queries.iter().enumerate() {
        for si in 0..config.sessions_per_query {
            let index = (qi * config.sessions_per_query + si) as u64;
            let mut rng = seed::rng(config.seed, "session", index);
            out.push(simulate_session(q, format!("q{qi}-s{si}"), config, &mut rng).0);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthPairs {
    pub pairs: Vec<PairwiseJudgment>,
    /// Queries whose candidates all share one grade.
    pub skipped_queries: usize,
}

/// Samples up to `pairs_per_query` pairs with distinct grades per query; the
/// higher grade is preferred.
pub fn ground_truth_pairs(
    corpus: &Corpus,
    truth: &GroundTruth,
    pairs_per_query: usize,
    master_seed: u64,
) -> GroundTruthPairs {
    let mut pairs = Vec::new();
    let mut skipped_queries = 0;
    for (qi, q) in corpus.queries.iter().enumerate() {
        let graded: Vec<(&TokenSeq, Grade)> = q
            .candidates
            .iter()
            .map(|c| (&c.title, truth.grade(&q.query, &c.title).unwrap_or(c.grade)))
            .collect();
        let mut eligible = Vec::new();
        for (i, a) in graded.iter().enumerate() {
            for b in &graded[i + 1..] {
                match a.1.cmp(&b.1) {
                    std::cmp::Ordering::Greater => eligible.push((a.0, b.0)),
                    std::cmp::Ordering::Less => eligible.push((b.0, a.0)),
                    std::cmp::Ordering::Equal => {}
                }
            }
        }
        if eligible.is_empty() {
            skipped_queries += 1;
            continue;
        }
        let mut rng = seed::rng(master_seed, "gt-pairs", qi as u64);
        let k = pairs_per_query.min(eligible.len());
        let mut picked: Vec<usize> = sample(&mut rng, eligible.len(), k).into_vec();
        picked.sort_unstable();
        for i in picked {
            let (hi, lo) = eligible[i];
            pairs.push(PairwiseJudgment {
                query: q.query.clone(),
                preferred: hi.clone(),
                dispreferred: lo.clone(),
                source: Source::GroundTruth,
            });
        }
    }
    GroundTruthPairs {
        pairs,
        skipped_queries,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::log_model::write_sessions;

    fn small() -> SimConfig {
        SimConfig {
            vocab_size: 200,
            num_topics: 5,
            query_count: 20,
            sessions_per_query: 5,
            ..SimConfig::default()
        }
    }

    #[test]
    fn rejects_infeasible_configs() {
        let one_topic = SimConfig {
            num_topics: 1,
            ..small()
        };
        assert!(matches!(generate_corpus(&one_topic), Err(Error::Config(_))));
        let eleven = SimConfig {
            results_per_query: 11,
            ..small()
        };
        assert!(generate_corpus(&eleven).is_err());
        let tiny_vocab = SimConfig {
            vocab_size: 20,
            ..small()
        };
        assert!(generate_corpus(&tiny_vocab).is_err());
        let bad_prob = SimConfig {
            click_prob: [0.0, 1.5, 0.0],
            ..small()
        };
        assert!(generate_corpus(&bad_prob).is_err());
    }

    #[test]
    fn corpus_counts_and_determinism() {
        let config = SimConfig {
            query_count: 10,
            results_per_query: 10,
            ..small()
        };
        let (corpus, truth) = generate_corpus(&config).unwrap();
        assert_eq!(truth.len(), 100);
        assert_eq!(corpus.queries.len(), 10);
        assert_eq!(
            generate_corpus(&config).unwrap(),
            (corpus.clone(), truth.clone())
        );
        let other = generate_corpus(&SimConfig { seed: 1, ..config }).unwrap();
        assert_ne!(other.0, corpus);
    }

    #[test]
    fn titles_follow_topic_structure() {
        let config = small();
        let topics = Topics::new(config.vocab_size, config.num_topics);
        let topic_of = |tok: &str| tok[1..].parse::<usize>().unwrap() % config.num_topics;
        let (corpus, _) = generate_corpus(&config).unwrap();
        for q in &corpus.queries {
            assert!(q.query.tokens().iter().all(|t| topic_of(t) == q.topic));
            for c in &q.candidates {
                let on = c
                    .title
                    .tokens()
                    .iter()
                    .filter(|t| topic_of(t) == q.topic)
                    .count();
                match c.grade {
                    2 => assert_eq!(on, config.tokens_per_title),
                    1 => assert_eq!(on, config.tokens_per_title.div_ceil(2)),
                    _ => assert_eq!(on, 0),
                }
            }
        }
        assert_eq!(
            topics.members.iter().map(Vec::len).sum::<usize>(),
            config.vocab_size
        );
    }

    #[test]
    fn deterministic_click_rule() {
        let config = SimConfig {
            click_prob: [0.0, 0.0, 1.0],
            continue_after_click: 1.0,
            continue_after_nonclick: 1.0,
            ..small()
        };
        let (corpus, truth) = generate_corpus(&config).unwrap();
        for s in simulate_sessions(&corpus, &config) {
            for r in &s.results {
                assert_eq!(r.clicked, truth.grade(&s.query, &r.title) == Some(2));
            }
        }
    }

    #[test]
    fn cascade_stops_immediately_without_continuation() {
        let config = SimConfig {
            click_prob: [1.0, 1.0, 1.0],
            continue_after_click: 0.0,
            continue_after_nonclick: 0.0,
            ..small()
        };
        let (corpus, _) = generate_corpus(&config).unwrap();
        let mut rng = seed::rng(0, "t", 0);
        for q in &corpus.queries {
            let (s, examined) = simulate_session(q, "x".into(), &config, &mut rng);
            assert_eq!(examined, 1);
            assert!(s.results[1..].iter().all(|r| !r.clicked));
            assert!(s.results[0].clicked);
        }
        let full = SimConfig {
            continue_after_click: 1.0,
            continue_after_nonclick: 1.0,
            ..config
        };
        for q in &corpus.queries {
            assert_eq!(
                simulate_session(q, "x".into(), &full, &mut rng).1,
                q.candidates.len()
            );
        }
    }

    #[test]
    fn clicks_never_beyond_examined_depth() {
        let config = small();
        let (corpus, _) = generate_corpus(&config).unwrap();
        let mut rng = seed::rng(3, "t", 0);
        for q in &corpus.queries {
            for _ in 0..20 {
                let (s, examined) = simulate_session(q, "x".into(), &config, &mut rng);
                assert!(s
                    .results
                    .iter()
                    .filter(|r| r.clicked)
                    .all(|r| r.rank <= examined));
            }
        }
    }

    #[test]
    fn position_bias_and_grade_monotonicity() {
        let config = SimConfig {
            query_count: 500,
            sessions_per_query: 20,
            ..SimConfig::default()
        };
        let (corpus, truth) = generate_corpus(&config).unwrap();
        let sessions = simulate_sessions(&corpus, &config);
        assert_eq!(sessions.len(), 10_000);
        let mut by_rank = [(0u64, 0u64); 10];
        let mut by_grade = [(0u64, 0u64); 3];
        for s in &sessions {
            for r in &s.results {
                let g = truth.grade(&s.query, &r.title).unwrap() as usize;
                by_rank[r.rank - 1].0 += 1;
                by_grade[g].0 += 1;
                if r.clicked {
                    by_rank[r.rank - 1].1 += 1;
                    by_grade[g].1 += 1;
                }
            }
        }
        let rate = |(n, c): (u64, u64)| c as f64 / n as f64;
        assert!(rate(by_rank[0]) > rate(by_rank[9]));
        assert!(rate(by_grade[2]) > rate(by_grade[1]));
        assert!(rate(by_grade[1]) > rate(by_grade[0]));
    }

    #[test]
    fn session_files_are_reproducible() {
        let config = small();
        let bytes = |c: &SimConfig| {
            let (corpus, _) = generate_corpus(c).unwrap();
            let mut buf = Vec::new();
            write_sessions(&simulate_sessions(&corpus, c), &mut buf).unwrap();
            buf
        };
        assert_eq!(bytes(&config), bytes(&config));
    }

    #[test]
    fn ground_truth_pairs_prefer_higher_grade() {
        let config = small();
        let (corpus, truth) = generate_corpus(&config).unwrap();
        let gt = ground_truth_pairs(&corpus, &truth, 5, 9);
        assert!(!gt.pairs.is_empty());
        for p in &gt.pairs {
            let hi = truth.grade(&p.query, &p.preferred).unwrap();
            let lo = truth.grade(&p.query, &p.dispreferred).unwrap();
            assert!(hi > lo);
            assert_eq!(p.source, Source::GroundTruth);
        }
        assert_eq!(ground_truth_pairs(&corpus, &truth, 5, 9), gt);
    }

    #[test]
    fn single_grade_query_is_skipped() {
        let title = |s: &str| TokenSeq::parse(s);
        let corpus = Corpus {
            queries: vec![
                SimQuery {
                    query: title("a"),
                    topic: 0,
                    candidates: vec![
                        Candidate {
                            title: title("x"),
                            grade: 1,
                        },
                        Candidate {
                            title: title("y"),
                            grade: 1,
                        },
                    ],
                },
                SimQuery {
                    query: title("b"),
                    topic: 0,
                    candidates: vec![
                        Candidate {
                            title: title("x"),
                            grade: 2,
                        },
                        Candidate {
                            title: title("y"),
                            grade: 0,
                        },
                    ],
                },
            ],
        };
        let gt = ground_truth_pairs(&corpus, &GroundTruth::default(), 10, 0);
        assert_eq!(gt.skipped_queries, 1);
        assert_eq!(gt.pairs.len(), 1);
        assert_eq!(gt.pairs[0].preferred, title("x"));
    }
}
