use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use semrank::click_sim::{generate_corpus, ground_truth_pairs, simulate_sessions, SimConfig};
use semrank::evaluation::{
    build_test1, check_disjoint, compare_strategies, precision, split_sessions, write_svg_chart,
    CompareConfig, TestOrigin, TestSet,
};
use semrank::judgments::{distribution, formulate, read_judgments, write_judgments, CtrInputs};
use semrank::log_model::{aggregate_ctr, parse_sessions, write_sessions, MAX_RESULTS};
use semrank::model::{load_model, save_model};
use semrank::train::{gradient_check, train, Decay, GradCheckConfig, ParamClass};
use semrank::{CtrParams, PairwiseJudgment, SearchSession, SemModel, Strategy, TrainingConfig};

use crate::manifest::{now_ms, Artifact, RunManifest};

#[derive(Parser, Debug)]
#[command(name = "semrank", version, about, args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Generate a synthetic corpus and click log.
    Simulate(SimulateArgs),
    /// Extract pairwise judgments from a click log.
    Formulate(FormulateArgs),
    /// Train a model on a judgments file.
    Train(TrainArgs),
    /// Score a model on a test set.
    Eval(EvalArgs),
    /// Train and evaluate every strategy from one click log.
    Compare(CompareArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Rerun the command recorded in a manifest and verify its checksums.
    Replay(ReplayArgs),
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct Common {
    /// Master seed; every random stage derives from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// File of key=value lines, applied before the other flags.
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 500)]
    pub queries: usize,
    #[arg(long, default_value_t = 20)]
    pub sessions_per_query: usize,
    #[arg(long, default_value_t = 10,
          value_parser = clap::value_parser!(u64).range(1..=MAX_RESULTS as u64))]
    pub results_per_query: u64,
    #[arg(long, default_value_t = 2000)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 20)]
    pub topics: usize,
    #[arg(long, default_value_t = 3)]
    pub tokens_per_query: usize,
    #[arg(long, default_value_t = 6)]
    pub tokens_per_title: usize,
    /// Click probability for grades 0,1,2.
    #[arg(long, default_value = "0.05,0.3,0.7", value_parser = parse_click_prob)]
    pub click_prob: [f64; 3],
    #[arg(long, default_value_t = 0.8)]
    pub continue_after_nonclick: f64,
    #[arg(long, default_value_t = 0.6)]
    pub continue_after_click: f64,
    #[arg(long, default_value_t = 1.0)]
    pub rank_noise: f64,
    #[arg(long, default_value_t = 10)]
    pub gt_pairs_per_query: usize,
}

fn parse_click_prob(s: &str) -> Result<[f64; 3], String> {
    let values: Vec<f64> = s
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}")))
        .collect::<Result<_, _>>()?;
    values
        .try_into()
        .map_err(|v: Vec<f64>| format!("expected 3 comma-separated values, got {}", v.len()))
}

#[derive(Args, Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CtrArgs {
    /// Minimum CTR difference for a Clicked>Clicked pair.
    #[arg(long, default_value_t = 0.05)]
    pub min_gap: f64,
    /// Minimum impressions on both sides of a Clicked>Clicked pair.
    #[arg(long, default_value_t = 5)]
    pub min_impressions: u64,
}

impl From<CtrArgs> for CtrParams {
    fn from(a: CtrArgs) -> Self {
        CtrParams {
            min_gap: a.min_gap,
            min_impressions: a.min_impressions,
        }
    }
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct FormulateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Sessions file (JSONL).
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    /// C-S, C-C, C-NE, S-NE, C-NC, a comma-separated list, or "all".
    #[arg(long, default_value = "all")]
    pub strategy: String,
    #[command(flatten)]
    pub ctr: CtrArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum DecayArg {
    Constant,
    Linear,
}

#[derive(Args, Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainingArgs {
    #[arg(long, default_value_t = 50)]
    pub iterations: usize,
    /// Learning rate.
    #[arg(long, default_value_t = 0.05)]
    pub gamma: f64,
    #[arg(long, value_enum, default_value = "constant")]
    pub decay: DecayArg,
    #[arg(long, default_value_t = 0.1)]
    pub margin: f64,
    #[arg(long, default_value_t = 32)]
    pub d_emb: usize,
    #[arg(long, default_value_t = 32)]
    pub d_out: usize,
    /// Visit judgments in file order every iteration.
    #[arg(long)]
    pub no_shuffle: bool,
}

impl TrainingArgs {
    fn config(&self, seed: u64) -> TrainingConfig {
        TrainingConfig {
            margin: self.margin,
            learning_rate: self.gamma,
            decay: match self.decay {
                DecayArg::Constant => Decay::Constant,
                DecayArg::Linear => Decay::LinearToZero,
            },
            iterations: self.iterations,
            d_emb: self.d_emb,
            d_out: self.d_out,
            seed,
            shuffle: !self.no_shuffle,
        }
    }
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "FILE")]
    pub judgments: PathBuf,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Judgments file to score as the test set.
    #[arg(
        long,
        value_name = "FILE",
        conflicts_with = "holdout",
        required_unless_present = "holdout"
    )]
    pub test: Option<PathBuf>,
    /// Holdout sessions; Test-1 pairs are drawn from them.
    #[arg(long, value_name = "FILE")]
    pub holdout: Option<PathBuf>,
    /// Training sessions, checked for overlap with the holdout.
    #[arg(long, value_name = "FILE", requires = "holdout")]
    pub train_sessions: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: Common,
    /// Sessions file (JSONL). Split into train and holdout unless --holdout is given.
    #[arg(long, value_name = "FILE")]
    pub sessions: PathBuf,
    /// Ground-truth pairs file.
    #[arg(long, value_name = "FILE")]
    pub gt_pairs: Option<PathBuf>,
    /// Fraction of sessions used for training.
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    /// Explicit holdout sessions; all of --sessions is then used for training.
    #[arg(long, value_name = "FILE")]
    pub holdout: Option<PathBuf>,
    #[arg(long, default_value = "all")]
    pub strategies: String,
    #[command(flatten)]
    pub training: TrainingArgs,
    #[command(flatten)]
    pub ctr: CtrArgs,
    /// Also write test1.svg and gt.svg.
    #[arg(long)]
    pub charts: bool,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 4)]
    pub d_emb: usize,
    #[arg(long, default_value_t = 3)]
    pub d_out: usize,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// Output directory; defaults to the one recorded in the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Replay(args) => replay(args),
        other => execute(other).map(|(_, code)| code),
    }
}

fn execute(command: Command) -> Result<(RunManifest, ExitCode)> {
    let started = now_ms();
    let config = serde_json::to_value(&command)?;
    let mut run = Run {
        out: PathBuf::new(),
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    let (name, seed, common_out, code) = match &command {
        Command::Simulate(a) => {
            run.out = a.common.out.clone();
            run.prepare()?;
            simulate(a, &mut run)?;
            (
                "simulate",
                Some(a.common.seed),
                &a.common.out,
                ExitCode::SUCCESS,
            )
        }
        Command::Formulate(a) => {
            run.out = a.common.out.clone();
            run.prepare()?;
            formulate_cmd(a, &mut run)?;
            ("formulate", None, &a.common.out, ExitCode::SUCCESS)
        }
        Command::Train(a) => {
            run.out = a.common.out.clone();
            run.prepare()?;
            train_cmd(a, &mut run)?;
            (
                "train",
                Some(a.common.seed),
                &a.common.out,
                ExitCode::SUCCESS,
            )
        }
        Command::Eval(a) => {
            run.out = a.common.out.clone();
            run.prepare()?;
            eval_cmd(a, &mut run)?;
            (
                "eval",
                Some(a.common.seed),
                &a.common.out,
                ExitCode::SUCCESS,
            )
        }
        Command::Compare(a) => {
            run.out = a.common.out.clone();
            run.prepare()?;
            compare_cmd(a, &mut run)?;
            (
                "compare",
                Some(a.common.seed),
                &a.common.out,
                ExitCode::SUCCESS,
            )
        }
        Command::Gradcheck(a) => {
            run.out = a.common.out.clone();
            run.prepare()?;
            let passed = gradcheck_cmd(a, &mut run)?;
            let code = if passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            };
            ("gradcheck", Some(a.common.seed), &a.common.out, code)
        }
        Command::Replay(_) => bail!("a replay cannot be recorded"),
    };
    let manifest = RunManifest {
        command: name.to_string(),
        config,
        seed,
        inputs: run.inputs,
        outputs: run.outputs,
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
    };
    let path = manifest.write(common_out)?;
    eprintln!("wrote {}", path.display());
    Ok((manifest, code))
}

/// Tracks the artifacts of one command. Output paths are recorded relative
/// to the output directory so replays into another directory compare cleanly.
struct Run {
    out: PathBuf,
    inputs: Vec<Artifact>,
    outputs: Vec<Artifact>,
}

impl Run {
    fn prepare(&self) -> Result<()> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(Artifact::of(path)?);
        Ok(())
    }

    fn write<F>(&mut self, name: &str, body: F) -> Result<()>
    where
        F: FnOnce(&mut BufWriter<File>) -> semrank::Result<()>,
    {
        let path = self.out.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(file);
        body(&mut w).with_context(|| format!("writing {}", path.display()))?;
        w.flush()?;
        drop(w);
        let mut artifact = if name.ends_with("stats.csv") {
            Artifact::of_timed_csv(&path)?
        } else {
            Artifact::of(&path)?
        };
        artifact.path = PathBuf::from(name);
        self.outputs.push(artifact);
        Ok(())
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn read_sessions(run: &mut Run, path: &Path) -> Result<Vec<SearchSession>> {
    run.input(path)?;
    parse_sessions(open(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn read_judgment_file(run: &mut Run, path: &Path) -> Result<Vec<PairwiseJudgment>> {
    run.input(path)?;
    read_judgments(open(path)?).with_context(|| format!("parsing {}", path.display()))
}

pub fn parse_strategies(spec: &str) -> Result<Vec<Strategy>> {
    if spec.trim().eq_ignore_ascii_case("all") {
        return Ok(Strategy::ALL.to_vec());
    }
    let mut out = Vec::new();
    for part in spec.split(',') {
        let s: Strategy = part.trim().parse().map_err(|e| anyhow::anyhow!("{e}"))?;
        if !out.contains(&s) {
            out.push(s);
        }
    }
    if out.is_empty() {
        bail!("no strategies given");
    }
    Ok(out)
}

fn simulate(a: &SimulateArgs, run: &mut Run) -> Result<()> {
    let config = SimConfig {
        seed: a.common.seed,
        vocab_size: a.vocab_size,
        num_topics: a.topics,
        query_count: a.queries,
        results_per_query: a.results_per_query as usize,
        sessions_per_query: a.sessions_per_query,
        tokens_per_query: a.tokens_per_query,
        tokens_per_title: a.tokens_per_title,
        click_prob: a.click_prob,
        continue_after_nonclick: a.continue_after_nonclick,
        continue_after_click: a.continue_after_click,
        rank_noise: a.rank_noise,
    };
    let (corpus, truth) = generate_corpus(&config)?;
    let sessions = simulate_sessions(&corpus, &config);
    let gt = ground_truth_pairs(&corpus, &truth, a.gt_pairs_per_query, a.common.seed);
    run.write("sessions.jsonl", |w| write_sessions(&sessions, w))?;
    run.write("ground_truth.tsv", |w| truth.write_tsv(w))?;
    run.write("gt_pairs.tsv", |w| write_judgments(&gt.pairs, w))?;
    eprintln!(
        "{} sessions, {} graded pairs, {} ground-truth judgments",
        sessions.len(),
        truth.len(),
        gt.pairs.len()
    );
    Ok(())
}

fn formulate_cmd(a: &FormulateArgs, run: &mut Run) -> Result<()> {
    let strategies = parse_strategies(&a.strategy)?;
    let sessions = read_sessions(run, &a.input)?;
    let ctr = aggregate_ctr(&sessions);
    let params: CtrParams = a.ctr.into();
    for s in strategies {
        let inputs = CtrInputs {
            table: &ctr,
            params,
        };
        let judgments = formulate(&sessions, s, Some(inputs))?;
        run.write(&format!("judgments-{}.tsv", s.flag()), |w| {
            write_judgments(&judgments, w)
        })?;
        eprintln!("{}: {} judgments", s.tag(), judgments.len());
    }
    run.write("ctr.tsv", |w| ctr.write_tsv(w))?;
    let report = distribution(&sessions, &ctr, params)?;
    run.write("distribution.csv", |w| report.write_csv(w))?;
    Ok(())
}

fn train_cmd(a: &TrainArgs, run: &mut Run) -> Result<()> {
    let judgments = read_judgment_file(run, &a.judgments)?;
    let config = a.training.config(a.common.seed);
    let (model, stats) = train(&judgments, &config)?;
    run.write("model.sem", |w| save_model(&model, w))?;
    run.write("stats.csv", |w| stats.write_csv(w))?;
    if let Some(last) = stats.iterations.last() {
        eprintln!(
            "iteration {}: mean loss {:.6}, active {:.4}",
            last.iteration, last.mean_loss, last.active_fraction
        );
    }
    Ok(())
}

fn read_model(run: &mut Run, path: &Path) -> Result<SemModel> {
    run.input(path)?;
    load_model(open(path)?).with_context(|| format!("loading {}", path.display()))
}

fn eval_cmd(a: &EvalArgs, run: &mut Run) -> Result<()> {
    let model = read_model(run, &a.model)?;
    let test = if let Some(path) = &a.test {
        let pairs = read_judgment_file(run, path)?;
        let origin = if pairs
            .iter()
            .all(|p| p.source == semrank::Source::GroundTruth)
        {
            TestOrigin::GroundTruth
        } else {
            TestOrigin::Test1
        };
        TestSet { pairs, origin }
    } else {
        let holdout_path = a
            .holdout
            .as_ref()
            .context("--test or --holdout is required")?;
        let holdout = read_sessions(run, holdout_path)?;
        if let Some(train_path) = &a.train_sessions {
            let train = read_sessions(run, train_path)?;
            check_disjoint(&train, &holdout)?;
        }
        build_test1(&holdout, a.common.seed)?
    };
    let p = precision(&model, &test)?;
    run.write("eval.csv", |w| {
        writeln!(w, "testset,precision,pairs")?;
        writeln!(w, "{},{p:.6},{}", test.origin.name(), test.pairs.len())?;
        Ok(())
    })?;
    println!(
        "{} precision {p:.6} over {} pairs",
        test.origin.name(),
        test.pairs.len()
    );
    Ok(())
}

fn compare_cmd(a: &CompareArgs, run: &mut Run) -> Result<()> {
    let strategies = parse_strategies(&a.strategies)?;
    let sessions = read_sessions(run, &a.sessions)?;
    let (train_set, holdout) = match &a.holdout {
        Some(path) => (sessions, read_sessions(run, path)?),
        None => split_sessions(&sessions, a.split, a.common.seed)?,
    };
    let gt = match &a.gt_pairs {
        Some(path) => read_judgment_file(run, path)?,
        None => Vec::new(),
    };
    let config = CompareConfig {
        training: a.training.config(a.common.seed),
        ctr_params: a.ctr.into(),
        test_seed: a.common.seed,
    };
    let dist = distribution(&train_set, &aggregate_ctr(&train_set), config.ctr_params)?;
    let report = compare_strategies(&train_set, &holdout, &gt, &strategies, &config)?;

    run.write("report.csv", |w| report.write_csv(w))?;
    run.write("summary.csv", |w| report.write_summary_csv(w))?;
    run.write("distribution.csv", |w| dist.write_csv(w))?;
    for o in &report.outcomes {
        if let Some(model) = &o.model {
            run.write(&format!("models/{}.sem", o.strategy.flag()), |w| {
                save_model(model, w)
            })?;
        }
    }
    if a.charts {
        run.write("test1.svg", |w| {
            write_svg_chart(&report, TestOrigin::Test1, w)
        })?;
        run.write("gt.svg", |w| {
            write_svg_chart(&report, TestOrigin::GroundTruth, w)
        })?;
    }
    for o in &report.outcomes {
        let curve = report.curve(o.strategy, TestOrigin::Test1);
        match (report.initial(o.strategy, TestOrigin::Test1), curve.last()) {
            (Some(init), Some(last)) => eprintln!(
                "{:5} {:7} judgments  test1 {init:.4} -> {last:.4}",
                o.strategy.tag(),
                o.judgments
            ),
            _ => eprintln!("{:5} no judgments", o.strategy.tag()),
        }
    }
    Ok(())
}

fn gradcheck_cmd(a: &GradcheckArgs, run: &mut Run) -> Result<bool> {
    let config = GradCheckConfig {
        d_emb: a.d_emb,
        d_out: a.d_out,
        step: a.step,
        seed: a.common.seed,
        ..GradCheckConfig::default()
    };
    let report = gradient_check(&config, a.trials, a.tolerance)?;
    run.write("gradcheck.csv", |w| {
        writeln!(w, "class,max_relative_error")?;
        for class in ParamClass::ALL {
            writeln!(w, "{},{:.6e}", class.name(), report.max_error(class))?;
        }
        Ok(())
    })?;
    let failures = report.failures().count();
    for class in ParamClass::ALL {
        println!(
            "{:10} max relative error {:.3e}",
            class.name(),
            report.max_error(class)
        );
    }
    if failures > 0 {
        eprintln!(
            "{failures} of {} trials exceeded tolerance {:e}",
            a.trials, a.tolerance
        );
    }
    Ok(failures == 0)
}

fn replay(a: ReplayArgs) -> Result<ExitCode> {
    let recorded = RunManifest::read(&a.manifest)?;
    let mut command: Command = serde_json::from_value(recorded.config.clone())
        .with_context(|| format!("decoding configuration in {}", a.manifest.display()))?;
    if let Some(out) = a.out {
        match &mut command {
            Command::Simulate(x) => x.common.out = out,
            Command::Formulate(x) => x.common.out = out,
            Command::Train(x) => x.common.out = out,
            Command::Eval(x) => x.common.out = out,
            Command::Compare(x) => x.common.out = out,
            Command::Gradcheck(x) => x.common.out = out,
            Command::Replay(_) => bail!("manifest records a replay"),
        }
    }
    for input in &recorded.inputs {
        let now = Artifact::of(&input.path)?;
        if now.sha256 != input.sha256 {
            bail!(
                "input {} changed since the recorded run",
                input.path.display()
            );
        }
    }
    let (fresh, code) = execute(command)?;
    let mut mismatches = 0;
    for old in &recorded.outputs {
        match fresh.outputs.iter().find(|n| n.path == old.path) {
            Some(new) if old.reproduces(new) => {}
            Some(_) => {
                eprintln!("checksum differs: {}", old.path.display());
                mismatches += 1;
            }
            None => {
                eprintln!("missing output: {}", old.path.display());
                mismatches += 1;
            }
        }
    }
    if mismatches > 0 {
        bail!("{mismatches} output(s) did not reproduce");
    }
    println!("reproduced {} output(s)", recorded.outputs.len());
    Ok(code)
}
