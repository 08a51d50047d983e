//! Pairwise hinge training with hand-derived gradients.
//!
//! For a judgment `(q, d+, d-)` the loss is
//! `max(0, margin - (cos(O_q, O_d+) - cos(O_q, O_d-)))`. While the hinge is
//! active its gradient is the difference of the two cosine gradients,
//! backpropagated through each tower, the softsign and the embedding sum.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::judgments::PairwiseJudgment;
use crate::log_model::TokenSeq;
use crate::model::{dot, norm, softsign_grad, ForwardTrace, SemModel, Side, NORM_EPSILON};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decay {
    Constant,
    /// `γ_t = γ_0 · (1 - (t - 1) / T)` for iteration `t` of `T`.
    LinearToZero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub decay: Decay,
    pub iterations: usize,
    pub d_emb: usize,
    pub d_out: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            margin: 0.1,
            learning_rate: 0.05,
            decay: Decay::Constant,
            iterations: 50,
            d_emb: 32,
            d_out: 32,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.margin.is_nan() || self.margin < 0.0 {
            return Err(Error::Config(format!(
                "margin must be >= 0, got {}",
                self.margin
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.d_emb == 0 || self.d_out == 0 {
            return Err(Error::Config("dimensions must be at least 1".into()));
        }
        Ok(())
    }

    /// Learning rate for 1-based iteration `t`.
    pub fn learning_rate_at(&self, t: usize) -> f64 {
        match self.decay {
            Decay::Constant => self.learning_rate,
            Decay::LinearToZero => {
                self.learning_rate * (1.0 - (t - 1) as f64 / self.iterations as f64)
            }
        }
    }
}

/// Gradient of the loss for every parameter. Embedding rows not touched
/// by the judgment's texts are absent (implicitly zero).
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub embeddings: BTreeMap<usize, Vec<f64>>,
    pub query_weights: Vec<f64>,
    pub query_bias: Vec<f64>,
    pub title_weights: Vec<f64>,
    pub title_bias: Vec<f64>,
}

impl GradientSet {
    pub fn zeros(model: &SemModel) -> Self {
        GradientSet {
            embeddings: BTreeMap::new(),
            query_weights: vec![0.0; model.query_tower.weights.len()],
            query_bias: vec![0.0; model.query_tower.bias.len()],
            title_weights: vec![0.0; model.title_tower.weights.len()],
            title_bias: vec![0.0; model.title_tower.bias.len()],
        }
    }

    pub fn clear(&mut self) {
        self.embeddings.clear();
        for v in [
            &mut self.query_weights,
            &mut self.query_bias,
            &mut self.title_weights,
            &mut self.title_bias,
        ] {
            v.fill(0.0);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.embeddings.values().flatten().all(|&v| v == 0.0)
            && [
                &self.query_weights,
                &self.query_bias,
                &self.title_weights,
                &self.title_bias,
            ]
            .iter()
            .all(|v| v.iter().all(|&x| x == 0.0))
    }

    /// Dense embedding-row gradient (zero when the row is untouched).
    pub fn embedding_row(&self, row: usize, dim: usize) -> Vec<f64> {
        self.embeddings
            .get(&row)
            .cloned()
            .unwrap_or_else(|| vec![0.0; dim])
    }
}

/// Intermediate quantities of one `cos(O_q, O_d)` gradient.
///
/// With `a = O_q·O_d`, `b = 1/|O_q|`, `c = 1/|O_d|`:
/// `∂cos/∂O_q = bc·O_d - a·c·b³·O_q` and `∂cos/∂O_d = bc·O_q - a·b·c³·O_d`.
/// `delta_vq`/`delta_vd` carry those back through the tower and softsign
/// to the embedding sum.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientWorkspace {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub delta_oq: Vec<f64>,
    pub delta_od: Vec<f64>,
    pub delta_vq: Vec<f64>,
    pub delta_vd: Vec<f64>,
}

impl GradientWorkspace {
    /// `None` when either output is degenerate.
    pub fn compute(model: &SemModel, query: &ForwardTrace, title: &ForwardTrace) -> Option<Self> {
        let (nq, nd) = (norm(&query.o), norm(&title.o));
        if nq < NORM_EPSILON || nd < NORM_EPSILON {
            return None;
        }
        let a = dot(&query.o, &title.o);
        let (b, c) = (1.0 / nq, 1.0 / nd);
        let bc = b * c;
        let coef_q = a * c * b * b * b;
        let coef_d = a * b * c * c * c;
        let delta_oq: Vec<f64> = title
            .o
            .iter()
            .zip(&query.o)
            .map(|(od, oq)| bc * od - coef_q * oq)
            .collect();
        let delta_od: Vec<f64> = query
            .o
            .iter()
            .zip(&title.o)
            .map(|(oq, od)| bc * oq - coef_d * od)
            .collect();
        let delta_vq = backprop_tower(model, Side::Query, &query.h, &delta_oq);
        let delta_vd = backprop_tower(model, Side::Title, &title.h, &delta_od);
        Some(GradientWorkspace {
            a,
            b,
            c,
            delta_oq,
            delta_od,
            delta_vq,
            delta_vd,
        })
    }
}

/// `softsign'(h) ∘ Wᵀ δ`.
fn backprop_tower(model: &SemModel, side: Side, h: &[f64], delta_o: &[f64]) -> Vec<f64> {
    let tower = model.tower(side);
    let mut out = vec![0.0; tower.d_in];
    for (i, &d) in delta_o.iter().enumerate() {
        for (acc, w) in out.iter_mut().zip(tower.weight_row(i)) {
            *acc += w * d;
        }
    }
    for (v, &hi) in out.iter_mut().zip(h) {
        *v *= softsign_grad(hi);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairStatus {
    /// Margin satisfied; gradient is zero.
    Inactive,
    Active,
    /// A tower output had zero norm. Excluded from training statistics.
    Degenerate,
}

#[derive(Clone, Debug)]
pub struct PairGradients {
    pub loss: f64,
    pub status: PairStatus,
    pub grads: GradientSet,
    /// Workspaces for the `d+` and `d-` branches, when active and non-degenerate.
    pub branches: [Option<GradientWorkspace>; 2],
}

fn hinge(margin: f64, pos: f64, neg: f64) -> f64 {
    (margin - (pos - neg)).max(0.0)
}

pub fn hinge_loss(model: &SemModel, judgment: &PairwiseJudgment, margin: f64) -> f64 {
    let pos = model.score(&judgment.query, &judgment.preferred);
    let neg = model.score(&judgment.query, &judgment.dispreferred);
    hinge(margin, pos, neg)
}

fn add_scaled(acc: &mut [f64], scale: f64, v: &[f64]) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += scale * x;
    }
}

fn add_outer(acc: &mut [f64], scale: f64, left: &[f64], right: &[f64]) {
    let cols = right.len();
    for (i, &l) in left.iter().enumerate() {
        let s = scale * l;
        for (a, r) in acc[i * cols..(i + 1) * cols].iter_mut().zip(right) {
            *a += s * r;
        }
    }
}

fn add_to_rows(
    model: &SemModel,
    grads: &mut GradientSet,
    text: &TokenSeq,
    scale: f64,
    delta: &[f64],
) {
    for tok in text.tokens() {
        if let Some(row) = model.embeddings.row_of(tok) {
            let entry = grads
                .embeddings
                .entry(row)
                .or_insert_with(|| vec![0.0; delta.len()]);
            add_scaled(entry, scale, delta);
        }
    }
}

/// Adds the judgment's loss gradient into `grads` (expected to be cleared).
/// Returns the loss, status, and the per-branch workspaces.
pub fn accumulate_pair_gradients(
    model: &SemModel,
    judgment: &PairwiseJudgment,
    margin: f64,
    grads: &mut GradientSet,
) -> (f64, PairStatus, [Option<GradientWorkspace>; 2]) {
    let q = model.forward(&judgment.query, Side::Query);
    let p = model.forward(&judgment.preferred, Side::Title);
    let n = model.forward(&judgment.dispreferred, Side::Title);
    let pos = crate::model::cosine(&q.o, &p.o);
    let neg = crate::model::cosine(&q.o, &n.o);
    let loss = hinge(margin, pos.value, neg.value);
    let degenerate = pos.degenerate || neg.degenerate;
    if loss <= 0.0 {
        let status = if degenerate {
            PairStatus::Degenerate
        } else {
            PairStatus::Inactive
        };
        return (loss, status, [None, None]);
    }

    // The loss decreases in cos(q, d+) and increases in cos(q, d-).
    let mut branches = [None, None];
    for (slot, (title, text, sign)) in branches.iter_mut().zip([
        (&p, &judgment.preferred, -1.0),
        (&n, &judgment.dispreferred, 1.0),
    ]) {
        let Some(ws) = GradientWorkspace::compute(model, &q, title) else {
            continue;
        };
        add_outer(&mut grads.query_weights, sign, &ws.delta_oq, &q.g);
        add_scaled(&mut grads.query_bias, sign, &ws.delta_oq);
        add_outer(&mut grads.title_weights, sign, &ws.delta_od, &title.g);
        add_scaled(&mut grads.title_bias, sign, &ws.delta_od);
        add_to_rows(model, grads, &judgment.query, sign, &ws.delta_vq);
        add_to_rows(model, grads, text, sign, &ws.delta_vd);
        *slot = Some(ws);
    }
    let status = if degenerate {
        PairStatus::Degenerate
    } else {
        PairStatus::Active
    };
    (loss, status, branches)
}

pub fn pair_gradients(model: &SemModel, judgment: &PairwiseJudgment, margin: f64) -> PairGradients {
    let mut grads = GradientSet::zeros(model);
    let (loss, status, branches) = accumulate_pair_gradients(model, judgment, margin, &mut grads);
    PairGradients {
        loss,
        status,
        grads,
        branches,
    }
}

/// `p ← p - γ · ∂L/∂p` for every parameter.
pub fn sgd_step(model: &mut SemModel, grads: &GradientSet, learning_rate: f64) {
    let step = |params: &mut [f64], g: &[f64]| {
        for (p, d) in params.iter_mut().zip(g) {
            *p -= learning_rate * d;
        }
    };
    for (&row, g) in &grads.embeddings {
        step(model.embeddings.row_mut(row), g);
    }
    step(&mut model.query_tower.weights, &grads.query_weights);
    step(&mut model.query_tower.bias, &grads.query_bias);
    step(&mut model.title_tower.weights, &grads.title_weights);
    step(&mut model.title_tower.bias, &grads.title_bias);
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationStats {
    pub iteration: usize,
    pub mean_loss: f64,
    pub active_fraction: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainStats {
    pub iterations: Vec<IterationStats>,
}

impl TrainStats {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "iteration,mean_loss,active_fraction,seconds")?;
        for s in &self.iterations {
            writeln!(
                w,
                "{},{:.10},{:.6},{:.6}",
                s.iteration, s.mean_loss, s.active_fraction, s.seconds
            )?;
        }
        Ok(())
    }
}

/// Mean hinge loss and active fraction over `judgments`, skipping degenerate pairs.
pub fn evaluate_loss(model: &SemModel, judgments: &[PairwiseJudgment], margin: f64) -> (f64, f64) {
    let mut total = 0.0;
    let mut active = 0usize;
    let mut counted = 0usize;
    for j in judgments {
        let q = model.forward(&j.query, Side::Query);
        let p = crate::model::cosine(&q.o, &model.forward(&j.preferred, Side::Title).o);
        let n = crate::model::cosine(&q.o, &model.forward(&j.dispreferred, Side::Title).o);
        if p.degenerate || n.degenerate {
            continue;
        }
        let l = hinge(margin, p.value, n.value);
        total += l;
        active += usize::from(l > 0.0);
        counted += 1;
    }
    if counted == 0 {
        (0.0, 0.0)
    } else {
        (total / counted as f64, active as f64 / counted as f64)
    }
}

/// Vocabulary of every judgment text, in order of first appearance.
pub fn build_vocab(judgments: &[PairwiseJudgment]) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut vocab = Vec::new();
    for j in judgments {
        for text in [&j.query, &j.preferred, &j.dispreferred] {
            for tok in text.tokens() {
                if seen.insert(tok.as_str()) {
                    vocab.push(tok.clone());
                }
            }
        }
    }
    vocab
}

/// The model `train` starts from.
pub fn initial_model(judgments: &[PairwiseJudgment], config: &TrainingConfig) -> Result<SemModel> {
    SemModel::init(
        build_vocab(judgments),
        config.d_emb,
        config.d_out,
        config.seed,
    )
}

pub fn train(
    judgments: &[PairwiseJudgment],
    config: &TrainingConfig,
) -> Result<(SemModel, TrainStats)> {
    train_with_hook(judgments, config, |_, _| {})
}

/// Sequential per-judgment SGD for `config.iterations` epochs.
///
/// `hook(t, model)` runs once on the initial model (`t = 0`) and after every
/// epoch (`t = 1..=iterations`).
pub fn train_with_hook<F>(
    judgments: &[PairwiseJudgment],
    config: &TrainingConfig,
    mut hook: F,
) -> Result<(SemModel, TrainStats)>
where
    F: FnMut(usize, &SemModel),
{
    if judgments.is_empty() {
        return Err(Error::Config("no judgments to train on".into()));
    }
    config.validate()?;
    let mut model = initial_model(judgments, config)?;
    hook(0, &model);

    let mut order: Vec<usize> = (0..judgments.len()).collect();
    let mut grads = GradientSet::zeros(&model);
    let mut stats = TrainStats::default();
    for t in 1..=config.iterations {
        let started = Instant::now();
        if config.shuffle {
            order.shuffle(&mut seed::rng(config.seed, "shuffle", t as u64));
        }
        let lr = config.learning_rate_at(t);
        let (mut loss_sum, mut active, mut counted) = (0.0, 0usize, 0usize);
        for &idx in &order {
            grads.clear();
            let (loss, status, _) =
                accumulate_pair_gradients(&model, &judgments[idx], config.margin, &mut grads);
            match status {
                PairStatus::Inactive => {
                    counted += 1;
                    continue;
                }
                PairStatus::Active => {
                    loss_sum += loss;
                    active += 1;
                    counted += 1;
                }
                PairStatus::Degenerate => {}
            }
            if loss > 0.0 {
                sgd_step(&mut model, &grads, lr);
            }
        }
        let denom = counted.max(1) as f64;
        stats.iterations.push(IterationStats {
            iteration: t,
            mean_loss: loss_sum / denom,
            active_fraction: active as f64 / denom,
            seconds: started.elapsed().as_secs_f64(),
        });
        hook(t, &model);
    }
    Ok((model, stats))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamClass {
    Embeddings,
    QueryWeights,
    QueryBias,
    TitleWeights,
    TitleBias,
}

impl ParamClass {
    pub const ALL: [ParamClass; 5] = [
        ParamClass::Embeddings,
        ParamClass::QueryWeights,
        ParamClass::QueryBias,
        ParamClass::TitleWeights,
        ParamClass::TitleBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamClass::Embeddings => "embeddings",
            ParamClass::QueryWeights => "W_q",
            ParamClass::QueryBias => "b_q",
            ParamClass::TitleWeights => "W_d",
            ParamClass::TitleBias => "b_d",
        }
    }

    fn params_mut(self, model: &mut SemModel) -> &mut [f64] {
        match self {
            ParamClass::Embeddings => model.embeddings.values_mut(),
            ParamClass::QueryWeights => &mut model.query_tower.weights,
            ParamClass::QueryBias => &mut model.query_tower.bias,
            ParamClass::TitleWeights => &mut model.title_tower.weights,
            ParamClass::TitleBias => &mut model.title_tower.bias,
        }
    }

    /// Dense analytic gradient for this class.
    fn analytic(self, grads: &GradientSet, model: &SemModel) -> Vec<f64> {
        match self {
            ParamClass::Embeddings => {
                let dim = model.d_emb();
                (0..model.embeddings.len())
                    .flat_map(|row| grads.embedding_row(row, dim))
                    .collect()
            }
            ParamClass::QueryWeights => grads.query_weights.clone(),
            ParamClass::QueryBias => grads.query_bias.clone(),
            ParamClass::TitleWeights => grads.title_weights.clone(),
            ParamClass::TitleBias => grads.title_bias.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub d_emb: usize,
    pub d_out: usize,
    pub vocab_size: usize,
    pub tokens_per_text: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            d_emb: 4,
            d_out: 3,
            vocab_size: 6,
            tokens_per_text: 2,
            step: 1e-5,
            seed: 0,
        }
    }
}

/// Relative error with a small absolute floor so that components which are
/// zero both ways compare equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug)]
pub struct TrialResult {
    pub trial: usize,
    pub max_error: BTreeMap<ParamClass, f64>,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub trials: Vec<TrialResult>,
}

impl GradCheckReport {
    pub fn max_error(&self, class: ParamClass) -> f64 {
        self.trials
            .iter()
            .map(|t| t.max_error[&class])
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &TrialResult> {
        self.trials.iter().filter(|t| !t.passed)
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }
}

/// Compares analytic and central-difference gradients of `judgment`'s loss
/// for every parameter, returning the max relative error per class.
pub fn compare_with_finite_differences(
    model: &SemModel,
    judgment: &PairwiseJudgment,
    margin: f64,
    step: f64,
) -> BTreeMap<ParamClass, f64> {
    let analytic = pair_gradients(model, judgment, margin).grads;
    let mut probe = model.clone();
    let mut out = BTreeMap::new();
    for class in ParamClass::ALL {
        let expected = class.analytic(&analytic, model);
        let mut worst = 0.0f64;
        for (k, &a) in expected.iter().enumerate() {
            let orig = class.params_mut(&mut probe)[k];
            class.params_mut(&mut probe)[k] = orig + step;
            let up = hinge_loss(&probe, judgment, margin);
            class.params_mut(&mut probe)[k] = orig - step;
            let down = hinge_loss(&probe, judgment, margin);
            class.params_mut(&mut probe)[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(a, numeric));
        }
        out.insert(class, worst);
    }
    out
}

fn random_text(rng: &mut impl Rng, vocab: &[String], len: usize) -> TokenSeq {
    TokenSeq::from_tokens((0..len).map(|_| vocab[rng.random_range(0..vocab.len())].as_str()))
        .expect("generated tokens are valid")
}

/// A random tiny model and an active judgment for trial `trial`.
pub fn random_instance(
    config: &GradCheckConfig,
    trial: usize,
) -> (SemModel, PairwiseJudgment, f64) {
    let mut rng = seed::rng(config.seed, "gradcheck", trial as u64);
    let vocab: Vec<String> = (0..config.vocab_size).map(|i| format!("v{i}")).collect();
    let mut model = SemModel::init(
        vocab.iter().cloned(),
        config.d_emb,
        config.d_out,
        rng.random(),
    )
    .expect("valid dimensions");
    // Wider than the training init so the softsign is exercised away from zero.
    for v in model
        .embeddings
        .values_mut()
        .iter_mut()
        .chain(&mut model.query_tower.weights)
        .chain(&mut model.title_tower.weights)
    {
        *v = rng.random_range(-1.0..1.0);
    }
    for b in model
        .query_tower
        .bias
        .iter_mut()
        .chain(&mut model.title_tower.bias)
    {
        *b = rng.random_range(-0.5..0.5);
    }
    let query = random_text(&mut rng, &vocab, config.tokens_per_text);
    let preferred = random_text(&mut rng, &vocab, config.tokens_per_text);
    // Permutations of the same tokens embed identically, so compare multisets.
    let bag = |t: &TokenSeq| {
        let mut v = t.tokens().to_vec();
        v.sort();
        v
    };
    let dispreferred = loop {
        let t = random_text(&mut rng, &vocab, config.tokens_per_text);
        if bag(&t) != bag(&preferred) {
            break t;
        }
    };
    let judgment = PairwiseJudgment {
        query,
        preferred,
        dispreferred,
        source: crate::judgments::Source::GroundTruth,
    };
    // Cosine differences lie in [-2, 2], so this margin keeps the hinge active.
    (model, judgment, 3.0)
}

/// Runs `trials` random instances. A trial fails unless every class's max
/// relative error is strictly below `tolerance`.
pub fn gradient_check(
    config: &GradCheckConfig,
    trials: usize,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if trials == 0 {
        return Err(Error::Config("gradcheck needs at least one trial".into()));
    }
    let trials = (0..trials)
        .map(|trial| {
            let (model, judgment, margin) = random_instance(config, trial);
            let max_error = compare_with_finite_differences(&model, &judgment, margin, config.step);
            let passed = max_error.values().all(|&e| e < tolerance);
            TrialResult {
                trial,
                max_error,
                passed,
            }
        })
        .collect();
    Ok(GradCheckReport { tolerance, trials })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judgments::Source;
    use crate::model::tests::tiny_model;
    use proptest::prelude::*;
    use rand::Rng;

    fn toks(s: &str) -> TokenSeq {
        TokenSeq::parse(s)
    }

    fn judgment(q: &str, p: &str, n: &str) -> PairwiseJudgment {
        PairwiseJudgment {
            query: toks(q),
            preferred: toks(p),
            dispreferred: toks(n),
            source: Source::GroundTruth,
        }
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(hinge(0.1, 0.9, 0.2), 0.0);
        assert!((hinge(0.1, 0.5, 0.5) - 0.1).abs() < 1e-15);
        assert!((hinge(0.1, 0.2, 0.9) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn hinge_loss_uses_scores() {
        let m = tiny_model(4, 3, &["a", "b", "c"], 9);
        let j = judgment("a", "b", "c");
        let expected = hinge(
            0.1,
            m.score(&j.query, &j.preferred),
            m.score(&j.query, &j.dispreferred),
        );
        assert_eq!(hinge_loss(&m, &j, 0.1), expected);
    }

    fn inactive_instance() -> (SemModel, PairwiseJudgment) {
        let mut m = tiny_model(4, 3, &["a", "b", "c", "d"], 5);
        m.title_tower = m.query_tower.clone();
        // cos(q, q) = 1 beats any other title at margin 0.
        let j = judgment("a b", "a b", "c d");
        assert!(m.score(&j.query, &j.dispreferred) < 1.0 - 1e-6);
        (m, j)
    }

    #[test]
    fn inactive_pair_has_zero_gradient() {
        let (m, j) = inactive_instance();
        let g = pair_gradients(&m, &j, 0.0);
        assert_eq!(g.status, PairStatus::Inactive);
        assert!(g.grads.is_zero());
        let numeric = compare_with_finite_differences(&m, &j, 0.0, 1e-5);
        assert!(numeric.values().all(|&e| e == 0.0), "{numeric:?}");

        let mut stepped = m.clone();
        sgd_step(&mut stepped, &g.grads, 0.5);
        assert_eq!(stepped, m);
    }

    #[test]
    fn sgd_step_arithmetic() {
        let mut m = tiny_model(2, 1, &["a", "b"], 1);
        m.query_tower.bias[0] = 1.0;
        let before = m.clone();
        let mut g = GradientSet::zeros(&m);
        g.query_bias[0] = 0.5;
        g.embeddings.insert(0, vec![1.0, -1.0]);
        sgd_step(&mut m, &g, 0.1);
        assert!((m.query_tower.bias[0] - 0.95).abs() < 1e-15);
        assert_eq!(m.embeddings.row(1), before.embeddings.row(1));
        assert_eq!(m.embeddings.row(0)[0], before.embeddings.row(0)[0] - 0.1);

        let mut z = before.clone();
        sgd_step(&mut z, &GradientSet::zeros(&before), 0.3);
        assert_eq!(z, before);
        let mut twice = before.clone();
        sgd_step(&mut twice, &g, 0.0);
        sgd_step(&mut twice, &g, 0.0);
        assert_eq!(twice, before);
    }

    #[test]
    fn gradients_match_finite_differences_on_tiny_models() {
        let config = GradCheckConfig::default();
        let report = gradient_check(&config, 20, 1e-4).unwrap();
        for class in ParamClass::ALL {
            assert!(
                report.max_error(class) < 1e-4,
                "{}: {}",
                class.name(),
                report.max_error(class)
            );
        }
        assert!(report.passed());
    }

    #[test]
    fn zero_tolerance_fails_every_trial() {
        let report = gradient_check(&GradCheckConfig::default(), 5, 0.0).unwrap();
        assert_eq!(report.failures().count(), 5);
        assert!(matches!(
            gradient_check(&GradCheckConfig::default(), 0, 1e-4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn repeated_tokens_double_row_gradient() {
        let m = tiny_model(4, 3, &["a", "b", "c"], 2);
        let j = judgment("a a", "b", "c");
        let errs = compare_with_finite_differences(&m, &j, 3.0, 1e-5);
        assert!(errs[&ParamClass::Embeddings] < 1e-4);
    }

    #[test]
    fn oov_tokens_are_ignored_by_gradients() {
        let m = tiny_model(4, 3, &["a", "b", "c"], 2);
        let j = judgment("a zzz", "b", "c yyy");
        let g = pair_gradients(&m, &j, 3.0);
        assert_eq!(g.status, PairStatus::Active);
        assert_eq!(
            g.grads.embeddings.keys().copied().collect::<Vec<_>>(),
            [0, 1, 2]
        );
    }

    #[test]
    fn degenerate_branch_is_flagged() {
        let mut m = tiny_model(4, 3, &["a", "b"], 2);
        m.title_tower.bias.fill(0.0);
        let j = judgment("a", "b", "unknown");
        let g = pair_gradients(&m, &j, 3.0);
        assert_eq!(g.status, PairStatus::Degenerate);
        assert!(g.branches[1].is_none());
        assert!(g.branches[0].is_some());
    }

    #[test]
    fn train_rejects_empty_and_invalid() {
        assert!(matches!(
            train(&[], &TrainingConfig::default()),
            Err(Error::Config(_))
        ));
        let j = [judgment("a", "b", "c")];
        let bad = TrainingConfig {
            iterations: 0,
            ..TrainingConfig::default()
        };
        assert!(matches!(train(&j, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn zero_learning_rate_keeps_initialisation() {
        let js = vec![judgment("a b", "a c", "d e"), judgment("x", "x y", "z")];
        let config = TrainingConfig {
            learning_rate: 0.0,
            iterations: 5,
            d_emb: 8,
            d_out: 4,
            ..TrainingConfig::default()
        };
        let (model, stats) = train(&js, &config).unwrap();
        assert_eq!(model, initial_model(&js, &config).unwrap());
        assert_eq!(stats.iterations.len(), 5);
    }

    #[test]
    fn hook_sees_every_iteration() {
        let js = vec![judgment("a b", "a c", "d e")];
        let config = TrainingConfig {
            iterations: 3,
            d_emb: 4,
            d_out: 4,
            ..TrainingConfig::default()
        };
        let mut seen = Vec::new();
        train_with_hook(&js, &config, |t, _| seen.push(t)).unwrap();
        assert_eq!(seen, [0, 1, 2, 3]);
    }

    #[test]
    fn linear_decay_schedule() {
        let config = TrainingConfig {
            learning_rate: 0.1,
            iterations: 4,
            decay: Decay::LinearToZero,
            ..TrainingConfig::default()
        };
        for (t, expected) in [(1, 0.1), (2, 0.075), (3, 0.05), (4, 0.025)] {
            assert!((config.learning_rate_at(t) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn separable_toy_problem_is_learned() {
        // Preferred titles share tokens with the query; dispreferred are
        // drawn from a disjoint token pool.
        let mut rng = seed::rng(42, "toy", 0);
        let make = |rng: &mut rand_chacha::ChaCha8Rng| {
            let topic = rng.random_range(0..4);
            let other = (topic + 1 + rng.random_range(0..3)) % 4;
            let words = |rng: &mut rand_chacha::ChaCha8Rng, t: usize, k: usize| {
                rand::seq::index::sample(rng, 5, k)
                    .iter()
                    .map(|w| format!("t{t}w{w}"))
                    .collect::<Vec<_>>()
            };
            let topical = words(rng, topic, 3);
            let q = topical[..2].join(" ");
            let p = topical.join(" ");
            let n = words(rng, other, 3).join(" ");
            judgment(&q, &p, &n)
        };
        let train_set: Vec<_> = (0..200).map(|_| make(&mut rng)).collect();
        let holdout: Vec<_> = (0..200).map(|_| make(&mut rng)).collect();
        let config = TrainingConfig {
            seed: 3,
            ..TrainingConfig::default()
        };
        let initial = initial_model(&train_set, &config).unwrap();
        let (init_loss, _) = evaluate_loss(&initial, &train_set, config.margin);
        let (model, stats) = train(&train_set, &config).unwrap();
        let (final_loss, _) = evaluate_loss(&model, &train_set, config.margin);
        assert!(final_loss < init_loss, "{final_loss} !< {init_loss}");
        assert!(stats.iterations.last().unwrap().mean_loss < init_loss);
        let correct = holdout
            .iter()
            .filter(|j| {
                model.score(&j.query, &j.preferred) > model.score(&j.query, &j.dispreferred)
            })
            .count();
        assert_eq!(correct, holdout.len());
    }

    #[test]
    fn training_is_deterministic() {
        let js = vec![
            judgment("a b", "a c", "d e"),
            judgment("x", "x y", "z"),
            judgment("a", "b", "z"),
        ];
        let config = TrainingConfig {
            iterations: 7,
            d_emb: 6,
            d_out: 5,
            seed: 99,
            ..TrainingConfig::default()
        };
        let (a, _) = train(&js, &config).unwrap();
        let (b, _) = train(&js, &config).unwrap();
        let bytes = |m: &SemModel| {
            let mut buf = Vec::new();
            crate::model::save_model(m, &mut buf).unwrap();
            buf
        };
        assert_eq!(bytes(&a), bytes(&b));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn cosine_gradients_are_orthogonal(trial in 0usize..10_000) {
            let (model, j, margin) = random_instance(&GradCheckConfig::default(), trial);
            let g = pair_gradients(&model, &j, margin);
            let q = model.forward(&j.query, Side::Query);
            for (ws, text) in g.branches.iter().zip([&j.preferred, &j.dispreferred]) {
                let ws = ws.as_ref().unwrap();
                let d = model.forward(text, Side::Title);
                let tol = |delta: &[f64], o: &[f64]| 1e-9 * norm(delta) * norm(o);
                prop_assert!(dot(&ws.delta_oq, &q.o).abs() <= tol(&ws.delta_oq, &q.o));
                prop_assert!(dot(&ws.delta_od, &d.o).abs() <= tol(&ws.delta_od, &d.o));
            }
        }

        #[test]
        fn single_pair_descent_is_monotone(trial in 0usize..10_000) {
            let config = GradCheckConfig::default();
            let (mut model, j, _) = random_instance(&config, trial);
            let margin = 0.5;
            let mut loss = hinge_loss(&model, &j, margin);
            for _ in 0..50 {
                if loss == 0.0 {
                    break;
                }
                let g = pair_gradients(&model, &j, margin);
                sgd_step(&mut model, &g.grads, 0.01);
                let next = hinge_loss(&model, &j, margin);
                prop_assert!(next < loss, "loss went {loss} -> {next}");
                loss = next;
            }
        }
    }
}
