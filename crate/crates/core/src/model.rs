//! The semantic embedding model.
//!
//! Both query and title text go through the same pipeline:
//!
//! 1. `h = Σ x_tok`, the element-wise sum of the word embeddings,
//! 2. `g = softsign(h)`,
//! 3. `O = W g + b` through the tower of that side.
//!
//! Word embeddings are shared by the two sides; each side has its own
//! affine projection. Relevance is the cosine of the two outputs.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::log_model::TokenSeq;
use crate::seed;

/// Norms below this make the cosine degenerate.
pub const NORM_EPSILON: f64 = 1e-12;

const MAGIC: &str = "SEMV1";

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn zeros<I, S>(tokens: I, dim: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        if dim == 0 {
            return Err(Error::Config(
                "embedding dimension must be at least 1".into(),
            ));
        }
        let mut table = EmbeddingTable {
            index: HashMap::new(),
            tokens: Vec::new(),
            dim,
            data: Vec::new(),
        };
        for tok in tokens {
            table.insert(tok.into());
        }
        Ok(table)
    }

    /// Adds `token` with a zero row if absent; returns its row index.
    pub fn insert(&mut self, token: String) -> usize {
        if let Some(&row) = self.index.get(&token) {
            return row;
        }
        let row = self.tokens.len();
        self.index.insert(token.clone(), row);
        self.tokens.push(token);
        self.data.resize(self.data.len() + self.dim, 0.0);
        row
    }

    pub fn row_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        &mut self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens in row order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Affine projection `O = W g + b`; `W` is row-major `d_out × d_emb`.
#[derive(Clone, Debug, PartialEq)]
pub struct TowerParams {
    pub d_out: usize,
    pub d_in: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl TowerParams {
    pub fn zeros(d_out: usize, d_in: usize) -> Self {
        TowerParams {
            d_out,
            d_in,
            weights: vec![0.0; d_out * d_in],
            bias: vec![0.0; d_out],
        }
    }

    pub fn weight_row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.d_in..(i + 1) * self.d_in]
    }

    /// Multiplies every weight and bias by `factor`.
    pub fn scale(&mut self, factor: f64) {
        self.weights.iter_mut().for_each(|w| *w *= factor);
        self.bias.iter_mut().for_each(|b| *b *= factor);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Query,
    Title,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemModel {
    pub embeddings: EmbeddingTable,
    pub query_tower: TowerParams,
    pub title_tower: TowerParams,
}

/// Intermediate activations of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// Element-wise embedding sum.
    pub h: Vec<f64>,
    /// `softsign(h)`.
    pub g: Vec<f64>,
    /// Tower output.
    pub o: Vec<f64>,
    pub oov_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// Set when either vector has (near) zero norm; `value` is then 0.
    pub degenerate: bool,
}

pub fn embed_sum(text: &TokenSeq, table: &EmbeddingTable) -> (Vec<f64>, usize) {
    let mut h = vec![0.0; table.dim()];
    let mut oov = 0;
    for tok in text.tokens() {
        match table.row_of(tok) {
            Some(row) => h.iter_mut().zip(table.row(row)).for_each(|(a, x)| *a += x),
            None => oov += 1,
        }
    }
    (h, oov)
}

pub fn softsign_scalar(x: f64) -> f64 {
    x / (1.0 + x.abs())
}

/// Derivative of softsign: `1 / (1 + |x|)^2`.
pub fn softsign_grad(x: f64) -> f64 {
    let d = 1.0 + x.abs();
    1.0 / (d * d)
}

pub fn softsign(h: &[f64]) -> Vec<f64> {
    h.iter().copied().map(softsign_scalar).collect()
}

pub fn project(g: &[f64], tower: &TowerParams) -> Result<Vec<f64>> {
    if g.len() != tower.d_in {
        return Err(Error::Shape {
            expected: tower.d_in,
            actual: g.len(),
        });
    }
    Ok((0..tower.d_out)
        .map(|i| tower.bias[i] + dot(tower.weight_row(i), g))
        .collect())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Cosine {
    debug_assert_eq!(a.len(), b.len());
    let (na, nb) = (norm(a), norm(b));
    if na < NORM_EPSILON || nb < NORM_EPSILON {
        return Cosine {
            value: 0.0,
            degenerate: true,
        };
    }
    Cosine {
        value: (dot(a, b) / (na * nb)).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

/// Embedding-table initialisation range for dimension `d_emb`.
fn init_range(d_emb: usize) -> f64 {
    1.0 / (d_emb as f64).sqrt()
}

impl SemModel {
    pub fn zeros(embeddings: EmbeddingTable, d_out: usize) -> Result<Self> {
        if d_out == 0 {
            return Err(Error::Config("output dimension must be at least 1".into()));
        }
        let d_emb = embeddings.dim();
        Ok(SemModel {
            embeddings,
            query_tower: TowerParams::zeros(d_out, d_emb),
            title_tower: TowerParams::zeros(d_out, d_emb),
        })
    }

    /// Seeded initialisation. Each token's row is drawn from a stream keyed on
    /// the token itself, so two models with the same seed agree on every
    /// shared token regardless of vocabulary order. Biases start at zero.
    pub fn init<I, S>(tokens: I, d_emb: usize, d_out: usize, master_seed: u64) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut model = SemModel::zeros(EmbeddingTable::zeros(tokens, d_emb)?, d_out)?;
        let r = init_range(d_emb);
        for row in 0..model.embeddings.len() {
            let key = seed::fnv1a(model.embeddings.tokens()[row].as_bytes());
            let mut rng = seed::rng(master_seed, "embedding", key);
            for v in model.embeddings.row_mut(row) {
                *v = rng.random_range(-r..=r);
            }
        }
        for (tower, stage) in [
            (&mut model.query_tower, "query-tower"),
            (&mut model.title_tower, "title-tower"),
        ] {
            let mut rng = seed::rng(master_seed, stage, 0);
            for w in &mut tower.weights {
                *w = rng.random_range(-r..=r);
            }
        }
        Ok(model)
    }

    pub fn d_emb(&self) -> usize {
        self.embeddings.dim()
    }

    pub fn d_out(&self) -> usize {
        self.query_tower.d_out
    }

    pub fn tower(&self, side: Side) -> &TowerParams {
        match side {
            Side::Query => &self.query_tower,
            Side::Title => &self.title_tower,
        }
    }

    pub fn forward(&self, text: &TokenSeq, side: Side) -> ForwardTrace {
        let (h, oov_count) = embed_sum(text, &self.embeddings);
        let g = softsign(&h);
        let o = project(&g, self.tower(side)).expect("tower matches embedding dimension");
        ForwardTrace { h, g, o, oov_count }
    }

    pub fn score_detailed(&self, query: &TokenSeq, title: &TokenSeq) -> Cosine {
        let q = self.forward(query, Side::Query);
        let t = self.forward(title, Side::Title);
        cosine(&q.o, &t.o)
    }

    pub fn score(&self, query: &TokenSeq, title: &TokenSeq) -> f64 {
        self.score_detailed(query, title).value
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.embeddings.values().len()
            + 2 * (self.query_tower.weights.len() + self.query_tower.bias.len())
    }

    fn validate(&self) -> Result<()> {
        let d_emb = self.d_emb();
        for tower in [&self.query_tower, &self.title_tower] {
            if tower.d_in != d_emb {
                return Err(Error::Shape {
                    expected: d_emb,
                    actual: tower.d_in,
                });
            }
            if tower.weights.len() != tower.d_out * tower.d_in || tower.bias.len() != tower.d_out {
                return Err(Error::Shape {
                    expected: tower.d_out * tower.d_in,
                    actual: tower.weights.len(),
                });
            }
        }
        if self.query_tower.d_out != self.title_tower.d_out {
            return Err(Error::Shape {
                expected: self.query_tower.d_out,
                actual: self.title_tower.d_out,
            });
        }
        Ok(())
    }
}

fn write_reals<W: Write>(w: &mut W, values: &[f64]) -> std::io::Result<()> {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            w.write_all(b" ")?;
        }
        write!(w, "{v:.16e}")?;
    }
    Ok(())
}

/// Writes the text model format. Reals carry 17 significant digits, which
/// round-trips every finite `f64` exactly.
pub fn save_model<W: Write>(model: &SemModel, mut w: W) -> Result<()> {
    model.validate()?;
    writeln!(
        w,
        "{MAGIC} {} {} {}",
        model.d_emb(),
        model.d_out(),
        model.embeddings.len()
    )?;
    for (row, tok) in model.embeddings.tokens().iter().enumerate() {
        write!(w, "{tok} ")?;
        write_reals(&mut w, model.embeddings.row(row))?;
        writeln!(w)?;
    }
    for tower in [&model.query_tower, &model.title_tower] {
        for i in 0..tower.d_out {
            write_reals(&mut w, tower.weight_row(i))?;
            writeln!(w)?;
        }
        write_reals(&mut w, &tower.bias)?;
        writeln!(w)?;
    }
    Ok(())
}

fn parse_reals(line: &str, line_no: usize, expected: usize, out: &mut Vec<f64>) -> Result<()> {
    let start = out.len();
    for field in line.split_ascii_whitespace() {
        let v = field
            .parse::<f64>()
            .map_err(|e| Error::parse(line_no, format!("bad real {field:?}: {e}")))?;
        out.push(v);
    }
    let got = out.len() - start;
    if got != expected {
        return Err(Error::Shape {
            expected,
            actual: got,
        });
    }
    Ok(())
}

pub fn load_model<R: BufRead>(reader: R) -> Result<SemModel> {
    let lines: Vec<String> = reader.lines().collect::<std::io::Result<_>>()?;
    let header = lines
        .first()
        .ok_or_else(|| Error::Truncated("empty file".into()))?;
    let fields: Vec<&str> = header.split_ascii_whitespace().collect();
    if fields.first() != Some(&MAGIC) {
        return Err(Error::Version(format!(
            "expected {MAGIC} header, found {:?}",
            fields.first().copied().unwrap_or("")
        )));
    }
    let [_, d_emb, d_out, vocab] = fields[..] else {
        return Err(Error::Version(format!("malformed header {header:?}")));
    };
    let dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Version(format!("malformed header {header:?}")))
    };
    let (d_emb, d_out, vocab) = (dim(d_emb)?, dim(d_out)?, dim(vocab)?);
    if d_emb == 0 || d_out == 0 {
        return Err(Error::Version(format!(
            "zero dimension in header {header:?}"
        )));
    }

    let expected_lines = 1 + vocab + 2 * (d_out + 1);
    if lines.len() != expected_lines {
        return Err(Error::Truncated(format!(
            "header promises {expected_lines} lines, file has {}",
            lines.len()
        )));
    }

    let mut embeddings = EmbeddingTable::zeros(Vec::<String>::new(), d_emb)?;
    let mut values = Vec::with_capacity(vocab * d_emb);
    for (k, line) in lines[1..=vocab].iter().enumerate() {
        let line_no = k + 2;
        let (tok, rest) = line
            .split_once(' ')
            .ok_or_else(|| Error::parse(line_no, "missing embedding values"))?;
        if embeddings.row_of(tok).is_some() {
            return Err(Error::parse(line_no, format!("duplicate token {tok:?}")));
        }
        embeddings.insert(tok.to_string());
        parse_reals(rest, line_no, d_emb, &mut values)?;
    }
    embeddings.values_mut().copy_from_slice(&values);

    let mut cursor = 1 + vocab;
    let mut read_tower = || -> Result<TowerParams> {
        let mut tower = TowerParams::zeros(d_out, d_emb);
        let mut weights = Vec::with_capacity(d_out * d_emb);
        for _ in 0..d_out {
            parse_reals(&lines[cursor], cursor + 1, d_emb, &mut weights)?;
            cursor += 1;
        }
        let mut bias = Vec::with_capacity(d_out);
        parse_reals(&lines[cursor], cursor + 1, d_out, &mut bias)?;
        cursor += 1;
        tower.weights = weights;
        tower.bias = bias;
        Ok(tower)
    };
    let query_tower = read_tower()?;
    let title_tower = read_tower()?;
    Ok(SemModel {
        embeddings,
        query_tower,
        title_tower,
    })
}
