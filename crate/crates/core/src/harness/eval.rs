use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::Sample;
use crate::error::{Error, Result};
use crate::model::MoeModel;
use crate::steering::SteeringConfig;
use crate::tensor::kernels;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Dsmoe,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::Dsmoe => "dsmoe",
        })
    }
}

/// Metrics for one domain under one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub domain: String,
    pub variant: Variant,
    pub seed: u64,
    /// Mean over samples of the mean answer-token cross-entropy.
    pub xent: f64,
    /// Fraction of samples whose greedy answer matches exactly.
    pub accuracy: f64,
    pub samples: usize,
    /// Not written to artifacts, which must be byte-reproducible.
    #[serde(skip)]
    pub wall_clock_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub domain: String,
    pub variant: Variant,
    pub prediction: String,
    pub answer: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub results: Vec<EvalResult>,
    pub predictions: Vec<Prediction>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy of the answer tokens given the question.
pub fn answer_xent(
    model: &MoeModel,
    sample: &Sample,
    steering: Option<&SteeringConfig>,
) -> Result<f64> {
    let tokens = sample.tokens();
    let q = sample.question().len();
    let out = model.forward(&tokens, steering)?;
    let total: f64 = (q..tokens.len())
        .map(|t| kernels::neg_log_softmax_at(out.logits.row(t - 1), tokens[t]))
        .sum();
    Ok(total / (tokens.len() - q) as f64)
}

/// Greedy decode of as many tokens as the reference answer has.
pub fn greedy_answer(
    model: &MoeModel,
    question: &[usize],
    len: usize,
    steering: Option<&SteeringConfig>,
) -> Result<Vec<usize>> {
    let mut seq = question.to_vec();
    for _ in 0..len {
        let out = model.forward(&seq, steering)?;
        seq.push(argmax(out.logits.row(seq.len() - 1)));
    }
    Ok(seq.split_off(question.len()))
}

/// Per-domain answer cross-entropy and exact-match accuracy, domains in name order.
pub fn evaluate(
    model: &MoeModel,
    samples: &[Sample],
    steering: Option<&SteeringConfig>,
    variant: Variant,
    seed: u64,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Domain("evaluation set is empty".into()));
    }
    let started = Instant::now();
    let vocab = crate::corpus::Vocab::default();
    let mut per_domain: BTreeMap<&str, (f64, usize, usize)> = BTreeMap::new();
    let mut predictions = Vec::with_capacity(samples.len());
    for s in samples {
        let xent = answer_xent(model, s, steering)?;
        let answer = s.answer();
        let decoded = greedy_answer(model, s.question(), answer.len(), steering)?;
        let correct = decoded == answer;
        let entry = per_domain.entry(s.domain()).or_insert((0.0, 0, 0));
        entry.0 += xent;
        entry.1 += usize::from(correct);
        entry.2 += 1;
        predictions.push(Prediction {
            id: s.id().to_string(),
            domain: s.domain().to_string(),
            variant,
            prediction: vocab.detokenize(&decoded),
            answer: s.answer_text().to_string(),
            correct,
        });
    }
    let wall_clock_ms = started.elapsed().as_secs_f64() * 1e3;
    let results = per_domain
        .into_iter()
        .map(|(domain, (x, hits, n))| EvalResult {
            domain: domain.to_string(),
            variant,
            seed,
            xent: x / n as f64,
            accuracy: hits as f64 / n as f64,
            samples: n,
            wall_clock_ms,
        })
        .collect();
    Ok(Evaluation {
        results,
        predictions,
    })
}

#[derive(Serialize, Deserialize)]
struct ResultRow {
    domain: String,
    variant: Variant,
    seed: u64,
    xent: f64,
    accuracy: f64,
}

/// Results CSV with columns `domain, variant, seed, xent, accuracy`.
pub fn write_results(results: &[EvalResult], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in results {
        w.serialize(ResultRow {
            domain: r.domain.clone(),
            variant: r.variant,
            seed: r.seed,
            xent: r.xent,
            accuracy: r.accuracy,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<EvalResult>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: ResultRow = row?;
        out.push(EvalResult {
            domain: row.domain,
            variant: row.variant,
            seed: row.seed,
            xent: row.xent,
            accuracy: row.accuracy,
            samples: 0,
            wall_clock_ms: 0.0,
        });
    }
    Ok(out)
}

pub fn write_predictions(predictions: &[Prediction], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for p in predictions {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
