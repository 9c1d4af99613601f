//! Synthetic multi-domain question/answer corpora, a character vocabulary,
//! JSONL ingestion and stratified splitting.

mod generate;
mod jsonl;
mod sample;
mod vocab;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use generate::{generate_corpus, Domain, Generator, ELEMENTS, FILLER_WORDS};
pub use jsonl::{export_jsonl, load_jsonl, FieldMap};
pub use sample::{answer_reads, Prompt, Sample};
pub use vocab::{Vocab, PAD, UNK, UNK_CHAR};

use crate::error::{Error, Result};

/// Per-domain stratified split into `(train, eval)`; each keeps input order.
///
/// Each domain sends `round(fractions.0 · count)` samples to train.
pub fn split(
    samples: &[Sample],
    fractions: (f64, f64),
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let (ft, fe) = fractions;
    if !(ft >= 0.0 && fe >= 0.0) || ((ft + fe) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {ft} + {fe} must be nonnegative and sum to 1"
        )));
    }
    let mut by_domain: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_domain.entry(s.domain()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut to_train = vec![false; samples.len()];
    for (domain, mut idx) in by_domain {
        let n_train = (ft * idx.len() as f64).round() as usize;
        idx.shuffle(&mut rng);
        for &i in &idx[..n_train] {
            to_train[i] = true;
        }
        if n_train == 0 || n_train == idx.len() {
            log::warn!(
                "domain `{domain}` has an empty {} split",
                if n_train == 0 { "train" } else { "eval" }
            );
        }
    }
    let (train, eval): (Vec<_>, Vec<_>) =
        samples.iter().cloned().zip(to_train).partition(|(_, t)| *t);
    Ok((
        train.into_iter().map(|(s, _)| s).collect(),
        eval.into_iter().map(|(s, _)| s).collect(),
    ))
}

/// Multinomial naive Bayes over question tokens with add-one smoothing.
#[derive(Debug, Clone)]
pub struct UnigramClassifier {
    domains: Vec<String>,
    log_prior: Vec<f64>,
    log_lik: Vec<Vec<f64>>,
}

impl UnigramClassifier {
    pub fn fit(samples: &[Sample], vocab_size: usize) -> Result<Self> {
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        for s in samples {
            let n = index.len();
            index.entry(s.domain()).or_insert(n);
        }
        if index.is_empty() {
            return Err(Error::Domain(
                "cannot fit a classifier on no samples".into(),
            ));
        }
        let nd = index.len();
        let mut docs = vec![0.0; nd];
        let mut counts = vec![vec![1.0; vocab_size]; nd];
        for s in samples {
            let d = index[s.domain()];
            docs[d] += 1.0;
            for &t in s.question() {
                if t < vocab_size {
                    counts[d][t] += 1.0;
                }
            }
        }
        let mut domains = vec![String::new(); nd];
        for (name, &i) in &index {
            domains[i] = name.to_string();
        }
        let total: f64 = docs.iter().sum();
        let log_lik = counts
            .into_iter()
            .map(|c| {
                let z: f64 = c.iter().sum();
                c.into_iter().map(|v| (v / z).ln()).collect()
            })
            .collect();
        Ok(Self {
            domains,
            log_prior: docs.iter().map(|d| (d / total).ln()).collect(),
            log_lik,
        })
    }

    pub fn predict(&self, tokens: &[usize]) -> &str {
        let best = (0..self.domains.len())
            .map(|d| {
                let ll: f64 = tokens.iter().filter_map(|&t| self.log_lik[d].get(t)).sum();
                (d, self.log_prior[d] + ll)
            })
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, x| if x.1 > acc.1 { x } else { acc },
            );
        &self.domains[best.0]
    }

    /// Fraction of `samples` whose domain is predicted correctly.
    pub fn accuracy(&self, samples: &[Sample]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        let hits = samples
            .iter()
            .filter(|s| self.predict(s.question()) == s.domain())
            .count();
        hits as f64 / samples.len() as f64
    }
}
