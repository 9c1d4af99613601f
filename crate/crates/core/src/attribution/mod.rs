//! Token importance by gradient×input, quantile thresholds and the
//! leave-one-out oracle it approximates.
//!
//! A token is *Specific* when removing it changes the task metric by a
//! non-negligible amount ε and *Common* otherwise. ε is never used directly:
//! the level `p` fixes the fraction of Specific tokens per sequence and the
//! threshold `t_p` is the matching empirical quantile of the scores.

mod io;

use serde::{Deserialize, Serialize};

pub use io::{export_importance, import_importance, ImportanceRecord};

use crate::corpus::{Prompt, Sample, PAD};
use crate::error::{Error, Result};
use crate::model::MoeModel;

pub const DEFAULT_P: f64 = 0.15;

/// Per-position importance; `None` outside the scored positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub id: String,
    pub scores: Vec<Option<f64>>,
}

impl ImportanceVector {
    /// Scores at scored positions, in position order.
    pub fn scored(&self) -> Vec<f64> {
        self.scores.iter().flatten().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Common,
    Specific,
}

/// Labels per position (`None` where unscored) and the threshold that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenClassification {
    pub id: String,
    pub labels: Vec<Option<Label>>,
    pub t_p: f64,
    pub p: f64,
}

impl TokenClassification {
    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|l| **l == Some(label)).count()
    }

    /// Positions labelled Specific.
    pub fn specific_positions(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == Some(Label::Specific))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Which positions the attribution loss averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossScope {
    /// Next-token loss on the question only; the answer is never read.
    #[default]
    Question,
    /// Next-token loss on question and answer; scores still cover the question.
    FullSequence,
}

/// `r_i = ‖e_i ⊙ g_i‖₂` for row-major `T × d` embeddings and gradients.
pub fn hadamard_norms(embeddings: &[f64], gradients: &[f64], d: usize) -> Result<Vec<f64>> {
    if embeddings.len() != gradients.len() || d == 0 || !embeddings.len().is_multiple_of(d) {
        return Err(Error::dim(
            "hadamard_norms",
            &[embeddings.len()],
            &[gradients.len(), d],
        ));
    }
    Ok(embeddings
        .chunks_exact(d)
        .zip(gradients.chunks_exact(d))
        .map(|(e, g)| {
            e.iter()
                .zip(g)
                .map(|(a, b)| (a * b) * (a * b))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Gradient×input importance for `tokens` with one forward and one backward pass.
///
/// `scored[i]` selects positions that receive a score; `loss_mask` restricts
/// the loss as in [`MoeModel::sequence_loss`].
pub fn token_importance(
    id: &str,
    tokens: &[usize],
    model: &MoeModel,
    scored: &[bool],
    loss_mask: Option<&[bool]>,
) -> Result<ImportanceVector> {
    if scored.len() != tokens.len() {
        return Err(Error::dim(
            "token_importance mask",
            &[tokens.len()],
            &[scored.len()],
        ));
    }
    let g = model.embedding_gradients(tokens, loss_mask)?;
    let r = hadamard_norms(
        g.embeddings.data(),
        g.gradients.data(),
        model.config().embed_dim,
    )?;
    Ok(ImportanceVector {
        id: id.to_string(),
        scores: r
            .into_iter()
            .zip(scored)
            .map(|(v, &s)| s.then_some(v))
            .collect(),
    })
}

/// Importance of every question token, with the loss on the question only.
pub fn prompt_importance(prompt: Prompt<'_>, model: &MoeModel) -> Result<ImportanceVector> {
    let scored = vec![true; prompt.tokens.len()];
    token_importance(prompt.id, prompt.tokens, model, &scored, None)
}

/// Importance of the question tokens of `sample` under `scope`.
pub fn sample_importance(
    sample: &Sample,
    model: &MoeModel,
    scope: LossScope,
) -> Result<ImportanceVector> {
    match scope {
        LossScope::Question => prompt_importance(sample.prompt(), model),
        LossScope::FullSequence => {
            let tokens = sample.tokens();
            let q = sample.question().len();
            let scored: Vec<bool> = (0..tokens.len()).map(|i| i < q).collect();
            let mut r = token_importance(sample.id(), &tokens, model, &scored, None)?;
            r.scores.truncate(q);
            Ok(r)
        }
    }
}

/// Nearest-rank quantile: the smallest score `t` with `#{r ≤ t} ≥ ⌈(1 − p)·T⌉`.
///
/// When that rank is 0 (p = 1) the result lies just below the minimum, so
/// every token is Specific.
pub fn domain_threshold(scores: &[f64], p: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Domain("no scored positions to threshold".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("level p = {p} outside [0, 1]")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("importance scores must be finite".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((1.0 - p) * sorted.len() as f64 - 1e-9).ceil().max(0.0) as usize;
    Ok(if rank == 0 {
        sorted[0].next_down()
    } else {
        sorted[rank - 1]
    })
}

/// `score ≤ t_p` → Common, otherwise Specific.
pub fn classify_tokens(scores: &ImportanceVector, t_p: f64, p: f64) -> TokenClassification {
    TokenClassification {
        id: scores.id.clone(),
        labels: scores
            .scores
            .iter()
            .map(|s| {
                s.map(|v| {
                    if v <= t_p {
                        Label::Common
                    } else {
                        Label::Specific
                    }
                })
            })
            .collect(),
        t_p,
        p,
    }
}

/// Per-sequence threshold at level `p`, then classification.
pub fn classify(scores: &ImportanceVector, p: f64) -> Result<TokenClassification> {
    let t_p = domain_threshold(&scores.scored(), p)?;
    Ok(classify_tokens(scores, t_p, p))
}

/// One threshold over the pooled scores of all sequences, applied to each.
pub fn classify_pooled(all: &[ImportanceVector], p: f64) -> Result<Vec<TokenClassification>> {
    let pooled: Vec<f64> = all.iter().flat_map(|v| v.scored()).collect();
    let t_p = domain_threshold(&pooled, p)?;
    Ok(all.iter().map(|v| classify_tokens(v, t_p, p)).collect())
}

/// How a token is taken out of the sequence for the leave-one-out oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Removal {
    /// Delete the token; later positions shift left.
    #[default]
    Delete,
    /// Replace the token by the padding id in place.
    MaskToken,
}

/// `|𝒯(S) − 𝒯(S∖{s_i})|` for each scored position, `𝒯` being mean
/// cross-entropy over the remaining loss positions.
///
/// Runs one baseline forward plus one per scored position. Positions whose
/// removal leaves nothing to predict are `None`.
pub fn loo_deltas(
    tokens: &[usize],
    model: &MoeModel,
    scored: &[bool],
    loss_mask: Option<&[bool]>,
    removal: Removal,
) -> Result<Vec<Option<f64>>> {
    if tokens.len() < 2 {
        return Err(Error::Domain(
            "leave-one-out needs at least two tokens".into(),
        ));
    }
    if scored.len() != tokens.len() {
        return Err(Error::dim(
            "loo_deltas mask",
            &[tokens.len()],
            &[scored.len()],
        ));
    }
    let full_mask: Vec<bool> = loss_mask.map_or_else(|| vec![true; tokens.len()], <[bool]>::to_vec);
    if full_mask.len() != tokens.len() {
        return Err(Error::dim(
            "loo_deltas loss mask",
            &[tokens.len()],
            &[full_mask.len()],
        ));
    }
    let base = model.sequence_loss(tokens, Some(&full_mask))?;

    let mut out = Vec::with_capacity(tokens.len());
    for i in 0..tokens.len() {
        if !scored[i] {
            out.push(None);
            continue;
        }
        let (seq, mask): (Vec<usize>, Vec<bool>) = match removal {
            Removal::Delete => tokens
                .iter()
                .zip(&full_mask)
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, (&t, &m))| (t, m))
                .unzip(),
            Removal::MaskToken => {
                let mut seq = tokens.to_vec();
                seq[i] = PAD;
                let mut mask = full_mask.clone();
                mask[i] = false;
                (seq, mask)
            }
        };
        let predictable = seq.len() >= 2 && mask.iter().skip(1).any(|&m| m);
        if !predictable {
            out.push(None);
            continue;
        }
        let loss = model.sequence_loss(&seq, Some(&mask))?;
        out.push(Some((base - loss).abs()));
    }
    Ok(out)
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        let avg = (start + end - 1) as f64 / 2.0 + 1.0;
        for &i in &idx[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Spearman ρ with average ranks for ties; `None` when either input is constant.
pub fn rank_correlation(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::dim("rank_correlation", &[a.len()], &[b.len()]));
    }
    if a.len() < 3 {
        return Err(Error::Domain(format!(
            "rank correlation needs at least 3 pairs, got {}",
            a.len()
        )));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        va += (x - mean) * (x - mean);
        vb += (y - mean) * (y - mean);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(None);
    }
    Ok(Some((cov / (va * vb).sqrt()).clamp(-1.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hadamard_examples() {
        assert_eq!(
            hadamard_norms(&[3.0, 4.0], &[1.0, 1.0], 2).unwrap(),
            vec![5.0]
        );
        assert_eq!(
            hadamard_norms(&[0.0, 0.0], &[9.0, -7.0], 2).unwrap(),
            vec![0.0]
        );
    }

    #[test]
    fn threshold_examples() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(domain_threshold(&s, 0.25).unwrap(), 3.0);
        assert_eq!(domain_threshold(&s, 0.0).unwrap(), 4.0);
        let t1 = domain_threshold(&s, 1.0).unwrap();
        assert!(t1 < 1.0);
        assert!(matches!(domain_threshold(&[], 0.5), Err(Error::Domain(_))));
    }

    #[test]
    fn classification_examples() {
        let v = ImportanceVector {
            id: "s".into(),
            scores: vec![Some(1.0), Some(2.0), Some(3.0), Some(4.0), None],
        };
        let c = classify_tokens(&v, 3.0, 0.25);
        use Label::*;
        assert_eq!(
            c.labels,
            vec![
                Some(Common),
                Some(Common),
                Some(Common),
                Some(Specific),
                None
            ]
        );

        let flat = ImportanceVector {
            id: "f".into(),
            scores: vec![Some(0.7); 6],
        };
        for p in [0.0, 0.15, 0.5, 0.99] {
            assert_eq!(classify(&flat, p).unwrap().count(Common), 6);
        }
        assert_eq!(classify(&flat, 1.0).unwrap().count(Specific), 6);
    }

    #[test]
    fn spearman_examples() {
        let r = |a: &[f64], b: &[f64]| rank_correlation(a, b).unwrap().unwrap();
        assert!((r(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]) - 1.0).abs() < 1e-12);
        assert!((r(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!(
            (r(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 4.0, 3.0]) - (1.0 - 6.0 * 2.0 / (4.0 * 15.0)))
                .abs()
                < 1e-12
        );
        assert_eq!(
            rank_correlation(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(),
            None
        );
        assert!(rank_correlation(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn average_ranks_share_ties() {
        assert_eq!(
            average_ranks(&[10.0, 20.0, 10.0, 30.0]),
            vec![1.5, 3.0, 1.5, 4.0]
        );
    }
}
