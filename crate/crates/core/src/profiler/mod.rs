//! Expert profiling: routing traces, per-(layer, expert) statistics, the
//! domain-specific score
//!
//! ```text
//! g(e) = P(e | D) · [P(s ∈ S | e) − P(s ∈ C | e)]
//! ```
//!
//! and top-K selection of `E*`. `P(e | D)` is normalised per layer over
//! routing slots, so each layer's probabilities sum to one.

mod trace;

use std::collections::HashMap;
use std::fs;
use std::ops::Add;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use trace::{collect_trace, export_trace, import_trace, RoutingTrace, TraceRecord};

use crate::attribution::{Label, TokenClassification};
use crate::error::{Error, Result};

/// Default K: 1% of all (layer, expert) pairs, rounded up.
pub fn default_k(layers: usize, experts: usize) -> usize {
    (layers * experts).div_ceil(100)
}

/// Per-(layer, expert) routing counts split by token label, row-major `layers × experts`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertStats {
    pub layers: usize,
    pub experts: usize,
    pub k: usize,
    /// Count gate weight instead of 1 per routing event.
    pub weighted: bool,
    pub activation: Vec<f64>,
    pub specific: Vec<f64>,
    pub common: Vec<f64>,
    /// Labelled positions seen, per layer.
    pub tokens: Vec<u64>,
}

impl ExpertStats {
    pub fn empty(layers: usize, experts: usize, k: usize, weighted: bool) -> Self {
        let n = layers * experts;
        Self {
            layers,
            experts,
            k,
            weighted,
            activation: vec![0.0; n],
            specific: vec![0.0; n],
            common: vec![0.0; n],
            tokens: vec![0; layers],
        }
    }

    /// Records one routing event.
    pub fn observe(&mut self, layer: usize, expert: usize, weight: f64, label: Label) {
        let i = layer * self.experts + expert;
        let w = if self.weighted { weight } else { 1.0 };
        self.activation[i] += w;
        match label {
            Label::Specific => self.specific[i] += w,
            Label::Common => self.common[i] += w,
        }
    }

    /// Sums two partial aggregates over disjoint sequence sets.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if (self.layers, self.experts, self.k, self.weighted)
            != (other.layers, other.experts, other.k, other.weighted)
        {
            return Err(Error::Join("cannot merge stats of different shapes".into()));
        }
        let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect();
        Ok(Self {
            activation: add(&self.activation, &other.activation),
            specific: add(&self.specific, &other.specific),
            common: add(&self.common, &other.common),
            tokens: self
                .tokens
                .iter()
                .zip(&other.tokens)
                .map(|(a, b)| a + b)
                .collect(),
            ..self.clone()
        })
    }

    /// `P(e | D)` per (layer, expert): activation mass over the layer's total.
    pub fn domain_frequency(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.activation.len()];
        for l in 0..self.layers {
            let row = &self.activation[l * self.experts..(l + 1) * self.experts];
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                for (o, a) in out[l * self.experts..].iter_mut().zip(row) {
                    *o = a / total;
                }
            }
        }
        out
    }
}

impl Add for &ExpertStats {
    type Output = ExpertStats;

    fn add(self, rhs: Self) -> ExpertStats {
        self.merge(rhs).expect("stats shapes agree")
    }
}

/// Counts every labelled (position, layer, selected expert) event of `trace`.
///
/// Positions without a label are skipped entirely.
pub fn expert_stats(
    trace: &RoutingTrace,
    labels: &[TokenClassification],
    weighted: bool,
) -> Result<ExpertStats> {
    let by_id: HashMap<&str, &TokenClassification> =
        labels.iter().map(|c| (c.id.as_str(), c)).collect();
    let mut stats = ExpertStats::empty(trace.layers, trace.experts, trace.k, weighted);
    for rec in &trace.records {
        let c = by_id.get(rec.id.as_str()).ok_or_else(|| {
            Error::Join(format!(
                "no token classification for traced sequence `{}`",
                rec.id
            ))
        })?;
        if c.labels.len() != rec.len() {
            return Err(Error::Join(format!(
                "sequence `{}` has {} traced positions but {} labels",
                rec.id,
                rec.len(),
                c.labels.len()
            )));
        }
        for l in 0..trace.layers {
            stats.tokens[l] += c.labels.iter().flatten().count() as u64;
        }
        for d in &rec.decisions {
            if let Some(label) = c.labels[d.position] {
                for (&e, &w) in d.experts.iter().zip(&d.weights) {
                    stats.observe(d.layer, e, w, label);
                }
            }
        }
    }
    Ok(stats)
}

/// `g` per (layer, expert); experts never activated score 0.
pub fn expert_scores(stats: &ExpertStats) -> Vec<f64> {
    let freq = stats.domain_frequency();
    (0..stats.activation.len())
        .map(|i| {
            let a = stats.activation[i];
            if a == 0.0 {
                0.0
            } else {
                freq[i] * ((stats.specific[i] - stats.common[i]) / a)
            }
        })
        .collect()
}

/// `P(e|D) · [P(S|e) − P(C|e)]`.
pub fn domain_score(freq: f64, p_specific: f64, p_common: f64) -> f64 {
    freq * (p_specific - p_common)
}

/// Whether K counts pairs across all layers or within each layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    #[default]
    Global,
    PerLayer,
}

fn ranked(scores: &[f64], pairs: &[(usize, usize)], experts: usize) -> Vec<(usize, usize)> {
    let mut p = pairs.to_vec();
    p.sort_by(|a, b| {
        scores[b.0 * experts + b.1]
            .total_cmp(&scores[a.0 * experts + a.1])
            .then(a.cmp(b))
    });
    p
}

/// Top-K (layer, expert) pairs by score, ties to the lower layer then lower
/// expert, and `γ_K`, the smallest selected score.
pub fn select_experts(
    scores: &[f64],
    layers: usize,
    experts: usize,
    k: usize,
    selection: Selection,
) -> Result<(Vec<(usize, usize)>, f64)> {
    if scores.len() != layers * experts {
        return Err(Error::dim(
            "select_experts",
            &[scores.len()],
            &[layers, experts],
        ));
    }
    let bound = match selection {
        Selection::Global => layers * experts,
        Selection::PerLayer => experts,
    };
    if k == 0 || k > bound {
        return Err(Error::Config(format!("K = {k} outside 1..={bound}")));
    }
    let all: Vec<(usize, usize)> = (0..layers)
        .flat_map(|l| (0..experts).map(move |e| (l, e)))
        .collect();
    let selected = match selection {
        Selection::Global => ranked(scores, &all, experts)
            .into_iter()
            .take(k)
            .collect::<Vec<_>>(),
        Selection::PerLayer => all
            .chunks(experts)
            .flat_map(|layer| ranked(scores, layer, experts).into_iter().take(k))
            .collect(),
    };
    let gamma = selected
        .iter()
        .map(|&(l, e)| scores[l * experts + e])
        .fold(f64::INFINITY, f64::min);
    Ok((selected, gamma))
}

/// Scores, the selected set `E*`, K and `γ_K` for one model and domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertScoreTable {
    /// Fingerprint of the profiled model.
    pub model: String,
    pub layers: usize,
    pub experts: usize,
    /// Row-major `layers × experts`.
    pub scores: Vec<f64>,
    /// `E*` in selection order.
    pub selected: Vec<(usize, usize)>,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "gamma_K")]
    pub gamma: f64,
}

impl ExpertScoreTable {
    pub fn from_stats(
        model: &str,
        stats: &ExpertStats,
        k: usize,
        selection: Selection,
    ) -> Result<Self> {
        let scores = expert_scores(stats);
        let (selected, gamma) = select_experts(&scores, stats.layers, stats.experts, k, selection)?;
        Ok(Self {
            model: model.to_string(),
            layers: stats.layers,
            experts: stats.experts,
            scores,
            selected,
            k,
            gamma,
        })
    }

    pub fn score(&self, layer: usize, expert: usize) -> f64 {
        self.scores[layer * self.experts + expert]
    }

    /// `layers × experts` rows.
    pub fn matrix(&self) -> Vec<Vec<f64>> {
        self.scores
            .chunks(self.experts)
            .map(<[f64]>::to_vec)
            .collect()
    }
}

pub fn save_scores(table: &ExpertScoreTable, path: impl AsRef<Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(table)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_scores(path: impl AsRef<Path>) -> Result<ExpertScoreTable> {
    let table: ExpertScoreTable = serde_json::from_str(&fs::read_to_string(path)?)?;
    if table.scores.len() != table.layers * table.experts {
        return Err(Error::Format(format!(
            "score table holds {} values for {}×{}",
            table.scores.len(),
            table.layers,
            table.experts
        )));
    }
    Ok(table)
}

/// Bare CSV matrix: one row per layer, one column per expert.
pub fn write_heatmap(table: &ExpertScoreTable, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    for row in table.matrix() {
        w.write_record(row.iter().map(f64::to_string))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_heatmap(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|v| {
                v.trim().parse::<f64>().map_err(|e| Error::Schema {
                    line: i + 1,
                    message: format!("`{v}`: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_score() {
        assert!((domain_score(0.5, 0.8, 0.2) - 0.3).abs() < 1e-15);
        assert_eq!(domain_score(0.25, 0.0, 1.0), -0.25);
    }

    #[test]
    fn selection_tie_break() {
        let (sel, gamma) =
            select_experts(&[0.3, 0.1, 0.3, 0.0], 1, 4, 2, Selection::Global).unwrap();
        assert_eq!(sel, vec![(0, 0), (0, 2)]);
        assert_eq!(gamma, 0.3);
        let (all, g) = select_experts(&[0.3, 0.1, 0.3, 0.0], 2, 2, 4, Selection::Global).unwrap();
        assert_eq!(all.len(), 4);
        assert_eq!(g, 0.0);
        assert!(select_experts(&[0.0; 4], 1, 4, 0, Selection::Global).is_err());
        assert!(select_experts(&[0.0; 4], 1, 4, 5, Selection::Global).is_err());
    }

    #[test]
    fn per_layer_selection() {
        let s = [0.1, 0.2, 0.9, 0.0];
        let (sel, _) = select_experts(&s, 2, 2, 1, Selection::PerLayer).unwrap();
        assert_eq!(sel, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn never_activated_expert_scores_zero() {
        let mut st = ExpertStats::empty(1, 3, 1, false);
        st.observe(0, 0, 1.0, Label::Common);
        st.observe(0, 1, 1.0, Label::Specific);
        let g = expert_scores(&st);
        assert_eq!(g, vec![-0.5, 0.5, 0.0]);
    }

    #[test]
    fn default_k_is_one_percent() {
        assert_eq!(default_k(4, 16), 1);
        assert_eq!(default_k(24, 128), 31);
    }

    #[test]
    fn heatmap_round_trip() {
        let t = ExpertScoreTable {
            model: "m".into(),
            layers: 2,
            experts: 3,
            scores: vec![0.1, -1.0 / 3.0, 0.0, 2e-17, 0.5, -0.25],
            selected: vec![(1, 1)],
            k: 1,
            gamma: 0.5,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        write_heatmap(&t, &p).unwrap();
        assert_eq!(read_heatmap(&p).unwrap(), t.matrix());
        let j = dir.path().join("s.json");
        save_scores(&t, &j).unwrap();
        assert_eq!(load_scores(&j).unwrap(), t);
    }
}
