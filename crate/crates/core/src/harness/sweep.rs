use std::path::Path;

use serde::{Deserialize, Serialize};

use super::eval::{evaluate, Variant};
use super::spec::ExperimentSpec;
use crate::corpus::Sample;
use crate::error::Result;
use crate::model::MoeModel;
use crate::profiler::{select_experts, ExpertScoreTable};
use crate::steering::SteeringConfig;

/// One (setting, domain) cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    /// K for the K sweep, α for the α sweep.
    pub value: f64,
    pub domain: String,
    pub xent: f64,
    pub accuracy: f64,
    /// Share of decisions at steered layers whose top-weight expert is steered; empty without steering.
    pub dominance: Option<f64>,
}

/// Fraction of routing decisions at layers holding a steered expert whose
/// highest-weight expert is one of the steered ones.
pub fn dominance(
    model: &MoeModel,
    samples: &[&Sample],
    config: &SteeringConfig,
) -> Result<Option<f64>> {
    let steered = config.experts();
    if steered.is_empty() {
        return Ok(None);
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for s in samples {
        let out = model.forward(s.question(), Some(config))?;
        for d in &out.decisions {
            if !steered.iter().any(|&(l, _)| l == d.layer) {
                continue;
            }
            let mut top = 0;
            for i in 1..d.weights.len() {
                if d.weights[i] > d.weights[top] {
                    top = i;
                }
            }
            total += 1;
            hits += usize::from(steered.contains(&(d.layer, d.experts[top])));
        }
    }
    Ok((total > 0).then(|| hits as f64 / total as f64))
}

fn sweep_cell(
    spec: &ExperimentSpec,
    model: &MoeModel,
    eval: &[Sample],
    config: Option<&SteeringConfig>,
    seed: u64,
    value: f64,
) -> Result<Vec<SweepRow>> {
    let ev = evaluate(model, eval, config, Variant::Dsmoe, seed)?;
    let targets: Vec<&Sample> = eval
        .iter()
        .filter(|s| s.domain() == spec.target_domain)
        .collect();
    let dom = match config {
        Some(c) => dominance(model, &targets, c)?,
        None => None,
    };
    Ok(ev
        .results
        .into_iter()
        .map(|r| SweepRow {
            seed,
            value,
            domain: r.domain,
            xent: r.xent,
            accuracy: r.accuracy,
            dominance: dom,
        })
        .collect())
}

/// Re-selects E* for every K in the grid at the experiment's α. K = 0 is the unsteered model.
pub fn sweep_k(
    spec: &ExperimentSpec,
    model: &MoeModel,
    table: &ExpertScoreTable,
    eval: &[Sample],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &k in &spec.sweep.k_grid {
        let k = k.min(table.layers * table.experts);
        let config = if k == 0 {
            None
        } else {
            let (selected, _) = select_experts(
                &table.scores,
                table.layers,
                table.experts,
                k,
                spec.selection,
            )?;
            Some(SteeringConfig::new(
                table.model.clone(),
                spec.alpha,
                selected,
                table.layers,
                table.experts,
                spec.steering_point,
            )?)
        };
        rows.extend(sweep_cell(
            spec,
            model,
            eval,
            config.as_ref(),
            seed,
            k as f64,
        )?);
    }
    Ok(rows)
}

/// Fixed E* at every α in the grid; values outside (0, 100) use the diagnostic constructor.
pub fn sweep_alpha(
    spec: &ExperimentSpec,
    model: &MoeModel,
    table: &ExpertScoreTable,
    eval: &[Sample],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &alpha in &spec.sweep.alpha_grid {
        let config = SteeringConfig::diagnostic(
            table.model.clone(),
            alpha,
            table.selected.clone(),
            table.layers,
            table.experts,
            spec.steering_point,
        )?;
        rows.extend(sweep_cell(spec, model, eval, Some(&config), seed, alpha)?);
    }
    Ok(rows)
}

/// `((layer, expert), accuracy, cross-entropy)` for one steered pair.
pub type SingleExpertResult = ((usize, usize), f64, f64);

/// Target-domain accuracy and cross-entropy with each single (layer, expert)
/// pair steered at `alpha`, in (layer, expert) order.
pub fn single_expert_search(
    spec: &ExperimentSpec,
    model: &MoeModel,
    eval: &[Sample],
    alpha: f64,
) -> Result<Vec<SingleExpertResult>> {
    let cfg = model.config();
    let targets: Vec<Sample> = eval
        .iter()
        .filter(|s| s.domain() == spec.target_domain)
        .cloned()
        .collect();
    let mut out = Vec::with_capacity(cfg.expert_pairs());
    for l in 0..cfg.num_layers {
        for e in 0..cfg.num_experts {
            let config = SteeringConfig::new(
                model.fingerprint(),
                alpha,
                vec![(l, e)],
                cfg.num_layers,
                cfg.num_experts,
                spec.steering_point,
            )?;
            let r = &evaluate(model, &targets, Some(&config), Variant::Dsmoe, 0)?.results[0];
            out.push(((l, e), r.accuracy, r.xent));
        }
    }
    Ok(out)
}

/// Pair with the highest accuracy, ties to lower cross-entropy, then lower (layer, expert).
pub fn best_single_expert(search: &[SingleExpertResult]) -> Option<(usize, usize)> {
    search
        .iter()
        .min_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then(a.2.total_cmp(&b.2))
                .then(a.0.cmp(&b.0))
        })
        .map(|r| r.0)
}

pub fn write_sweep(rows: &[SweepRow], column: &str, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["seed", column, "domain", "xent", "accuracy", "dominance"])?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            r.value.to_string(),
            r.domain.clone(),
            r.xent.to_string(),
            r.accuracy.to_string(),
            r.dominance.map(|d| d.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep(path: impl AsRef<Path>) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .unwrap_or_default()
                .parse()
                .map_err(|e| crate::error::Error::Format(format!("sweep column {i}: {e}")))
        };
        let dom = rec.get(5).unwrap_or_default();
        out.push(SweepRow {
            seed: num(0)? as u64,
            value: num(1)?,
            domain: rec.get(2).unwrap_or_default().to_string(),
            xent: num(3)?,
            accuracy: num(4)?,
            dominance: if dom.is_empty() { None } else { Some(num(5)?) },
        });
    }
    Ok(out)
}
