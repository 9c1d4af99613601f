//! Router steering toward a selected set of (layer, expert) pairs.
//!
//! A [`SteeringConfig`] turns the selected set `E*` and a coefficient `α`
//! into a per-(layer, expert) multiplier table: `α` for members, `1`
//! elsewhere. During routing the softmax gate weights are multiplied by the
//! layer's row before TopK and the selected weights renormalised, which is
//! the same as adding `ln α` to the member logits. The table is built once
//! and only read afterwards, so steering adds no forward passes.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{route, MoeModel, RoutingDecision};
use crate::profiler::ExpertScoreTable;
use crate::tensor::Tensor;

/// Recommended α sweep grid.
pub const ALPHA_GRID: [f64; 8] = [0.1, 0.5, 1.0, 2.0, 3.0, 5.0, 10.0, 50.0];

pub const DEFAULT_ALPHA: f64 = 3.0;

/// Where the multipliers enter routing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ApplicationPoint {
    /// Scale softmax gate weights, TopK on the scaled values, renormalise the selection.
    #[default]
    GateWeights,
    /// Add `ln m` to router logits, then masked softmax over the TopK.
    LogitBias,
    /// Keep the unsteered selection; only rescale and renormalise its weights.
    PostSelection,
}

impl ApplicationPoint {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gate-weights" => Ok(Self::GateWeights),
            "logit-bias" => Ok(Self::LogitBias),
            "post-selection" => Ok(Self::PostSelection),
            other => Err(Error::Config(format!("unknown steering mode `{other}`"))),
        }
    }
}

/// Read-only layers × experts multiplier table.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiplierTable {
    layers: usize,
    experts: usize,
    values: Arc<[f64]>,
}

impl MultiplierTable {
    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn row(&self, layer: usize) -> &[f64] {
        &self.values[layer * self.experts..(layer + 1) * self.experts]
    }

    pub fn get(&self, layer: usize, expert: usize) -> f64 {
        self.values[layer * self.experts + expert]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringConfig {
    fingerprint: String,
    alpha: f64,
    experts: Vec<(usize, usize)>,
    point: ApplicationPoint,
    table: MultiplierTable,
}

/// On-disk form. The multiplier table is rebuilt from the target model's shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringFile {
    pub fingerprint: String,
    pub alpha: f64,
    pub experts: Vec<[usize; 2]>,
    pub mode: ApplicationPoint,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 100.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "alpha = {alpha} must lie in (0, 100)"
        )))
    }
}

impl SteeringConfig {
    /// Builds the multiplier table. `alpha` must lie in (0, 100).
    pub fn new(
        fingerprint: impl Into<String>,
        alpha: f64,
        experts: Vec<(usize, usize)>,
        layers: usize,
        experts_per_layer: usize,
        point: ApplicationPoint,
    ) -> Result<Self> {
        check_alpha(alpha)?;
        Self::build(
            fingerprint.into(),
            alpha,
            experts,
            layers,
            experts_per_layer,
            point,
        )
    }

    /// Like [`SteeringConfig::new`] but accepts any finite positive α.
    ///
    /// Only for limit diagnostics (e.g. α = 1e6 dominance checks); such configs
    /// are never written by the pipeline.
    pub fn diagnostic(
        fingerprint: impl Into<String>,
        alpha: f64,
        experts: Vec<(usize, usize)>,
        layers: usize,
        experts_per_layer: usize,
        point: ApplicationPoint,
    ) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha = {alpha} must be positive and finite"
            )));
        }
        Self::build(
            fingerprint.into(),
            alpha,
            experts,
            layers,
            experts_per_layer,
            point,
        )
    }

    fn build(
        fingerprint: String,
        alpha: f64,
        experts: Vec<(usize, usize)>,
        layers: usize,
        experts_per_layer: usize,
        point: ApplicationPoint,
    ) -> Result<Self> {
        let mut values = vec![1.0; layers * experts_per_layer];
        for (i, &(l, e)) in experts.iter().enumerate() {
            if l >= layers || e >= experts_per_layer {
                return Err(Error::Config(format!(
                    "steered expert ({l}, {e}) outside a {layers}×{experts_per_layer} model"
                )));
            }
            if experts[..i].contains(&(l, e)) {
                return Err(Error::Config(format!(
                    "steered expert ({l}, {e}) listed twice"
                )));
            }
            values[l * experts_per_layer + e] = alpha;
        }
        Ok(Self {
            fingerprint,
            alpha,
            experts,
            point,
            table: MultiplierTable {
                layers,
                experts: experts_per_layer,
                values: values.into(),
            },
        })
    }

    /// Same selection and model, different α.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        Self::new(
            self.fingerprint.clone(),
            alpha,
            self.experts.clone(),
            self.table.layers,
            self.table.experts,
            self.point,
        )
    }

    pub fn with_point(mut self, point: ApplicationPoint) -> Self {
        self.point = point;
        self
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn experts(&self) -> &[(usize, usize)] {
        &self.experts
    }

    pub fn point(&self) -> ApplicationPoint {
        self.point
    }

    pub fn table(&self) -> &MultiplierTable {
        &self.table
    }

    /// True when every multiplier is 1.
    pub fn is_identity(&self) -> bool {
        self.table.values.iter().all(|&m| m == 1.0)
    }

    /// The layer's multiplier row, or `None` when it is all ones.
    pub fn layer_multipliers(&self, layer: usize) -> Option<(&[f64], ApplicationPoint)> {
        if layer >= self.table.layers {
            return None;
        }
        let row = self.table.row(layer);
        row.iter().any(|&m| m != 1.0).then_some((row, self.point))
    }

    pub fn to_file(&self) -> SteeringFile {
        SteeringFile {
            fingerprint: self.fingerprint.clone(),
            alpha: self.alpha,
            experts: self.experts.iter().map(|&(l, e)| [l, e]).collect(),
            mode: self.point,
        }
    }
}

/// Steering config for `scores.selected` with coefficient α, applied at the gate weights.
pub fn build_config(scores: &ExpertScoreTable, alpha: f64) -> Result<SteeringConfig> {
    SteeringConfig::new(
        scores.model.clone(),
        alpha,
        scores.selected.clone(),
        scores.layers,
        scores.experts,
        ApplicationPoint::GateWeights,
    )
}

/// `w̃_j = m_j w_j / Σ_i m_i w_i`.
pub fn apply_steering(weights: &[f64], multipliers: &[f64]) -> Result<Vec<f64>> {
    if weights.len() != multipliers.len() {
        return Err(Error::dim(
            "apply_steering",
            &[weights.len()],
            &[multipliers.len()],
        ));
    }
    if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
        return Err(Error::Numeric(
            "gate weights must be finite and nonnegative".into(),
        ));
    }
    if multipliers.iter().any(|&m| !m.is_finite() || m <= 0.0) {
        return Err(Error::Numeric(
            "multipliers must be finite and positive".into(),
        ));
    }
    let scaled: Vec<f64> = weights
        .iter()
        .zip(multipliers)
        .map(|(w, m)| w * m)
        .collect();
    let total: f64 = scaled.iter().sum();
    if total == 0.0 {
        return Err(Error::Numeric(
            "cannot renormalise all-zero gate weights".into(),
        ));
    }
    Ok(scaled.into_iter().map(|v| v / total).collect())
}

/// Routes the normalised hidden state `x` at `layer` under `config`.
pub fn steered_route(
    x: &Tensor,
    model: &MoeModel,
    layer: usize,
    position: usize,
    config: &SteeringConfig,
) -> Result<RoutingDecision> {
    model.check_steering(config)?;
    let moe_layer = model.layers().get(layer).ok_or_else(|| {
        Error::Config(format!(
            "layer {layer} outside a {}-layer steering config",
            config.table.layers
        ))
    })?;
    let steer = config
        .layer_multipliers(layer)
        .map(|(multipliers, point)| crate::model::LayerSteering { multipliers, point });
    let cfg = model.config();
    route(
        x,
        moe_layer,
        layer,
        position,
        cfg.top_k,
        cfg.router_mode,
        steer,
    )
}

pub fn save_config(config: &SteeringConfig, path: impl AsRef<Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&config.to_file())?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_config_file(path: impl AsRef<Path>) -> Result<SteeringFile> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a steering config and binds it to `model`, rejecting a fingerprint mismatch.
pub fn load_config(path: impl AsRef<Path>, model: &MoeModel) -> Result<SteeringConfig> {
    let file = read_config_file(path)?;
    if file.fingerprint != model.fingerprint() {
        return Err(Error::Compatibility {
            expected: file.fingerprint,
            found: model.fingerprint().to_string(),
        });
    }
    let cfg = model.config();
    SteeringConfig::new(
        file.fingerprint,
        file.alpha,
        file.experts.iter().map(|&[l, e]| (l, e)).collect(),
        cfg.num_layers,
        cfg.num_experts,
        file.mode,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(selected: Vec<(usize, usize)>) -> ExpertScoreTable {
        ExpertScoreTable {
            model: "fp".into(),
            layers: 2,
            experts: 4,
            scores: vec![0.0; 8],
            selected,
            k: 1,
            gamma: 0.0,
        }
    }

    #[test]
    fn identity_alpha_gives_all_ones() {
        let c = build_config(&table(vec![(0, 3)]), 1.0).unwrap();
        assert!(c.is_identity());
        assert!(c.layer_multipliers(0).is_none());
    }

    #[test]
    fn single_member_table() {
        let c = build_config(&table(vec![(0, 3)]), 3.0).unwrap();
        assert_eq!(c.table().get(0, 3), 3.0);
        let ones = c.table().values().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(ones, 7);
        assert_eq!(DEFAULT_ALPHA, 3.0);
    }

    #[test]
    fn alpha_range_enforced() {
        for bad in [0.0, -1.0, 100.0, f64::NAN] {
            assert!(matches!(
                build_config(&table(vec![]), bad),
                Err(Error::Config(_))
            ));
        }
        assert!(SteeringConfig::diagnostic(
            "fp",
            1e6,
            vec![(0, 0)],
            2,
            4,
            ApplicationPoint::GateWeights
        )
        .is_ok());
    }

    #[test]
    fn apply_steering_examples() {
        let w = apply_steering(&[0.6, 0.4], &[1.0, 3.0]).unwrap();
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-12 && (w[1] - 2.0 / 3.0).abs() < 1e-12);

        let w = apply_steering(&[0.2, 0.3], &[1.0, 1.0]).unwrap();
        assert!((w[0] - 0.4).abs() < 1e-12 && (w[1] - 0.6).abs() < 1e-12);

        let w = apply_steering(&[0.2, 0.3], &[7.0, 7.0]).unwrap();
        assert!((w[0] - 0.4).abs() < 1e-12 && (w[1] - 0.6).abs() < 1e-12);

        assert!(matches!(
            apply_steering(&[0.0, 0.0], &[1.0, 2.0]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn out_of_range_member_is_rejected() {
        assert!(build_config(&table(vec![(2, 0)]), 3.0).is_err());
        assert!(build_config(&table(vec![(0, 1), (0, 1)]), 3.0).is_err());
    }
}
