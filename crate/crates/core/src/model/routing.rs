//! Top-k expert selection and gate weights for a single token.

use serde::{Deserialize, Serialize};

use super::config::RouterMode;
use super::network::MoeLayer;
use crate::error::{Error, Result};
use crate::steering::{self, ApplicationPoint};
use crate::tensor::{kernels, Tensor};

/// One routing event: which experts a token was sent to at a layer, and with what weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub layer: usize,
    pub position: usize,
    /// Selected expert indices, ordered by descending selection score (ties: lower index first).
    pub experts: Vec<usize>,
    /// Gate weights aligned with `experts`.
    pub weights: Vec<f64>,
    /// True when a non-identity multiplier row influenced this decision.
    #[serde(default)]
    pub steered: bool,
}

/// Multipliers for one layer plus the point where they enter routing.
#[derive(Debug, Clone, Copy)]
pub struct LayerSteering<'a> {
    pub multipliers: &'a [f64],
    pub point: ApplicationPoint,
}

/// Indices of the `k` largest values; ties go to the lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn keep_mask(n: usize, selected: &[usize]) -> Vec<bool> {
    let mut keep = vec![false; n];
    for &i in selected {
        keep[i] = true;
    }
    keep
}

/// Unsteered selection and weights for `mode`.
fn plain(logits: &[f64], k: usize, mode: RouterMode) -> (Vec<usize>, Vec<f64>) {
    let n = logits.len();
    let mut buf = vec![0.0; n];
    match mode {
        RouterMode::PostSoftmax => {
            kernels::softmax(logits, &mut buf);
            let sel = top_k(&buf, k);
            let w = sel.iter().map(|&i| buf[i]).collect();
            (sel, w)
        }
        RouterMode::PreSoftmax => {
            let sel = top_k(logits, k);
            kernels::masked_softmax(logits, &keep_mask(n, &sel), &mut buf);
            let w = sel.iter().map(|&i| buf[i]).collect();
            (sel, w)
        }
    }
}

/// Routes one token given its router logits.
///
/// With no steering, or an all-ones multiplier row, this is the unmodified
/// routing rule for `mode`. Otherwise the multipliers scale the softmax
/// gate weights before TopK and the selected weights are renormalised to 1
/// (equivalently, `ln m` is added to the logits).
pub fn route_logits(
    logits: &[f64],
    k: usize,
    mode: RouterMode,
    steering: Option<LayerSteering<'_>>,
) -> Result<(Vec<usize>, Vec<f64>, bool)> {
    let n = logits.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!("top_k = {k} with {n} experts")));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numeric("router logits are not finite".into()));
    }
    let steer = match steering {
        Some(s) if s.multipliers.iter().any(|&m| m != 1.0) => s,
        _ => {
            let (sel, w) = plain(logits, k, mode);
            return Ok((sel, w, false));
        }
    };
    if steer.multipliers.len() != n {
        return Err(Error::dim("route", &[n], &[steer.multipliers.len()]));
    }
    let m = steer.multipliers;
    match steer.point {
        ApplicationPoint::GateWeights => {
            let mut p = vec![0.0; n];
            kernels::softmax(logits, &mut p);
            let scaled: Vec<f64> = p.iter().zip(m).map(|(x, y)| x * y).collect();
            let sel = top_k(&scaled, k);
            let w: Vec<f64> = sel.iter().map(|&i| p[i]).collect();
            let ms: Vec<f64> = sel.iter().map(|&i| m[i]).collect();
            let w = steering::apply_steering(&w, &ms)?;
            Ok((sel, w, true))
        }
        ApplicationPoint::LogitBias => {
            let biased: Vec<f64> = logits.iter().zip(m).map(|(l, y)| l + y.ln()).collect();
            let sel = top_k(&biased, k);
            let mut q = vec![0.0; n];
            kernels::masked_softmax(&biased, &keep_mask(n, &sel), &mut q);
            let w = sel.iter().map(|&i| q[i]).collect();
            Ok((sel, w, true))
        }
        ApplicationPoint::PostSelection => {
            let (sel, w) = plain(logits, k, mode);
            let ms: Vec<f64> = sel.iter().map(|&i| m[i]).collect();
            let w = steering::apply_steering(&w, &ms)?;
            Ok((sel, w, true))
        }
    }
}

/// Router logits `W_e x` for one token, bit-identical to the batched tape product.
pub fn router_logits(x: &[f64], router: &Tensor) -> Vec<f64> {
    (0..router.rows())
        .map(|e| 0.0 + kernels::dot(x, router.row(e)))
        .collect()
}

/// Routes the (already normalised) hidden state `x` through `layer`'s router.
pub fn route(
    x: &Tensor,
    layer: &MoeLayer,
    layer_index: usize,
    position: usize,
    k: usize,
    mode: RouterMode,
    steering: Option<LayerSteering<'_>>,
) -> Result<RoutingDecision> {
    if x.len() != layer.router.cols() {
        return Err(Error::dim("route", x.shape(), layer.router.shape()));
    }
    if !x.is_finite() {
        return Err(Error::Numeric("route input is not finite".into()));
    }
    let logits = router_logits(x.data(), &layer.router);
    let (experts, weights, steered) = route_logits(&logits, k, mode, steering)?;
    Ok(RoutingDecision {
        layer: layer_index,
        position,
        experts,
        weights,
        steered,
    })
}
