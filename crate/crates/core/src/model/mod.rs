//! Small decoder-only mixture-of-experts language model.
//!
//! Each layer is `x += mix(norm(x))` followed by `x += moe(norm(x))`, where
//! the MoE block routes every token to `k` of `N` feed-forward experts and
//! sums their outputs weighted by the gate weights:
//! `moe(x) = Σ_{i∈K} s_i(x) · FFN_i(x)`. Both router variants are supported
//! (see [`RouterMode`]).

mod checkpoint;
mod config;
mod forward;
mod network;
mod routing;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, MAGIC, VERSION,
};
pub use config::{MixerKind, ModelConfig, RouterMode, TrainSettings};
pub use forward::{model_forward, sequence_loss, EmbeddingGradients, ForwardOutput};
pub use network::{CounterSnapshot, Counters, Expert, Mixer, MoeLayer, MoeModel};
pub use routing::{route, route_logits, router_logits, top_k, LayerSteering, RoutingDecision};
pub use train::{train, LossCurve};

use crate::error::{Error, Result};
use crate::tensor::kernels;

/// Eager `Σ_{i∈K} s_i · FFN_i(x)` for one token, evaluating only the selected experts.
pub fn moe_forward(
    x: &crate::Tensor,
    layer: &MoeLayer,
    decision: &RoutingDecision,
) -> Result<crate::Tensor> {
    let d = layer.router.cols();
    if x.len() != d {
        return Err(Error::dim("moe_forward", x.shape(), &[d]));
    }
    let mut out = vec![0.0; d];
    for (&e, &s) in decision.experts.iter().zip(&decision.weights) {
        let expert = layer.experts.get(e).ok_or(Error::Index {
            what: "expert",
            index: e,
            bound: layer.experts.len(),
        })?;
        let h = expert.w_in.cols();
        let mut hidden = vec![0.0; h];
        kernels::matmul(x.data(), expert.w_in.data(), &mut hidden, 1, d, h);
        hidden.iter_mut().for_each(|v| *v *= kernels::sigmoid(*v));
        let mut y = vec![0.0; d];
        kernels::matmul(&hidden, expert.w_out.data(), &mut y, 1, h, d);
        for (o, v) in out.iter_mut().zip(y) {
            *o += s * v;
        }
    }
    crate::Tensor::vector(out)
}
