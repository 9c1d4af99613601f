use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where TopK sparsity is applied relative to the router softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouterMode {
    /// `TopK(softmax(l), k)`: selected probabilities are used as-is (sum ≤ 1).
    PostSoftmax,
    /// `softmax(TopK_mask(l, k))`: non-selected logits masked to −∞ (sum = 1).
    PreSoftmax,
}

impl RouterMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RouterMode::PostSoftmax => "post-softmax",
            RouterMode::PreSoftmax => "pre-softmax",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "post-softmax" | "post" => Ok(RouterMode::PostSoftmax),
            "pre-softmax" | "pre" => Ok(RouterMode::PreSoftmax),
            other => Err(Error::Config(format!("unknown router mode `{other}`"))),
        }
    }
}

/// Token-mixing sublayer preceding each MoE block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixerKind {
    /// Single-head causal self-attention.
    Attention,
    /// Causal running mean of value projections.
    MeanPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub expert_hidden_dim: usize,
    pub router_mode: RouterMode,
    pub max_seq_len: usize,
    #[serde(default = "default_mixer")]
    pub mixer: MixerKind,
    pub seed: u64,
}

fn default_mixer() -> MixerKind {
    MixerKind::Attention
}

impl Default for ModelConfig {
    /// Desk-scale default: 4 layers of 16 experts, top-2 routing, d = 64.
    fn default() -> Self {
        Self {
            vocab_size: 256,
            embed_dim: 64,
            num_layers: 4,
            num_experts: 16,
            top_k: 2,
            expert_hidden_dim: 64,
            router_mode: RouterMode::PreSoftmax,
            max_seq_len: 64,
            mixer: MixerKind::Attention,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.embed_dim == 0 || self.expert_hidden_dim == 0 {
            return Err(Error::Config(
                "embed_dim and expert_hidden_dim must be positive".into(),
            ));
        }
        if self.num_layers == 0 || self.num_experts == 0 || self.max_seq_len == 0 {
            return Err(Error::Config(
                "num_layers, num_experts and max_seq_len must be positive".into(),
            ));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "top_k = {} must lie in 1..={}",
                self.top_k, self.num_experts
            )));
        }
        Ok(())
    }

    /// Total (layer, expert) pairs.
    pub fn expert_pairs(&self) -> usize {
        self.num_layers * self.num_experts
    }
}

/// Adam-style optimiser and schedule settings. Stored in every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Weight of the switch-style load-balancing penalty; 0 disables it.
    pub balance_coef: f64,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            warmup_steps: 50,
            grad_clip: 1.0,
            balance_coef: 0.01,
            seed: 0,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(
                "learning_rate must be finite and nonnegative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.balance_coef < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::Config(
                "balance_coef and grad_clip must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}
