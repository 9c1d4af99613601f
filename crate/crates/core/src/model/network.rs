use std::ops::Sub;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::{ModelConfig, TrainSettings};
use crate::error::Result;
use crate::tensor::Tensor;

/// One feed-forward expert: `silu(x · w_in) · w_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub w_in: Tensor,
    pub w_out: Tensor,
}

/// Token mixer weights. The mean-pool mixer only reads `wv` and `wo`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixer {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    pub mixer: Mixer,
    /// Router embedding `W_e`, one row per expert (N × d).
    pub router: Tensor,
    pub experts: Vec<Expert>,
}

/// Instrumentation counters. Incremented by forward/backward passes on this model.
#[derive(Debug, Default)]
pub struct Counters {
    forward: AtomicU64,
    backward: AtomicU64,
    expert_evals: AtomicU64,
    steering_multiplies: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CounterSnapshot {
    pub forward_passes: u64,
    pub backward_passes: u64,
    /// Number of (token, expert) FFN evaluations.
    pub expert_evals: u64,
    /// Number of length-N multiplier applications made by steering.
    pub steering_multiplies: u64,
}

impl Sub for CounterSnapshot {
    type Output = CounterSnapshot;

    fn sub(self, rhs: Self) -> Self {
        CounterSnapshot {
            forward_passes: self.forward_passes - rhs.forward_passes,
            backward_passes: self.backward_passes - rhs.backward_passes,
            expert_evals: self.expert_evals - rhs.expert_evals,
            steering_multiplies: self.steering_multiplies - rhs.steering_multiplies,
        }
    }
}

impl Counters {
    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            forward_passes: self.forward.load(Ordering::Relaxed),
            backward_passes: self.backward.load(Ordering::Relaxed),
            expert_evals: self.expert_evals.load(Ordering::Relaxed),
            steering_multiplies: self.steering_multiplies.load(Ordering::Relaxed),
        }
    }

    pub(crate) fn add_forward(&self) {
        self.forward.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn add_backward(&self) {
        self.backward.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn add_expert_evals(&self, n: u64) {
        self.expert_evals.fetch_add(n, Ordering::Relaxed);
    }

    pub(crate) fn add_steering_multiplies(&self, n: u64) {
        self.steering_multiplies.fetch_add(n, Ordering::Relaxed);
    }
}

/// Decoder-only MoE language model.
#[derive(Debug)]
pub struct MoeModel {
    config: ModelConfig,
    pub(crate) token_embedding: Tensor,
    pub(crate) position_embedding: Tensor,
    pub(crate) layers: Vec<MoeLayer>,
    pub(crate) unembed: Tensor,
    pub(crate) train_settings: TrainSettings,
    fingerprint: OnceLock<String>,
    counters: Counters,
}

impl Clone for MoeModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            token_embedding: self.token_embedding.clone(),
            position_embedding: self.position_embedding.clone(),
            layers: self.layers.clone(),
            unembed: self.unembed.clone(),
            train_settings: self.train_settings.clone(),
            fingerprint: self.fingerprint.clone(),
            counters: Counters::default(),
        }
    }
}

impl PartialEq for MoeModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.train_settings == other.train_settings
            && self.params().into_iter().eq(other.params())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std is positive");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape covers data")
}

impl MoeModel {
    /// Seeded random initialisation.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.embed_dim;
        let h = config.expert_hidden_dim;
        let depth_scale = 1.0 / (2.0 * config.num_layers as f64).sqrt();
        let proj = 1.0 / (d as f64).sqrt();

        let token_embedding = gaussian(&mut rng, vec![config.vocab_size, d], 0.5);
        let position_embedding = gaussian(&mut rng, vec![config.max_seq_len, d], 0.1);
        let layers = (0..config.num_layers)
            .map(|_| {
                let mixer = Mixer {
                    wq: gaussian(&mut rng, vec![d, d], proj),
                    wk: gaussian(&mut rng, vec![d, d], proj),
                    wv: gaussian(&mut rng, vec![d, d], proj),
                    wo: gaussian(&mut rng, vec![d, d], proj * depth_scale),
                };
                let router = gaussian(&mut rng, vec![config.num_experts, d], proj);
                let experts = (0..config.num_experts)
                    .map(|_| Expert {
                        w_in: gaussian(&mut rng, vec![d, h], proj),
                        w_out: gaussian(&mut rng, vec![h, d], depth_scale / (h as f64).sqrt()),
                    })
                    .collect();
                MoeLayer {
                    mixer,
                    router,
                    experts,
                }
            })
            .collect();
        let unembed = gaussian(&mut rng, vec![d, config.vocab_size], proj);
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            layers,
            unembed,
            train_settings: TrainSettings::default(),
            fingerprint: OnceLock::new(),
            counters: Counters::default(),
        })
    }

    /// Assembles a model from parameters in declaration order (see [`MoeModel::params`]).
    pub(crate) fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        let mut model = Self::new(config)?;
        let expected = model.params().len();
        if params.len() != expected {
            return Err(crate::Error::Format(format!(
                "expected {expected} parameter blocks, found {}",
                params.len()
            )));
        }
        for (slot, value) in model.params_mut().into_iter().zip(params) {
            if slot.shape() != value.shape() {
                return Err(crate::Error::Format(format!(
                    "parameter shape {:?} does not match config shape {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[MoeLayer] {
        &self.layers
    }

    pub fn token_embedding(&self) -> &Tensor {
        &self.token_embedding
    }

    /// Optimiser settings of the last training run (defaults for a fresh model).
    pub fn train_settings(&self) -> &TrainSettings {
        &self.train_settings
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    /// Parameters in declaration order: token embedding, position embedding,
    /// then per layer `wq, wk, wv, wo, router, (w_in, w_out) per expert`,
    /// then the unembedding.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for layer in &self.layers {
            let m = &layer.mixer;
            out.extend([&m.wq, &m.wk, &m.wv, &m.wo, &layer.router]);
            for e in &layer.experts {
                out.extend([&e.w_in, &e.w_out]);
            }
        }
        out.push(&self.unembed);
        out
    }

    /// Mutable parameters in declaration order. Invalidates the cached fingerprint.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.fingerprint = OnceLock::new();
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for layer in &mut self.layers {
            let m = &mut layer.mixer;
            out.extend([
                &mut m.wq,
                &mut m.wk,
                &mut m.wv,
                &mut m.wo,
                &mut layer.router,
            ]);
            for e in &mut layer.experts {
                out.extend([&mut e.w_in, &mut e.w_out]);
            }
        }
        out.push(&mut self.unembed);
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// SHA-256 over the serialised config block and all parameter bytes, hex encoded.
    pub fn fingerprint(&self) -> &str {
        self.fingerprint.get_or_init(|| {
            let mut hasher = Sha256::new();
            hasher.update(super::checkpoint::encode_config(&self.config));
            for p in self.params() {
                for v in p.data() {
                    hasher.update(v.to_le_bytes());
                }
            }
            hex::encode(&hasher.finalize()[..16])
        })
    }
}
