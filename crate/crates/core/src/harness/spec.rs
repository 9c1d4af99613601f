use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribution::{LossScope, DEFAULT_P};
use crate::corpus::{Domain, FieldMap};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, RouterMode, TrainSettings};
use crate::profiler::Selection;
use crate::steering::{ApplicationPoint, ALPHA_GRID, DEFAULT_ALPHA};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    /// Generated domains; ignored when `jsonl` is non-empty.
    pub domains: Vec<Domain>,
    pub samples_per_domain: usize,
    /// Fraction of each domain that goes to training.
    pub train_fraction: f64,
    /// External question sets, read instead of generating.
    pub jsonl: Vec<PathBuf>,
    pub fields: FieldMap,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            domains: Domain::defaults(0),
            samples_per_domain: 1000,
            train_fraction: 0.8,
            jsonl: Vec::new(),
            fields: FieldMap::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub k_grid: Vec<usize>,
    pub alpha_grid: Vec<f64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        let mut alpha_grid = ALPHA_GRID.to_vec();
        alpha_grid.push(1e6);
        Self {
            k_grid: vec![0, 1, 2, 4, 8, 16],
            alpha_grid,
        }
    }
}

/// One experiment: model, corpus, target domain and DSMoE settings, run per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub model: ModelConfig,
    /// Use this checkpoint instead of training.
    pub checkpoint: Option<PathBuf>,
    pub train: TrainSettings,
    pub corpus: CorpusSpec,
    pub target_domain: String,
    pub p: f64,
    /// Number of steered (layer, expert) pairs; defaults to 1% of all pairs.
    pub k_experts: Option<usize>,
    pub alpha: f64,
    /// Overrides `model.router_mode`.
    pub router_mode: Option<RouterMode>,
    pub loss_scope: LossScope,
    pub selection: Selection,
    pub weighted_stats: bool,
    pub pooled_threshold: bool,
    pub steering_point: ApplicationPoint,
    /// Cap on target-domain questions used for attribution and profiling.
    pub attribution_samples: Option<usize>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub sweep: SweepSpec,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            checkpoint: None,
            train: TrainSettings::default(),
            corpus: CorpusSpec::default(),
            target_domain: "arith".into(),
            p: DEFAULT_P,
            k_experts: None,
            alpha: DEFAULT_ALPHA,
            router_mode: None,
            loss_scope: LossScope::Question,
            selection: Selection::Global,
            weighted_stats: false,
            pooled_threshold: false,
            steering_point: ApplicationPoint::GateWeights,
            attribution_samples: None,
            seeds: vec![0, 1, 2, 3, 4],
            out: PathBuf::from("runs/default"),
            sweep: SweepSpec::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut spec = Self::from_json(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        spec.resolve_paths(base);
        Ok(spec)
    }

    /// Makes relative input paths relative to `base` (the config file's directory).
    fn resolve_paths(&mut self, base: &Path) {
        if let Some(c) = &mut self.checkpoint {
            if c.is_relative() {
                *c = base.join(&*c);
            }
        }
        for p in &mut self.corpus.jsonl {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::Config(format!("p = {} must lie in (0, 1)", self.p)));
        }
        if !(self.alpha > 0.0 && self.alpha < 100.0) {
            return Err(Error::Config(format!(
                "alpha = {} must lie in (0, 100)",
                self.alpha
            )));
        }
        if let Some(k) = self.k_experts {
            if k > self.model.expert_pairs() {
                return Err(Error::Config(format!(
                    "k_experts = {k} exceeds {} (layer, expert) pairs",
                    self.model.expert_pairs()
                )));
            }
        }
        if self.target_domain.is_empty() {
            return Err(Error::Config("target_domain must be set".into()));
        }
        let c = &self.corpus;
        if c.jsonl.is_empty() {
            if c.domains.is_empty() || c.samples_per_domain == 0 {
                return Err(Error::Config(
                    "corpus needs domains and samples_per_domain ≥ 1".into(),
                ));
            }
            if !c.domains.iter().any(|d| d.name == self.target_domain) {
                return Err(Error::Config(format!(
                    "target domain `{}` is not among the corpus domains",
                    self.target_domain
                )));
            }
        }
        if !(0.0..=1.0).contains(&c.train_fraction) {
            return Err(Error::Config("train_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Model config with the router-mode override and seed applied.
    pub fn model_config(&self, seed: u64) -> ModelConfig {
        let mut cfg = self.model.clone();
        if let Some(mode) = self.router_mode {
            cfg.router_mode = mode;
        }
        cfg.seed = seed;
        cfg
    }

    pub fn train_settings(&self, seed: u64) -> TrainSettings {
        TrainSettings {
            seed,
            ..self.train.clone()
        }
    }

    /// K actually used: the override or 1% of pairs.
    pub fn k(&self) -> usize {
        self.k_experts.unwrap_or_else(|| {
            crate::profiler::default_k(self.model.num_layers, self.model.num_experts)
        })
    }
}
