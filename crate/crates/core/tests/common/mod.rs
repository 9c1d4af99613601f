#![allow(dead_code)]

use dsmoe::corpus::{Sample, Vocab};
use dsmoe::harness::{CorpusSpec, ExperimentSpec, SweepSpec};
use dsmoe::model::{train, MixerKind, ModelConfig, MoeModel, RouterMode, TrainSettings};

pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 97,
        embed_dim: 16,
        num_layers: 2,
        num_experts: 4,
        top_k: 2,
        expert_hidden_dim: 16,
        router_mode: RouterMode::PreSoftmax,
        max_seq_len: 48,
        mixer: MixerKind::Attention,
        seed,
    }
}

pub fn tiny_model(seed: u64) -> MoeModel {
    MoeModel::new(tiny_config(seed)).unwrap()
}

/// A pipeline spec small enough to run in a few seconds.
pub fn tiny_spec(out: &std::path::Path) -> ExperimentSpec {
    ExperimentSpec {
        model: tiny_config(0),
        train: TrainSettings {
            steps: 40,
            batch_size: 4,
            ..TrainSettings::default()
        },
        corpus: CorpusSpec {
            samples_per_domain: 30,
            ..CorpusSpec::default()
        },
        attribution_samples: Some(6),
        seeds: vec![0],
        out: out.to_path_buf(),
        sweep: SweepSpec {
            k_grid: vec![0, 1, 2],
            alpha_grid: vec![1.0, 3.0, 1e6],
        },
        ..ExperimentSpec::default()
    }
}

/// "Q: x A: x" for each letter: the answer is a copy of one question token.
pub fn copy_corpus() -> Vec<Sample> {
    let vocab = Vocab::default();
    ('a'..='h')
        .map(|c| {
            let q = format!("Q: {c} A: ");
            Sample::from_text(format!("copy-{c}"), "copy", &q, &c.to_string(), &vocab).unwrap()
        })
        .collect()
}

pub fn train_on(model: &mut MoeModel, samples: &[Sample], steps: usize) -> f64 {
    let seqs: Vec<Vec<usize>> = samples.iter().map(Sample::tokens).collect();
    let curve = train(
        model,
        &seqs,
        &TrainSettings {
            steps,
            batch_size: 4,
            learning_rate: 1e-2,
            warmup_steps: 10,
            balance_coef: 0.0,
            ..TrainSettings::default()
        },
    )
    .unwrap();
    *curve.losses.last().unwrap()
}
