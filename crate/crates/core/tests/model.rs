mod common;

use common::{copy_corpus, tiny_config, tiny_model, train_on};
use dsmoe::harness::{evaluate, Variant};
use dsmoe::model::{
    decode_checkpoint, encode_checkpoint, moe_forward, route, train, ModelConfig, MoeModel,
    RouterMode, TrainSettings,
};
use dsmoe::steering::{ApplicationPoint, SteeringConfig};
use dsmoe::tensor::grad_check;
use dsmoe::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(2..vocab)).collect()
}

#[test]
fn embedding_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..5 {
        let model = tiny_model(seed);
        let tokens = random_tokens(&mut rng, 6, 97);
        let d = model.config().embed_dim;
        let x: Vec<f64> = (0..6 * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = Tensor::new(vec![6, d], x).unwrap();
        let err = grad_check(|t, e| model.loss_on_tape(t, e, &tokens, None), &x, 1e-5).unwrap();
        assert!(err <= 1e-6, "seed {seed}: {err}");
    }
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let model = tiny_model(3);
    let tokens = random_tokens(&mut rng, 7, 97);
    let (_, grads) = model.parameter_gradients(&tokens).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (p, g) in grads.iter().enumerate() {
        for _ in 0..4 {
            let i = rng.gen_range(0..g.len());
            let mut probe = model.clone();
            let orig = probe.params()[p].data()[i];
            probe.params_mut()[p].data_mut()[i] = orig + h;
            let up = probe.sequence_loss(&tokens, None).unwrap();
            probe.params_mut()[p].data_mut()[i] = orig - h;
            let down = probe.sequence_loss(&tokens, None).unwrap();
            let fd = (up - down) / (2.0 * h);
            // unused rows of the embedding tables have exactly zero gradient
            let err = (g.data()[i] - fd).abs() / (fd.abs() + 1e-12).max(1e-6);
            worst = worst.max(err);
        }
    }
    assert!(worst <= 1e-5, "{worst}");
}

/// Every expert evaluated densely by hand, non-selected experts weighted zero.
fn dense_moe(
    x: &[f64],
    model: &MoeModel,
    layer: usize,
    experts: &[usize],
    weights: &[f64],
) -> Vec<f64> {
    let l = &model.layers()[layer];
    let d = x.len();
    let mut out = vec![0.0; d];
    for (e, expert) in l.experts.iter().enumerate() {
        let w = experts
            .iter()
            .position(|&s| s == e)
            .map_or(0.0, |i| weights[i]);
        let h = expert.w_in.cols();
        let hidden: Vec<f64> = (0..h)
            .map(|j| {
                let v: f64 = (0..d).map(|i| x[i] * expert.w_in.data()[i * h + j]).sum();
                v / (1.0 + (-v).exp())
            })
            .collect();
        for (o, out_i) in out.iter_mut().enumerate() {
            let y: f64 = (0..h)
                .map(|j| hidden[j] * expert.w_out.data()[j * d + o])
                .sum();
            *out_i += w * y;
        }
    }
    out
}

#[test]
fn moe_forward_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for mode in [RouterMode::PreSoftmax, RouterMode::PostSoftmax] {
        let model = MoeModel::new(ModelConfig {
            router_mode: mode,
            ..tiny_config(5)
        })
        .unwrap();
        for layer in 0..2 {
            let x = Tensor::vector((0..16).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            let decision = route(&x, &model.layers()[layer], layer, 0, 2, mode, None).unwrap();
            let sparse = moe_forward(&x, &model.layers()[layer], &decision).unwrap();
            let dense = dense_moe(
                x.data(),
                &model,
                layer,
                &decision.experts,
                &decision.weights,
            );
            for (a, b) in sparse.data().iter().zip(&dense) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn forward_evaluates_exactly_k_experts_per_token_and_layer() {
    let model = tiny_model(1);
    let tokens: Vec<usize> = (2..15).collect();
    let before = model.counters().snapshot();
    let out = model.forward(&tokens, None).unwrap();
    let d = model.counters().snapshot() - before;
    assert_eq!(d.forward_passes, 1);
    assert_eq!(d.expert_evals, 13 * 2 * 2);
    assert_eq!(out.decisions.len(), 13 * 2);
}

#[test]
fn identity_steering_is_bit_identical() {
    let model = tiny_model(2);
    let tokens: Vec<usize> = (10..30).collect();
    let base = model.forward(&tokens, None).unwrap();
    let fp = model.fingerprint().to_string();
    for point in [
        ApplicationPoint::GateWeights,
        ApplicationPoint::LogitBias,
        ApplicationPoint::PostSelection,
    ] {
        let unit = SteeringConfig::new(&*fp, 1.0, vec![(0, 1), (1, 3)], 2, 4, point).unwrap();
        let empty = SteeringConfig::new(&*fp, 5.0, vec![], 2, 4, point).unwrap();
        for cfg in [&unit, &empty] {
            let out = model.forward(&tokens, Some(cfg)).unwrap();
            let same = out
                .logits
                .data()
                .iter()
                .zip(base.logits.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same);
            assert_eq!(out.decisions, base.decisions);
        }
    }
}

#[test]
fn checkpoint_round_trip_preserves_logits() {
    let mut model = tiny_model(4);
    train_on(&mut model, &copy_corpus(), 5);
    let bytes = encode_checkpoint(&model);
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back, model);
    assert_eq!(back.fingerprint(), model.fingerprint());
    let tokens: Vec<usize> = (3..20).collect();
    assert_eq!(
        back.forward(&tokens, None).unwrap(),
        model.forward(&tokens, None).unwrap()
    );
}

#[test]
fn memorized_samples_are_answered_exactly() {
    let samples = copy_corpus();
    let mut model = tiny_model(6);
    let loss = train_on(&mut model, &samples, 400);
    assert!(loss < 0.5, "final loss {loss}");
    let ev = evaluate(&model, &samples, None, Variant::Baseline, 0).unwrap();
    assert_eq!(ev.results[0].accuracy, 1.0);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut model = tiny_model(7);
    let before = model.clone();
    let seqs: Vec<Vec<usize>> = copy_corpus().iter().map(|s| s.tokens()).collect();
    let settings = TrainSettings {
        steps: 5,
        batch_size: 2,
        learning_rate: 0.0,
        ..TrainSettings::default()
    };
    train(&mut model, &seqs, &settings).unwrap();
    for (a, b) in model.params().iter().zip(before.params()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn training_is_deterministic() {
    let samples = copy_corpus();
    let mut a = tiny_model(8);
    let mut b = tiny_model(8);
    train_on(&mut a, &samples, 20);
    train_on(&mut b, &samples, 20);
    assert_eq!(encode_checkpoint(&a), encode_checkpoint(&b));
}
