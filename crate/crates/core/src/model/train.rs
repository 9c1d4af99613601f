use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainSettings;
use super::network::MoeModel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-step mean training cross-entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct LossCurve {
    pub losses: Vec<f64>,
}

impl LossCurve {
    pub fn first(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(model: &MoeModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Vec<f64>], lr: f64, s: &TrainSettings) {
        self.step += 1;
        let bc1 = 1.0 - s.beta1.powi(self.step);
        let bc2 = 1.0 - s.beta2.powi(self.step);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *mi = s.beta1 * *mi + (1.0 - s.beta1) * gi;
                *vi = s.beta2 * *vi + (1.0 - s.beta2) * gi * gi;
                if lr != 0.0 {
                    *w -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + s.eps);
                }
            }
        }
    }
}

/// Linear warmup, then cosine decay to 10% of the base rate.
fn learning_rate(step: usize, s: &TrainSettings) -> f64 {
    if s.warmup_steps > 0 && step < s.warmup_steps {
        return s.learning_rate * (step + 1) as f64 / s.warmup_steps as f64;
    }
    let span = s.steps.saturating_sub(s.warmup_steps).max(1) as f64;
    let progress = (step.saturating_sub(s.warmup_steps)) as f64 / span;
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos());
    s.learning_rate * (0.1 + 0.9 * cosine)
}

/// Trains `model` in place on full-sequence next-token prediction.
///
/// Batches are drawn from seeded epoch permutations of `corpus`, so a run
/// is fully determined by the model seed and `settings.seed`.
pub fn train(
    model: &mut MoeModel,
    corpus: &[Vec<usize>],
    settings: &TrainSettings,
) -> Result<LossCurve> {
    settings.validate()?;
    if corpus.is_empty() {
        return Err(Error::Domain("training corpus is empty".into()));
    }
    if let Some(i) = corpus.iter().position(|s| s.len() < 2) {
        return Err(Error::Domain(format!(
            "training sequence {i} has fewer than two tokens"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut adam = Adam::new(model);
    let mut losses = Vec::with_capacity(settings.steps);

    for step in 0..settings.steps {
        let mut batch = Vec::with_capacity(settings.batch_size);
        while batch.len() < settings.batch_size {
            if order.is_empty() {
                order = (0..corpus.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(order.pop().expect("refilled above"));
        }

        let seqs: Vec<&[usize]> = batch.iter().map(|&i| corpus[i].as_slice()).collect();
        let (batch_loss, grads) = model.batch_loss_and_grads(&seqs, settings.balance_coef)?;
        if !batch_loss.is_finite() {
            return Err(Error::Training {
                step,
                loss: batch_loss,
            });
        }
        let mut grads: Vec<Vec<f64>> = grads.into_iter().map(Tensor::into_data).collect();
        let norm_sq: f64 = grads.iter().flatten().map(|x| x * x).sum();
        if !norm_sq.is_finite() {
            return Err(Error::Training {
                step,
                loss: batch_loss,
            });
        }
        let norm = norm_sq.sqrt();
        if settings.grad_clip > 0.0 && norm > settings.grad_clip {
            let c = settings.grad_clip / norm;
            grads.iter_mut().flatten().for_each(|x| *x *= c);
        }
        adam.update(
            model.params_mut(),
            &grads,
            learning_rate(step, settings),
            settings,
        );
        losses.push(batch_loss);
    }
    model.train_settings = settings.clone();
    Ok(LossCurve { losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = TrainSettings {
            steps: 100,
            warmup_steps: 10,
            learning_rate: 1.0,
            ..TrainSettings::default()
        };
        assert!((learning_rate(0, &s) - 0.1).abs() < 1e-12);
        assert!((learning_rate(9, &s) - 1.0).abs() < 1e-12);
        assert!((learning_rate(10, &s) - 1.0).abs() < 1e-12);
        assert!(learning_rate(99, &s) < 0.11);
        assert!(learning_rate(50, &s) < learning_rate(20, &s));
    }
}
