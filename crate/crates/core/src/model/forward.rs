//! Forward pass, sequence loss and gradients of the MoE language model.

use super::config::{MixerKind, RouterMode};
use super::network::MoeModel;
use super::routing::{route_logits, LayerSteering, RoutingDecision};
use crate::error::{Error, Result};
use crate::steering::SteeringConfig;
use crate::tensor::{Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-6;

pub(crate) struct TapeForward {
    pub logits: Var,
    pub decisions: Vec<RoutingDecision>,
    /// Token embeddings (T × d): the lookup result or the supplied input.
    pub embeddings: Var,
    pub balance: Option<Var>,
}

/// Next-token logits and every routing decision made while producing them.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// T × V; row t predicts token t + 1.
    pub logits: Tensor,
    /// Ordered by layer, then position.
    pub decisions: Vec<RoutingDecision>,
}

/// Loss value together with the gathered token embeddings and their gradients.
#[derive(Debug, Clone)]
pub struct EmbeddingGradients {
    pub loss: f64,
    pub embeddings: Tensor,
    pub gradients: Tensor,
}

/// Prediction targets for a token sequence: row t targets `tokens[t + 1]` when `mask[t + 1]`.
pub(crate) fn masked_targets(
    tokens: &[usize],
    mask: Option<&[bool]>,
) -> Result<Vec<Option<usize>>> {
    if tokens.len() < 2 {
        return Err(Error::Domain(
            "sequence loss needs at least two tokens".into(),
        ));
    }
    if let Some(m) = mask {
        if m.len() != tokens.len() {
            return Err(Error::dim(
                "sequence_loss mask",
                &[tokens.len()],
                &[m.len()],
            ));
        }
    }
    let targets: Vec<Option<usize>> = (0..tokens.len())
        .map(|t| {
            let next = t + 1;
            (next < tokens.len() && mask.is_none_or(|m| m[next])).then(|| tokens[next])
        })
        .collect();
    if targets.iter().all(Option::is_none) {
        return Err(Error::Domain(
            "loss mask selects no predictable position".into(),
        ));
    }
    Ok(targets)
}

impl MoeModel {
    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        let cfg = self.config();
        if tokens.is_empty() {
            return Err(Error::Domain("empty token sequence".into()));
        }
        if tokens.len() > cfg.max_seq_len {
            return Err(Error::Length {
                len: tokens.len(),
                max: cfg.max_seq_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Index {
                what: "token id",
                index: bad,
                bound: cfg.vocab_size,
            });
        }
        Ok(())
    }

    pub(crate) fn check_steering(&self, steering: &SteeringConfig) -> Result<()> {
        if steering.fingerprint() != self.fingerprint() {
            return Err(Error::Compatibility {
                expected: steering.fingerprint().to_string(),
                found: self.fingerprint().to_string(),
            });
        }
        let table = steering.table();
        if table.layers() != self.config().num_layers
            || table.experts() != self.config().num_experts
        {
            return Err(Error::Config(format!(
                "steering table is {}×{}, model is {}×{}",
                table.layers(),
                table.experts(),
                self.config().num_layers,
                self.config().num_experts
            )));
        }
        Ok(())
    }

    /// Puts every parameter on `tape` in declaration order, trainable or frozen.
    pub(crate) fn bind_params<'a>(&'a self, tape: &Tape<'a>, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|p| {
                if trainable {
                    tape.param(p)
                } else {
                    tape.frozen(p)
                }
            })
            .collect()
    }

    /// Records the full forward computation on `tape` using parameters bound by
    /// [`MoeModel::bind_params`]. `embeddings` replaces the token-embedding
    /// lookup when given.
    pub(crate) fn forward_on_tape<'a>(
        &'a self,
        tape: &Tape<'a>,
        params: &[Var],
        tokens: &[usize],
        embeddings: Option<Var>,
        steering: Option<&SteeringConfig>,
        with_balance: bool,
    ) -> Result<TapeForward> {
        self.check_tokens(tokens)?;
        if let Some(s) = steering {
            self.check_steering(s)?;
        }
        let cfg = self.config();
        let (t_len, d, n, k) = (tokens.len(), cfg.embed_dim, cfg.num_experts, cfg.top_k);
        let per_layer = 5 + 2 * n;
        debug_assert_eq!(params.len(), 3 + cfg.num_layers * per_layer);

        let (tok_emb, pos_emb) = (params[0], params[1]);
        let embeddings = match embeddings {
            Some(e) => {
                let shape = tape.shape(e);
                if shape != [t_len, d] {
                    return Err(Error::dim("forward embeddings", &shape, &[t_len, d]));
                }
                e
            }
            None => tape.gather_rows(tok_emb, tokens)?,
        };
        let positions: Vec<usize> = (0..t_len).collect();
        let pos = tape.gather_rows(pos_emb, &positions)?;
        let mut x = tape.add(embeddings, pos)?;

        let mut decisions = Vec::with_capacity(t_len * cfg.num_layers);
        let mut balance: Option<Var> = None;
        let mut expert_evals = 0u64;

        for l in 0..cfg.num_layers {
            let lp = &params[2 + l * per_layer..2 + (l + 1) * per_layer];
            let (wq, wk, wv, wo, router) = (lp[0], lp[1], lp[2], lp[3], lp[4]);
            let expert_vars: Vec<(Var, Var)> = lp[5..].chunks(2).map(|c| (c[0], c[1])).collect();

            // token mixing
            let h = tape.rms_norm(x, NORM_EPS);
            let mixed = match cfg.mixer {
                MixerKind::Attention => {
                    let q = tape.matmul(h, wq)?;
                    let kk = tape.matmul(h, wk)?;
                    let v = tape.matmul(h, wv)?;
                    let scores = tape.scale(tape.matmul_nt(q, kk)?, 1.0 / (d as f64).sqrt());
                    let attn = tape.causal_softmax(scores)?;
                    tape.matmul(attn, v)?
                }
                MixerKind::MeanPool => {
                    let mut avg = Tensor::zeros(vec![t_len, t_len]);
                    for i in 0..t_len {
                        let w = 1.0 / (i + 1) as f64;
                        avg.row_mut(i)[..=i].iter_mut().for_each(|v| *v = w);
                    }
                    let v = tape.matmul(h, wv)?;
                    tape.matmul(tape.constant(avg), v)?
                }
            };
            x = tape.add(x, tape.matmul(mixed, wo)?)?;

            // routing
            let h2 = tape.rms_norm(x, NORM_EPS);
            let router_logits = tape.matmul_nt(h2, router)?;
            let layer_steer = steering
                .and_then(|s| s.layer_multipliers(l))
                .map(|(m, point)| LayerSteering {
                    multipliers: m,
                    point,
                });
            let mut layer_decisions = Vec::with_capacity(t_len);
            {
                let lg = tape.value(router_logits);
                for t in 0..t_len {
                    let (experts, weights, steered) =
                        route_logits(lg.row(t), k, cfg.router_mode, layer_steer)?;
                    layer_decisions.push(RoutingDecision {
                        layer: l,
                        position: t,
                        experts,
                        weights,
                        steered,
                    });
                }
            }
            if layer_steer.is_some() {
                self.counters().add_steering_multiplies(t_len as u64);
            }

            // gate weights, differentiable through the router when unsteered
            let gates = if layer_steer.is_some() {
                let w: Vec<f64> = layer_decisions
                    .iter()
                    .flat_map(|dcs| dcs.weights.clone())
                    .collect();
                tape.constant(Tensor::vector(w)?)
            } else {
                let probs = match cfg.router_mode {
                    RouterMode::PostSoftmax => tape.softmax(router_logits)?,
                    RouterMode::PreSoftmax => {
                        let mut keep = vec![false; t_len * n];
                        for dcs in &layer_decisions {
                            for &e in &dcs.experts {
                                keep[dcs.position * n + e] = true;
                            }
                        }
                        tape.masked_softmax(router_logits, &keep)?
                    }
                };
                let flat: Vec<usize> = layer_decisions
                    .iter()
                    .flat_map(|dcs| dcs.experts.iter().map(move |&e| dcs.position * n + e))
                    .collect();
                tape.gather_elems(probs, &flat)?
            };

            // dispatch: only selected experts run, on their routed rows
            let mut rows_per_expert: Vec<Vec<usize>> = vec![Vec::new(); n];
            let mut slots_per_expert: Vec<Vec<usize>> = vec![Vec::new(); n];
            for dcs in &layer_decisions {
                for (slot, &e) in dcs.experts.iter().enumerate() {
                    rows_per_expert[e].push(dcs.position);
                    slots_per_expert[e].push(dcs.position * k + slot);
                }
            }
            let mut parts = Vec::new();
            for (e, (w_in, w_out)) in expert_vars.iter().enumerate() {
                let rows = &rows_per_expert[e];
                if rows.is_empty() {
                    continue;
                }
                expert_evals += rows.len() as u64;
                let xe = tape.gather_rows(h2, rows)?;
                let hidden = tape.silu(tape.matmul(xe, *w_in)?);
                let ye = tape.matmul(hidden, *w_out)?;
                let ge = tape.gather_elems(gates, &slots_per_expert[e])?;
                parts.push((tape.scale_rows(ye, ge)?, rows.clone()));
            }
            let moe = tape.scatter_rows(parts, t_len, d)?;
            x = tape.add(x, moe)?;

            if with_balance {
                let probs = tape.softmax(router_logits)?;
                let mean_row = tape.constant(Tensor::filled(vec![1, t_len], 1.0 / t_len as f64));
                let mean_probs = tape.matmul(mean_row, probs)?;
                let mut frac = vec![0.0; n];
                for (e, rows) in rows_per_expert.iter().enumerate() {
                    frac[e] = rows.len() as f64 / (t_len * k) as f64;
                }
                let frac = tape.constant(Tensor::new(vec![n, 1], frac)?);
                let aux = tape.scale(tape.matmul(mean_probs, frac)?, n as f64);
                let aux = tape.reshape(aux, vec![1])?;
                balance = Some(match balance {
                    Some(b) => tape.add(b, aux)?,
                    None => aux,
                });
            }
            decisions.extend(layer_decisions);
        }

        let unembed = params[params.len() - 1];
        let hf = tape.rms_norm(x, NORM_EPS);
        let logits = tape.matmul(hf, unembed)?;

        self.counters().add_forward();
        self.counters().add_expert_evals(expert_evals);
        Ok(TapeForward {
            logits,
            decisions,
            embeddings,
            balance,
        })
    }

    /// Causal next-token logits plus the routing trace of this sequence.
    pub fn forward(
        &self,
        tokens: &[usize],
        steering: Option<&SteeringConfig>,
    ) -> Result<ForwardOutput> {
        let tape = Tape::new();
        let params = self.bind_params(&tape, false);
        let out = self.forward_on_tape(&tape, &params, tokens, None, steering, false)?;
        let logits = tape.value(out.logits).clone();
        Ok(ForwardOutput {
            logits,
            decisions: out.decisions,
        })
    }

    /// Mean next-token cross-entropy over positions where `mask` is true (all by default).
    ///
    /// `mask[t]` refers to predicting token `t` from the tokens before it, so
    /// `mask[0]` never contributes.
    pub fn sequence_loss(&self, tokens: &[usize], mask: Option<&[bool]>) -> Result<f64> {
        let targets = masked_targets(tokens, mask)?;
        let tape = Tape::new();
        let params = self.bind_params(&tape, false);
        let out = self.forward_on_tape(&tape, &params, tokens, None, None, false)?;
        let loss = tape.cross_entropy(out.logits, &targets)?;
        let value = tape.value(loss).item()?;
        Ok(value)
    }

    /// One forward and one backward pass: loss and its gradient at each token embedding.
    pub fn embedding_gradients(
        &self,
        tokens: &[usize],
        mask: Option<&[bool]>,
    ) -> Result<EmbeddingGradients> {
        let targets = masked_targets(tokens, mask)?;
        let tape = Tape::new();
        let params = self.bind_params(&tape, false);
        let rows: Vec<f64> = tokens
            .iter()
            .flat_map(|&t| self.token_embedding.row(t).iter().copied())
            .collect();
        let leaf = tape.leaf(
            Tensor::new(vec![tokens.len(), self.config().embed_dim], rows)?,
            true,
        );
        let out = self.forward_on_tape(&tape, &params, tokens, Some(leaf), None, false)?;
        let loss = tape.cross_entropy(out.logits, &targets)?;
        let grads = tape.gradients(loss, &[out.embeddings])?;
        self.counters().add_backward();
        let loss_value = tape.value(loss).item()?;
        let embeddings = tape.value(out.embeddings).clone();
        Ok(EmbeddingGradients {
            loss: loss_value,
            embeddings,
            gradients: grads.into_vec().remove(0),
        })
    }

    /// Records the mean next-token loss on `tape` with `embeddings` (T × d)
    /// standing in for the token-embedding lookup. Parameters stay frozen.
    pub fn loss_on_tape<'a>(
        &'a self,
        tape: &Tape<'a>,
        embeddings: Var,
        tokens: &[usize],
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let targets = masked_targets(tokens, mask)?;
        let params = self.bind_params(tape, false);
        let out = self.forward_on_tape(tape, &params, tokens, Some(embeddings), None, false)?;
        tape.cross_entropy(out.logits, &targets)
    }

    /// Mean next-token loss and its gradient with respect to every parameter,
    /// in [`MoeModel::params`] order.
    pub fn parameter_gradients(&self, tokens: &[usize]) -> Result<(f64, Vec<Tensor>)> {
        self.batch_loss_and_grads(&[tokens], 0.0)
    }

    /// Mean training cross-entropy over `batch` and the gradient of the
    /// training objective (plus `balance_coef` times the balance penalty) with
    /// respect to every parameter, in declaration order.
    ///
    /// All sequences share one tape, so each parameter gradient is accumulated
    /// in a single buffer.
    pub(crate) fn batch_loss_and_grads(
        &self,
        batch: &[&[usize]],
        balance_coef: f64,
    ) -> Result<(f64, Vec<Tensor>)> {
        if batch.is_empty() {
            return Err(Error::Domain("empty training batch".into()));
        }
        let tape = Tape::new();
        let params = self.bind_params(&tape, true);
        let mut total: Option<Var> = None;
        let mut ce_sum = 0.0;
        for tokens in batch {
            let targets = masked_targets(tokens, None)?;
            let out =
                self.forward_on_tape(&tape, &params, tokens, None, None, balance_coef > 0.0)?;
            let ce = tape.cross_entropy(out.logits, &targets)?;
            ce_sum += tape.value(ce).item()?;
            let term = match out.balance {
                Some(b) => tape.add(ce, tape.scale(b, balance_coef))?,
                None => ce,
            };
            total = Some(match total {
                Some(t) => tape.add(t, term)?,
                None => term,
            });
        }
        let inv = 1.0 / batch.len() as f64;
        let loss = tape.scale(total.expect("batch is non-empty"), inv);
        let grads = tape.gradients(loss, &params)?;
        self.counters().add_backward();
        Ok((ce_sum * inv, grads.into_vec()))
    }
}

/// Free-function form of [`MoeModel::forward`].
pub fn model_forward(
    tokens: &[usize],
    model: &MoeModel,
    steering: Option<&SteeringConfig>,
) -> Result<ForwardOutput> {
    model.forward(tokens, steering)
}

/// Free-function form of [`MoeModel::sequence_loss`].
pub fn sequence_loss(tokens: &[usize], model: &MoeModel, mask: Option<&[bool]>) -> Result<f64> {
    model.sequence_loss(tokens, mask)
}
