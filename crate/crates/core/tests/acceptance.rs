//! Acceptance criteria 1-10, run in order with one PASS/FAIL line each.
//!
//! Runs as a plain binary (no libtest harness) so the timed criteria are not
//! competing with each other for the CPU. Failing criteria are reported but
//! only turn into a non-zero exit status with `-- --strict` or
//! `ACCEPTANCE_STRICT=1`.

use std::collections::{BTreeMap, HashMap};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use dsmoe::attribution::{
    classify, loo_deltas, prompt_importance, rank_correlation, Label, Removal,
};
use dsmoe::corpus::{generate_corpus, Domain, Sample, Vocab};
use dsmoe::harness::{self, read_sweep, seed_dir, ExperimentSpec, SeedRun};
use dsmoe::model::{
    load_checkpoint, route_logits, LayerSteering, MixerKind, ModelConfig, MoeModel, RouterMode,
};
use dsmoe::profiler::{expert_scores, expert_stats, import_trace, load_scores, ExpertStats};
use dsmoe::steering::{apply_steering, load_config, ApplicationPoint, SteeringConfig};
use dsmoe::tensor::grad_check;
use dsmoe::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Seed runs of the default spec, trained once and shared by criteria 5 and 7-10.
struct Runs {
    spec: ExperimentSpec,
    runs: BTreeMap<u64, (SeedRun, Duration)>,
}

impl Runs {
    fn get(&mut self, seed: u64) -> &SeedRun {
        let spec = &self.spec;
        &self
            .runs
            .entry(seed)
            .or_insert_with(|| {
                let t = Instant::now();
                let run = harness::run_seed(spec, seed).expect("seed run");
                (run, t.elapsed())
            })
            .0
    }

    fn elapsed(&self, seed: u64) -> Duration {
        self.runs[&seed].1
    }
}

fn tiny_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let num_experts = rng.gen_range(2..=6);
    ModelConfig {
        vocab_size: 16,
        embed_dim: 4 * rng.gen_range(1..=4),
        num_layers: rng.gen_range(1..=3),
        num_experts,
        top_k: rng.gen_range(1..=num_experts.min(3)),
        expert_hidden_dim: rng.gen_range(4..=16),
        router_mode: if rng.gen_bool(0.5) {
            RouterMode::PreSoftmax
        } else {
            RouterMode::PostSoftmax
        },
        max_seq_len: 16,
        mixer: if rng.gen_bool(0.75) {
            MixerKind::Attention
        } else {
            MixerKind::MeanPool
        },
        seed: rng.gen(),
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let cfg = tiny_config(&mut rng);
        let t_len = rng.gen_range(3..=8);
        let tokens: Vec<usize> = (0..t_len)
            .map(|_| rng.gen_range(2..cfg.vocab_size))
            .collect();
        let x: Vec<f64> = (0..t_len * cfg.embed_dim)
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect();
        let x = Tensor::new(vec![t_len, cfg.embed_dim], x).unwrap();
        let model = MoeModel::new(cfg).unwrap();
        let err = grad_check(
            |tape, e| model.loss_on_tape(tape, e, &tokens, None),
            &x,
            1e-5,
        )
        .unwrap();
        worst = worst.max(err);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-6 && secs < 60.0,
        format!("max relative error {worst:.2e} over 50 networks, {secs:.1}s"),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut agree, mut worst_sum) = (0, 0.0f64);
    for _ in 0..1000 {
        let n = rng.gen_range(1..=64);
        let k = rng.gen_range(1..=n.min(8));
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let mut sorted = logits.clone();
        sorted.sort_by(f64::total_cmp);
        assert!(
            sorted.windows(2).all(|w| w[0] < w[1]),
            "tie in generated logits"
        );
        let (post, _, _) = route_logits(&logits, k, RouterMode::PostSoftmax, None).unwrap();
        let (pre, w, _) = route_logits(&logits, k, RouterMode::PreSoftmax, None).unwrap();
        let (mut a, mut b) = (post.clone(), pre.clone());
        a.sort_unstable();
        b.sort_unstable();
        agree += usize::from(a == b);
        worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
    }
    outcome(
        agree == 1000 && worst_sum <= 1e-9,
        format!("{agree}/1000 identical selections, max |Σw − 1| = {worst_sum:.1e}"),
    )
}

fn criterion_3() -> Outcome {
    let model = MoeModel::new(ModelConfig::default()).unwrap();
    let cfg = model.config().clone();
    let fp = model.fingerprint().to_string();
    let tokens: Vec<usize> = Vocab::default().tokenize("Q: well 7+5=? A: 12");
    let base = model.forward(&tokens, None).unwrap().logits;
    let pairs = vec![(0, 3), (2, 9)];
    let unit = SteeringConfig::new(
        &*fp,
        1.0,
        pairs,
        cfg.num_layers,
        cfg.num_experts,
        ApplicationPoint::GateWeights,
    )
    .unwrap();
    let empty = SteeringConfig::new(
        &*fp,
        3.0,
        vec![],
        cfg.num_layers,
        cfg.num_experts,
        ApplicationPoint::GateWeights,
    )
    .unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let a_ok = bits(&model.forward(&tokens, Some(&unit)).unwrap().logits) == bits(&base)
        && bits(&model.forward(&tokens, Some(&empty)).unwrap().logits) == bits(&base);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut same_sets, mut worst) = (0, 0.0f64);
    for i in 0..1000 {
        let n = rng.gen_range(2..=32);
        let k = rng.gen_range(1..=n.min(8));
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let m: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.25) {
                    rng.gen_range(0.1..50.0)
                } else {
                    1.0
                }
            })
            .collect();
        let mode = if i % 2 == 0 {
            RouterMode::PreSoftmax
        } else {
            RouterMode::PostSoftmax
        };
        let steer = |point| {
            Some(LayerSteering {
                multipliers: &m,
                point,
            })
        };
        let (ea, wa, _) =
            route_logits(&logits, k, mode, steer(ApplicationPoint::GateWeights)).unwrap();
        let (eb, wb, _) =
            route_logits(&logits, k, mode, steer(ApplicationPoint::LogitBias)).unwrap();
        same_sets += usize::from(ea == eb);
        for (x, y) in wa.iter().zip(&wb) {
            worst = worst.max((x - y).abs());
        }
    }
    let b_ok = same_sets == 1000 && worst <= 1e-12;

    let w = apply_steering(&[0.6, 0.4], &[1.0, 3.0]).unwrap();
    let c_err = (w[0] - 1.0 / 3.0).abs().max((w[1] - 2.0 / 3.0).abs());
    outcome(
        a_ok && b_ok && c_err <= 1e-12,
        format!(
            "(a) identity bit-exact: {a_ok}; (b) {same_sets}/1000 same sets, max weight gap {worst:.1e}; \
             (c) error {c_err:.1e}"
        ),
    )
}

fn criterion_4() -> Outcome {
    let vocab = Vocab::default();
    let samples = generate_corpus(&Domain::defaults(4), 100, &vocab, 64).unwrap();
    let model = MoeModel::new(ModelConfig::default()).unwrap();
    let ps = [0.1, 0.15, 0.25, 0.5];
    let (mut frac_ok, mut nest_ok, mut worst) = (true, true, 0.0f64);
    for s in &samples {
        let iv = prompt_importance(s.prompt(), &model).unwrap();
        let t = iv.scored().len() as f64;
        let mut prev: Option<Vec<usize>> = None;
        for &p in &ps {
            let c = classify(&iv, p).unwrap();
            let common = c.count(Label::Common) as f64 / t;
            let gap = (common - (1.0 - p)).abs();
            worst = worst.max(gap * t);
            frac_ok &= gap <= 1.0 / t + 1e-12;
            let specific = c.specific_positions();
            if let Some(smaller) = &prev {
                nest_ok &= smaller.iter().all(|i| specific.contains(i));
            }
            prev = Some(specific);
        }
    }
    outcome(
        frac_ok && nest_ok,
        format!(
            "{} sequences; max |common − (1−p)|·T = {worst:.3}; nested: {nest_ok}",
            samples.len()
        ),
    )
}

fn criterion_5(runs: &mut Runs) -> Outcome {
    let start = Instant::now();
    let target = runs.spec.target_domain.clone();
    let run = runs.get(0);
    let model = &run.model;
    let eval_ce: f64 = run
        .eval
        .iter()
        .map(|s| model.sequence_loss(&s.tokens(), None).unwrap())
        .sum::<f64>()
        / run.eval.len() as f64;
    let questions: Vec<&Sample> = run
        .eval
        .iter()
        .filter(|s| s.domain() == target && s.question().len() <= 32)
        .take(20)
        .collect();
    let mut rhos = Vec::new();
    for s in &questions {
        let q = s.question();
        let r = prompt_importance(s.prompt(), model).unwrap();
        let loo = loo_deltas(q, model, &vec![true; q.len()], None, Removal::Delete).unwrap();
        let (a, b): (Vec<f64>, Vec<f64>) = r
            .scores
            .iter()
            .zip(&loo)
            .filter_map(|(x, y)| Some(((*x)?, (*y)?.abs())))
            .unzip();
        if let Some(rho) = rank_correlation(&a, &b).unwrap() {
            rhos.push(rho);
        }
    }
    let mean = rhos.iter().sum::<f64>() / rhos.len().max(1) as f64;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        eval_ce <= 1.0 && questions.len() >= 20 && rhos.len() >= 20 && mean >= 0.5 && secs < 300.0,
        format!(
            "eval CE {eval_ce:.3}; mean Spearman {mean:.3} over {} questions; {secs:.0}s including training",
            rhos.len()
        ),
    )
}

fn criterion_6(runs: &mut Runs) -> Outcome {
    let spec = runs.spec.clone();
    let run = runs.get(0);
    let labels: Vec<_> = run.importance.iter().map(|r| r.clone().split().1).collect();
    let streamed = expert_stats(&run.trace, &labels, false).unwrap();

    // materialise every (layer, expert, label) event, then count
    let by_id: HashMap<&str, &[Option<Label>]> = labels
        .iter()
        .map(|c| (c.id.as_str(), &c.labels[..]))
        .collect();
    let mut events = Vec::new();
    for rec in &run.trace.records {
        for d in &rec.decisions {
            if let Some(label) = by_id[rec.id.as_str()][d.position] {
                events.extend(d.experts.iter().map(|&e| (d.layer, e, label)));
            }
        }
    }
    let n = streamed.layers * streamed.experts;
    let (mut act, mut spe, mut com) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for &(l, e, label) in &events {
        let i = l * streamed.experts + e;
        act[i] += 1.0;
        match label {
            Label::Specific => spe[i] += 1.0,
            Label::Common => com[i] += 1.0,
        }
    }
    let exact = act == streamed.activation && spe == streamed.specific && com == streamed.common;
    let freq = streamed.domain_frequency();
    let worst_sum = freq
        .chunks(streamed.experts)
        .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);

    // hand case: P(e|D) = 10/20, P(S|e) = 8/10, P(C|e) = 2/10
    let mut hand = ExpertStats::empty(1, 2, 1, false);
    for i in 0..10 {
        hand.observe(
            0,
            0,
            1.0,
            if i < 8 {
                Label::Specific
            } else {
                Label::Common
            },
        );
        hand.observe(0, 1, 1.0, Label::Common);
    }
    let g = expert_scores(&hand)[0];
    outcome(
        exact && worst_sum <= 1e-9 && g == 0.3 && spec.weighted_stats == streamed.weighted,
        format!(
            "{} events counted identically: {exact}; max |Σ P(e|D) − 1| = {worst_sum:.1e}; hand g = {g}",
            events.len()
        ),
    )
}

fn criterion_7(runs: &mut Runs) -> Outcome {
    let start = Instant::now();
    let seeds = runs.spec.seeds.clone();
    let pretrained: Vec<u64> = runs.runs.keys().copied().collect();
    let target = runs.spec.target_domain.clone();
    let mut lines = Vec::new();
    let (mut wins, mut gains, mut drifts) = (0, Vec::new(), Vec::new());
    for &seed in &seeds {
        let run = runs.get(seed);
        for (b, d) in run.baseline.results.iter().zip(&run.dsmoe.results) {
            let rel = (d.xent - b.xent) / b.xent;
            if b.domain == target {
                wins += usize::from(d.xent <= b.xent);
                gains.push(-rel);
            } else {
                drifts.push(rel);
            }
            lines.push(format!("{seed}:{}{:+.2}%", &b.domain[..1], 100.0 * rel));
        }
    }
    let trained: Duration = pretrained.iter().map(|&s| runs.elapsed(s)).sum();
    let secs = (start.elapsed() + trained).as_secs_f64();
    let mean_gain = gains.iter().sum::<f64>() / gains.len() as f64;
    let mean_drift = drifts.iter().sum::<f64>() / drifts.len().max(1) as f64;
    outcome(
        wins >= 3 && mean_gain >= 0.01 && mean_drift <= 0.02 && secs < 900.0,
        format!(
            "target improved on {wins}/{} seeds, mean improvement {:.2}%, non-target change {:+.2}%, {secs:.0}s [{}]",
            seeds.len(),
            100.0 * mean_gain,
            100.0 * mean_drift,
            lines.join(" ")
        ),
    )
}

fn criterion_8(runs: &mut Runs) -> Outcome {
    let spec = runs.spec.clone();
    let run = runs.get(0);
    let dir = tempfile::tempdir().unwrap();
    harness::run_sweeps(&spec, run, dir.path()).unwrap();
    let k_rows = read_sweep(dir.path().join(harness::files::SWEEP_K)).unwrap();
    let a_rows = read_sweep(dir.path().join(harness::files::SWEEP_ALPHA)).unwrap();
    let domains = run.baseline.results.len();
    let complete = k_rows.len() == spec.sweep.k_grid.len() * domains
        && a_rows.len() == spec.sweep.alpha_grid.len() * domains;
    let base: HashMap<&str, (f64, f64)> = run
        .baseline
        .results
        .iter()
        .map(|r| (r.domain.as_str(), (r.xent, r.accuracy)))
        .collect();
    let equal = |rows: &[harness::SweepRow], v: f64| {
        rows.iter()
            .filter(|r| r.value == v)
            .all(|r| base[r.domain.as_str()] == (r.xent, r.accuracy))
    };
    let identity = equal(&k_rows, 0.0) && equal(&a_rows, 1.0);
    let dominance = a_rows
        .iter()
        .filter(|r| r.value == 1e6)
        .filter_map(|r| r.dominance)
        .fold(f64::INFINITY, f64::min);
    outcome(
        complete && identity && dominance >= 0.99,
        format!(
            "{} K rows, {} α rows, complete: {complete}; K=0 and α=1 equal baseline: {identity}; \
             α=1e6 dominance {dominance:.4}",
            k_rows.len(),
            a_rows.len()
        ),
    )
}

fn criterion_9(runs: &mut Runs) -> Outcome {
    let run = runs.get(0);
    let c = run.cost;
    let per_sample = c.attribution_forward == c.attributed_sequences
        && c.attribution_backward == c.attributed_sequences;
    let no_extra = c.dsmoe_eval_forward == c.baseline_eval_forward;

    // one length-N multiply per token per steered layer, summed over every steered forward
    let steered_layers = {
        let mut l: Vec<usize> = run.steering.experts().iter().map(|&(l, _)| l).collect();
        l.sort_unstable();
        l.dedup();
        l.len() as u64
    };
    let positions: u64 = run
        .eval
        .iter()
        .map(|s| {
            let (q, a) = (s.question().len() as u64, s.answer().len() as u64);
            (q + a) + (0..a).map(|j| q + j).sum::<u64>()
        })
        .sum();
    let overhead = c.steering_multiplies == positions * steered_layers;
    let n = run.model.config().num_experts;
    let single = {
        let tokens = run.eval[0].question();
        let before = run.model.counters().snapshot();
        run.model.forward(tokens, Some(&run.steering)).unwrap();
        let d = run.model.counters().snapshot() - before;
        d.forward_passes == 1 && d.steering_multiplies == tokens.len() as u64 * steered_layers
    };
    outcome(
        per_sample && no_extra && overhead && single,
        format!(
            "attribution {} fwd + {} bwd for {} samples; eval forwards {} vs {}; \
             {} length-{n} multiplies = tokens × steered layers: {overhead}",
            c.attribution_forward,
            c.attribution_backward,
            c.attributed_sequences,
            c.baseline_eval_forward,
            c.dsmoe_eval_forward,
            c.steering_multiplies
        ),
    )
}

fn criterion_10(runs: &mut Runs) -> Outcome {
    let spec = runs.spec.clone();
    let run = runs.get(0);
    let dir = tempfile::tempdir().unwrap();
    let seed = seed_dir(dir.path(), 0);
    harness::write_seed(&spec, run, &seed).unwrap();
    let f = harness::files::CHECKPOINT;
    let model_ok = load_checkpoint(seed.join(f)).unwrap() == run.model;
    let trace_ok = import_trace(seed.join(harness::files::TRACE)).unwrap() == run.trace;
    let scores_ok = load_scores(seed.join(harness::files::SCORES)).unwrap() == run.scores;
    let steer_path = seed.join(harness::files::STEERING);
    let steer_ok = load_config(&steer_path, &run.model).unwrap() == run.steering;
    let other = MoeModel::new(ModelConfig {
        seed: 12345,
        ..run.model.config().clone()
    })
    .unwrap();
    let rejected = load_config(&steer_path, &other).is_err();
    outcome(
        model_ok && trace_ok && scores_ok && steer_ok && rejected,
        format!(
            "checkpoint {model_ok}, trace {trace_ok}, scores {scores_ok}, steering {steer_ok}, \
             foreign fingerprint rejected {rejected}"
        ),
    )
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut runs = Runs {
        spec: ExperimentSpec::default(),
        runs: BTreeMap::new(),
    };
    let names = [
        "gradient correctness",
        "routing-variant agreement",
        "steering algebra",
        "quantile contract",
        "attribution vs leave-one-out",
        "profiler exactness",
        "end-to-end direction of effect",
        "ablation shape",
        "cost accounting",
        "persistence",
    ];
    let strict = std::env::args().any(|a| a == "--strict")
        || std::env::var_os("ACCEPTANCE_STRICT").is_some();
    let mut failed = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let o = match i + 1 {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(&mut runs),
            6 => criterion_6(&mut runs),
            7 => criterion_7(&mut runs),
            8 => criterion_8(&mut runs),
            9 => criterion_9(&mut runs),
            _ => criterion_10(&mut runs),
        };
        if !o.pass {
            failed.push((i + 1).to_string());
        }
        println!(
            "criterion {:>2} {:<32} {}  {}",
            i + 1,
            name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!(
        "acceptance: {}/{} criteria passed",
        names.len() - failed.len(),
        names.len()
    );
    if !failed.is_empty() {
        println!("acceptance: failing criteria {}", failed.join(", "));
    }
    if failed.is_empty() || !strict {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
