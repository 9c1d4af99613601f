use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::eval::{evaluate, write_predictions, write_results, EvalResult, Evaluation, Variant};
use super::spec::ExperimentSpec;
use super::sweep::{sweep_alpha, sweep_k, write_sweep};
use crate::attribution::{
    classify, classify_pooled, export_importance, prompt_importance, sample_importance,
    ImportanceRecord, LossScope, TokenClassification,
};
use crate::corpus::{export_jsonl, generate_corpus, load_jsonl, split, Prompt, Sample, Vocab};
use crate::error::{Error, Result, Stage, StageExt};
use crate::model::{save_checkpoint, train, LossCurve, MoeModel};
use crate::profiler::{
    collect_trace, expert_stats, export_trace, save_scores, write_heatmap, ExpertScoreTable,
    ExpertStats, RoutingTrace,
};
use crate::steering::{save_config, SteeringConfig};

/// File names inside a seed directory.
pub mod files {
    pub const TRAIN: &str = "corpus_train.jsonl";
    pub const EVAL: &str = "corpus_eval.jsonl";
    pub const CHECKPOINT: &str = "model.ckpt";
    pub const LOSS: &str = "loss_curve.csv";
    pub const IMPORTANCE: &str = "importance.jsonl";
    pub const TRACE: &str = "trace.jsonl";
    pub const SCORES: &str = "scores.json";
    pub const HEATMAP: &str = "heatmap.csv";
    pub const STEERING: &str = "steering.json";
    pub const RESULTS: &str = "results.csv";
    pub const PREDICTIONS: &str = "predictions.jsonl";
    pub const MANIFEST: &str = "run.json";
    pub const SPEC: &str = "spec.json";
    pub const SWEEP_K: &str = "sweep_k.csv";
    pub const SWEEP_ALPHA: &str = "sweep_alpha.csv";
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

fn mix(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt)
}

/// Train and eval samples for `seed`.
pub fn build_corpus(spec: &ExperimentSpec, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let c = &spec.corpus;
    let vocab = Vocab::default();
    let samples = if c.jsonl.is_empty() {
        let domains: Vec<_> = c
            .domains
            .iter()
            .map(|d| {
                let mut d = d.clone();
                d.seed = mix(seed, d.seed);
                d
            })
            .collect();
        generate_corpus(
            &domains,
            c.samples_per_domain,
            &vocab,
            spec.model.max_seq_len,
        )?
    } else {
        let mut all = Vec::new();
        for p in &c.jsonl {
            all.extend(load_jsonl(p, &c.fields, &vocab)?);
        }
        all
    };
    if !samples.iter().any(|s| s.domain() == spec.target_domain) {
        return Err(Error::Config(format!(
            "target domain `{}` has no samples",
            spec.target_domain
        )));
    }
    split(
        &samples,
        (c.train_fraction, 1.0 - c.train_fraction),
        mix(seed, 1),
    )
}

/// Checkpoint named by `spec.checkpoint`, or a model trained on `train_set`.
pub fn train_model(
    spec: &ExperimentSpec,
    seed: u64,
    train_set: &[Sample],
) -> Result<(MoeModel, LossCurve)> {
    if let Some(path) = &spec.checkpoint {
        return Ok((
            crate::model::load_checkpoint(path)?,
            LossCurve { losses: Vec::new() },
        ));
    }
    let mut model = MoeModel::new(spec.model_config(seed))?;
    let seqs: Vec<Vec<usize>> = train_set.iter().map(Sample::tokens).collect();
    let curve = train(&mut model, &seqs, &spec.train_settings(seed))?;
    Ok((model, curve))
}

/// Target-domain questions used for attribution and profiling.
pub fn target_samples<'s>(spec: &ExperimentSpec, eval: &'s [Sample]) -> Vec<&'s Sample> {
    let it = eval.iter().filter(|s| s.domain() == spec.target_domain);
    match spec.attribution_samples {
        Some(n) => it.take(n).collect(),
        None => it.collect(),
    }
}

/// Importance scores and labels for each target question.
pub fn attribute(
    spec: &ExperimentSpec,
    model: &MoeModel,
    targets: &[&Sample],
) -> Result<Vec<ImportanceRecord>> {
    if targets.is_empty() {
        return Err(Error::Domain(
            "no target-domain questions to attribute".into(),
        ));
    }
    let scores = targets
        .iter()
        .map(|s| match spec.loss_scope {
            LossScope::Question => prompt_importance(s.prompt(), model),
            LossScope::FullSequence => sample_importance(s, model, LossScope::FullSequence),
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<TokenClassification> = if spec.pooled_threshold {
        classify_pooled(&scores, spec.p)?
    } else {
        scores
            .iter()
            .map(|v| classify(v, spec.p))
            .collect::<Result<_>>()?
    };
    scores
        .iter()
        .zip(&labels)
        .map(|(s, l)| ImportanceRecord::new(s, l))
        .collect()
}

/// Unsteered trace over the target questions, statistics, scores and E*.
pub fn profile(
    spec: &ExperimentSpec,
    model: &MoeModel,
    prompts: &[Prompt<'_>],
    records: &[ImportanceRecord],
    k: usize,
) -> Result<(RoutingTrace, ExpertStats, ExpertScoreTable)> {
    let trace = collect_trace(model, prompts)?;
    let labels: Vec<TokenClassification> = records.iter().map(|r| r.clone().split().1).collect();
    let stats = expert_stats(&trace, &labels, spec.weighted_stats)?;
    let table = ExpertScoreTable::from_stats(model.fingerprint(), &stats, k, spec.selection)?;
    Ok((trace, stats, table))
}

/// Steering config for `table.selected` at the experiment's α and application point.
pub fn steer(
    spec: &ExperimentSpec,
    table: &ExpertScoreTable,
    alpha: f64,
) -> Result<SteeringConfig> {
    Ok(crate::steering::build_config(table, alpha)?.with_point(spec.steering_point))
}

/// Forward/backward pass counts observed while running the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CostReport {
    pub attributed_sequences: u64,
    pub attribution_forward: u64,
    pub attribution_backward: u64,
    pub baseline_eval_forward: u64,
    pub dsmoe_eval_forward: u64,
    pub steering_multiplies: u64,
}

/// Everything one seed produces.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
    pub model: MoeModel,
    pub loss: LossCurve,
    pub importance: Vec<ImportanceRecord>,
    pub trace: RoutingTrace,
    pub stats: ExpertStats,
    pub scores: ExpertScoreTable,
    pub steering: SteeringConfig,
    pub baseline: Evaluation,
    pub dsmoe: Evaluation,
    pub cost: CostReport,
}

impl SeedRun {
    pub fn results(&self) -> Vec<EvalResult> {
        self.baseline
            .results
            .iter()
            .chain(&self.dsmoe.results)
            .cloned()
            .collect()
    }
}

/// Runs every stage for one seed in memory.
pub fn run_seed(spec: &ExperimentSpec, seed: u64) -> Result<SeedRun> {
    let (train_set, eval_set) = build_corpus(spec, seed).stage(Stage::Corpus)?;
    let (model, loss) = train_model(spec, seed, &train_set).stage(Stage::Train)?;
    analyse(spec, seed, train_set, eval_set, model, loss)
}

/// Attribution, profiling, steering and evaluation on an already trained model.
pub fn analyse(
    spec: &ExperimentSpec,
    seed: u64,
    train_set: Vec<Sample>,
    eval_set: Vec<Sample>,
    model: MoeModel,
    loss: LossCurve,
) -> Result<SeedRun> {
    let counters = model.counters();
    let targets = target_samples(spec, &eval_set);

    let before = counters.snapshot();
    let importance = attribute(spec, &model, &targets).stage(Stage::Attribute)?;
    let attr_cost = counters.snapshot() - before;

    let prompts: Vec<Prompt<'_>> = targets.iter().map(|s| s.prompt()).collect();
    let (trace, stats, scores) =
        profile(spec, &model, &prompts, &importance, spec.k()).stage(Stage::Profile)?;
    let steering = steer(spec, &scores, spec.alpha).stage(Stage::Steer)?;

    let before = counters.snapshot();
    let baseline = evaluate(&model, &eval_set, None, Variant::Baseline, seed).stage(Stage::Eval)?;
    let mid = counters.snapshot();
    let dsmoe =
        evaluate(&model, &eval_set, Some(&steering), Variant::Dsmoe, seed).stage(Stage::Eval)?;
    let after = counters.snapshot();

    let cost = CostReport {
        attributed_sequences: targets.len() as u64,
        attribution_forward: attr_cost.forward_passes,
        attribution_backward: attr_cost.backward_passes,
        baseline_eval_forward: (mid - before).forward_passes,
        dsmoe_eval_forward: (after - mid).forward_passes,
        steering_multiplies: (after - mid).steering_multiplies,
    };
    Ok(SeedRun {
        seed,
        train: train_set,
        eval: eval_set,
        model,
        loss,
        importance,
        trace,
        stats,
        scores,
        steering,
        baseline,
        dsmoe,
        cost,
    })
}

/// Settings every artifact set records alongside its numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub fingerprint: String,
    pub router_mode: String,
    pub steering_point: String,
    pub steering_renormalisation: String,
    pub loss_scope: LossScope,
    pub p: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub alpha: f64,
    pub selected: Vec<(usize, usize)>,
    pub cost: CostReport,
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Writes the artifacts of one seed into `dir`.
pub fn write_seed(spec: &ExperimentSpec, run: &SeedRun, dir: &Path) -> Result<()> {
    use files::*;
    fs::create_dir_all(dir)?;
    export_jsonl(&run.train, dir.join(TRAIN))?;
    export_jsonl(&run.eval, dir.join(EVAL))?;
    save_checkpoint(&run.model, dir.join(CHECKPOINT))?;
    let mut loss = String::from("step,loss\n");
    for (i, l) in run.loss.losses.iter().enumerate() {
        loss.push_str(&format!("{i},{l}\n"));
    }
    fs::write(dir.join(LOSS), loss)?;
    export_importance(&run.importance, dir.join(IMPORTANCE))?;
    export_trace(&run.trace, dir.join(TRACE))?;
    save_scores(&run.scores, dir.join(SCORES))?;
    write_heatmap(&run.scores, dir.join(HEATMAP))?;
    save_config(&run.steering, dir.join(STEERING))?;
    write_results(&run.results(), dir.join(RESULTS))?;
    let preds: Vec<_> = run
        .baseline
        .predictions
        .iter()
        .chain(&run.dsmoe.predictions)
        .cloned()
        .collect();
    write_predictions(&preds, dir.join(PREDICTIONS))?;
    let manifest = Manifest {
        seed: run.seed,
        fingerprint: run.model.fingerprint().to_string(),
        router_mode: run.model.config().router_mode.as_str().to_string(),
        steering_point: serde_json::to_value(spec.steering_point)?
            .as_str()
            .unwrap_or_default()
            .to_string(),
        steering_renormalisation: "selected-set".into(),
        loss_scope: spec.loss_scope,
        p: spec.p,
        k: spec.k(),
        alpha: spec.alpha,
        selected: run.scores.selected.clone(),
        cost: run.cost,
    };
    write_json(&manifest, &dir.join(MANIFEST))
}

/// Full pipeline over all seeds, artifacts under `spec.out`, then the report.
///
/// A failing seed stops the run; artifacts of completed seeds stay on disk.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<SeedRun>> {
    spec.validate()?;
    fs::create_dir_all(&spec.out)?;
    fs::write(spec.out.join(files::SPEC), spec.to_json()?)?;
    let mut runs = Vec::with_capacity(spec.seeds.len());
    let mut all = Vec::new();
    for &seed in &spec.seeds {
        log::info!("seed {seed}: running pipeline");
        let run = run_seed(spec, seed)?;
        let dir = seed_dir(&spec.out, seed);
        write_seed(spec, &run, &dir).stage(Stage::Report)?;
        run_sweeps(spec, &run, &dir).stage(Stage::Sweep)?;
        all.extend(run.results());
        runs.push(run);
    }
    write_results(&all, spec.out.join(files::RESULTS))?;
    super::report::report(&spec.out, &spec.out.join("report")).stage(Stage::Report)?;
    Ok(runs)
}

/// K and α sweeps for one seed, written next to its other artifacts. Empty grids are skipped.
pub fn run_sweeps(spec: &ExperimentSpec, run: &SeedRun, dir: &Path) -> Result<()> {
    if !spec.sweep.k_grid.is_empty() {
        let rows = sweep_k(spec, &run.model, &run.scores, &run.eval, run.seed)?;
        write_sweep(&rows, "K", dir.join(files::SWEEP_K))?;
    }
    if !spec.sweep.alpha_grid.is_empty() {
        let rows = sweep_alpha(spec, &run.model, &run.scores, &run.eval, run.seed)?;
        write_sweep(&rows, "alpha", dir.join(files::SWEEP_ALPHA))?;
    }
    Ok(())
}
