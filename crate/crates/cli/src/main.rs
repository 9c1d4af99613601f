//! `dsmoe` command line: each subcommand runs one pipeline stage on the files
//! in `<out>/seed-<seed>/`, and `run` chains them all.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dsmoe::attribution::import_importance;
use dsmoe::corpus::{export_jsonl, load_jsonl, FieldMap, Sample, Vocab};
use dsmoe::error::StageExt;
use dsmoe::harness::{
    self, evaluate, files, seed_dir, write_predictions, write_results, write_sweep, ExperimentSpec,
    Variant,
};
use dsmoe::model::{load_checkpoint, save_checkpoint, MoeModel, RouterMode};
use dsmoe::profiler::{export_trace, load_scores, save_scores, write_heatmap};
use dsmoe::steering::{load_config, save_config};
use dsmoe::{Error, Stage};

#[derive(Parser)]
#[command(
    name = "dsmoe",
    version,
    about = "Domain-steered mixture-of-experts experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or ingest) the corpus and write the train/eval split.
    GenCorpus(Common),
    /// Train a model on the train split.
    Train(Common),
    /// Score target-domain question tokens and label them.
    Attribute(Common),
    /// Trace routing on target questions and rank experts.
    Profile(Common),
    /// Build the steering config from the expert scores.
    Steer(Common),
    /// Evaluate the model with and without a steering config.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Steering config; without one the steered rows equal the baseline.
        #[arg(long)]
        steering: Option<PathBuf>,
        /// Results file (default `<seed dir>/results.csv`).
        #[arg(long)]
        results: Option<PathBuf>,
    },
    /// K and α ablation sweeps.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Axis::Both)]
        axis: Axis,
    },
    /// Summary tables, token rankings and heatmaps from a run directory.
    Report {
        #[command(flatten)]
        common: Common,
        /// Output directory (default `<out>/report`).
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },
    /// Full pipeline for every seed, then the report.
    Run(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    K,
    Alpha,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum Router {
    PostSoftmax,
    PreSoftmax,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON); defaults apply without one.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run only this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Target domain.
    #[arg(long)]
    domain: Option<String>,
    /// Domain-specific level.
    #[arg(long)]
    p: Option<f64>,
    /// Number of steered (layer, expert) pairs.
    #[arg(long)]
    k_experts: Option<usize>,
    /// Steering coefficient.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    router_mode: Option<Router>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn spec(&self) -> dsmoe::Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(path) => ExperimentSpec::load(path)?,
            None => ExperimentSpec::default(),
        };
        if let Some(s) = self.seed {
            spec.seeds = vec![s];
        }
        if let Some(d) = &self.domain {
            spec.target_domain = d.clone();
        }
        if let Some(p) = self.p {
            spec.p = p;
        }
        if self.k_experts.is_some() {
            spec.k_experts = self.k_experts;
        }
        if let Some(a) = self.alpha {
            spec.alpha = a;
        }
        if let Some(r) = self.router_mode {
            spec.router_mode = Some(match r {
                Router::PostSoftmax => RouterMode::PostSoftmax,
                Router::PreSoftmax => RouterMode::PreSoftmax,
            });
        }
        if let Some(o) = &self.out {
            spec.out = o.clone();
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Spec, the seed a single-stage command works on, and that seed's directory.
fn stage_context(common: &Common) -> dsmoe::Result<(ExperimentSpec, u64, PathBuf)> {
    let spec = common.spec()?;
    let seed = spec.seeds[0];
    let dir = seed_dir(&spec.out, seed);
    fs::create_dir_all(&dir)?;
    Ok((spec, seed, dir))
}

fn corpus(dir: &Path, name: &str) -> dsmoe::Result<Vec<Sample>> {
    load_jsonl(dir.join(name), &FieldMap::default(), &Vocab::default())
}

fn model(dir: &Path) -> dsmoe::Result<MoeModel> {
    load_checkpoint(dir.join(files::CHECKPOINT))
}

fn execute(command: Command) -> dsmoe::Result<()> {
    match command {
        Command::GenCorpus(c) => {
            let (spec, seed, dir) = stage_context(&c)?;
            let (train, eval) = harness::build_corpus(&spec, seed).stage(Stage::Corpus)?;
            export_jsonl(&train, dir.join(files::TRAIN)).stage(Stage::Corpus)?;
            export_jsonl(&eval, dir.join(files::EVAL)).stage(Stage::Corpus)?;
            log::info!(
                "{} train / {} eval samples in {}",
                train.len(),
                eval.len(),
                dir.display()
            );
        }
        Command::Train(c) => {
            let (spec, seed, dir) = stage_context(&c)?;
            let train = corpus(&dir, files::TRAIN).stage(Stage::Train)?;
            let (m, curve) = harness::train_model(&spec, seed, &train).stage(Stage::Train)?;
            save_checkpoint(&m, dir.join(files::CHECKPOINT)).stage(Stage::Train)?;
            let mut text = String::from("step,loss\n");
            for (i, l) in curve.losses.iter().enumerate() {
                text.push_str(&format!("{i},{l}\n"));
            }
            fs::write(dir.join(files::LOSS), text)
                .map_err(Error::from)
                .stage(Stage::Train)?;
        }
        Command::Attribute(c) => {
            let (spec, _, dir) = stage_context(&c)?;
            let run = || -> dsmoe::Result<()> {
                let m = model(&dir)?;
                let eval = corpus(&dir, files::EVAL)?;
                let targets = harness::target_samples(&spec, &eval);
                let records = harness::attribute(&spec, &m, &targets)?;
                dsmoe::attribution::export_importance(&records, dir.join(files::IMPORTANCE))
            };
            run().stage(Stage::Attribute)?;
        }
        Command::Profile(c) => {
            let (spec, _, dir) = stage_context(&c)?;
            let run = || -> dsmoe::Result<()> {
                let m = model(&dir)?;
                let eval = corpus(&dir, files::EVAL)?;
                let targets = harness::target_samples(&spec, &eval);
                let prompts: Vec<_> = targets.iter().map(|s| s.prompt()).collect();
                let records = import_importance(dir.join(files::IMPORTANCE))?;
                let (trace, _, table) = harness::profile(&spec, &m, &prompts, &records, spec.k())?;
                export_trace(&trace, dir.join(files::TRACE))?;
                save_scores(&table, dir.join(files::SCORES))?;
                write_heatmap(&table, dir.join(files::HEATMAP))
            };
            run().stage(Stage::Profile)?;
        }
        Command::Steer(c) => {
            let (spec, _, dir) = stage_context(&c)?;
            let run = || -> dsmoe::Result<()> {
                let table = load_scores(dir.join(files::SCORES))?;
                let config = harness::steer(&spec, &table, spec.alpha)?;
                save_config(&config, dir.join(files::STEERING))
            };
            run().stage(Stage::Steer)?;
        }
        Command::Eval {
            common,
            steering,
            results,
        } => {
            let (_, seed, dir) = stage_context(&common)?;
            let run = || -> dsmoe::Result<()> {
                let m = model(&dir)?;
                let eval = corpus(&dir, files::EVAL)?;
                let config = steering.as_ref().map(|p| load_config(p, &m)).transpose()?;
                let base = evaluate(&m, &eval, None, Variant::Baseline, seed)?;
                let steered = evaluate(&m, &eval, config.as_ref(), Variant::Dsmoe, seed)?;
                let rows: Vec<_> = base
                    .results
                    .iter()
                    .chain(&steered.results)
                    .cloned()
                    .collect();
                write_results(
                    &rows,
                    results.clone().unwrap_or_else(|| dir.join(files::RESULTS)),
                )?;
                let preds: Vec<_> = base
                    .predictions
                    .into_iter()
                    .chain(steered.predictions)
                    .collect();
                write_predictions(&preds, dir.join(files::PREDICTIONS))
            };
            run().stage(Stage::Eval)?;
        }
        Command::Sweep { common, axis } => {
            let (spec, seed, dir) = stage_context(&common)?;
            let run = || -> dsmoe::Result<()> {
                let m = model(&dir)?;
                let eval = corpus(&dir, files::EVAL)?;
                let table = load_scores(dir.join(files::SCORES))?;
                if matches!(axis, Axis::K | Axis::Both) {
                    let rows = harness::sweep_k(&spec, &m, &table, &eval, seed)?;
                    write_sweep(&rows, "K", dir.join(files::SWEEP_K))?;
                }
                if matches!(axis, Axis::Alpha | Axis::Both) {
                    let rows = harness::sweep_alpha(&spec, &m, &table, &eval, seed)?;
                    write_sweep(&rows, "alpha", dir.join(files::SWEEP_ALPHA))?;
                }
                Ok(())
            };
            run().stage(Stage::Sweep)?;
        }
        Command::Report { common, report_dir } => {
            let spec = common.spec()?;
            let outdir = report_dir.unwrap_or_else(|| spec.out.join("report"));
            for p in harness::report(&spec.out, &outdir).stage(Stage::Report)? {
                println!("{}", p.display());
            }
        }
        Command::Run(c) => {
            let spec = c.spec()?;
            for run in harness::run_experiment(&spec)? {
                for (b, d) in run.baseline.results.iter().zip(&run.dsmoe.results) {
                    println!(
                        "seed {} {:<10} xent {:.4} -> {:.4}  accuracy {:.3} -> {:.3}",
                        run.seed, b.domain, b.xent, d.xent, b.accuracy, d.accuracy
                    );
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
