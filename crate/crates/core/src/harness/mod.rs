//! Experiment driver: corpus, training, attribution, profiling, steering,
//! evaluation, sweeps and reports, with every stage writing plain files.

mod eval;
mod pipeline;
mod report;
mod spec;
mod sweep;

pub use eval::{
    answer_xent, evaluate, greedy_answer, read_results, write_predictions, write_results,
    EvalResult, Evaluation, Prediction, Variant,
};
pub use pipeline::{
    analyse, attribute, build_corpus, files, profile, run_experiment, run_seed, run_sweeps,
    seed_dir, steer, target_samples, train_model, write_seed, CostReport, Manifest, SeedRun,
};
pub use report::{
    read_summary, report, summarize, write_summary, RankedToken, SummaryRow, TokenRanking,
};
pub use spec::{CorpusSpec, ExperimentSpec, SweepSpec};
pub use sweep::{
    best_single_expert, dominance, read_sweep, single_expert_search, sweep_alpha, sweep_k,
    write_sweep, SingleExpertResult, SweepRow,
};
