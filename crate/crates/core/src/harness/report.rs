use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::eval::{read_results, EvalResult, Variant};
use super::pipeline::{files, seed_dir};
use super::sweep::{read_sweep, write_sweep};
use crate::attribution::{import_importance, Label};
use crate::corpus::{load_jsonl, FieldMap, Vocab};
use crate::error::{Error, Result};
use crate::profiler::{load_scores, write_heatmap};

/// One row of a per-domain summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub domain: String,
    pub baseline: f64,
    pub dsmoe: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedToken {
    pub position: usize,
    pub token: String,
    pub score: f64,
    pub label: Label,
}

/// Question tokens ordered by importance, highest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRanking {
    pub seed: u64,
    pub id: String,
    pub t_p: f64,
    pub tokens: Vec<RankedToken>,
}

/// Seed-averaged metric per domain, domains in name order.
pub fn summarize(results: &[EvalResult], metric: impl Fn(&EvalResult) -> f64) -> Vec<SummaryRow> {
    let mut acc: BTreeMap<&str, [(f64, usize); 2]> = BTreeMap::new();
    for r in results {
        let slot = &mut acc.entry(&r.domain).or_default()[usize::from(r.variant == Variant::Dsmoe)];
        slot.0 += metric(r);
        slot.1 += 1;
    }
    acc.into_iter()
        .filter(|(_, v)| v[0].1 > 0 && v[1].1 > 0)
        .map(|(domain, [b, d])| {
            let baseline = b.0 / b.1 as f64;
            let dsmoe = d.0 / d.1 as f64;
            SummaryRow {
                domain: domain.to_string(),
                baseline,
                dsmoe,
                delta: dsmoe - baseline,
            }
        })
        .collect()
}

pub fn write_summary(rows: &[SummaryRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary(path: impl AsRef<Path>) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| Ok(row?)).collect()
}

fn token_rankings(dir: &Path, seed: u64) -> Result<Vec<TokenRanking>> {
    let samples = load_jsonl(
        dir.join(files::EVAL),
        &FieldMap::default(),
        &Vocab::default(),
    )?;
    let text: BTreeMap<&str, Vec<char>> = samples
        .iter()
        .map(|s| (s.id(), s.question_text().chars().collect()))
        .collect();
    let mut out = Vec::new();
    for rec in import_importance(dir.join(files::IMPORTANCE))? {
        let chars = text.get(rec.id.as_str()).ok_or_else(|| {
            Error::Join(format!("importance record `{}` has no eval sample", rec.id))
        })?;
        let mut tokens: Vec<RankedToken> = rec
            .scores
            .iter()
            .zip(&rec.labels)
            .enumerate()
            .filter_map(|(i, (s, l))| {
                Some(RankedToken {
                    position: i,
                    token: chars.get(i).map(|c| c.to_string()).unwrap_or_default(),
                    score: (*s)?,
                    label: (*l)?,
                })
            })
            .collect();
        tokens.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.position.cmp(&b.position))
        });
        out.push(TokenRanking {
            seed,
            id: rec.id,
            t_p: rec.t_p,
            tokens,
        });
    }
    Ok(out)
}

/// Summary tables, merged sweeps, token rankings and heatmaps from a run directory.
///
/// Sweep tables are merged only when present. Any other missing artifact is
/// reported together with the rest in one `Error::Report`.
pub fn report(run_dir: &Path, outdir: &Path) -> Result<Vec<PathBuf>> {
    let results_path = run_dir.join(files::RESULTS);
    if !results_path.is_file() {
        return Err(Error::Report(vec![results_path.display().to_string()]));
    }
    let results = read_results(&results_path)?;
    let mut seeds: Vec<u64> = results.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();

    let mut missing = Vec::new();
    for &seed in &seeds {
        let dir = seed_dir(run_dir, seed);
        for f in [files::EVAL, files::IMPORTANCE, files::SCORES] {
            let p = dir.join(f);
            if !p.is_file() {
                missing.push(p.display().to_string());
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Report(missing));
    }

    fs::create_dir_all(outdir)?;
    let mut written = Vec::new();
    let mut emit = |name: String| {
        let p = outdir.join(name);
        written.push(p.clone());
        p
    };

    write_summary(
        &summarize(&results, |r| r.xent),
        emit("summary_xent.csv".into()),
    )?;
    write_summary(
        &summarize(&results, |r| r.accuracy),
        emit("summary_accuracy.csv".into()),
    )?;

    for (file, column) in [(files::SWEEP_K, "K"), (files::SWEEP_ALPHA, "alpha")] {
        let mut rows = Vec::new();
        for &seed in &seeds {
            let p = seed_dir(run_dir, seed).join(file);
            if p.is_file() {
                rows.extend(read_sweep(&p)?);
            }
        }
        if !rows.is_empty() {
            write_sweep(&rows, column, emit(file.to_string()))?;
        }
    }

    let mut w = BufWriter::new(fs::File::create(emit("token_ranking.jsonl".into()))?);
    for &seed in &seeds {
        for r in token_rankings(&seed_dir(run_dir, seed), seed)? {
            serde_json::to_writer(&mut w, &r)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;

    for &seed in &seeds {
        let table = load_scores(seed_dir(run_dir, seed).join(files::SCORES))?;
        write_heatmap(&table, emit(format!("heatmap_seed-{seed}.csv")))?;
    }
    Ok(written)
}
