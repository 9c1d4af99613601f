use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Prompt;
use crate::error::{Error, Result};
use crate::model::{MoeModel, RouterMode, RoutingDecision};

/// Routing decisions of one sequence, ordered by layer then position.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub id: String,
    pub domain: String,
    pub decisions: Vec<RoutingDecision>,
}

impl TraceRecord {
    /// Sequence length implied by the decisions.
    pub fn len(&self) -> usize {
        self.decisions
            .iter()
            .map(|d| d.position + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.decisions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTrace {
    /// Fingerprint of the traced model, or any identifier for imported traces.
    pub model: String,
    pub mode: RouterMode,
    pub layers: usize,
    pub experts: usize,
    pub k: usize,
    pub records: Vec<TraceRecord>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: String,
    mode: RouterMode,
    layers: usize,
    experts: usize,
    k: usize,
}

#[derive(Serialize, Deserialize)]
struct Line {
    id: String,
    domain: String,
    decisions: Vec<(usize, usize, Vec<usize>, Vec<f64>)>,
}

/// Unsteered routing of every question token. All prompts must share one domain.
pub fn collect_trace(model: &MoeModel, prompts: &[Prompt<'_>]) -> Result<RoutingTrace> {
    if let Some(first) = prompts.first() {
        if let Some(other) = prompts.iter().find(|p| p.domain != first.domain) {
            return Err(Error::Contract(format!(
                "trace mixes domains `{}` and `{}`",
                first.domain, other.domain
            )));
        }
    }
    let cfg = model.config();
    let mut records = Vec::with_capacity(prompts.len());
    for p in prompts {
        let out = model.forward(p.tokens, None)?;
        records.push(TraceRecord {
            id: p.id.to_string(),
            domain: p.domain.to_string(),
            decisions: out.decisions,
        });
    }
    Ok(RoutingTrace {
        model: model.fingerprint().to_string(),
        mode: cfg.router_mode,
        layers: cfg.num_layers,
        experts: cfg.num_experts,
        k: cfg.top_k,
        records,
    })
}

impl RoutingTrace {
    /// Checks every decision against the header; the error names the record index.
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.experts || self.layers == 0 {
            return Err(Error::Validation {
                record: 0,
                message: format!(
                    "header k = {} with {} experts and {} layers is inconsistent",
                    self.k, self.experts, self.layers
                ),
            });
        }
        for (r, rec) in self.records.iter().enumerate() {
            let bad = |message: String| Error::Validation { record: r, message };
            for d in &rec.decisions {
                if d.experts.len() != self.k {
                    return Err(bad(format!(
                        "decision at layer {} position {} selects {} experts, trace k = {}",
                        d.layer,
                        d.position,
                        d.experts.len(),
                        self.k
                    )));
                }
                if d.weights.len() != d.experts.len() {
                    return Err(bad("weights and expert ids differ in length".into()));
                }
                if d.layer >= self.layers {
                    return Err(bad(format!("layer {} ≥ {}", d.layer, self.layers)));
                }
                for (i, &e) in d.experts.iter().enumerate() {
                    if e >= self.experts {
                        return Err(bad(format!("expert id {e} ≥ {}", self.experts)));
                    }
                    if d.experts[..i].contains(&e) {
                        return Err(bad(format!("expert id {e} selected twice")));
                    }
                }
                if d.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                    return Err(bad("gate weights must be finite and nonnegative".into()));
                }
                let sum: f64 = d.weights.iter().sum();
                if self.mode == RouterMode::PreSoftmax && (sum - 1.0).abs() > 1e-9 {
                    return Err(bad(format!("pre-softmax gate weights sum to {sum}")));
                }
                if self.mode == RouterMode::PostSoftmax && sum > 1.0 + 1e-9 {
                    return Err(bad(format!("post-softmax gate weights sum to {sum} > 1")));
                }
            }
        }
        Ok(())
    }

    pub fn num_decisions(&self) -> usize {
        self.records.iter().map(|r| r.decisions.len()).sum()
    }
}

pub fn export_trace(trace: &RoutingTrace, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let header = Header {
        model: trace.model.clone(),
        mode: trace.mode,
        layers: trace.layers,
        experts: trace.experts,
        k: trace.k,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for rec in &trace.records {
        let line = Line {
            id: rec.id.clone(),
            domain: rec.domain.clone(),
            decisions: rec
                .decisions
                .iter()
                .map(|d| (d.layer, d.position, d.experts.clone(), d.weights.clone()))
                .collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Parses and validates a trace file. Decisions come back unsteered.
pub fn import_trace(path: impl AsRef<Path>) -> Result<RoutingTrace> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines().enumerate().filter(|(_, l)| match l {
        Ok(s) => !s.trim().is_empty(),
        Err(_) => true,
    });
    let (_, first) = lines.next().ok_or_else(|| Error::Schema {
        line: 1,
        message: "empty trace file".into(),
    })?;
    let header: Header = serde_json::from_str(&first?).map_err(|e| Error::Schema {
        line: 1,
        message: format!("bad header: {e}"),
    })?;
    let mut records = Vec::new();
    for (i, line) in lines {
        let parsed: Line = serde_json::from_str(&line?).map_err(|e| Error::Schema {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(TraceRecord {
            id: parsed.id,
            domain: parsed.domain,
            decisions: parsed
                .decisions
                .into_iter()
                .map(|(layer, position, experts, weights)| RoutingDecision {
                    layer,
                    position,
                    experts,
                    weights,
                    steered: false,
                })
                .collect(),
        });
    }
    let trace = RoutingTrace {
        model: header.model,
        mode: header.mode,
        layers: header.layers,
        experts: header.experts,
        k: header.k,
        records,
    };
    trace.validate()?;
    Ok(trace)
}
