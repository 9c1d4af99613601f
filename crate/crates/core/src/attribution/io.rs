use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ImportanceVector, Label, TokenClassification};
use crate::error::{Error, Result};

/// One line of the importance export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRecord {
    pub id: String,
    pub scores: Vec<Option<f64>>,
    pub labels: Vec<Option<Label>>,
    pub p: f64,
    pub t_p: f64,
}

impl ImportanceRecord {
    pub fn new(scores: &ImportanceVector, labels: &TokenClassification) -> Result<Self> {
        if scores.id != labels.id || scores.scores.len() != labels.labels.len() {
            return Err(Error::Join(format!(
                "scores for `{}` ({} positions) do not match labels for `{}` ({} positions)",
                scores.id,
                scores.scores.len(),
                labels.id,
                labels.labels.len()
            )));
        }
        Ok(Self {
            id: scores.id.clone(),
            scores: scores.scores.clone(),
            labels: labels.labels.clone(),
            p: labels.p,
            t_p: labels.t_p,
        })
    }

    pub fn split(self) -> (ImportanceVector, TokenClassification) {
        (
            ImportanceVector {
                id: self.id.clone(),
                scores: self.scores,
            },
            TokenClassification {
                id: self.id,
                labels: self.labels,
                t_p: self.t_p,
                p: self.p,
            },
        )
    }
}

pub fn export_importance(records: &[ImportanceRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn import_importance(path: impl AsRef<Path>) -> Result<Vec<ImportanceRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Schema {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_unscored_positions() {
        let v = ImportanceVector {
            id: "a".into(),
            scores: vec![Some(0.1), None, Some(1.0 / 3.0)],
        };
        let c = super::super::classify(&v, 0.5).unwrap();
        let rec = ImportanceRecord::new(&v, &c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("imp.jsonl");
        export_importance(std::slice::from_ref(&rec), &p).unwrap();
        let back = import_importance(&p).unwrap();
        assert_eq!(back, vec![rec]);
        assert_eq!(back[0].clone().split(), (v, c));
    }
}
