use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::sample::Sample;
use super::vocab::Vocab;
use crate::error::{Error, Result};

/// JSON keys holding each sample field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldMap {
    /// Optional; records without it get their 1-based line number as id.
    pub id: String,
    pub domain: String,
    pub question: String,
    pub answer: String,
}

impl Default for FieldMap {
    fn default() -> Self {
        Self {
            id: "id".into(),
            domain: "domain".into(),
            question: "question".into(),
            answer: "answer".into(),
        }
    }
}

fn field<'v>(record: &'v Value, key: &str, line: usize) -> Result<&'v str> {
    match record.get(key) {
        Some(Value::String(s)) => Ok(s),
        Some(other) => Err(Error::Schema {
            line,
            message: format!("field `{key}` must be a string, found {other}"),
        }),
        None => Err(Error::Schema {
            line,
            message: format!("missing field `{key}`"),
        }),
    }
}

/// Reads one sample per non-blank line, in file order.
pub fn load_jsonl(path: impl AsRef<Path>, fields: &FieldMap, vocab: &Vocab) -> Result<Vec<Sample>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Value = serde_json::from_str(&line).map_err(|e| Error::Schema {
            line: line_no,
            message: e.to_string(),
        })?;
        if !record.is_object() {
            return Err(Error::Schema {
                line: line_no,
                message: "record is not a JSON object".into(),
            });
        }
        let id = match record.get(&fields.id) {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => line_no.to_string(),
        };
        let domain = field(&record, &fields.domain, line_no)?;
        let question = field(&record, &fields.question, line_no)?;
        let answer = field(&record, &fields.answer, line_no)?;
        out.push(
            Sample::from_text(id, domain, question, answer, vocab).map_err(|e| Error::Schema {
                line: line_no,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

/// Writes `{"id", "domain", "question", "answer"}` per line.
pub fn export_jsonl(samples: &[Sample], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for s in samples {
        let record = json!({
            "id": s.id(),
            "domain": s.domain(),
            "question": s.question_text(),
            "answer": s.answer_text(),
        });
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
