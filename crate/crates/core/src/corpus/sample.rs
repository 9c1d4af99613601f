use std::cell::Cell;

use serde::{Deserialize, Serialize};

use super::vocab::Vocab;
use crate::error::{Error, Result};

thread_local! {
    static ANSWER_READS: Cell<u64> = const { Cell::new(0) };
}

/// Answer-token reads made through [`Sample::answer`] on the calling thread.
pub fn answer_reads() -> u64 {
    ANSWER_READS.with(Cell::get)
}

/// A question/answer pair with its domain label.
///
/// The answer is only reachable through [`Sample::answer`] and
/// [`Sample::answer_text`], which are instrumented; stages that must not see
/// labels work on [`Prompt`] views instead.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    id: String,
    domain: String,
    question: Vec<usize>,
    answer: Vec<usize>,
    question_text: String,
    answer_text: String,
}

/// Label-free view of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prompt<'a> {
    pub id: &'a str,
    pub domain: &'a str,
    pub tokens: &'a [usize],
}

impl Sample {
    pub fn from_text(
        id: String,
        domain: &str,
        question: &str,
        answer: &str,
        vocab: &Vocab,
    ) -> Result<Self> {
        if question.is_empty() || answer.is_empty() {
            return Err(Error::Domain(format!(
                "sample {id}: question and answer must be non-empty"
            )));
        }
        Ok(Self {
            question: vocab.tokenize(question),
            answer: vocab.tokenize(answer),
            question_text: question.to_string(),
            answer_text: answer.to_string(),
            domain: domain.to_string(),
            id,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn question(&self) -> &[usize] {
        &self.question
    }

    pub fn question_text(&self) -> &str {
        &self.question_text
    }

    pub fn answer(&self) -> &[usize] {
        ANSWER_READS.with(|c| c.set(c.get() + 1));
        &self.answer
    }

    pub fn answer_text(&self) -> &str {
        ANSWER_READS.with(|c| c.set(c.get() + 1));
        &self.answer_text
    }

    /// Question followed by answer.
    pub fn tokens(&self) -> Vec<usize> {
        let mut t = self.question.clone();
        t.extend_from_slice(self.answer());
        t
    }

    pub fn text(&self) -> String {
        format!("{}{}", self.question_text, self.answer_text())
    }

    pub fn len(&self) -> usize {
        self.question.len() + self.answer.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn prompt(&self) -> Prompt<'_> {
        Prompt {
            id: &self.id,
            domain: &self.domain,
            tokens: &self.question,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_reads_do_not_count() {
        let v = Vocab::default();
        let s = Sample::from_text("x".into(), "d", "Q: 1+1=? A: ", "2", &v).unwrap();
        let before = answer_reads();
        let p = s.prompt();
        assert_eq!(p.tokens.len(), 12);
        assert_eq!(answer_reads(), before);
        assert_eq!(s.answer(), &[v.id('2')]);
        assert_eq!(answer_reads(), before + 1);
    }

    #[test]
    fn empty_parts_rejected() {
        let v = Vocab::default();
        assert!(Sample::from_text("x".into(), "d", "", "2", &v).is_err());
        assert!(Sample::from_text("x".into(), "d", "q", "", &v).is_err());
    }
}
