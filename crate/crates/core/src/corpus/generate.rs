use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sample::Sample;
use super::vocab::Vocab;
use crate::error::{Error, Result};

/// Shared filler words mixed into every default domain.
pub const FILLER_WORDS: [&str; 8] = [
    "so ", "well ", "now ", "ok ", "hmm ", "then ", "also ", "just ",
];

/// (name, symbol) pairs used by the chem-toy domain.
pub const ELEMENTS: [(&str, &str); 12] = [
    ("hydrogen", "H"),
    ("helium", "He"),
    ("carbon", "C"),
    ("nitrogen", "N"),
    ("oxygen", "O"),
    ("sodium", "Na"),
    ("magnesium", "Mg"),
    ("chlorine", "Cl"),
    ("potassium", "K"),
    ("calcium", "Ca"),
    ("iron", "Fe"),
    ("copper", "Cu"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Generator {
    /// `Q: a+b=? A: ` → `a+b`, and `a-b` with `a ≥ b`; operands in `0..=max_operand`.
    Arith { max_operand: u32 },
    /// Element symbol lookups and two-element compounds.
    ChemToy,
    /// Strings of filler words; the answer repeats the last word.
    Filler { words: usize },
}

/// A named generator. Generation is a pure function of the fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub name: String,
    pub generator: Generator,
    /// Probability that each filler slot receives a filler word.
    #[serde(default = "default_filler_rate")]
    pub filler_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_filler_rate() -> f64 {
    0.3
}

impl Domain {
    pub fn arith(seed: u64) -> Self {
        Self {
            name: "arith".into(),
            generator: Generator::Arith { max_operand: 9 },
            filler_rate: default_filler_rate(),
            seed,
        }
    }

    pub fn chem_toy(seed: u64) -> Self {
        Self {
            name: "chem-toy".into(),
            generator: Generator::ChemToy,
            filler_rate: default_filler_rate(),
            seed,
        }
    }

    pub fn filler(seed: u64) -> Self {
        Self {
            name: "filler".into(),
            generator: Generator::Filler { words: 3 },
            filler_rate: 1.0,
            seed,
        }
    }

    /// Default two-domain setup: arith and chem-toy.
    pub fn defaults(seed: u64) -> Vec<Self> {
        vec![Self::arith(seed), Self::chem_toy(seed.wrapping_add(1))]
    }
}

/// Text of one generated question/answer pair and the template that produced it.
struct Drawn {
    template: &'static str,
    question: String,
    answer: String,
}

fn filler(rng: &mut ChaCha8Rng, rate: f64) -> &'static str {
    if rng.gen_bool(rate.clamp(0.0, 1.0)) {
        FILLER_WORDS.choose(rng).expect("non-empty")
    } else {
        ""
    }
}

fn draw(domain: &Domain, rng: &mut ChaCha8Rng) -> Drawn {
    let lead = filler(rng, domain.filler_rate);
    match &domain.generator {
        Generator::Arith { max_operand } => {
            let a = rng.gen_range(0..=*max_operand);
            let b = rng.gen_range(0..=*max_operand);
            let mid = filler(rng, domain.filler_rate);
            if rng.gen_bool(0.5) {
                Drawn {
                    template: "arith/add",
                    question: format!("Q: {lead}{mid}{a}+{b}=? A: "),
                    answer: (a + b).to_string(),
                }
            } else {
                let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
                Drawn {
                    template: "arith/sub",
                    question: format!("Q: {lead}{mid}{hi}-{lo}=? A: "),
                    answer: (hi - lo).to_string(),
                }
            }
        }
        Generator::ChemToy => {
            let (n1, s1) = *ELEMENTS.choose(rng).expect("non-empty");
            if rng.gen_bool(0.5) {
                Drawn {
                    template: "chem/symbol",
                    question: format!("Q: {lead}symbol of {n1}? A: "),
                    answer: s1.to_string(),
                }
            } else {
                let (n2, s2) = *ELEMENTS.choose(rng).expect("non-empty");
                Drawn {
                    template: "chem/compound",
                    question: format!("Q: {lead}{n1} with {n2}? A: "),
                    answer: format!("{s1}{s2}"),
                }
            }
        }
        Generator::Filler { words } => {
            let picked: Vec<&str> = (0..(*words).max(1))
                .map(|_| *FILLER_WORDS.choose(rng).expect("non-empty"))
                .collect();
            let last = picked.last().expect("at least one word").trim_end();
            Drawn {
                template: "filler/echo",
                question: format!("Q: {lead}{}? A: ", picked.concat().trim_end()),
                answer: last.to_string(),
            }
        }
    }
}

/// `samples_per_domain` samples per domain, in domain order.
///
/// Sample ids are `"{domain}-{index}"`.
pub fn generate_corpus(
    domains: &[Domain],
    samples_per_domain: usize,
    vocab: &Vocab,
    max_seq_len: usize,
) -> Result<Vec<Sample>> {
    if samples_per_domain == 0 {
        return Err(Error::Config(
            "samples_per_domain must be at least 1".into(),
        ));
    }
    for (i, d) in domains.iter().enumerate() {
        if domains[..i].iter().any(|o| o.name == d.name) {
            return Err(Error::Config(format!("domain `{}` listed twice", d.name)));
        }
    }
    let mut out = Vec::with_capacity(domains.len() * samples_per_domain);
    for domain in domains {
        let mut rng = ChaCha8Rng::seed_from_u64(domain.seed);
        for i in 0..samples_per_domain {
            let drawn = draw(domain, &mut rng);
            let len = drawn.question.chars().count() + drawn.answer.chars().count();
            if len > max_seq_len {
                return Err(Error::Generation {
                    template: drawn.template.into(),
                    message: format!("sample of {len} tokens exceeds max_seq_len {max_seq_len}"),
                });
            }
            out.push(Sample::from_text(
                format!("{}-{i}", domain.name),
                &domain.name,
                &drawn.question,
                &drawn.answer,
                vocab,
            )?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arith_answer(question: &str) -> Option<String> {
        let body: String = question
            .trim_start_matches("Q: ")
            .chars()
            .filter(|c| c.is_ascii_digit() || *c == '+' || *c == '-')
            .collect();
        if let Some((a, b)) = body.split_once('+') {
            return Some((a.parse::<i64>().ok()? + b.parse::<i64>().ok()?).to_string());
        }
        let (a, b) = body.split_once('-')?;
        Some((a.parse::<i64>().ok()? - b.parse::<i64>().ok()?).to_string())
    }

    #[test]
    fn arith_answers_follow_the_rule() {
        let v = Vocab::default();
        let samples = generate_corpus(&[Domain::arith(7)], 200, &v, 64).unwrap();
        for s in &samples {
            assert!(s.question_text().starts_with("Q: ") && s.question_text().ends_with("=? A: "));
            assert_eq!(
                arith_answer(s.question_text()).as_deref(),
                Some(s.answer_text()),
                "{}",
                s.text()
            );
        }
    }

    #[test]
    fn one_per_domain() {
        let v = Vocab::default();
        let s = generate_corpus(&Domain::defaults(3), 1, &v, 64).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].domain(), "arith");
        assert_eq!(s[1].domain(), "chem-toy");
    }

    #[test]
    fn same_seed_same_corpus() {
        let v = Vocab::default();
        let mut doms = Domain::defaults(11);
        doms.push(Domain::filler(5));
        let a = generate_corpus(&doms, 50, &v, 64).unwrap();
        let b = generate_corpus(&doms, 50, &v, 64).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn overlong_sample_names_the_template() {
        let v = Vocab::default();
        let err = generate_corpus(&[Domain::arith(0)], 5, &v, 8).unwrap_err();
        match err {
            Error::Generation { template, .. } => assert!(template.starts_with("arith/")),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn chem_answers_match_element_table() {
        let v = Vocab::default();
        let samples = generate_corpus(&[Domain::chem_toy(2)], 100, &v, 64).unwrap();
        for s in samples {
            let q = s.question_text();
            let mentioned: Vec<&str> = ELEMENTS
                .iter()
                .filter(|(n, _)| q.contains(&format!(" {n}")))
                .map(|(_, sym)| *sym)
                .collect();
            assert!(!mentioned.is_empty(), "{q}");
            for sym in mentioned {
                assert!(s.answer_text().contains(sym), "{q} -> {}", s.answer_text());
            }
        }
    }
}
