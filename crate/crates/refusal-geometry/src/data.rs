//! The synthetic refuse-or-answer task, its datasets, and the JSONL format.
//!
//! A prompt is a sequence of content tokens. Prompts containing at least one
//! trigger token are *harmful* and the model must answer them with the fixed
//! refusal template; all others get a fixed answer template that echoes the
//! prompt's first token. Structural token ids are reserved at the bottom of
//! the vocabulary.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::Error;

pub type Token = u32;

/// Marks the start of a refusal continuation.
pub const REFUSE_TOKEN: Token = 0;
/// Marks the start of a compliance continuation.
pub const ANSWER_TOKEN: Token = 1;
/// Terminates every continuation.
pub const END_TOKEN: Token = 2;
/// Content (and trigger) tokens start here.
pub const FIRST_CONTENT_TOKEN: Token = 3;

/// The canonical 4-token refusal continuation.
pub fn refusal_template() -> Vec<Token> {
    vec![REFUSE_TOKEN, REFUSE_TOKEN, REFUSE_TOKEN, END_TOKEN]
}

/// The canonical 4-token answer continuation for a prompt starting with
/// `payload`.
pub fn answer_template(payload: Token) -> Vec<Token> {
    vec![ANSWER_TOKEN, payload, payload, END_TOKEN]
}

/// Generator spec for the synthetic task.
///
/// Sizes count prompts; each dataset row pairs one harmful with one safe
/// prompt, so a split of `2n` prompts is `n` rows, split evenly.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticTaskSpec {
    pub vocab_size: usize,
    pub trigger_tokens: Vec<Token>,
    pub prompt_len_min: usize,
    pub prompt_len_max: usize,
    pub train_prompts: usize,
    pub val_prompts: usize,
    pub test_prompts: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            vocab_size: 32,
            trigger_tokens: vec![3, 4],
            prompt_len_min: 4,
            prompt_len_max: 10,
            train_prompts: 256,
            val_prompts: 128,
            test_prompts: 128,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<(), Error> {
        if self.vocab_size < 8 {
            return Err(Error::Config(format!(
                "vocab_size must be at least 8, got {}",
                self.vocab_size
            )));
        }
        if self.trigger_tokens.is_empty() {
            return Err(Error::Config("trigger_tokens must be non-empty".into()));
        }
        for &t in &self.trigger_tokens {
            if t < FIRST_CONTENT_TOKEN || t as usize >= self.vocab_size {
                return Err(Error::Config(format!(
                    "trigger token {t} collides with structural tokens or exceeds the vocabulary"
                )));
            }
        }
        let content = self.vocab_size - FIRST_CONTENT_TOKEN as usize;
        if self.trigger_tokens.len() >= content {
            return Err(Error::Config(
                "trigger set leaves no safe content tokens".into(),
            ));
        }
        if self.prompt_len_min < 2 || self.prompt_len_min > self.prompt_len_max {
            return Err(Error::Config(format!(
                "bad prompt length range {}..={}",
                self.prompt_len_min, self.prompt_len_max
            )));
        }
        for (name, n) in [
            ("train_prompts", self.train_prompts),
            ("val_prompts", self.val_prompts),
            ("test_prompts", self.test_prompts),
        ] {
            if n == 0 || n % 2 != 0 {
                return Err(Error::Config(format!(
                    "{name} must be positive and even (one harmful per safe prompt), got {n}"
                )));
            }
        }
        Ok(())
    }

    pub fn is_trigger(&self, t: Token) -> bool {
        self.trigger_tokens.contains(&t)
    }

    /// A prompt is harmful iff it contains any trigger token.
    pub fn is_harmful(&self, prompt: &[Token]) -> bool {
        prompt.iter().any(|&t| self.is_trigger(t))
    }

    /// The continuation the task demands for `prompt`.
    pub fn canonical_continuation(&self, prompt: &[Token]) -> Vec<Token> {
        if self.is_harmful(prompt) {
            refusal_template()
        } else {
            answer_template(prompt[0])
        }
    }

    /// Content tokens that are not triggers.
    pub fn safe_tokens(&self) -> Vec<Token> {
        (FIRST_CONTENT_TOKEN..self.vocab_size as Token)
            .filter(|t| !self.is_trigger(*t))
            .collect()
    }
}

/// One dataset row: a harmful/safe prompt pair plus the three optimization
/// targets. Targets are empty in freshly generated skeletons and are filled
/// by target generation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PromptRecord {
    pub p_harm: Vec<Token>,
    pub p_safe: Vec<Token>,
    #[serde(default)]
    pub t_answer: Vec<Token>,
    #[serde(default)]
    pub t_refusal: Vec<Token>,
    #[serde(default)]
    pub t_retain: Vec<Token>,
}

impl PromptRecord {
    /// True when all five fields are populated.
    pub fn has_targets(&self) -> bool {
        !self.t_answer.is_empty() && !self.t_refusal.is_empty() && !self.t_retain.is_empty()
    }
}

/// Train/val/test splits of prompt-pair rows.
#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: Vec<PromptRecord>,
    pub val: Vec<PromptRecord>,
    pub test: Vec<PromptRecord>,
}

fn sample_safe_prompt(spec: &SyntheticTaskSpec, rng: &mut ChaCha8Rng) -> Vec<Token> {
    let safe = spec.safe_tokens();
    let len = rng.gen_range(spec.prompt_len_min..=spec.prompt_len_max);
    (0..len).map(|_| safe[rng.gen_range(0..safe.len())]).collect()
}

fn sample_harmful_prompt(spec: &SyntheticTaskSpec, rng: &mut ChaCha8Rng) -> Vec<Token> {
    let mut prompt = sample_safe_prompt(spec, rng);
    let n_triggers = 1 + rng.gen_range(0..2).min(prompt.len() - 1);
    for _ in 0..n_triggers {
        let pos = rng.gen_range(0..prompt.len());
        let trig = spec.trigger_tokens[rng.gen_range(0..spec.trigger_tokens.len())];
        prompt[pos] = trig;
    }
    prompt
}

/// Samples one prompt with the requested label, retrying until it is unique
/// within `seen`.
fn sample_unique(
    spec: &SyntheticTaskSpec,
    rng: &mut ChaCha8Rng,
    harmful: bool,
    seen: &mut HashSet<Vec<Token>>,
) -> Vec<Token> {
    loop {
        let p = if harmful {
            sample_harmful_prompt(spec, rng)
        } else {
            sample_safe_prompt(spec, rng)
        };
        debug_assert_eq!(spec.is_harmful(&p), harmful);
        if seen.insert(p.clone()) {
            return p;
        }
    }
}

/// Generates balanced, pairwise-disjoint train/val/test splits.
///
/// Deterministic under `spec.seed`; every harmful prompt contains at least
/// one trigger and no safe prompt contains any.
pub fn generate_datasets(spec: &SyntheticTaskSpec) -> Result<DatasetSplits, Error> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let gen_split = |prompts: usize, rng: &mut ChaCha8Rng, seen: &mut HashSet<Vec<Token>>| {
        let rows = prompts / 2;
        (0..rows)
            .map(|_| PromptRecord {
                p_harm: sample_unique(spec, rng, true, seen),
                p_safe: sample_unique(spec, rng, false, seen),
                t_answer: vec![],
                t_refusal: vec![],
                t_retain: vec![],
            })
            .collect::<Vec<_>>()
    };
    let train = gen_split(spec.train_prompts, &mut rng, &mut seen);
    let val = gen_split(spec.val_prompts, &mut rng, &mut seen);
    let test = gen_split(spec.test_prompts, &mut rng, &mut seen);

    // Uniqueness is enforced during sampling; a collision here is a bug.
    let total = train.len() + val.len() + test.len();
    assert_eq!(seen.len(), total * 2, "split overlap despite uniqueness filter");
    Ok(DatasetSplits { train, val, test })
}

/// Writes one record per line as JSON.
pub fn write_jsonl(path: &Path, records: &[PromptRecord]) -> Result<(), Error> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut f, rec)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<PromptRecord>, Error> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balance_and_label_rule() {
        let spec = SyntheticTaskSpec {
            train_prompts: 100,
            ..Default::default()
        };
        let splits = generate_datasets(&spec).unwrap();
        assert_eq!(splits.train.len(), 50); // 50 harmful + 50 safe prompts
        for rec in &splits.train {
            assert!(spec.is_harmful(&rec.p_harm));
            assert!(!spec.is_harmful(&rec.p_safe));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticTaskSpec::default();
        let a = generate_datasets(&spec).unwrap();
        let b = generate_datasets(&spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn splits_are_disjoint() {
        let spec = SyntheticTaskSpec::default();
        let splits = generate_datasets(&spec).unwrap();
        let mut all: Vec<&Vec<Token>> = Vec::new();
        for split in [&splits.train, &splits.val, &splits.test] {
            for rec in split {
                all.push(&rec.p_harm);
                all.push(&rec.p_safe);
            }
        }
        let unique: HashSet<_> = all.iter().collect();
        assert_eq!(unique.len(), all.len());
    }

    #[test]
    fn two_triggers_still_harmful() {
        let spec = SyntheticTaskSpec::default();
        let one = vec![3, 5, 6, 7];
        let two = vec![3, 4, 6, 7];
        assert!(spec.is_harmful(&one));
        assert!(spec.is_harmful(&two));
        assert_eq!(spec.canonical_continuation(&one), refusal_template());
        assert_eq!(spec.canonical_continuation(&two), refusal_template());
    }

    #[test]
    fn validate_rejects_structural_trigger() {
        let spec = SyntheticTaskSpec {
            trigger_tokens: vec![END_TOKEN],
            ..Default::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let spec = SyntheticTaskSpec {
            train_prompts: 8,
            val_prompts: 2,
            test_prompts: 2,
            ..Default::default()
        };
        let splits = generate_datasets(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        write_jsonl(&path, &splits.train).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back, splits.train);
    }
}
