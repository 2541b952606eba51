//! JSON-lines example corpora. Features are never stored; they are
//! regenerated from the source tokens and per-example seed.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::{Example, SyntheticTaskSpec};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub tgt_lang: usize,
    pub src_tokens: Vec<u32>,
    pub tgt_tokens: Vec<u32>,
    pub seed: u64,
}

impl From<&Example> for DatasetRecord {
    fn from(e: &Example) -> Self {
        Self {
            tgt_lang: e.tgt_lang,
            src_tokens: e.src.clone(),
            tgt_tokens: e.tgt.clone(),
            seed: e.seed,
        }
    }
}

impl DatasetRecord {
    /// Rebuilds the example, checking the stored target against the task.
    pub fn to_example(&self, task: &SyntheticTaskSpec) -> Result<Example> {
        let ex = task.example(self.tgt_lang, self.src_tokens.clone(), self.seed)?;
        if ex.tgt != self.tgt_tokens {
            return Err(Error::Invalid(format!(
                "record target {:?} disagrees with the task's {:?}",
                self.tgt_tokens, ex.tgt
            )));
        }
        Ok(ex)
    }
}

/// `count` examples from the stream identified by `seed`.
pub fn generate(task: &SyntheticTaskSpec, seed: u64, count: usize) -> Result<Vec<DatasetRecord>> {
    (0..count as u64)
        .map(|i| task.example_at(seed, i).map(|e| DatasetRecord::from(&e)))
        .collect()
}

pub fn to_jsonl(records: &[DatasetRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_jsonl(text: &str) -> Result<Vec<DatasetRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Invalid(format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn write_dataset(path: impl AsRef<Path>, records: &[DatasetRecord]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(to_jsonl(records)?.as_bytes())?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    parse_jsonl(&fs::read_to_string(path)?)
}

/// Reads a corpus and regenerates its features.
pub fn load_examples(path: impl AsRef<Path>, task: &SyntheticTaskSpec) -> Result<Vec<Example>> {
    read_dataset(path)?.iter().map(|r| r.to_example(task)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn task() -> SyntheticTaskSpec {
        SyntheticTaskSpec::for_model(&ModelConfig::tiny(), 5)
    }

    #[test]
    fn jsonl_round_trip() {
        let recs = generate(&task(), 11, 25).unwrap();
        let text = to_jsonl(&recs).unwrap();
        assert!(text.ends_with('\n'));
        assert_eq!(parse_jsonl(&text).unwrap(), recs);
        for line in text.lines() {
            let r: DatasetRecord = serde_json::from_str(line).unwrap();
            assert_eq!(serde_json::to_string(&r).unwrap(), line);
        }
    }

    #[test]
    fn empty_corpus() {
        assert_eq!(to_jsonl(&[]).unwrap(), "");
        assert!(parse_jsonl("").unwrap().is_empty());
    }

    #[test]
    fn deterministic_generation() {
        assert_eq!(
            generate(&task(), 3, 10).unwrap(),
            generate(&task(), 3, 10).unwrap()
        );
    }

    #[test]
    fn features_regenerate() {
        let t = task();
        let ex = t.example_at(9, 4).unwrap();
        let back = DatasetRecord::from(&ex).to_example(&t).unwrap();
        assert_eq!(back.features, ex.features);
    }

    #[test]
    fn tampered_target_rejected() {
        let t = task();
        let mut r = generate(&t, 1, 1).unwrap().remove(0);
        r.tgt_tokens[2] += 1;
        assert!(r.to_example(&t).is_err());
    }
}
