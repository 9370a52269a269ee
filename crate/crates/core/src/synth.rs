//! Synthetic corpora: positive sentences contain at least one trigger word,
//! negative sentences none. Token labels mark exactly the triggers.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_token_annotated, Dataset, LabelScheme, Sentence, Split};
use crate::error::{Error, Result};
use crate::trainer::derive_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Total word types, triggers included.
    pub vocab_size: usize,
    pub triggers: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Upper bound on triggers placed in one positive sentence.
    pub max_triggers_per_sentence: usize,
    pub positive_rate: f64,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            triggers: 10,
            min_len: 5,
            max_len: 15,
            max_triggers_per_sentence: 2,
            positive_rate: 0.5,
            train_size: 2000,
            dev_size: 500,
            test_size: 500,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.triggers == 0 || self.triggers >= self.vocab_size {
            return bad("need 0 < triggers < vocab_size");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 0 < min_len <= max_len");
        }
        if self.max_triggers_per_sentence == 0 {
            return bad("max_triggers_per_sentence must be positive");
        }
        if !(0.0..=1.0).contains(&self.positive_rate) {
            return bad("positive_rate must lie in [0, 1]");
        }
        if self.train_size == 0 || self.dev_size == 0 || self.test_size == 0 {
            return bad("split sizes must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub triggers: Vec<String>,
    pub distractors: Vec<String>,
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

fn pseudo_words(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = rng.gen_range(3..=7);
        let w: String = (0..len)
            .map(|_| LETTERS[rng.gen_range(0..LETTERS.len())] as char)
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn sentence(spec: &SyntheticSpec, triggers: &[String], distractors: &[String], rng: &mut ChaCha8Rng) -> Sentence {
    let len = rng.gen_range(spec.min_len..=spec.max_len);
    let positive = rng.gen_bool(spec.positive_rate);
    let mut tokens: Vec<String> = (0..len)
        .map(|_| distractors.choose(rng).expect("nonempty").clone())
        .collect();
    let mut labels = vec![0u8; len];
    if positive {
        let k = rng.gen_range(1..=spec.max_triggers_per_sentence.min(len));
        let mut slots: Vec<usize> = (0..len).collect();
        slots.shuffle(rng);
        for &i in &slots[..k] {
            tokens[i] = triggers.choose(rng).expect("nonempty").clone();
            labels[i] = 1;
        }
    }
    let mut s = Sentence::with_token_labels(tokens, labels).expect("lengths agree");
    s.sentence_label = Some(u8::from(positive));
    s
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = derive_rng(spec.seed, "synth");
    let mut words = pseudo_words(spec.vocab_size, &mut rng);
    let distractors = words.split_off(spec.triggers);
    let triggers = words;
    let mut split = |n: usize, which: Split| {
        Dataset::new(
            (0..n).map(|_| sentence(spec, &triggers, &distractors, &mut rng)).collect(),
            which,
        )
    };
    let train = split(spec.train_size, Split::Train);
    let dev = split(spec.dev_size, Split::Dev);
    let test = split(spec.test_size, Split::Test);
    Ok(SyntheticCorpus {
        triggers,
        distractors,
        train,
        dev,
        test,
    })
}

/// Writes `train.tsv`, `dev.tsv`, `test.tsv` and `triggers.txt` into `dir`.
pub fn write_corpus(corpus: &SyntheticCorpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let scheme = LabelScheme::default();
    for (name, ds) in [("train", &corpus.train), ("dev", &corpus.dev), ("test", &corpus.test)] {
        let path = dir.join(format!("{name}.tsv"));
        std::fs::write(&path, write_token_annotated(ds, &scheme)?).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join("triggers.txt");
    let mut list = corpus.triggers.join("\n");
    list.push('\n');
    std::fs::write(&path, list).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::derive_sentence_labels;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            train_size: 200,
            dev_size: 50,
            test_size: 50,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn invariants_hold() {
        let c = generate(&small()).unwrap();
        assert_eq!(c.triggers.len(), 10);
        assert_eq!(c.distractors.len(), 190);
        assert!(c.triggers.iter().all(|t| !c.distractors.contains(t)));
        for s in c.train.sentences.iter().chain(&c.dev.sentences).chain(&c.test.sentences) {
            assert!((5..=15).contains(&s.len()));
            let labels = s.token_labels.as_ref().unwrap();
            for (tok, &l) in s.tokens.iter().zip(labels) {
                assert_eq!(l == 1, c.triggers.contains(tok));
            }
            let has = labels.contains(&1);
            assert_eq!(s.sentence_label, Some(u8::from(has)));
        }
    }

    #[test]
    fn derived_labels_match() {
        let c = generate(&small()).unwrap();
        let mut stripped = c.train.clone();
        for s in &mut stripped.sentences {
            s.sentence_label = None;
        }
        let derived = derive_sentence_labels(stripped).unwrap();
        assert_eq!(derived.sentences, c.train.sentences);
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.train.sentences, b.train.sentences);
        let c = generate(&SyntheticSpec { seed: 2, ..small() }).unwrap();
        assert_ne!(a.train.sentences, c.train.sentences);
    }

    #[test]
    fn positive_rate_is_respected() {
        let c = generate(&SyntheticSpec::default()).unwrap();
        let pos = c.train.sentences.iter().filter(|s| s.sentence_label == Some(1)).count();
        assert!((900..1100).contains(&pos), "{pos}");
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate(&SyntheticSpec { triggers: 200, ..small() }).is_err());
        assert!(generate(&SyntheticSpec { min_len: 9, max_len: 3, ..small() }).is_err());
        assert!(generate(&SyntheticSpec { positive_rate: 1.5, ..small() }).is_err());
    }
}
