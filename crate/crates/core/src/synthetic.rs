//! Generated suffix-labeling corpus: each word's label is fixed by its last
//! two characters, and the held-out splits use stems never seen in training.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::RawSentence;
use crate::error::{Error, Result};
use crate::train::{Architecture, ModelConfig};

pub const SUFFIXES: [&str; 8] = ["ab", "ek", "il", "om", "ut", "yr", "as", "en"];

const ONSETS: &[u8] = b"bcdfghjklmnprstvwz";
const NUCLEI: &[u8] = b"aeiou";

#[derive(Clone, Debug, PartialEq)]
pub struct SuffixTask {
    pub seed: u64,
    /// Distinct training word types.
    pub train_words: usize,
    /// How many of the training types occur exactly once (and so become OOV
    /// under the default `min_count`).
    pub singletons: usize,
    /// Extra occurrences of each non-singleton type beyond the first two,
    /// at most; drawn uniformly.
    pub max_extra: usize,
    pub dev_words: usize,
    pub test_words: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SuffixTask {
    fn default() -> Self {
        Self {
            seed: 7,
            train_words: 500,
            singletons: 200,
            max_extra: 3,
            dev_words: 100,
            test_words: 100,
            min_len: 4,
            max_len: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuffixCorpus {
    pub train: Vec<RawSentence>,
    pub dev: Vec<RawSentence>,
    pub test: Vec<RawSentence>,
    /// Word types per split, in generation order.
    pub train_vocab: Vec<String>,
    pub dev_vocab: Vec<String>,
    pub test_vocab: Vec<String>,
}

pub fn label_of(word: &str) -> Option<String> {
    SUFFIXES
        .iter()
        .position(|s| word.ends_with(s))
        .map(|k| format!("S{k}"))
}

fn stem(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(1..=3);
    let mut s = String::new();
    for _ in 0..syllables {
        s.push(*ONSETS.choose(rng).expect("non-empty") as char);
        s.push(*NUCLEI.choose(rng).expect("non-empty") as char);
    }
    s.push(*ONSETS.choose(rng).expect("non-empty") as char);
    s
}

fn sentences(tokens: Vec<String>, task: &SuffixTask, rng: &mut ChaCha8Rng) -> Vec<RawSentence> {
    let mut out = Vec::new();
    let mut rest = &tokens[..];
    while !rest.is_empty() {
        let n = rng.gen_range(task.min_len..=task.max_len).min(rest.len());
        let (head, tail) = rest.split_at(n);
        out.push(RawSentence {
            tokens: head.to_vec(),
            labels: head.iter().map(|w| label_of(w).expect("generated word")).collect(),
        });
        rest = tail;
    }
    out
}

impl SuffixTask {
    pub fn generate(&self) -> Result<SuffixCorpus> {
        if self.singletons > self.train_words || self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::invalid("suffix_task", "inconsistent corpus sizes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let total = self.train_words + self.dev_words + self.test_words;
        let mut seen = HashSet::new();
        let mut stems = Vec::with_capacity(total);
        while stems.len() < total {
            let s = stem(&mut rng);
            if seen.insert(s.clone()) {
                stems.push(s);
            }
        }
        let mut words: Vec<String> = stems
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{s}{}", SUFFIXES[i % SUFFIXES.len()]))
            .collect();
        words.shuffle(&mut rng);
        let test_vocab = words.split_off(self.train_words + self.dev_words);
        let dev_vocab = words.split_off(self.train_words);
        let train_vocab = words;

        let frequent = self.train_words - self.singletons;
        let mut train_tokens = Vec::new();
        for (i, w) in train_vocab.iter().enumerate() {
            let count = if i < frequent {
                2 + rng.gen_range(0..=self.max_extra)
            } else {
                1
            };
            train_tokens.extend(std::iter::repeat(w.clone()).take(count));
        }
        train_tokens.shuffle(&mut rng);
        let mut dev_tokens = dev_vocab.clone();
        dev_tokens.shuffle(&mut rng);
        let mut test_tokens = test_vocab.clone();
        test_tokens.shuffle(&mut rng);

        Ok(SuffixCorpus {
            train: sentences(train_tokens, self, &mut rng),
            dev: sentences(dev_tokens, self, &mut rng),
            test: sentences(test_tokens, self, &mut rng),
            train_vocab,
            dev_vocab,
            test_vocab,
        })
    }
}

/// Desk-scale model settings for the suffix task. The corpus has about 200
/// sentences, so batches are smaller than the default to give more than a
/// handful of updates per epoch.
pub fn small_config(architecture: Architecture) -> ModelConfig {
    ModelConfig {
        architecture,
        word_dim: 16,
        char_dim: 8,
        char_lstm_hidden: 16,
        word_lstm_hidden: 16,
        d_size: 16,
        batch_size: 16,
        ..ModelConfig::default()
    }
}

/// Two tab-separated columns, blank line after each sentence.
pub fn render_conll(sentences: &[RawSentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        for (t, l) in s.tokens.iter().zip(&s.labels) {
            let _ = writeln!(out, "{t}\t{l}");
        }
        out.push('\n');
    }
    out
}

pub fn write_conll(path: impl AsRef<Path>, sentences: &[RawSentence]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, render_conll(sentences)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_are_disjoint_and_labelled_by_suffix() {
        let c = SuffixTask::default().generate().unwrap();
        assert_eq!(c.train_vocab.len(), 500);
        assert_eq!(c.test_vocab.len(), 100);
        let train: HashSet<_> = c.train_vocab.iter().collect();
        assert!(c.test_vocab.iter().all(|w| !train.contains(w)));
        assert!(c.dev_vocab.iter().all(|w| !train.contains(w)));
        let test_tokens: usize = c.test.iter().map(RawSentence::len).sum();
        assert_eq!(test_tokens, 100);
        for s in c.train.iter().chain(&c.test) {
            for (t, l) in s.tokens.iter().zip(&s.labels) {
                let k: usize = l[1..].parse().unwrap();
                assert_eq!(&t[t.len() - 2..], SUFFIXES[k]);
            }
        }
        let labels: HashSet<_> = c.train.iter().flat_map(|s| s.labels.iter()).collect();
        assert_eq!(labels.len(), 8);
    }

    #[test]
    fn generation_is_seeded() {
        let a = SuffixTask::default().generate().unwrap();
        let b = SuffixTask::default().generate().unwrap();
        assert_eq!(a, b);
        let c = SuffixTask {
            seed: 8,
            ..SuffixTask::default()
        }
        .generate()
        .unwrap();
        assert_ne!(a.train, c.train);
    }
}
