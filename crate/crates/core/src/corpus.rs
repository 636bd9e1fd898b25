//! CoNLL-style corpus reading, token normalization, vocabularies, and
//! pretrained embedding import.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};
use crate::layers::uniform;
use crate::output::LabelSet;

pub const OOV_WORD: &str = "<OOV>";
pub const OOV_CHAR: char = '\u{FFFD}';
/// Document separator lines in CoNLL-2003 style files; skipped on load.
pub const DOCSTART: &str = "-DOCSTART-";
/// Range of the uniform initialization for rows missing from a pretrained file.
pub const EMBEDDING_INIT: f64 = 0.05;

/// Replaces every ASCII decimal digit with `'0'`.
pub fn preprocess_token(token: &str) -> Result<String> {
    if token.is_empty() {
        return Err(Error::invalid("preprocess_token", "empty token"));
    }
    Ok(token
        .chars()
        .map(|c| if c.is_ascii_digit() { '0' } else { c })
        .collect())
}

/// A sentence as read from disk: surface tokens and (possibly empty) label
/// strings.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RawSentence {
    pub tokens: Vec<String>,
    pub labels: Vec<String>,
}

impl RawSentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Which whitespace-separated columns hold the token and the label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Columns {
    pub token: usize,
    /// `None` selects the last column of each line.
    pub label: Option<usize>,
}

impl Default for Columns {
    fn default() -> Self {
        Self {
            token: 0,
            label: None,
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_conll(path: impl AsRef<Path>, columns: Columns) -> Result<Vec<RawSentence>> {
    let path = path.as_ref();
    parse_conll(&read(path)?, path, columns, true)
}

/// Reads tokens only; label columns, if present, are ignored.
pub fn load_tokens(path: impl AsRef<Path>, token_column: usize) -> Result<Vec<RawSentence>> {
    let path = path.as_ref();
    let columns = Columns {
        token: token_column,
        label: None,
    };
    parse_conll(&read(path)?, path, columns, false)
}

/// Whitespace-separated columns, one token per line, blank lines between
/// sentences. `path` is only used in error messages.
pub fn parse_conll(
    text: &str,
    path: &Path,
    columns: Columns,
    labeled: bool,
) -> Result<Vec<RawSentence>> {
    let mut sentences = Vec::new();
    let mut current = RawSentence::default();
    for (lineno, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            if !current.is_empty() {
                sentences.push(std::mem::take(&mut current));
            }
            continue;
        }
        if fields[0] == DOCSTART {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        let token = fields.get(columns.token).ok_or_else(|| {
            parse_err(format!(
                "expected token in column {}, line has {} columns",
                columns.token,
                fields.len()
            ))
        })?;
        current.tokens.push(token.to_string());
        if labeled {
            let col = columns.label.unwrap_or(fields.len() - 1);
            if columns.label.is_none() && fields.len() < 2 {
                return Err(parse_err("expected a token and a label column".into()));
            }
            let label = fields.get(col).ok_or_else(|| {
                parse_err(format!(
                    "expected label in column {col}, line has {} columns",
                    fields.len()
                ))
            })?;
            current.labels.push(label.to_string());
        }
    }
    if !current.is_empty() {
        sentences.push(current);
    }
    Ok(sentences)
}

/// Encoded sentence. All per-token sequences are aligned.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub surface: Vec<String>,
    pub normalized: Vec<String>,
    pub word_ids: Vec<usize>,
    pub char_ids: Vec<Vec<usize>>,
    pub labels: Vec<String>,
    /// Label ids, present when every label is in the vocabulary's label set.
    pub gold: Option<Vec<usize>>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.surface.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surface.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct VocabData {
    min_count: usize,
    words: Vec<(String, usize)>,
    chars: Vec<(char, usize)>,
    labels: LabelSet,
}

/// Word, character and label vocabularies. Word id 0 and char id 0 are the
/// OOV entries; other ids follow first occurrence in the training data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabData", into = "VocabData")]
pub struct Vocabulary {
    data: VocabData,
    word_index: HashMap<String, usize>,
    char_index: HashMap<char, usize>,
}

impl From<VocabData> for Vocabulary {
    fn from(data: VocabData) -> Self {
        let word_index = data
            .words
            .iter()
            .enumerate()
            .map(|(i, (w, _))| (w.clone(), i))
            .collect();
        let char_index = data
            .chars
            .iter()
            .enumerate()
            .map(|(i, &(c, _))| (c, i))
            .collect();
        Self {
            data,
            word_index,
            char_index,
        }
    }
}

impl From<Vocabulary> for VocabData {
    fn from(v: Vocabulary) -> Self {
        v.data
    }
}

impl Vocabulary {
    pub fn oov_word_id(&self) -> usize {
        0
    }

    pub fn oov_char_id(&self) -> usize {
        0
    }

    pub fn min_count(&self) -> usize {
        self.data.min_count
    }

    pub fn num_words(&self) -> usize {
        self.data.words.len()
    }

    pub fn num_chars(&self) -> usize {
        self.data.chars.len()
    }

    pub fn labels(&self) -> &LabelSet {
        &self.data.labels
    }

    pub fn word(&self, id: usize) -> &str {
        &self.data.words[id].0
    }

    /// Training-set frequency of the normalized word; 0 when it has no entry.
    pub fn word_count(&self, id: usize) -> usize {
        self.data.words[id].1
    }

    pub fn word_id(&self, normalized: &str) -> usize {
        self.word_index
            .get(normalized)
            .copied()
            .unwrap_or(self.oov_word_id())
    }

    pub fn char_id(&self, c: char) -> usize {
        self.char_index.get(&c).copied().unwrap_or(self.oov_char_id())
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.data.words.iter().map(|(w, _)| w.as_str())
    }

    pub fn encode(&self, raw: &RawSentence) -> Result<Sentence> {
        let normalized = raw
            .tokens
            .iter()
            .map(|t| preprocess_token(t))
            .collect::<Result<Vec<_>>>()?;
        let word_ids = normalized.iter().map(|w| self.word_id(w)).collect();
        let char_ids = normalized
            .iter()
            .map(|w| w.chars().map(|c| self.char_id(c)).collect())
            .collect();
        let gold = if raw.labels.len() == raw.tokens.len() {
            raw.labels
                .iter()
                .map(|l| self.data.labels.id(l))
                .collect::<Option<Vec<_>>>()
        } else {
            None
        };
        Ok(Sentence {
            surface: raw.tokens.clone(),
            normalized,
            word_ids,
            char_ids,
            labels: raw.labels.clone(),
            gold,
        })
    }

    pub fn encode_all(&self, raw: &[RawSentence]) -> Result<Vec<Sentence>> {
        raw.iter().map(|s| self.encode(s)).collect()
    }
}

/// Words seen fewer than `min_count` times map to the OOV word but still
/// contribute their characters.
pub fn build_vocab(train: &[RawSentence], min_count: usize) -> Result<Vocabulary> {
    if train.iter().all(RawSentence::is_empty) {
        return Err(Error::invalid("build_vocab", "empty training set"));
    }
    let mut order: Vec<String> = Vec::new();
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut chars: Vec<(char, usize)> = vec![(OOV_CHAR, 0)];
    let mut char_pos: HashMap<char, usize> = HashMap::new();
    let mut labels = LabelSet::new();

    for s in train {
        for t in &s.tokens {
            let norm = preprocess_token(t)?;
            for c in norm.chars() {
                let i = *char_pos.entry(c).or_insert_with(|| {
                    chars.push((c, 0));
                    chars.len() - 1
                });
                chars[i].1 += 1;
            }
            let n = counts.entry(norm.clone()).or_insert(0);
            if *n == 0 {
                order.push(norm);
            }
            *n += 1;
        }
        for l in &s.labels {
            labels.insert(l);
        }
    }

    let mut words = vec![(OOV_WORD.to_string(), 0)];
    for w in order {
        let c = counts[&w];
        if c >= min_count && w != OOV_WORD {
            words.push((w, c));
        } else {
            words[0].1 += c;
        }
    }
    Ok(VocabData {
        min_count,
        words,
        chars,
        labels,
    }
    .into())
}

/// Embedding matrix aligned with a vocabulary's word ids.
#[derive(Clone, Debug)]
pub struct PretrainedEmbeddings<T> {
    pub matrix: Tensor<T>,
    /// Number of vocabulary words found in the file.
    pub found: usize,
}

/// Text format: one `word v1 .. v_dim` entry per line, optionally preceded
/// by a `count dim` header. Vocabulary words missing from the file (and the
/// OOV row) are drawn uniformly from `±EMBEDDING_INIT`.
pub fn load_pretrained_embeddings<T: Real, R: Rng>(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut R,
) -> Result<PretrainedEmbeddings<T>> {
    let path = path.as_ref();
    let text = read(path)?;
    let mut matrix: Tensor<T> = uniform(rng, &[vocab.num_words(), dim], EMBEDDING_INIT);
    let mut seen = vec![false; vocab.num_words()];
    let mut found = 0;
    for (lineno, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if lineno == 0 && fields.len() == 2 {
            if let (Ok(_), Ok(d)) = (fields[0].parse::<usize>(), fields[1].parse::<usize>()) {
                if d != dim {
                    return Err(err(format!("header declares dimension {d}, expected {dim}")));
                }
                continue;
            }
        }
        if fields.len() != dim + 1 {
            return Err(err(format!(
                "expected a word and {dim} values, found {} values",
                fields.len() - 1
            )));
        }
        let values = fields[1..]
            .iter()
            .map(|v| v.parse::<f64>().map(T::of))
            .collect::<std::result::Result<Vec<T>, _>>()
            .map_err(|e| err(format!("bad number: {e}")))?;
        let id = vocab.word_id(fields[0]);
        if id == vocab.oov_word_id() || seen[id] {
            continue;
        }
        seen[id] = true;
        found += 1;
        matrix.row_mut(id).copy_from_slice(&values);
    }
    Ok(PretrainedEmbeddings { matrix, found })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub name: String,
    pub task: String,
    pub labels: usize,
    pub train_tokens: usize,
    pub dev_tokens: usize,
    pub test_tokens: usize,
}

pub fn token_count(split: &[RawSentence]) -> usize {
    split.iter().map(RawSentence::len).sum()
}

/// Label count is the number of distinct labels across all given splits.
pub fn dataset_stats(
    name: &str,
    task: &str,
    train: &[RawSentence],
    dev: &[RawSentence],
    test: &[RawSentence],
) -> DatasetStats {
    let labels: BTreeSet<&str> = [train, dev, test]
        .iter()
        .flat_map(|split| split.iter())
        .flat_map(|s| s.labels.iter().map(String::as_str))
        .collect();
    DatasetStats {
        name: name.to_string(),
        task: task.to_string(),
        labels: labels.len(),
        train_tokens: token_count(train),
        dev_tokens: token_count(dev),
        test_tokens: token_count(test),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;
    use std::path::PathBuf;

    fn parse(text: &str) -> Result<Vec<RawSentence>> {
        parse_conll(text, Path::new("mem"), Columns::default(), true)
    }

    fn sent(tokens: &[&str]) -> RawSentence {
        RawSentence {
            tokens: tokens.iter().map(|t| t.to_string()).collect(),
            labels: tokens.iter().map(|_| "X".to_string()).collect(),
        }
    }

    #[test]
    fn digits_become_zero() {
        assert_eq!(preprocess_token("1993").unwrap(), "0000");
        assert_eq!(preprocess_token("cabinets").unwrap(), "cabinets");
        assert_eq!(preprocess_token("B-52s").unwrap(), "B-00s");
        assert!(preprocess_token("").is_err());
    }

    #[test]
    fn conll_blocks() {
        let s = parse("dogs NNS\nrun VBP\n\n").unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].tokens, ["dogs", "run"]);
        assert_eq!(s[0].labels, ["NNS", "VBP"]);

        let s = parse("a X\n\n\nb Y\nc Z").unwrap();
        assert_eq!(s.len(), 2);
        assert!(parse("").unwrap().is_empty());
    }

    #[test]
    fn conll_docstart_skipped() {
        let s = parse("-DOCSTART- -X- O O\n\nEU NNP B-ORG\n").unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].labels, ["B-ORG"]);
    }

    #[test]
    fn conll_ragged_row_names_line() {
        let cols = Columns {
            token: 0,
            label: Some(2),
        };
        let err = parse_conll("a b c\nd e\n", Path::new("f.conll"), cols, true).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("f.conll:2"), "{msg}");
        let err = parse("a X\nlonely\n").unwrap_err();
        assert!(err.to_string().contains(":2:"));
    }

    #[test]
    fn singletons_map_to_oov() {
        let train = vec![sent(&["a", "b", "a"]), sent(&["a"])];
        let v = build_vocab(&train, 2).unwrap();
        assert_eq!(v.word_id("b"), v.oov_word_id());
        assert_ne!(v.word_id("a"), v.oov_word_id());
        assert_ne!(v.char_id('a'), v.oov_char_id());
        assert_ne!(v.char_id('b'), v.oov_char_id());
        assert_eq!(v.word_id("unseen"), v.oov_word_id());
        assert_eq!(v.char_id('z'), v.oov_char_id());

        let v1 = build_vocab(&train, 1).unwrap();
        assert_ne!(v1.word_id("b"), v1.oov_word_id());
        assert!(build_vocab(&[], 2).is_err());
    }

    #[test]
    fn vocab_ids_follow_first_occurrence() {
        let train = vec![sent(&["c", "a", "b", "a", "b", "c"])];
        let v = build_vocab(&train, 1).unwrap();
        assert_eq!(
            v.words().collect::<Vec<_>>(),
            vec![OOV_WORD, "c", "a", "b"]
        );
        assert_eq!(v, build_vocab(&train, 1).unwrap());
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn encode_normalizes_ids_not_surface() {
        let train = vec![sent(&["in", "1999", "in", "2001"])];
        let v = build_vocab(&train, 2).unwrap();
        let raw = sent(&["in", "1984", "Zq"]);
        let s = v.encode(&raw).unwrap();
        assert_eq!(s.surface, raw.tokens);
        assert_eq!(s.normalized, ["in", "0000", "Zq"]);
        assert_eq!(s.word_ids[1], v.word_id("0000"));
        assert_ne!(s.word_ids[1], v.oov_word_id());
        assert_eq!(s.word_ids[2], v.oov_word_id());
        assert_eq!(s.char_ids[2], vec![v.oov_char_id(), v.oov_char_id()]);
        assert_eq!(s.gold, Some(vec![0, 0, 0]));
    }

    fn write_tmp(contents: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.txt");
        fs::File::create(&p)
            .unwrap()
            .write_all(contents.as_bytes())
            .unwrap();
        (dir, p)
    }

    #[test]
    fn pretrained_rows() {
        let v = build_vocab(&[sent(&["dog", "cat"])], 1).unwrap();
        let (_d, p) = write_tmp("dog 0.1 0.2\nfish 1 1\n");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = load_pretrained_embeddings::<f64, _>(&p, &v, 2, &mut rng).unwrap();
        assert_eq!(e.found, 1);
        assert_eq!(e.matrix.row(v.word_id("dog")), &[0.1, 0.2]);
        assert!(e
            .matrix
            .row(v.word_id("cat"))
            .iter()
            .all(|x| x.abs() <= EMBEDDING_INIT));
    }

    #[test]
    fn pretrained_dimension_errors() {
        let v = build_vocab(&[sent(&["dog"])], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let row: Vec<String> = (0..200).map(|_| "0.5".to_string()).collect();
        let (_d, p) = write_tmp(&format!("2 300\ndog {}\n", row.join(" ")));
        assert!(load_pretrained_embeddings::<f64, _>(&p, &v, 300, &mut rng).is_err());
        assert!(load_pretrained_embeddings::<f64, _>(&p, &v, 200, &mut rng).is_err());

        let (_d, p) = write_tmp("dog 0.1 0.2\ncat 0.1 oops\n");
        let err = load_pretrained_embeddings::<f64, _>(&p, &v, 2, &mut rng).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn stats_counts() {
        let train = parse("a B-X\nb O\n\nc O\n").unwrap();
        let s = dataset_stats("toy", "NER", &train, &[], &train[..1]);
        assert_eq!(s.labels, 2);
        assert_eq!(s.train_tokens, 3);
        assert_eq!(s.dev_tokens, 0);
        assert_eq!(s.test_tokens, 2);
    }
}
