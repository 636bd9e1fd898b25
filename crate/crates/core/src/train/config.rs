use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Columns;
use crate::error::{Error, Result};
use crate::eval::Metric;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Word embeddings only.
    Word,
    /// `[x; m]` into the word BiLSTM.
    Concat,
    /// Gated `z⊙x + (1−z)⊙m`, plus the auxiliary cosine loss.
    Attention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputLayer {
    Softmax,
    Crf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "acc")]
    Accuracy,
    #[serde(rename = "span-f1")]
    SpanF1,
    #[serde(rename = "f0.5")]
    FHalf,
}

macro_rules! keyword_enum {
    ($ty:ident { $($word:literal => $variant:ident),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($word => Ok($ty::$variant),)+
                    _ => Err(Error::Config(format!(
                        "unknown {} `{s}` (expected one of: {})",
                        stringify!($ty),
                        [$($word),+].join(", ")
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $word,)+ })
            }
        }
    };
}

keyword_enum!(Architecture { "word" => Word, "concat" => Concat, "attention" => Attention });
keyword_enum!(OutputLayer { "softmax" => Softmax, "crf" => Crf });
keyword_enum!(MetricKind { "acc" => Accuracy, "span-f1" => SpanF1, "f0.5" => FHalf });

/// Architecture, dimensions, and training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub output: OutputLayer,
    pub word_dim: usize,
    pub char_dim: usize,
    pub word_lstm_hidden: usize,
    pub char_lstm_hidden: usize,
    pub d_size: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub max_epochs: usize,
    pub min_count: usize,
    pub shuffle: bool,
    /// Development-set measure used for early stopping.
    pub metric: MetricKind,
    /// Positive class for `f0.5`.
    pub positive_label: String,
    pub token_column: usize,
    /// `None` reads the label from the last column.
    pub label_column: Option<usize>,
    /// Optional pretrained word-embedding text file.
    pub embeddings: Option<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Attention,
            output: OutputLayer::Crf,
            word_dim: 300,
            char_dim: 50,
            word_lstm_hidden: 200,
            char_lstm_hidden: 200,
            d_size: 50,
            batch_size: 64,
            patience: 7,
            learning_rate: 1.0,
            rho: 0.95,
            epsilon: 1e-6,
            seed: 1,
            max_epochs: 100,
            min_count: 2,
            shuffle: false,
            metric: MetricKind::Accuracy,
            positive_label: "i".into(),
            token_column: 0,
            label_column: None,
            embeddings: None,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("word_dim", self.word_dim),
            ("char_dim", self.char_dim),
            ("word_lstm_hidden", self.word_lstm_hidden),
            ("char_lstm_hidden", self.char_lstm_hidden),
            ("d_size", self.d_size),
            ("batch_size", self.batch_size),
            ("patience", self.patience),
            ("max_epochs", self.max_epochs),
            ("min_count", self.min_count),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{name}` must be positive")));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Config("`rho` must lie in (0, 1)".into()));
        }
        if !(self.epsilon > 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::Config(
                "`epsilon` and `learning_rate` must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn columns(&self) -> Columns {
        Columns {
            token: self.token_column,
            label: self.label_column,
        }
    }

    pub fn eval_metric(&self) -> Metric {
        match self.metric {
            MetricKind::Accuracy => Metric::Accuracy,
            MetricKind::SpanF1 => Metric::SpanF1,
            MetricKind::FHalf => Metric::FHalf {
                positive: self.positive_label.clone(),
            },
        }
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "architecture" => self.architecture = value.parse()?,
            "output" => self.output = value.parse()?,
            "word_dim" => self.word_dim = parse(key, value)?,
            "char_dim" => self.char_dim = parse(key, value)?,
            "word_lstm_hidden" => self.word_lstm_hidden = parse(key, value)?,
            "char_lstm_hidden" => self.char_lstm_hidden = parse(key, value)?,
            "d_size" => self.d_size = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "rho" => self.rho = parse(key, value)?,
            "epsilon" => self.epsilon = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "min_count" => self.min_count = parse(key, value)?,
            "shuffle" => self.shuffle = parse(key, value)?,
            "metric" => self.metric = value.parse()?,
            "positive_label" => self.positive_label = value.to_string(),
            "token_column" => self.token_column = parse(key, value)?,
            "label_column" => {
                self.label_column = match value {
                    "last" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "embeddings" => {
                self.embeddings = (!value.is_empty() && value != "none").then(|| value.to_string())
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            config.set(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_kv(&self) -> String {
        let label = self
            .label_column
            .map_or("last".to_string(), |c| c.to_string());
        let emb = self.embeddings.clone().unwrap_or_else(|| "none".into());
        let pairs: [(&str, String); 21] = [
            ("architecture", self.architecture.to_string()),
            ("output", self.output.to_string()),
            ("word_dim", self.word_dim.to_string()),
            ("char_dim", self.char_dim.to_string()),
            ("word_lstm_hidden", self.word_lstm_hidden.to_string()),
            ("char_lstm_hidden", self.char_lstm_hidden.to_string()),
            ("d_size", self.d_size.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("patience", self.patience.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("rho", self.rho.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("seed", self.seed.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("min_count", self.min_count.to_string()),
            ("shuffle", self.shuffle.to_string()),
            ("metric", self.metric.to_string()),
            ("positive_label", self.positive_label.clone()),
            ("token_column", self.token_column.to_string()),
            ("label_column", label),
            ("embeddings", emb),
        ];
        pairs
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_published_setup() {
        let c = ModelConfig::default();
        assert_eq!(
            (c.word_lstm_hidden, c.char_lstm_hidden, c.char_dim, c.d_size),
            (200, 200, 50, 50)
        );
        assert_eq!((c.batch_size, c.patience, c.learning_rate), (64, 7, 1.0));
        assert_eq!(c.output, OutputLayer::Crf);
        assert_eq!(c.min_count, 2);
        c.validate().unwrap();
    }

    #[test]
    fn kv_round_trip() {
        let mut c = ModelConfig::default();
        c.architecture = Architecture::Concat;
        c.label_column = Some(3);
        c.epsilon = 1e-8;
        c.metric = MetricKind::FHalf;
        let back = ModelConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn kv_errors() {
        assert!(ModelConfig::from_kv("word_dim = 0").is_err());
        assert!(ModelConfig::from_kv("nonsense = 3").is_err());
        assert!(ModelConfig::from_kv("architecture = cnn").is_err());
        assert!(ModelConfig::from_kv("just a line").is_err());
        assert!(ModelConfig::from_kv("patience = 0").is_err());
        let c = ModelConfig::from_kv("# comment\n\nword_dim = 8 # trailing\n").unwrap();
        assert_eq!(c.word_dim, 8);
    }
}
