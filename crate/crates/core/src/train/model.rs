//! Model assembly and the per-sentence forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Architecture, ModelConfig, OutputLayer};
use crate::autodiff::{ParamId, ParamSet, Real, Tape, Tensor, Var};
use crate::chars::{
    char_aux_loss, combine_attention, combine_concat, compose_word, AttentionParams,
    CharComposerParams,
};
use crate::corpus::{Sentence, Vocabulary, EMBEDDING_INIT};
use crate::error::{Error, Result};
use crate::layers::{bilstm_run, dense_tanh, glorot, uniform, EmbeddingTable, LstmParams};
use crate::output::{emission_scores, softmax_nll, TagLattice, TapeCrf};

pub const WORD_EMBEDDINGS: &str = "word_embeddings";

/// Parameter handles and shapes; everything the forward pass needs except
/// the parameter values themselves.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub num_labels: usize,
    pub word_embeddings: EmbeddingTable,
    pub chars: Option<CharComposerParams>,
    pub gate: Option<AttentionParams>,
    pub word_fwd: LstmParams,
    pub word_bwd: LstmParams,
    /// `W_d`, `[d_size, 2·word_lstm_hidden]`
    pub hidden: ParamId,
    /// `W_o`, `[K, d_size]`
    pub output: ParamId,
    /// `[K+2, K+2]`, CRF only.
    pub transitions: Option<ParamId>,
}

/// Intermediate values for one sentence.
#[derive(Clone, Debug)]
pub struct SentenceGraph {
    pub words: Vec<Var>,
    pub composed: Vec<Var>,
    pub gates: Vec<Var>,
    pub emissions: Vec<Var>,
    pub transitions: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    /// Output-layer loss plus the auxiliary term.
    pub total: Var,
    pub main: Var,
    pub aux: Option<Var>,
}

impl Network {
    pub fn build<T: Real>(&self, tape: &mut Tape<'_, T>, s: &Sentence) -> Result<SentenceGraph> {
        if s.is_empty() {
            return Err(Error::invalid("forward", "empty sentence"));
        }
        let words = s
            .word_ids
            .iter()
            .map(|&id| self.word_embeddings.lookup(tape, id))
            .collect::<Result<Vec<_>>>()?;

        let mut composed = Vec::new();
        let mut gates = Vec::new();
        let inputs = match (&self.chars, self.config.architecture) {
            (Some(chars), arch) if arch != Architecture::Word => {
                let bc = chars.bind(tape);
                composed = s
                    .char_ids
                    .iter()
                    .map(|c| compose_word(tape, &bc, c))
                    .collect::<Result<Vec<_>>>()?;
                if arch == Architecture::Concat {
                    words
                        .iter()
                        .zip(&composed)
                        .map(|(&x, &m)| combine_concat(tape, x, m))
                        .collect::<Result<Vec<_>>>()?
                } else {
                    let gate = self
                        .gate
                        .as_ref()
                        .expect("attention network has gate parameters")
                        .bind(tape);
                    let mut mixed = Vec::with_capacity(words.len());
                    for (&x, &m) in words.iter().zip(&composed) {
                        let (xt, z) = combine_attention(tape, x, m, &gate)?;
                        mixed.push(xt);
                        gates.push(z);
                    }
                    mixed
                }
            }
            _ => words.clone(),
        };

        let fwd = self.word_fwd.bind(tape);
        let bwd = self.word_bwd.bind(tape);
        let states = bilstm_run(tape, &inputs, &fwd, &bwd)?;
        let wd = tape.param(self.hidden);
        let ds = states
            .per_step
            .iter()
            .map(|&h| dense_tanh(tape, h, wd))
            .collect::<Result<Vec<_>>>()?;
        let wo = tape.param(self.output);
        let emissions = emission_scores(tape, &ds, wo)?;
        let transitions = self.transitions.map(|id| tape.param(id));
        Ok(SentenceGraph {
            words,
            composed,
            gates,
            emissions,
            transitions,
        })
    }

    pub fn loss<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        s: &Sentence,
        oov_word: usize,
    ) -> Result<LossTerms> {
        let gold = s
            .gold
            .as_ref()
            .ok_or_else(|| Error::invalid("loss", "sentence has labels outside the label set"))?;
        let g = self.build(tape, s)?;
        let main = match g.transitions {
            Some(b) => TapeCrf {
                emissions: &g.emissions,
                transitions: b,
                num_labels: self.num_labels,
            }
            .nll(tape, gold)?,
            None => {
                let terms = g
                    .emissions
                    .iter()
                    .zip(gold)
                    .map(|(&e, &y)| softmax_nll(tape, e, y))
                    .collect::<Result<Vec<_>>>()?;
                let all = tape.concat(&terms)?;
                tape.sum(all)
            }
        };
        if self.config.architecture != Architecture::Attention {
            return Ok(LossTerms {
                total: main,
                main,
                aux: None,
            });
        }
        let oov: Vec<bool> = s.word_ids.iter().map(|&w| w == oov_word).collect();
        let aux = char_aux_loss(tape, &g.composed, &g.words, &oov)?;
        let total = tape.add(main, aux)?;
        Ok(LossTerms {
            total,
            main,
            aux: Some(aux),
        })
    }
}

/// Trainable-scalar totals: all parameters, and all but the word embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub noemb: usize,
}

pub fn count_parameters<T: Real>(params: &ParamSet<T>) -> ParamCount {
    let mut count = ParamCount { total: 0, noemb: 0 };
    for (_, p) in params.iter().filter(|(_, p)| p.trainable) {
        count.total += p.tensor.numel();
        if p.name != WORD_EMBEDDINGS {
            count.noemb += p.tensor.numel();
        }
    }
    count
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub net: Network,
    pub vocab: Vocabulary,
    pub params: ParamSet<T>,
}

impl<T: Real> Model<T> {
    /// Creates parameters in a fixed order from `config.seed`. `pretrained`
    /// must be `[vocab words, word_dim]`; without it word embeddings are
    /// drawn from `±EMBEDDING_INIT`.
    pub fn assemble(
        config: &ModelConfig,
        vocab: &Vocabulary,
        pretrained: Option<Tensor<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let k = vocab.labels().len();
        if k == 0 {
            return Err(Error::Config("vocabulary has no labels".into()));
        }

        let table = match pretrained {
            Some(t) if t.shape() != [vocab.num_words(), config.word_dim] => {
                return Err(Error::Config(format!(
                    "pretrained embeddings have shape {:?}, expected [{}, {}]",
                    t.shape(),
                    vocab.num_words(),
                    config.word_dim
                )))
            }
            Some(t) => t,
            None => uniform(&mut rng, &[vocab.num_words(), config.word_dim], EMBEDDING_INIT),
        };
        let word_embeddings =
            EmbeddingTable::register(&mut params, WORD_EMBEDDINGS, table, vocab.oov_word_id(), true)?;

        let (chars, gate, lstm_input) = match config.architecture {
            Architecture::Word => (None, None, config.word_dim),
            arch => {
                let chars = CharComposerParams::init(
                    &mut params,
                    vocab.num_chars(),
                    vocab.oov_char_id(),
                    config.char_dim,
                    config.char_lstm_hidden,
                    config.word_dim,
                    &mut rng,
                )?;
                if arch == Architecture::Concat {
                    (Some(chars), None, 2 * config.word_dim)
                } else {
                    let gate = AttentionParams::init(&mut params, config.word_dim, &mut rng);
                    (Some(chars), Some(gate), config.word_dim)
                }
            }
        };

        let h = config.word_lstm_hidden;
        let word_fwd = LstmParams::init(&mut params, "word_lstm.fwd", lstm_input, h, &mut rng);
        let word_bwd = LstmParams::init(&mut params, "word_lstm.bwd", lstm_input, h, &mut rng);
        let hidden = params.add("hidden.weights", glorot(&mut rng, config.d_size, 2 * h), true);
        let output = params.add("output.weights", glorot(&mut rng, k, config.d_size), true);
        let transitions = match config.output {
            OutputLayer::Crf => {
                Some(params.add("crf.transitions", Tensor::zeros(&[k + 2, k + 2]), true))
            }
            OutputLayer::Softmax => None,
        };

        Ok(Self {
            net: Network {
                config: config.clone(),
                num_labels: k,
                word_embeddings,
                chars,
                gate,
                word_fwd,
                word_bwd,
                hidden,
                output,
                transitions,
            },
            vocab: vocab.clone(),
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn count_parameters(&self) -> ParamCount {
        count_parameters(&self.params)
    }

    /// Per-token negative log-likelihood (plus auxiliary term for the
    /// attention architecture) and its parts, as plain numbers.
    pub fn sentence_loss(&self, s: &Sentence) -> Result<(T, T, Option<T>)> {
        let mut tape = Tape::with_params(&self.params);
        let l = self.net.loss(&mut tape, s, self.vocab.oov_word_id())?;
        Ok((
            tape.scalar(l.total),
            tape.scalar(l.main),
            l.aux.map(|a| tape.scalar(a)),
        ))
    }

    pub fn lattice(&self, s: &Sentence) -> Result<TagLattice<T>> {
        let mut tape = Tape::with_params(&self.params);
        let g = self.net.build(&mut tape, s)?;
        let k = self.net.num_labels;
        let mut em = Vec::with_capacity(s.len() * k);
        for &e in &g.emissions {
            em.extend_from_slice(tape.value(e));
        }
        let emissions = Tensor::new(vec![s.len(), k], em)?;
        let transitions = match self.net.transitions {
            Some(id) => self.params.tensor(id).clone(),
            None => Tensor::zeros(&[k + 2, k + 2]),
        };
        TagLattice::new(emissions, transitions)
    }

    /// Label ids: Viterbi for CRF models, per-token argmax for softmax
    /// (lowest index on ties).
    pub fn predict(&self, s: &Sentence) -> Result<Vec<usize>> {
        let lat = self.lattice(s)?;
        if self.net.transitions.is_some() {
            return Ok(lat.viterbi()?.0);
        }
        Ok((0..lat.len())
            .map(|t| {
                let row = lat.emissions().row(t);
                (1..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best })
            })
            .collect())
    }

    pub fn predict_labels(&self, s: &Sentence) -> Result<Vec<String>> {
        Ok(self
            .predict(s)?
            .into_iter()
            .map(|k| self.vocab.labels().label(k).to_string())
            .collect())
    }

    /// Gate vectors `z` per token; attention models only.
    pub fn gates(&self, s: &Sentence) -> Result<Vec<Vec<T>>> {
        if self.net.config.architecture != Architecture::Attention {
            return Err(Error::invalid(
                "gates",
                format!(
                    "model architecture is `{}`; gate values exist only for `attention`",
                    self.net.config.architecture
                ),
            ));
        }
        let mut tape = Tape::with_params(&self.params);
        let g = self.net.build(&mut tape, s)?;
        Ok(g.gates.iter().map(|&z| tape.value(z).to_vec()).collect())
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            net: self.net.clone(),
            vocab: self.vocab.clone(),
            params: self.params.cast(),
        }
    }
}
