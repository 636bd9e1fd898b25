use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adadelta::{AdaDelta, AdaDeltaState};
use super::model::Model;
use crate::autodiff::{ParamGrads, Real, Tape};
use crate::corpus::Sentence;
use crate::error::{Error, Result};
use crate::eval::{Counts, MetricResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sum of batch losses over the epoch, auxiliary term included.
    pub train_loss: f64,
    /// Auxiliary part of `train_loss`; attention models only.
    pub aux_loss: Option<f64>,
    pub dev_metric: f64,
    pub dev_degenerate: bool,
    pub seconds: f64,
    pub rejected_steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_metric: f64,
    pub stopped_epoch: usize,
    pub stop_reason: StopReason,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Verdict {
    /// This epoch's parameters should replace the kept ones.
    pub keep: bool,
    pub stop: bool,
}

/// Patience-based stopping on a score where higher is better. The patience
/// clock restarts only on strict improvement; an epoch that ties the best
/// score is kept in place of the earlier one.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    improved_at: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            improved_at: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> Verdict {
        let keep = match self.best {
            Some(b) if score < b => false,
            Some(b) if score == b => true,
            _ => {
                self.best = Some(score);
                self.improved_at = epoch;
                true
            }
        };
        Verdict {
            keep,
            stop: epoch - self.improved_at >= self.patience,
        }
    }
}

/// Scores `sentences` with the configured development metric. An undefined
/// metric counts as 0.
pub fn dev_score<T: Real>(model: &Model<T>, sentences: &[Sentence]) -> Result<MetricResult> {
    let mut gold = Vec::with_capacity(sentences.len());
    let mut pred = Vec::with_capacity(sentences.len());
    for s in sentences {
        gold.push(s.labels.clone());
        pred.push(model.predict_labels(s)?);
    }
    match model.config().eval_metric().evaluate(&gold, &pred) {
        Err(Error::UndefinedMetric(name)) => Ok(MetricResult {
            name: name.to_string(),
            value: 0.0,
            counts: Counts::Accuracy { correct: 0, total: 0 },
            degenerate: true,
        }),
        r => r,
    }
}

/// Batch order for one epoch: corpus order, or a permutation drawn from the
/// shuffle stream when shuffling is on.
fn batches(n: usize, size: usize, shuffle: Option<&mut ChaCha8Rng>) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(rng) = shuffle {
        order.shuffle(rng);
    }
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

/// Runs one epoch of AdaDelta over `train`. Returns (loss, aux, rejected).
pub fn train_epoch<T: Real>(
    model: &mut Model<T>,
    train: &[Sentence],
    order: &[Vec<usize>],
    optimizer: &AdaDelta,
    state: &mut AdaDeltaState<T>,
) -> Result<(f64, Option<f64>, usize)> {
    let mut grads = ParamGrads::new(&model.params);
    let mut total = 0.0;
    let mut aux_total = model.net.gate.is_some().then_some(0.0);
    let mut rejected = 0;
    let oov = model.vocab.oov_word_id();
    for batch in order {
        grads.clear();
        let mut batch_loss = T::zero();
        let mut batch_aux = T::zero();
        for &i in batch {
            let mut tape = Tape::with_params(&model.params);
            let terms = model.net.loss(&mut tape, &train[i], oov)?;
            batch_loss += tape.scalar(terms.total);
            if let Some(a) = terms.aux {
                batch_aux += tape.scalar(a);
            }
            tape.backward_into(terms.total, &mut grads)?;
        }
        total += batch_loss.as_f64();
        if let Some(a) = aux_total.as_mut() {
            *a += batch_aux.as_f64();
        }
        match optimizer.step(&mut model.params, &grads, state) {
            Ok(()) => {}
            Err(Error::NonFiniteGradient(name)) => {
                warn!("rejected update: non-finite gradient in `{name}`");
                rejected += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok((total, aux_total, rejected))
}

/// Trains `model` in place with early stopping on the development metric and
/// leaves it holding the parameters of the best epoch. `on_epoch` sees each
/// record as soon as it is complete.
pub fn train<T: Real>(
    model: &mut Model<T>,
    train: &[Sentence],
    dev: &[Sentence],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::invalid("train", "training and development sets must be non-empty"));
    }
    let config = model.config().clone();
    let optimizer = AdaDelta {
        rho: config.rho,
        epsilon: config.epsilon,
        learning_rate: config.learning_rate,
    };
    let mut state = AdaDeltaState::new(&model.params);
    let mut shuffle_rng = config
        .shuffle
        .then(|| ChaCha8Rng::seed_from_u64(config.seed ^ 0x5348_5546));

    let mut epochs = Vec::new();
    let mut best = None;
    let mut stopping = EarlyStopping::new(config.patience);
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        let order = batches(train.len(), config.batch_size, shuffle_rng.as_mut());
        let (train_loss, aux_loss, rejected_steps) =
            train_epoch(model, train, &order, &optimizer, &mut state)?;
        let dev_result = dev_score(model, dev)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            aux_loss,
            dev_metric: dev_result.value,
            dev_degenerate: dev_result.degenerate,
            seconds: start.elapsed().as_secs_f64(),
            rejected_steps,
        };
        info!(
            "epoch {epoch}: loss {train_loss:.4} dev {} {:.4}",
            dev_result.name, dev_result.value
        );
        on_epoch(&record);
        epochs.push(record);

        let verdict = stopping.observe(epoch, dev_result.value);
        if verdict.keep {
            best = Some((epoch, dev_result.value, model.params.clone()));
        }
        if verdict.stop {
            stop_reason = StopReason::Patience;
            break;
        }
    }

    let (best_epoch, best_dev_metric, params) = best.expect("at least one epoch ran");
    model.params = params;
    Ok(TrainReport {
        stopped_epoch: epochs.len(),
        epochs,
        best_epoch,
        best_dev_metric,
        stop_reason,
    })
}

/// Summary of one run in a multi-seed sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub report: TrainReport,
}

/// Trains one fresh model per seed; `build` assembles the model for a seed.
pub fn train_seeds<T: Real>(
    seeds: &[u64],
    train_set: &[Sentence],
    dev: &[Sentence],
    mut build: impl FnMut(u64) -> Result<Model<T>>,
) -> Result<Vec<(SeedRun, Model<T>)>> {
    seeds
        .iter()
        .map(|&seed| {
            let mut model = build(seed)?;
            let report = train(&mut model, train_set, dev, |_| {})?;
            Ok((SeedRun { seed, report }, model))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_one_on_decreasing_scores() {
        let mut s = EarlyStopping::new(1);
        assert_eq!(s.observe(1, 0.9), Verdict { keep: true, stop: false });
        assert_eq!(s.observe(2, 0.8), Verdict { keep: false, stop: true });
    }

    #[test]
    fn ties_keep_later_epoch_without_resetting_patience() {
        let mut s = EarlyStopping::new(3);
        assert!(s.observe(1, 0.5).keep);
        assert_eq!(s.observe(2, 0.7), Verdict { keep: true, stop: false });
        assert_eq!(s.observe(3, 0.7), Verdict { keep: true, stop: false });
        assert_eq!(s.observe(4, 0.6), Verdict { keep: false, stop: false });
        assert_eq!(s.observe(5, 0.7), Verdict { keep: true, stop: true });
    }

    #[test]
    fn batches_cover_corpus_in_order() {
        let b = batches(5, 2, None);
        assert_eq!(b, vec![vec![0, 1], vec![2, 3], vec![4]]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut flat: Vec<usize> = batches(7, 3, Some(&mut rng)).concat();
        flat.sort_unstable();
        assert_eq!(flat, (0..7).collect::<Vec<_>>());
    }
}
