//! Softmax and linear-chain CRF output layers.
//!
//! The CRF keeps a `(K+2) x (K+2)` transition matrix indexed `(from, to)`
//! with two extra non-emitting states, `START = K` and `END = K + 1`.
//! Transitions into `START` and out of `END` are forbidden: they score
//! `-inf` on a [`TagLattice`] and are never read by the tape recursion.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Floor applied to gold-label probabilities in [`crossentropy_loss`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Largest lattice the brute-force oracle will enumerate.
pub const BRUTE_FORCE_LIMIT: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSet {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for LabelSet {
    fn from(labels: Vec<String>) -> Self {
        let mut set = LabelSet {
            labels: Vec::new(),
            index: HashMap::new(),
        };
        for l in labels {
            set.insert(&l);
        }
        set
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(set: LabelSet) -> Self {
        set.labels
    }
}

impl LabelSet {
    pub fn new() -> Self {
        Vec::new().into()
    }

    /// Adds `label` if new; returns its id either way.
    pub fn insert(&mut self, label: &str) -> usize {
        if let Some(&i) = self.index.get(label) {
            return i;
        }
        self.labels.push(label.to_string());
        self.index.insert(label.to_string(), self.labels.len() - 1);
        self.labels.len() - 1
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

impl Default for LabelSet {
    fn default() -> Self {
        Self::new()
    }
}

pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let z = log_sum_exp(logits);
    logits.iter().map(|&l| (l - z).exp()).collect()
}

/// `softmax(W_o · d)`.
pub fn softmax_predict<T: Real>(d: &[T], w_out: &Tensor<T>) -> Result<Vec<T>> {
    let &[k, n] = w_out.shape() else {
        return Err(Error::Shape {
            op: "softmax_predict",
            lhs: w_out.shape().to_vec(),
            rhs: vec![d.len()],
        });
    };
    if n != d.len() {
        return Err(Error::Shape {
            op: "softmax_predict",
            lhs: w_out.shape().to_vec(),
            rhs: vec![d.len()],
        });
    }
    let logits: Vec<T> = (0..k)
        .map(|r| w_out.row(r).iter().zip(d).map(|(&w, &x)| w * x).sum())
        .collect();
    Ok(softmax(&logits))
}

/// `-Σ_t log P(gold_t)`, with probabilities floored at [`PROB_FLOOR`].
pub fn crossentropy_loss<T: Real>(probs_seq: &[Vec<T>], gold: &[usize]) -> Result<T> {
    if probs_seq.len() != gold.len() {
        return Err(Error::invalid(
            "crossentropy_loss",
            format!("{} distributions for {} labels", probs_seq.len(), gold.len()),
        ));
    }
    let floor = T::of(PROB_FLOOR);
    let mut loss = T::zero();
    for (probs, &y) in probs_seq.iter().zip(gold) {
        let p = *probs.get(y).ok_or_else(|| {
            Error::invalid("crossentropy_loss", format!("label {y} out of range"))
        })?;
        loss -= p.max(floor).ln();
    }
    Ok(loss)
}

/// Per-token negative log-likelihood under a softmax over `logits`,
/// computed as `logsumexp(logits) - logits[gold]`.
pub fn softmax_nll<T: Real>(tape: &mut Tape<'_, T>, logits: Var, gold: usize) -> Result<Var> {
    let z = tape.log_sum_exp(logits);
    let picked = tape.entry(logits, gold)?;
    tape.sub(z, picked)
}

/// Emission rows `A_t = W_o · d_t`.
pub fn emission_scores<T: Real>(
    tape: &mut Tape<'_, T>,
    d_seq: &[Var],
    w_out: Var,
) -> Result<Vec<Var>> {
    d_seq.iter().map(|&d| tape.matmul(w_out, d)).collect()
}

/// Emission and transition scores for one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct TagLattice<T> {
    emissions: Tensor<T>,
    transitions: Tensor<T>,
}

impl<T: Real> TagLattice<T> {
    /// `emissions` is `[T, K]`, `transitions` is `[K+2, K+2]`.
    pub fn new(emissions: Tensor<T>, mut transitions: Tensor<T>) -> Result<Self> {
        let &[_, k] = emissions.shape() else {
            return Err(Error::invalid("tag_lattice", "emissions must be 2-D"));
        };
        if transitions.shape() != [k + 2, k + 2] {
            return Err(Error::Shape {
                op: "tag_lattice",
                lhs: emissions.shape().to_vec(),
                rhs: transitions.shape().to_vec(),
            });
        }
        let n = k + 2;
        let (start, end) = (k, k + 1);
        for i in 0..n {
            transitions.data_mut()[i * n + start] = T::neg_infinity();
            transitions.data_mut()[end * n + i] = T::neg_infinity();
        }
        Ok(Self {
            emissions,
            transitions,
        })
    }

    pub fn len(&self) -> usize {
        self.emissions.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_labels(&self) -> usize {
        self.emissions.shape()[1]
    }

    pub fn start(&self) -> usize {
        self.num_labels()
    }

    pub fn end(&self) -> usize {
        self.num_labels() + 1
    }

    pub fn emission(&self, t: usize, k: usize) -> T {
        self.emissions.row(t)[k]
    }

    pub fn transition(&self, from: usize, to: usize) -> T {
        self.transitions.row(from)[to]
    }

    pub fn emissions(&self) -> &Tensor<T> {
        &self.emissions
    }

    pub fn transitions(&self) -> &Tensor<T> {
        &self.transitions
    }

    fn check_sequence(&self, y: &[usize]) -> Result<()> {
        if y.len() != self.len() {
            return Err(Error::invalid(
                "crf_sequence_score",
                format!("{} labels for {} tokens", y.len(), self.len()),
            ));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= self.num_labels()) {
            return Err(Error::invalid(
                "crf_sequence_score",
                format!("label id {bad} out of range for {} labels", self.num_labels()),
            ));
        }
        Ok(())
    }

    /// `B[START,y1] + A[1,y1] + Σ (B[y_{t-1},y_t] + A[t,y_t]) + B[y_T,END]`,
    /// accumulated in exactly the order Viterbi uses.
    pub fn sequence_score(&self, y: &[usize]) -> Result<T> {
        self.check_sequence(y)?;
        if y.is_empty() {
            return Ok(T::zero());
        }
        let mut s = self.transition(self.start(), y[0]) + self.emission(0, y[0]);
        for t in 1..y.len() {
            s = s + self.transition(y[t - 1], y[t]);
            s = s + self.emission(t, y[t]);
        }
        Ok(s + self.transition(y[y.len() - 1], self.end()))
    }

    /// Forward algorithm in log space.
    pub fn log_partition(&self) -> T {
        let k = self.num_labels();
        let mut alpha: Vec<T> = (0..k)
            .map(|j| self.transition(self.start(), j) + self.emission(0, j))
            .collect();
        let mut scratch = vec![T::zero(); k];
        for t in 1..self.len() {
            let next: Vec<T> = (0..k)
                .map(|to| {
                    for (from, s) in scratch.iter_mut().enumerate() {
                        *s = alpha[from] + self.transition(from, to);
                    }
                    log_sum_exp(&scratch) + self.emission(t, to)
                })
                .collect();
            alpha = next;
        }
        let fin: Vec<T> = (0..k)
            .map(|j| alpha[j] + self.transition(j, self.end()))
            .collect();
        log_sum_exp(&fin)
    }

    /// `-s(y) + log Z`.
    pub fn nll(&self, y: &[usize]) -> Result<T> {
        Ok(self.log_partition() - self.sequence_score(y)?)
    }

    /// Highest-scoring label sequence and its score. Ties go to the lowest
    /// label index at every decision.
    pub fn viterbi(&self) -> Result<(Vec<usize>, T)> {
        if self.is_empty() {
            return Err(Error::invalid("viterbi_decode", "empty lattice"));
        }
        let (k, len) = (self.num_labels(), self.len());
        let mut delta: Vec<T> = (0..k)
            .map(|j| self.transition(self.start(), j) + self.emission(0, j))
            .collect();
        let mut back = vec![vec![0usize; k]; len];
        for (t, bp) in back.iter_mut().enumerate().skip(1) {
            let mut next = vec![T::zero(); k];
            for to in 0..k {
                let mut best = 0;
                let mut best_score = delta[0] + self.transition(0, to);
                for from in 1..k {
                    let s = delta[from] + self.transition(from, to);
                    if s > best_score {
                        best = from;
                        best_score = s;
                    }
                }
                bp[to] = best;
                next[to] = best_score + self.emission(t, to);
            }
            delta = next;
        }
        let mut last = 0;
        let mut best_score = delta[0] + self.transition(0, self.end());
        for j in 1..k {
            let s = delta[j] + self.transition(j, self.end());
            if s > best_score {
                last = j;
                best_score = s;
            }
        }
        let mut path = vec![last; len];
        for t in (1..len).rev() {
            path[t - 1] = back[t][path[t]];
        }
        Ok((path, best_score))
    }
}

/// Exhaustive enumeration of every label sequence of a lattice.
#[derive(Clone, Debug)]
pub struct BruteForce<T> {
    pub log_partition: T,
    pub argmax: Vec<usize>,
    pub best_score: T,
}

/// Enumerates all `K^T` sequences. Sequences are visited in colexicographic
/// order (the last position varies slowest) and the first maximum is kept,
/// which is the sequence Viterbi's lowest-index tie rule selects.
pub fn brute_force_oracle<T: Real>(lat: &TagLattice<T>) -> Result<BruteForce<T>> {
    let (k, len) = (lat.num_labels(), lat.len());
    let total = (0..len).try_fold(1usize, |acc, _| acc.checked_mul(k));
    let total = match total {
        Some(n) if n <= BRUTE_FORCE_LIMIT && len > 0 => n,
        _ => {
            return Err(Error::invalid(
                "brute_force_oracle",
                format!("{k}^{len} sequences exceeds the enumeration limit"),
            ))
        }
    };
    let mut y = vec![0usize; len];
    let mut scores = Vec::with_capacity(total);
    let mut best: Option<(Vec<usize>, T)> = None;
    for _ in 0..total {
        let s = lat.sequence_score(&y)?;
        scores.push(s);
        if best.as_ref().map_or(true, |(_, b)| s > *b) {
            best = Some((y.clone(), s));
        }
        for d in y.iter_mut() {
            *d += 1;
            if *d < k {
                break;
            }
            *d = 0;
        }
    }
    let (argmax, best_score) = best.expect("at least one sequence");
    Ok(BruteForce {
        log_partition: log_sum_exp(&scores),
        argmax,
        best_score,
    })
}

fn one_hot<T: Real>(tape: &mut Tape<'_, T>, n: usize, i: usize) -> Var {
    let mut v = vec![T::zero(); n];
    v[i] = T::one();
    tape.constant_vec(v)
}

/// CRF terms for one sentence on the tape: `emissions` are `[K]` rows,
/// `transitions` is the `[K+2, K+2]` matrix.
pub struct TapeCrf<'a> {
    pub emissions: &'a [Var],
    pub transitions: Var,
    pub num_labels: usize,
}

impl TapeCrf<'_> {
    fn check<T: Real>(&self, tape: &Tape<'_, T>) -> Result<()> {
        let n = self.num_labels + 2;
        if tape.shape(self.transitions) != [n, n] {
            return Err(Error::Shape {
                op: "crf",
                lhs: tape.shape(self.transitions).to_vec(),
                rhs: vec![n, n],
            });
        }
        if self.emissions.is_empty() {
            return Err(Error::invalid("crf", "empty sentence"));
        }
        for &e in self.emissions {
            if tape.shape(e) != [self.num_labels] {
                return Err(Error::Shape {
                    op: "crf",
                    lhs: tape.shape(e).to_vec(),
                    rhs: vec![self.num_labels],
                });
            }
        }
        Ok(())
    }

    /// Log-partition via the forward recursion.
    pub fn log_partition<T: Real>(&self, tape: &mut Tape<'_, T>) -> Result<Var> {
        self.check(tape)?;
        let k = self.num_labels;
        let n = k + 2;
        let (start, end) = (k, k + 1);
        let b = self.transitions;

        // Column j of B restricted to real labels: incoming scores for label j.
        let mut incoming = Vec::with_capacity(k);
        for to in 0..k {
            let e = one_hot(tape, n, to);
            let col = tape.matmul(b, e)?;
            incoming.push(tape.slice(col, 0, k)?);
        }
        let e_end = one_hot(tape, n, end);
        let to_end = tape.matmul(b, e_end)?;
        let to_end = tape.slice(to_end, 0, k)?;
        let from_start = tape.slice(b, start * n, k)?;

        let mut alpha = tape.add(from_start, self.emissions[0])?;
        for &emit in &self.emissions[1..] {
            let mut parts = Vec::with_capacity(k);
            for col in &incoming {
                let s = tape.add(alpha, *col)?;
                parts.push(tape.log_sum_exp(s));
            }
            let joined = tape.concat(&parts)?;
            alpha = tape.add(joined, emit)?;
        }
        let fin = tape.add(alpha, to_end)?;
        Ok(tape.log_sum_exp(fin))
    }

    pub fn sequence_score<T: Real>(&self, tape: &mut Tape<'_, T>, y: &[usize]) -> Result<Var> {
        self.check(tape)?;
        let k = self.num_labels;
        let n = k + 2;
        if y.len() != self.emissions.len() || y.iter().any(|&l| l >= k) {
            return Err(Error::invalid(
                "crf_sequence_score",
                format!("invalid gold sequence {y:?} for {} tokens, {k} labels", self.emissions.len()),
            ));
        }
        let mut terms = Vec::with_capacity(2 * y.len() + 1);
        let mut prev = k;
        for (t, &label) in y.iter().enumerate() {
            terms.push(tape.entry(self.transitions, prev * n + label)?);
            terms.push(tape.entry(self.emissions[t], label)?);
            prev = label;
        }
        terms.push(tape.entry(self.transitions, prev * n + k + 1)?);
        let all = tape.concat(&terms)?;
        Ok(tape.sum(all))
    }

    /// `-s(y) + log Σ_ỹ exp(s(ỹ))`.
    pub fn nll<T: Real>(&self, tape: &mut Tape<'_, T>, y: &[usize]) -> Result<Var> {
        let z = self.log_partition(tape)?;
        let s = self.sequence_score(tape, y)?;
        tape.sub(z, s)
    }
}
