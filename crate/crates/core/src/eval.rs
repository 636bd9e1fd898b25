//! Token accuracy, exact-match span F1 over IOB labels, and F-beta over a
//! binary positive class.

use std::collections::HashMap;
use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Counts {
    Accuracy {
        correct: usize,
        total: usize,
    },
    Prf {
        tp: usize,
        fp: usize,
        fn_: usize,
        precision: f64,
        recall: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricResult {
    pub name: String,
    pub value: f64,
    pub counts: Counts,
    /// Set when every denominator was zero and the value is a convention.
    pub degenerate: bool,
}

impl fmt::Display for MetricResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{:.6}", self.name, self.value)?;
        match self.counts {
            Counts::Accuracy { correct, total } => write!(f, "\tcorrect={correct}\ttotal={total}"),
            Counts::Prf {
                tp,
                fp,
                fn_,
                precision,
                recall,
            } => write!(
                f,
                "\ttp={tp}\tfp={fp}\tfn={fn_}\tprecision={precision:.6}\trecall={recall:.6}"
            ),
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `(1+β²)PR / (β²P + R)`, 0 when the denominator is 0.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = b2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / den
    }
}

fn check_aligned<A, B>(op: &'static str, gold: &[Vec<A>], pred: &[Vec<B>]) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(Error::invalid(
            op,
            format!("{} gold vs {} predicted sentences", gold.len(), pred.len()),
        ));
    }
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(Error::invalid(
                op,
                format!("sentence {i}: {} gold vs {} predicted labels", g.len(), p.len()),
            ));
        }
    }
    Ok(())
}

pub fn token_accuracy<L: PartialEq>(gold: &[Vec<L>], pred: &[Vec<L>]) -> Result<MetricResult> {
    check_aligned("token_accuracy", gold, pred)?;
    let total: usize = gold.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::UndefinedMetric("token accuracy over zero tokens"));
    }
    let correct = gold
        .iter()
        .zip(pred)
        .flat_map(|(g, p)| g.iter().zip(p))
        .filter(|(g, p)| g == p)
        .count();
    Ok(MetricResult {
        name: "accuracy".into(),
        value: correct as f64 / total as f64,
        counts: Counts::Accuracy { correct, total },
        degenerate: false,
    })
}

/// Half-open token range `[start, end)` carrying an entity type.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_tag(label: &str) -> Result<Tag<'_>> {
    if label == "O" {
        return Ok(Tag::Outside);
    }
    match label.split_once('-') {
        Some(("B", t)) if !t.is_empty() => Ok(Tag::Begin(t)),
        Some(("I", t)) if !t.is_empty() => Ok(Tag::Inside(t)),
        _ => Err(Error::invalid(
            "extract_spans",
            format!("label `{label}` is not O, B-X or I-X"),
        )),
    }
}

/// Maximal typed segments. A bare `I-X` that does not continue an open `X`
/// span opens a new one, so both IOB1 and IOB2 input are accepted.
pub fn extract_spans<S: AsRef<str>>(labels: &[S]) -> Result<Vec<Span>> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    for (i, label) in labels.iter().enumerate() {
        let tag = parse_tag(label.as_ref())?;
        let continues = matches!((&tag, open), (Tag::Inside(t), Some((_, o))) if *t == o);
        if continues {
            continue;
        }
        if let Some((start, t)) = open.take() {
            spans.push(Span {
                start,
                end: i,
                label: t.to_string(),
            });
        }
        open = match tag {
            Tag::Outside => None,
            Tag::Begin(t) | Tag::Inside(t) => Some((i, t)),
        };
    }
    if let Some((start, t)) = open {
        spans.push(Span {
            start,
            end: labels.len(),
            label: t.to_string(),
        });
    }
    Ok(spans)
}

/// IOB2 rendering of non-overlapping spans over `len` tokens.
pub fn render_labels(spans: &[Span], len: usize) -> Vec<String> {
    let mut labels = vec!["O".to_string(); len];
    for s in spans {
        for (i, l) in labels[s.start..s.end].iter_mut().enumerate() {
            let prefix = if i == 0 { "B" } else { "I" };
            *l = format!("{prefix}-{}", s.label);
        }
    }
    labels
}

/// Micro-averaged exact-match span F1. A predicted span counts as a true
/// positive iff a gold span in the same sentence has identical boundaries
/// and type.
pub fn span_f1(gold: &[Vec<Span>], pred: &[Vec<Span>]) -> Result<MetricResult> {
    if gold.len() != pred.len() {
        return Err(Error::invalid(
            "span_f1",
            format!("{} gold vs {} predicted sentences", gold.len(), pred.len()),
        ));
    }
    let (mut tp, mut n_gold, mut n_pred) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        n_gold += g.len();
        n_pred += p.len();
        let mut remaining: HashMap<&Span, usize> = HashMap::new();
        for s in g {
            *remaining.entry(s).or_default() += 1;
        }
        for s in p {
            if let Some(n) = remaining.get_mut(s).filter(|n| **n > 0) {
                *n -= 1;
                tp += 1;
            }
        }
    }
    let precision = ratio(tp, n_pred);
    let recall = ratio(tp, n_gold);
    Ok(MetricResult {
        name: "span_f1".into(),
        value: f_beta(precision, recall, 1.0),
        counts: Counts::Prf {
            tp,
            fp: n_pred - tp,
            fn_: n_gold - tp,
            precision,
            recall,
        },
        degenerate: n_gold == 0 && n_pred == 0,
    })
}

pub fn span_f1_from_labels<S: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<S>]) -> Result<MetricResult> {
    check_aligned("span_f1", gold, pred)?;
    let g = gold
        .iter()
        .map(|s| extract_spans(s))
        .collect::<Result<Vec<_>>>()?;
    let p = pred
        .iter()
        .map(|s| extract_spans(s))
        .collect::<Result<Vec<_>>>()?;
    span_f1(&g, &p)
}

/// F-beta over the positive (`true`) class.
pub fn f_beta_binary(gold: &[bool], pred: &[bool], beta: f64) -> Result<MetricResult> {
    if gold.len() != pred.len() {
        return Err(Error::invalid(
            "f_beta_binary",
            format!("{} gold vs {} predicted labels", gold.len(), pred.len()),
        ));
    }
    if !(beta > 0.0) {
        return Err(Error::invalid("f_beta_binary", "beta must be positive"));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&g, &p) in gold.iter().zip(pred) {
        match (g, p) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Ok(MetricResult {
        name: format!("f{beta}"),
        value: f_beta(precision, recall, beta),
        counts: Counts::Prf {
            tp,
            fp,
            fn_,
            precision,
            recall,
        },
        degenerate: tp + fp + fn_ == 0,
    })
}

/// F-beta with tokens labeled `positive` as the positive class.
pub fn f_beta_from_labels<S: AsRef<str>>(
    gold: &[Vec<S>],
    pred: &[Vec<S>],
    positive: &str,
    beta: f64,
) -> Result<MetricResult> {
    check_aligned("f_beta_binary", gold, pred)?;
    let flat = |xs: &[Vec<S>]| -> Vec<bool> {
        xs.iter()
            .flatten()
            .map(|l| l.as_ref() == positive)
            .collect()
    };
    f_beta_binary(&flat(gold), &flat(pred), beta)
}

/// Which measure a dataset is scored with.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Accuracy,
    SpanF1,
    /// F0.5 over tokens carrying the given label.
    FHalf { positive: String },
}

impl Metric {
    pub fn evaluate<S: AsRef<str> + PartialEq>(
        &self,
        gold: &[Vec<S>],
        pred: &[Vec<S>],
    ) -> Result<MetricResult> {
        match self {
            Metric::Accuracy => token_accuracy(gold, pred),
            Metric::SpanF1 => span_f1_from_labels(gold, pred),
            Metric::FHalf { positive } => f_beta_from_labels(gold, pred, positive, 0.5),
        }
    }
}
