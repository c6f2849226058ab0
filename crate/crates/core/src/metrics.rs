//! Evaluation: BIO-2 span extraction, micro-averaged span F1, token accuracy,
//! per-label precision, confusion matrices, and multi-seed aggregation.
//!
//! Which metric family applies is decided by the label vocabulary: BIO-style
//! vocabularies get span-level scores, plain class vocabularies get
//! token-level scores (where micro precision = recall = accuracy).

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::corpus::LabeledCorpus;
use crate::error::{CoreError, Result};

/// A labeled span: type name (without the B-/I- prefix) plus inclusive token
/// bounds within one sentence.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Span {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

/// Extract spans from a BIO-2 label sequence.
///
/// `B-X` starts a span, `I-X` continues a span of type `X`, and `O` closes.
/// An orphan `I-X` (at sequence start, after `O`, or after a different type)
/// starts a new span, matching the lenient conlleval reading. Labels are
/// assumed to be drawn from `{O, B-X, I-X}`; anything else behaves like `O`.
pub fn extract_spans<S: AsRef<str>>(labels: &[S]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<Span> = None;
    for (t, raw) in labels.iter().enumerate() {
        let label = raw.as_ref();
        if let Some(ty) = label.strip_prefix("B-") {
            if let Some(s) = open.take() {
                spans.push(s);
            }
            open = Some(Span {
                label: ty.to_string(),
                start: t,
                end: t,
            });
        } else if let Some(ty) = label.strip_prefix("I-") {
            match open.as_mut() {
                Some(s) if s.label == ty => s.end = t,
                _ => {
                    if let Some(s) = open.take() {
                        spans.push(s);
                    }
                    open = Some(Span {
                        label: ty.to_string(),
                        start: t,
                        end: t,
                    });
                }
            }
        } else {
            debug_assert!(label == "O", "non-BIO label {label:?} reached span extraction");
            if let Some(s) = open.take() {
                spans.push(s);
            }
        }
    }
    if let Some(s) = open {
        spans.push(s);
    }
    spans
}

/// Which family of scores a report carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum MetricMode {
    /// Span-level scores over BIO-2 chunks.
    SpanBio,
    /// Token-level scores for plain class labels.
    Token,
}

/// Micro-averaged scores plus per-label precision and supports.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricReport {
    pub mode: MetricMode,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub token_accuracy: f64,
    /// Per span type (BIO) or per label (token mode): precision of the
    /// predictions carrying that label.
    pub per_label_precision: Vec<(String, f64)>,
    /// Gold span/token counts per label.
    pub support: Vec<(String, usize)>,
    pub n_gold: usize,
    pub n_pred: usize,
    pub n_matched: usize,
}

impl MetricReport {
    /// The model-selection metric: span F1 for BIO tasks, token accuracy
    /// otherwise.
    pub fn primary(&self) -> f64 {
        match self.mode {
            MetricMode::SpanBio => self.f1,
            MetricMode::Token => self.token_accuracy,
        }
    }
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn check_shapes(gold: &[Vec<usize>], pred: &[Vec<usize>]) -> Result<()> {
    if gold.len() != pred.len() || gold.iter().zip(pred).any(|(g, p)| g.len() != p.len()) {
        return Err(CoreError::Shape(
            "gold and predicted label sequences have different shapes".into(),
        ));
    }
    Ok(())
}

fn token_accuracy_of(gold: &[Vec<usize>], pred: &[Vec<usize>]) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (g, p) in gold.iter().zip(pred) {
        for (&a, &b) in g.iter().zip(p) {
            total += 1;
            if a == b {
                correct += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

/// Micro-averaged span or token scores of `pred` against the corpus labels.
pub fn micro_f1(corpus: &LabeledCorpus, pred: &[Vec<usize>]) -> Result<MetricReport> {
    report(corpus, pred)
}

/// Scores of predicted label ids against the corpus gold labels; the metric
/// family follows the label vocabulary.
pub fn report(corpus: &LabeledCorpus, pred: &[Vec<usize>]) -> Result<MetricReport> {
    let gold = corpus.label_rows();
    check_shapes(&gold, pred)?;
    let vocab = corpus.label_vocab();
    let token_accuracy = token_accuracy_of(&gold, pred);
    if vocab.is_bio() {
        // spans keyed by (sentence, type, start, end) for corpus-level matching
        let mut gold_spans: BTreeSet<(usize, Span)> = BTreeSet::new();
        let mut pred_spans: BTreeSet<(usize, Span)> = BTreeSet::new();
        for (si, (g, p)) in gold.iter().zip(pred).enumerate() {
            let to_strings = |row: &[usize]| {
                row.iter()
                    .map(|&l| vocab.label(l).to_string())
                    .collect::<Vec<_>>()
            };
            for s in extract_spans(&to_strings(g)) {
                gold_spans.insert((si, s));
            }
            for s in extract_spans(&to_strings(p)) {
                pred_spans.insert((si, s));
            }
        }
        let n_gold = gold_spans.len();
        let n_pred = pred_spans.len();
        let n_matched = gold_spans.intersection(&pred_spans).count();
        let precision = if n_pred == 0 {
            0.0
        } else {
            n_matched as f64 / n_pred as f64
        };
        let recall = if n_gold == 0 {
            0.0
        } else {
            n_matched as f64 / n_gold as f64
        };

        let mut types: BTreeSet<String> = BTreeSet::new();
        for (_, s) in gold_spans.iter().chain(&pred_spans) {
            types.insert(s.label.clone());
        }
        let mut per_label_precision = Vec::new();
        let mut support = Vec::new();
        for ty in &types {
            let pred_ty = pred_spans.iter().filter(|(_, s)| &s.label == ty).count();
            let matched_ty = gold_spans
                .intersection(&pred_spans)
                .filter(|(_, s)| &s.label == ty)
                .count();
            let p = if pred_ty == 0 {
                0.0
            } else {
                matched_ty as f64 / pred_ty as f64
            };
            per_label_precision.push((ty.clone(), p));
            support.push((
                ty.clone(),
                gold_spans.iter().filter(|(_, s)| &s.label == ty).count(),
            ));
        }
        Ok(MetricReport {
            mode: MetricMode::SpanBio,
            precision,
            recall,
            f1: f1_of(precision, recall),
            token_accuracy,
            per_label_precision,
            support,
            n_gold,
            n_pred,
            n_matched,
        })
    } else {
        let k = vocab.len();
        let mut pred_count = vec![0usize; k];
        let mut match_count = vec![0usize; k];
        let mut gold_count = vec![0usize; k];
        let mut total = 0usize;
        let mut matched = 0usize;
        for (g, p) in gold.iter().zip(pred) {
            for (&a, &b) in g.iter().zip(p) {
                total += 1;
                gold_count[a] += 1;
                pred_count[b] += 1;
                if a == b {
                    matched += 1;
                    match_count[a] += 1;
                }
            }
        }
        let per_label_precision = (0..k)
            .map(|l| {
                let p = if pred_count[l] == 0 {
                    0.0
                } else {
                    match_count[l] as f64 / pred_count[l] as f64
                };
                (vocab.label(l).to_string(), p)
            })
            .collect();
        let support = (0..k)
            .map(|l| (vocab.label(l).to_string(), gold_count[l]))
            .collect();
        let acc = token_accuracy;
        Ok(MetricReport {
            mode: MetricMode::Token,
            precision: acc,
            recall: acc,
            f1: acc,
            token_accuracy: acc,
            per_label_precision,
            support,
            n_gold: total,
            n_pred: total,
            n_matched: matched,
        })
    }
}

/// Token-level confusion counts: entry (i, j) counts tokens with gold label i
/// and assigned label j.
pub fn confusion_matrix(
    gold: &[Vec<usize>],
    pred: &[Vec<usize>],
    k: usize,
) -> Result<Vec<Vec<u64>>> {
    check_shapes(gold, pred)?;
    let mut m = vec![vec![0u64; k]; k];
    for (g, p) in gold.iter().zip(pred) {
        for (&a, &b) in g.iter().zip(p) {
            m[a][b] += 1;
        }
    }
    Ok(m)
}

/// Row-normalized view of a count matrix (zero rows stay zero).
pub fn row_normalize(m: &[Vec<u64>]) -> Vec<Vec<f64>> {
    m.iter()
        .map(|row| {
            let total: u64 = row.iter().sum();
            if total == 0 {
                vec![0.0; row.len()]
            } else {
                row.iter().map(|&c| c as f64 / total as f64).collect()
            }
        })
        .collect()
}

/// Sample mean and standard deviation (n-1 denominator; 0 when n = 1).
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn mean_std(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(CoreError::Precondition(
            "cannot aggregate an empty group".into(),
        ));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Ok(Aggregate { mean, std, n })
}

/// Group scalar observations by key and aggregate each group.
pub fn aggregate_by<K: Ord + Clone>(rows: &[(K, f64)]) -> Result<Vec<(K, Aggregate)>> {
    let mut groups: BTreeMap<K, Vec<f64>> = BTreeMap::new();
    for (k, v) in rows {
        groups.entry(k.clone()).or_default().push(*v);
    }
    groups
        .into_iter()
        .map(|(k, vs)| Ok((k, mean_std(&vs)?)))
        .collect()
}

/// Total-variation distance between two distributions.
pub fn tv_distance(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Mean row-wise total-variation distance between two row-stochastic
/// matrices.
pub fn mean_row_tv(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| tv_distance(x, y)).sum::<f64>() / a.len() as f64
}
