//! Synthetic sequence-labeling corpora from a known HMM, plus label noise
//! injected through a known channel.
//!
//! Real tagging corpora give no access to the true noise process; these
//! generators do, which is what makes channel-recovery and corruption
//! diagnostics checkable. Only labels are ever corrupted, never tokens.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::corpus::{LabelVocab, LabeledCorpus, Provenance, Sentence, TokenVocab};
use crate::error::{CoreError, Result};
use crate::rngutil::{rng_from_seed, sample_categorical};

const ROW_SUM_TOL: f64 = 1e-9;

fn check_stochastic_row(row: &[f64], what: &str, idx: usize) -> Result<()> {
    if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(CoreError::Distribution(format!(
            "{what} row {idx} has a negative or non-finite entry"
        )));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        return Err(CoreError::Distribution(format!(
            "{what} row {idx} sums to {sum}, expected 1"
        )));
    }
    Ok(())
}

/// A hidden Markov model over `k` label states emitting tokens from a
/// vocabulary of size `V`, with uniform sentence lengths in `len_range`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HmmSpec {
    /// Initial state distribution, length k.
    pub initial: Vec<f64>,
    /// Row-stochastic k x k state transition matrix.
    pub transition: Vec<Vec<f64>>,
    /// Row-stochastic k x V emission matrix.
    pub emission: Vec<Vec<f64>>,
    /// Inclusive uniform sentence-length range.
    pub len_range: (usize, usize),
}

impl HmmSpec {
    pub fn n_states(&self) -> usize {
        self.initial.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.emission.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_states();
        if k < 2 {
            return Err(CoreError::Distribution(format!("need k >= 2 states, got {k}")));
        }
        if self.transition.len() != k || self.transition.iter().any(|r| r.len() != k) {
            return Err(CoreError::Shape("transition matrix is not k x k".into()));
        }
        if self.emission.len() != k {
            return Err(CoreError::Shape("emission matrix must have k rows".into()));
        }
        let v = self.vocab_size();
        if v == 0 || self.emission.iter().any(|r| r.len() != v) {
            return Err(CoreError::Shape("emission rows must share a positive width".into()));
        }
        check_stochastic_row(&self.initial, "initial", 0)?;
        for (i, row) in self.transition.iter().enumerate() {
            check_stochastic_row(row, "transition", i)?;
        }
        for (i, row) in self.emission.iter().enumerate() {
            check_stochastic_row(row, "emission", i)?;
        }
        let (lo, hi) = self.len_range;
        if lo < 1 || lo > hi {
            return Err(CoreError::Distribution(format!(
                "invalid sentence length range [{lo}, {hi}]"
            )));
        }
        Ok(())
    }

    /// Diagonal-dominant HMM with banded emissions.
    ///
    /// Label `i` prefers a contiguous band of `V/k` token types, holding
    /// `in_band_mass` of its emission probability; the rest is spread over the
    /// whole vocabulary. Band overlap through the uniform component is what
    /// makes the labels only partially predictable from single tokens.
    pub fn banded(
        k: usize,
        vocab: usize,
        self_transition: f64,
        in_band_mass: f64,
        len_range: (usize, usize),
    ) -> Self {
        let off = if k > 1 {
            (1.0 - self_transition) / (k - 1) as f64
        } else {
            0.0
        };
        let transition = (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| if i == j { self_transition } else { off })
                    .collect()
            })
            .collect();
        let band = vocab / k;
        let uniform_part = (1.0 - in_band_mass) / vocab as f64;
        let emission = (0..k)
            .map(|i| {
                let start = i * band;
                let end = if i + 1 == k { vocab } else { start + band };
                let width = end - start;
                (0..vocab)
                    .map(|t| {
                        let mut p = uniform_part;
                        if t >= start && t < end {
                            p += in_band_mass / width as f64;
                        }
                        p
                    })
                    .collect()
            })
            .collect();
        HmmSpec {
            initial: vec![1.0 / k as f64; k],
            transition,
            emission,
            len_range,
        }
    }

    /// Default desk-scale benchmark: 5 labels, 200 token types, self-transition
    /// 0.5, sentence lengths uniform in [5, 15].
    pub fn benchmark_default() -> Self {
        Self::banded(5, 200, 0.5, 0.75, (5, 15))
    }
}

/// The ground-truth noise channel theta*, row-stochastic k x k:
/// `theta[i][j] = p(observed = j | true = i)`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrueChannel {
    pub theta: Vec<Vec<f64>>,
}

impl TrueChannel {
    pub fn new(theta: Vec<Vec<f64>>) -> Result<Self> {
        let ch = TrueChannel { theta };
        ch.validate()?;
        Ok(ch)
    }

    pub fn identity(k: usize) -> Self {
        TrueChannel {
            theta: (0..k)
                .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
        }
    }

    /// Diagonal mass `diag`, remainder spread uniformly off-diagonal.
    pub fn diagonal(k: usize, diag: f64) -> Self {
        let off = if k > 1 { (1.0 - diag) / (k - 1) as f64 } else { 0.0 };
        TrueChannel {
            theta: (0..k)
                .map(|i| (0..k).map(|j| if i == j { diag } else { off }).collect())
                .collect(),
        }
    }

    pub fn uniform(k: usize) -> Self {
        TrueChannel {
            theta: vec![vec![1.0 / k as f64; k]; k],
        }
    }

    pub fn k(&self) -> usize {
        self.theta.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 || self.theta.iter().any(|r| r.len() != k) {
            return Err(CoreError::Shape("channel matrix is not square".into()));
        }
        for (i, row) in self.theta.iter().enumerate() {
            check_stochastic_row(row, "channel", i)?;
        }
        Ok(())
    }
}

fn synth_vocabs(spec: &HmmSpec) -> (Arc<TokenVocab>, Arc<LabelVocab>) {
    let mut tv = TokenVocab::new();
    for t in 0..spec.vocab_size() {
        tv.intern(&format!("w{t}"));
    }
    let labels: Vec<String> = (0..spec.n_states()).map(|i| format!("L{i}")).collect();
    let lv = LabelVocab::new(labels).expect("k >= 2 validated");
    (Arc::new(tv), Arc::new(lv))
}

/// Sample whole sentences from the HMM until at least `n_tokens` tokens have
/// been produced. Provenance is all `Clean`; deterministic in `seed`.
pub fn generate(spec: &HmmSpec, n_tokens: usize, seed: u64) -> Result<LabeledCorpus> {
    spec.validate()?;
    if n_tokens == 0 {
        return Err(CoreError::Precondition("n_tokens must be >= 1".into()));
    }
    let (tv, lv) = synth_vocabs(spec);
    let mut rng = rng_from_seed(seed);
    let (lo, hi) = spec.len_range;
    let mut sentences = Vec::new();
    let mut produced = 0;
    while produced < n_tokens {
        let len = rng.gen_range(lo..=hi);
        let mut token_ids = Vec::with_capacity(len);
        let mut labels = Vec::with_capacity(len);
        let mut state = sample_categorical(&mut rng, &spec.initial);
        for pos in 0..len {
            if pos > 0 {
                state = sample_categorical(&mut rng, &spec.transition[state]);
            }
            let tok = sample_categorical(&mut rng, &spec.emission[state]);
            // token id 0 is reserved for <unk>; emitted types start at 1
            token_ids.push(tok + 1);
            labels.push(state);
        }
        produced += len;
        sentences.push(Sentence::uniform(token_ids, labels, Provenance::Clean)?);
    }
    LabeledCorpus::new(sentences, tv, lv)
}

/// Resample every token's label through `channel` (i.i.d. per token) and flag
/// the result `Noisy`. The input corpus is untouched.
pub fn inject_noise(corpus: &LabeledCorpus, channel: &TrueChannel, seed: u64) -> Result<LabeledCorpus> {
    channel.validate()?;
    if channel.k() != corpus.label_vocab().len() {
        return Err(CoreError::Shape(format!(
            "channel is {}x{} but corpus has {} labels",
            channel.k(),
            channel.k(),
            corpus.label_vocab().len()
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut sentences = Vec::with_capacity(corpus.sentences.len());
    for s in &corpus.sentences {
        let labels = s
            .labels
            .iter()
            .map(|&y| sample_categorical(&mut rng, &channel.theta[y]))
            .collect();
        sentences.push(Sentence::uniform(s.token_ids.clone(), labels, Provenance::Noisy)?);
    }
    LabeledCorpus::new(
        sentences,
        corpus.token_vocab().clone(),
        corpus.label_vocab().clone(),
    )
}

/// Deterministic label coarsening for the synthetic auxiliary task:
/// `groups[main_label] = aux_label`. Returns a corpus over a fresh aux label
/// vocabulary named `A0..A{max}`.
pub fn coarsen_labels(corpus: &LabeledCorpus, groups: &[usize]) -> Result<LabeledCorpus> {
    let k = corpus.label_vocab().len();
    if groups.len() != k {
        return Err(CoreError::Shape(format!(
            "coarsening map has {} entries for {k} labels",
            groups.len()
        )));
    }
    let k_aux = groups.iter().copied().max().unwrap_or(0) + 1;
    let aux_labels: Vec<String> = (0..k_aux).map(|i| format!("A{i}")).collect();
    let lv = Arc::new(LabelVocab::new(aux_labels)?);
    let sentences = corpus
        .sentences
        .iter()
        .map(|s| Sentence {
            token_ids: s.token_ids.clone(),
            labels: s.labels.iter().map(|&l| groups[l]).collect(),
            provenance: s.provenance.clone(),
        })
        .collect();
    LabeledCorpus::new(sentences, corpus.token_vocab().clone(), lv)
}
