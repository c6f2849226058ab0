//! The differentiable sequence classifier: embedding table, a small encoder
//! (windowed MLP or bidirectional Elman RNN), and a softmax head, trained by
//! per-sentence SGD against per-token target distributions.
//!
//! Targets may be hard one-hots (supervised training) or arbitrary rows on
//! the label simplex (the EM M-step); both go through the same loss
//!
//! ```text
//!   loss(sentence) = - sum_t sum_i target[t][i] * ln p(y = i | x_t)
//! ```
//!
//! whose softmax-head gradient is `(p - target) h(x_t)` per token. All
//! gradients are written by hand in f64 and checked against central finite
//! differences in the tests.

mod encoder;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

pub use encoder::{BiLayer, EncoderParams, RnnDirection};

use crate::corpus::{LabeledCorpus, Sentence};
use crate::error::{CoreError, Result};
use crate::matrix::{argmax, axpy, Mat};
use crate::rngutil::{rng_from_seed, shuffled_indices};

const TARGET_ROW_TOL: f64 = 1e-9;

/// Encoder architecture choice. Both are desk-scale stand-ins for a deep
/// recurrent tagger: gradient-checkable, trainable in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum EncoderKind {
    /// Concatenated embeddings in a +-radius window through tanh layers.
    WindowMlp { radius: usize, hidden: usize },
    /// Bidirectional Elman recurrence, `hidden` units per direction.
    BiElman { hidden: usize },
}

/// Shape parameters for a classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NetConfig {
    pub vocab_size: usize,
    pub n_labels: usize,
    /// Word embedding dimensionality (default 64).
    pub embed_dim: usize,
    pub encoder: EncoderKind,
    /// Number of stacked encoder layers (default 1).
    pub depth: usize,
}

impl NetConfig {
    pub fn new(vocab_size: usize, n_labels: usize) -> Self {
        NetConfig {
            vocab_size,
            n_labels,
            embed_dim: 64,
            encoder: EncoderKind::WindowMlp {
                radius: 2,
                hidden: 64,
            },
            depth: 1,
        }
    }

    pub fn with_embed_dim(mut self, d: usize) -> Self {
        self.embed_dim = d;
        self
    }

    pub fn with_encoder(mut self, e: EncoderKind) -> Self {
        self.encoder = e;
        self
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    /// Width of the per-token encoder output fed to the softmax head.
    pub fn encoder_output_dim(&self) -> usize {
        match self.encoder {
            EncoderKind::WindowMlp { hidden, .. } => hidden,
            EncoderKind::BiElman { hidden } => 2 * hidden,
        }
    }

    /// Width after the first encoder layer (the multi-task sharing boundary).
    pub fn first_layer_output_dim(&self) -> usize {
        self.encoder_output_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.n_labels < 2 || self.embed_dim == 0 || self.depth == 0 {
            return Err(CoreError::Shape(format!(
                "invalid net config: |V|={}, k={}, d={}, depth={}",
                self.vocab_size, self.n_labels, self.embed_dim, self.depth
            )));
        }
        match self.encoder {
            EncoderKind::WindowMlp { hidden, .. } | EncoderKind::BiElman { hidden } => {
                if hidden == 0 {
                    return Err(CoreError::Shape("encoder hidden width must be >= 1".into()));
                }
            }
        }
        Ok(())
    }
}

/// An affine map `w x + b` (used for MLP layers and softmax heads).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Layer {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Layer {
            w: Mat::zeros(out_dim, in_dim),
            b: vec![0.0; out_dim],
        }
    }

    pub(crate) fn init(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Self {
        Layer {
            w: Mat::from_fn(out_dim, in_dim, |_, _| rng.gen_range(-0.1..0.1)),
            b: (0..out_dim).map(|_| rng.gen_range(-0.1..0.1)).collect(),
        }
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.w.matvec(x, out);
        axpy(1.0, &self.b, out);
    }
}

/// Full parameter set of one classifier: embedding table, encoder weights,
/// softmax head. The same struct doubles as a gradient buffer because every
/// operation that needs "a value per parameter" walks `blocks()` in a fixed
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub config: NetConfig,
    pub embedding: Mat,
    pub encoder: EncoderParams,
    pub head: Layer,
}

impl ClassifierParams {
    /// Seeded uniform(-0.1, 0.1) initialization of every parameter.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let embedding = Mat::from_fn(config.vocab_size, config.embed_dim, |_, _| {
            rng.gen_range(-0.1..0.1)
        });
        let encoder = EncoderParams::init(&config, &mut rng);
        let head = Layer::init(config.n_labels, config.encoder_output_dim(), &mut rng);
        Ok(ClassifierParams {
            config,
            embedding,
            encoder,
            head,
        })
    }

    /// Same shapes, all zeros (gradient buffer).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for block in z.blocks_mut() {
            for v in block.iter_mut() {
                *v = 0.0;
            }
        }
        z
    }

    /// All parameter slices in a fixed order: embedding, encoder, head.
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut blocks = vec![self.embedding.data()];
        self.encoder.collect_blocks(&mut blocks);
        blocks.push(self.head.w.data());
        blocks.push(&self.head.b);
        blocks
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut blocks = vec![self.embedding.data_mut()];
        self.encoder.collect_blocks_mut(&mut blocks);
        blocks.push(self.head.w.data_mut());
        blocks.push(&mut self.head.b);
        blocks
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// self += alpha * other (elementwise over all parameters).
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        let other_blocks = other.blocks();
        for (mine, theirs) in self.blocks_mut().into_iter().zip(other_blocks) {
            debug_assert_eq!(mine.len(), theirs.len());
            axpy(alpha, theirs, mine);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|b| b.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, alpha: f64) {
        for block in self.blocks_mut() {
            for v in block.iter_mut() {
                *v *= alpha;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Per-token target distributions for a whole corpus, in flat token order.
/// Clean tokens carry exact one-hots; noisy tokens carry EM posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTable {
    rows: Vec<Vec<f64>>,
    k: usize,
}

impl TargetTable {
    /// Hard targets at the observed labels, one row per corpus token.
    pub fn one_hot(corpus: &LabeledCorpus) -> Self {
        let k = corpus.label_vocab().len();
        let mut rows = Vec::with_capacity(corpus.n());
        for s in &corpus.sentences {
            for &l in &s.labels {
                let mut row = vec![0.0; k];
                row[l] = 1.0;
                rows.push(row);
            }
        }
        TargetTable { rows, k }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, k: usize) -> Result<Self> {
        let t = TargetTable { rows, k };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.rows.iter().enumerate() {
            validate_target_row(row, self.k).map_err(|e| {
                CoreError::Distribution(format!("target row {i}: {e}"))
            })?;
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, flat_index: usize) -> &[f64] {
        &self.rows[flat_index]
    }
}

fn validate_target_row(row: &[f64], k: usize) -> core::result::Result<(), String> {
    if row.len() != k {
        return Err(format!("has {} entries, expected {k}", row.len()));
    }
    if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err("has a negative or non-finite entry".into());
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > TARGET_ROW_TOL {
        return Err(format!("sums to {sum}, expected 1"));
    }
    Ok(())
}

/// SGD hyperparameters. One batch = one sentence; the loss sums over the
/// sentence's tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub lr: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    /// Epochs per call.
    pub epochs: usize,
    /// Inverted dropout on embedding outputs, training only.
    pub dropout: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            lr_decay: 0.95,
            epochs: 5,
            dropout: 0.1,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is allowed: it makes SGD a no-op, which some equivalence
        // tests rely on.
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(CoreError::Precondition(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::Precondition(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.lr_decay > 0.0) || !(self.clip_norm > 0.0) {
            return Err(CoreError::Precondition("lr_decay and clip_norm must be > 0".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }
}

/// Everything the backward pass needs from one forward run.
pub(crate) struct ForwardCache {
    /// Embeddings after dropout (the encoder's input), len x d rows.
    pub input: Vec<Vec<f64>>,
    /// Inverted-dropout mask matching `input`, if training with dropout.
    pub mask: Option<Vec<Vec<f64>>>,
    pub encoder: encoder::EncoderCache,
    /// Per-token logits, len x k.
    pub logits: Vec<Vec<f64>>,
    /// Per-token softmax probabilities, len x k.
    pub probs: Vec<Vec<f64>>,
}

fn check_sentence(params: &ClassifierParams, sentence: &Sentence) -> Result<()> {
    if let Some(&bad) = sentence
        .token_ids
        .iter()
        .find(|&&t| t >= params.config.vocab_size)
    {
        return Err(CoreError::Shape(format!(
            "token id {bad} out of range for |V|={}",
            params.config.vocab_size
        )));
    }
    Ok(())
}

/// Forward pass up to `depth_limit` encoder layers, through `head`.
///
/// `depth_limit = config.depth` is the main task path; `1` is the auxiliary
/// multi-task path which hangs its own head off the first (shared) layer.
pub(crate) fn forward_with(
    params: &ClassifierParams,
    head: &Layer,
    tokens: &[usize],
    depth_limit: usize,
    dropout: Option<(f64, &mut dyn rand::RngCore)>,
) -> ForwardCache {
    let d = params.config.embed_dim;
    let mut input: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| params.embedding.row(t).to_vec())
        .collect();
    let mask = match dropout {
        Some((p, rng)) if p > 0.0 => {
            let keep = 1.0 - p;
            let mut masks = Vec::with_capacity(input.len());
            for row in input.iter_mut() {
                let mut m = vec![0.0; d];
                for (v, mv) in row.iter_mut().zip(m.iter_mut()) {
                    if rng.gen_range(0.0..1.0) < keep {
                        *mv = 1.0 / keep;
                    }
                    *v *= *mv;
                }
                masks.push(m);
            }
            Some(masks)
        }
        _ => None,
    };
    let enc = encoder::forward(&params.encoder, &params.config, &input, depth_limit);
    let k = head.b.len();
    let mut logits = Vec::with_capacity(tokens.len());
    let mut probs = Vec::with_capacity(tokens.len());
    for t in 0..tokens.len() {
        let mut lg = vec![0.0; k];
        head.apply(enc.output(t), &mut lg);
        let mut p = vec![0.0; k];
        crate::matrix::softmax(&lg, &mut p);
        logits.push(lg);
        probs.push(p);
    }
    ForwardCache {
        input,
        mask,
        encoder: enc,
        logits,
        probs,
    }
}

/// Cross-entropy of `targets` against the cached logits (summed over tokens),
/// computed in log-space for stability.
pub(crate) fn loss_from_cache(cache: &ForwardCache, targets: &[Vec<f64>]) -> f64 {
    let mut loss = 0.0;
    for (lg, target) in cache.logits.iter().zip(targets) {
        let max = lg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lg.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        for (&l, &c) in lg.iter().zip(target) {
            if c != 0.0 {
                loss -= c * (l - lse);
            }
        }
    }
    loss
}

/// Backward pass matching `forward_with`. Writes gradients for the embedding
/// and the first `depth_limit` encoder layers into `grads`, and the head
/// gradient into `head_grad`. Layers above `depth_limit` keep zero gradient.
pub(crate) fn backward_with(
    params: &ClassifierParams,
    head: &Layer,
    tokens: &[usize],
    cache: &ForwardCache,
    targets: &[Vec<f64>],
    grads: &mut ClassifierParams,
    head_grad: &mut Layer,
) {
    let len = tokens.len();
    let out_dim = cache.encoder.output(0).len();
    // d loss / d encoder output
    let mut d_enc: Vec<Vec<f64>> = vec![vec![0.0; out_dim]; len];
    for t in 0..len {
        let p = &cache.probs[t];
        let target = &targets[t];
        // d loss / d logits = p - target for the summed cross entropy
        let dlogits: Vec<f64> = p.iter().zip(target).map(|(&pi, &ci)| pi - ci).collect();
        head_grad.w.add_outer(1.0, &dlogits, cache.encoder.output(t));
        axpy(1.0, &dlogits, &mut head_grad.b);
        head.w.matvec_transpose_add(&dlogits, &mut d_enc[t]);
    }
    let d = params.config.embed_dim;
    let mut d_input: Vec<Vec<f64>> = vec![vec![0.0; d]; len];
    encoder::backward(
        &params.encoder,
        &params.config,
        &cache.encoder,
        &cache.input,
        &mut d_enc,
        &mut grads.encoder,
        &mut d_input,
    );
    // through dropout, then scatter into the embedding table
    for (t, &tok) in tokens.iter().enumerate() {
        let row = &mut d_input[t];
        if let Some(masks) = &cache.mask {
            for (g, &m) in row.iter_mut().zip(&masks[t]) {
                *g *= m;
            }
        }
        axpy(1.0, row, grads.embedding.row_mut(tok));
    }
}

/// Per-token label distributions for one sentence (inference mode: dropout
/// off, deterministic). Each row is a valid distribution.
pub fn forward_proba(params: &ClassifierParams, sentence: &Sentence) -> Result<Vec<Vec<f64>>> {
    check_sentence(params, sentence)?;
    let cache = forward_with(
        params,
        &params.head,
        &sentence.token_ids,
        params.config.depth,
        None,
    );
    Ok(cache.probs)
}

/// Loss and full-parameter gradient for one sentence against `targets`
/// (dropout off). For one-hot targets this is exactly the standard summed
/// cross entropy.
pub fn loss_and_grad(
    params: &ClassifierParams,
    sentence: &Sentence,
    targets: &[Vec<f64>],
) -> Result<(f64, ClassifierParams)> {
    check_sentence(params, sentence)?;
    if targets.len() != sentence.len() {
        return Err(CoreError::Shape(format!(
            "{} target rows for a {}-token sentence",
            targets.len(),
            sentence.len()
        )));
    }
    for (i, row) in targets.iter().enumerate() {
        validate_target_row(row, params.config.n_labels)
            .map_err(|e| CoreError::Distribution(format!("target row {i}: {e}")))?;
    }
    let cache = forward_with(
        params,
        &params.head,
        &sentence.token_ids,
        params.config.depth,
        None,
    );
    let loss = loss_from_cache(&cache, targets);
    let mut grads = params.zeros_like();
    let mut head_grad = Layer::zeros(params.head.w.rows(), params.head.w.cols());
    backward_with(
        params,
        &params.head,
        &sentence.token_ids,
        &cache,
        targets,
        &mut grads,
        &mut head_grad,
    );
    grads.head = head_grad;
    Ok((loss, grads))
}

/// Rescale `grads` in place so its global norm is at most `clip_norm`.
pub(crate) fn clip_global_norm(blocks: &mut [&mut [f64]], clip_norm: f64) {
    let norm = blocks
        .iter()
        .flat_map(|b| b.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > clip_norm {
        let scale = clip_norm / norm;
        for block in blocks.iter_mut() {
            for v in block.iter_mut() {
                *v *= scale;
            }
        }
    }
}

/// SGD over the corpus against `targets`: sentence batches in seeded shuffled
/// order, inverted dropout between embedding and encoder, per-epoch learning
/// rate decay, global-norm gradient clipping. Returns the mean per-sentence
/// loss for each epoch. Bit-deterministic given (params, data, config).
pub fn train(
    params: &mut ClassifierParams,
    corpus: &LabeledCorpus,
    targets: &TargetTable,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if targets.len() != corpus.n() {
        return Err(CoreError::Shape(format!(
            "target table has {} rows for a corpus of {} tokens",
            targets.len(),
            corpus.n()
        )));
    }
    if targets.k() != params.config.n_labels {
        return Err(CoreError::Shape(format!(
            "target width {} != k={}",
            targets.k(),
            params.config.n_labels
        )));
    }
    targets.validate()?;
    if !params.all_finite() {
        return Err(CoreError::Precondition("parameters contain non-finite values".into()));
    }
    let offsets = corpus.token_offsets();
    let n_sentences = corpus.sentences.len();
    let mut rng = rng_from_seed(cfg.seed);
    let mut lr = cfg.lr;
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(&mut rng, n_sentences);
        let mut epoch_loss = 0.0;
        for &si in &order {
            let sentence = &corpus.sentences[si];
            let rows = &targets.rows()[offsets[si]..offsets[si] + sentence.len()];
            let cache = forward_with(
                params,
                &params.head,
                &sentence.token_ids,
                params.config.depth,
                Some((cfg.dropout, &mut rng)),
            );
            let loss = loss_from_cache(&cache, rows);
            if !loss.is_finite() {
                return Err(CoreError::Diverged(format!(
                    "non-finite loss {loss} at epoch {epoch}, sentence {si}"
                )));
            }
            epoch_loss += loss;
            let mut grads = params.zeros_like();
            let mut head_grad = Layer::zeros(params.head.w.rows(), params.head.w.cols());
            backward_with(
                params,
                &params.head,
                &sentence.token_ids,
                &cache,
                rows,
                &mut grads,
                &mut head_grad,
            );
            grads.head = head_grad;
            clip_global_norm(&mut grads.blocks_mut(), cfg.clip_norm);
            params.axpy(-lr, &grads);
        }
        trace.push(epoch_loss / n_sentences.max(1) as f64);
        lr *= cfg.lr_decay;
    }
    Ok(trace)
}

/// Per-token argmax labels for every sentence; ties break toward the lowest
/// label index. Inference mode (no dropout).
pub fn predict(params: &ClassifierParams, corpus: &LabeledCorpus) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(corpus.sentences.len());
    for s in &corpus.sentences {
        let probs = forward_proba(params, s)?;
        out.push(probs.iter().map(|row| argmax(row)).collect());
    }
    Ok(out)
}

/// Token accuracy of `params` on `corpus` against its stored labels.
pub fn token_accuracy(params: &ClassifierParams, corpus: &LabeledCorpus) -> Result<f64> {
    let pred = predict(params, corpus)?;
    let mut correct = 0usize;
    let mut total = 0usize;
    for (s, row) in corpus.sentences.iter().zip(&pred) {
        for (&gold, &p) in s.labels.iter().zip(row) {
            total += 1;
            if gold == p {
                correct += 1;
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}
