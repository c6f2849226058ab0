//! Noise-channel expectation maximization over a sequence classifier.
//!
//! Two fitting modes share one loop:
//!
//! * `fit_cnlnn` keeps the clean/noisy split: posteriors and the channel are
//!   estimated over the noisy tokens only, and clean tokens always train
//!   against exact one-hot targets. Clean labels can never be revised.
//! * `fit_nlnn` treats every token as noisy (the all-noisy baseline); its
//!   trace additionally shows how the originally-clean tokens drift as EM
//!   iterates, which is the diagnostic that motivates the clean/noisy split.
//!
//! One EM iteration is: E-step (per-token posteriors `c_t` over true labels,
//! noisy tokens only) -> channel update theta -> network M-step (SGD against
//! the mixed one-hot/posterior targets).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::{LabeledCorpus, Provenance};
use crate::error::{CoreError, Result};
use crate::matrix::{argmax, Mat};
use crate::metrics;
use crate::net::{self, ClassifierParams, TargetTable, TrainConfig};
use crate::rngutil::mix_seed;

const ROW_SUM_TOL: f64 = 1e-9;

/// Row-stochastic k x k noise channel estimate:
/// `theta[i][j] = p(observed = j | true = i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseChannel {
    theta: Mat,
}

impl NoiseChannel {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let k = rows.len();
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(CoreError::Shape("channel matrix must be square".into()));
        }
        let ch = NoiseChannel {
            theta: Mat::from_rows(&rows),
        };
        ch.validate()?;
        Ok(ch)
    }

    pub fn identity(k: usize) -> Self {
        NoiseChannel {
            theta: Mat::from_fn(k, k, |i, j| if i == j { 1.0 } else { 0.0 }),
        }
    }

    pub fn uniform(k: usize) -> Self {
        NoiseChannel {
            theta: Mat::from_fn(k, k, |_, _| 1.0 / k as f64),
        }
    }

    pub fn k(&self) -> usize {
        self.theta.rows()
    }

    #[inline]
    pub fn get(&self, true_label: usize, observed: usize) -> f64 {
        self.theta.get(true_label, observed)
    }

    pub fn row(&self, true_label: usize) -> &[f64] {
        self.theta.row(true_label)
    }

    pub fn to_nested(&self) -> Vec<Vec<f64>> {
        self.theta.to_nested()
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..self.k() {
            let row = self.theta.row(i);
            if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                return Err(CoreError::Distribution(format!(
                    "channel row {i} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(CoreError::Distribution(format!(
                    "channel row {i} sums to {sum}"
                )));
            }
        }
        Ok(())
    }
}

/// E-step soft labels: one row on the label simplex per *noisy* token,
/// addressed by flat corpus token index. Clean tokens never appear here.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorTable {
    indices: Vec<usize>,
    rows: Vec<Vec<f64>>,
}

impl PosteriorTable {
    pub fn empty() -> Self {
        PosteriorTable {
            indices: Vec::new(),
            rows: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Posterior for the token at `flat_index`, if that token is noisy.
    pub fn get(&self, flat_index: usize) -> Option<&[f64]> {
        self.indices
            .binary_search(&flat_index)
            .ok()
            .map(|pos| self.rows[pos].as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.indices
            .iter()
            .copied()
            .zip(self.rows.iter().map(Vec::as_slice))
    }
}

/// EM driver knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EmConfig {
    /// Maximum EM iterations (0 returns the initial model untouched).
    pub max_iters: usize,
    /// Stop after this many consecutive iterations without a dev improvement.
    pub patience: usize,
    /// SGD epochs per network M-step.
    pub epochs_per_m: usize,
    /// Smoothing floor applied to every channel estimate.
    pub epsilon: f64,
    /// Continue network training from the current weights at each M-step;
    /// when false, weights are re-initialized from a fresh seed instead.
    pub warm_start: bool,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iters: 10,
            patience: 2,
            epochs_per_m: 5,
            epsilon: 1e-6,
            warm_start: true,
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.epochs_per_m == 0 || self.patience == 0 {
            return Err(CoreError::Precondition(
                "epochs_per_m and patience must be positive".into(),
            ));
        }
        if !(self.epsilon > 0.0) || self.epsilon >= 1.0 / k as f64 {
            return Err(CoreError::Precondition(format!(
                "epsilon must satisfy 0 < eps < 1/k, got {} for k={k}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

fn check_labels_in_range(corpus: &LabeledCorpus, k: usize) -> Result<()> {
    if corpus.label_vocab().len() != k {
        return Err(CoreError::Shape(format!(
            "corpus has {} labels, channel/params expect {k}",
            corpus.label_vocab().len()
        )));
    }
    Ok(())
}

/// Soft-confusion channel initialization from a trained classifier:
///
/// ```text
///   theta0(i, j) = (sum_t p(y=i|x_t) * [z_t = j] + eps) / (sum_t p(y=i|x_t) + k*eps)
/// ```
///
/// with `t` ranging over the noisy tokens when `noisy_only`, else over all
/// tokens.
pub fn init_theta(
    params: &ClassifierParams,
    corpus: &LabeledCorpus,
    noisy_only: bool,
    eps: f64,
) -> Result<NoiseChannel> {
    let k = params.config.n_labels;
    check_labels_in_range(corpus, k)?;
    let mut num = Mat::zeros(k, k);
    let mut den = vec![0.0; k];
    let mut selected = 0usize;
    for s in &corpus.sentences {
        let mut probs: Option<Vec<Vec<f64>>> = None;
        for (pos, (&z, &prov)) in s.labels.iter().zip(&s.provenance).enumerate() {
            if noisy_only && prov != Provenance::Noisy {
                continue;
            }
            let p = probs.get_or_insert_with(|| {
                net::forward_proba(params, s).expect("token ids validated at corpus construction")
            });
            selected += 1;
            for i in 0..k {
                num.add_at(i, z, p[pos][i]);
                den[i] += p[pos][i];
            }
        }
    }
    if selected == 0 {
        return Err(CoreError::Precondition(
            "no tokens in range for channel initialization".into(),
        ));
    }
    let rows: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            let d = den[i] + k as f64 * eps;
            if d <= 0.0 {
                vec![1.0 / k as f64; k]
            } else {
                (0..k).map(|j| (num.get(i, j) + eps) / d).collect()
            }
        })
        .collect();
    NoiseChannel::from_rows(rows)
}

pub(crate) fn e_step_row(probs: &[f64], observed: usize, theta: &NoiseChannel) -> Result<Vec<f64>> {
    let k = theta.k();
    let mut row: Vec<f64> = (0..k).map(|i| theta.get(i, observed) * probs[i]).collect();
    let denom: f64 = row.iter().sum();
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(CoreError::Distribution(format!(
            "zero E-step denominator for observed label {observed} (channel column is all zero)"
        )));
    }
    for v in row.iter_mut() {
        *v /= denom;
    }
    Ok(row)
}

/// E-step: posterior over true labels for every noisy token,
///
/// ```text
///   c_t(i) = theta(i, z_t) p(y=i|x_t) / sum_j theta(j, z_t) p(y=j|x_t)
/// ```
///
/// Clean tokens are untouched and get no posterior.
pub fn e_step(
    params: &ClassifierParams,
    corpus: &LabeledCorpus,
    theta: &NoiseChannel,
) -> Result<PosteriorTable> {
    let k = params.config.n_labels;
    check_labels_in_range(corpus, k)?;
    if theta.k() != k {
        return Err(CoreError::Shape(format!(
            "channel is {}x{} but k={k}",
            theta.k(),
            theta.k()
        )));
    }
    let mut indices = Vec::new();
    let mut rows = Vec::new();
    let mut flat = 0usize;
    for s in &corpus.sentences {
        let mut probs: Option<Vec<Vec<f64>>> = None;
        for (pos, (&z, &prov)) in s.labels.iter().zip(&s.provenance).enumerate() {
            if prov == Provenance::Noisy {
                let p = probs.get_or_insert_with(|| {
                    net::forward_proba(params, s)
                        .expect("token ids validated at corpus construction")
                });
                indices.push(flat);
                rows.push(e_step_row(&p[pos], z, theta)?);
            }
            flat += 1;
        }
    }
    Ok(PosteriorTable { indices, rows })
}

/// Channel M-step over the noisy tokens:
///
/// ```text
///   theta(i, j) = sum_t c_t(i) [z_t = j] / sum_t c_t(i)
/// ```
///
/// then smoothed to `(theta + eps) / (1 + k*eps)` per row. Pass `eps = 0` for
/// the raw ratio. Rows with zero posterior mass fall back to uniform (such a
/// label is unidentifiable from the noisy set).
pub fn m_step_theta(
    posteriors: &PosteriorTable,
    corpus: &LabeledCorpus,
    eps: f64,
) -> Result<NoiseChannel> {
    let k = corpus.label_vocab().len();
    let mut num = Mat::zeros(k, k);
    let mut den = vec![0.0; k];
    let mut flat = 0usize;
    let mut covered = 0usize;
    for s in &corpus.sentences {
        for (&z, &prov) in s.labels.iter().zip(&s.provenance) {
            if prov == Provenance::Noisy {
                let c = posteriors.get(flat).ok_or_else(|| {
                    CoreError::Precondition(format!(
                        "posterior missing for noisy token at flat index {flat}"
                    ))
                })?;
                if c.len() != k {
                    return Err(CoreError::Shape("posterior row width != k".into()));
                }
                covered += 1;
                for (i, &ci) in c.iter().enumerate() {
                    num.add_at(i, z, ci);
                    den[i] += ci;
                }
            }
            flat += 1;
        }
    }
    if covered != posteriors.len() {
        return Err(CoreError::Precondition(format!(
            "posterior table has {} rows but corpus has {covered} noisy tokens",
            posteriors.len()
        )));
    }
    let rows: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            if den[i] <= 0.0 {
                return vec![1.0 / k as f64; k];
            }
            let smooth = 1.0 + k as f64 * eps;
            (0..k)
                .map(|j| (num.get(i, j) / den[i] + eps) / smooth)
                .collect()
        })
        .collect();
    NoiseChannel::from_rows(rows)
}

/// Per-token training targets for the network M-step: exact one-hots at the
/// observed label for clean tokens, the E-step posterior for noisy tokens.
pub fn build_targets(corpus: &LabeledCorpus, posteriors: &PosteriorTable) -> Result<TargetTable> {
    let k = corpus.label_vocab().len();
    let mut rows = Vec::with_capacity(corpus.n());
    let mut flat = 0usize;
    for s in &corpus.sentences {
        for (&z, &prov) in s.labels.iter().zip(&s.provenance) {
            match prov {
                Provenance::Clean => {
                    let mut row = vec![0.0; k];
                    row[z] = 1.0;
                    rows.push(row);
                }
                Provenance::Noisy => {
                    let c = posteriors.get(flat).ok_or_else(|| {
                        CoreError::Precondition(format!(
                            "posterior missing for noisy token at flat index {flat}"
                        ))
                    })?;
                    rows.push(c.to_vec());
                }
            }
            flat += 1;
        }
    }
    TargetTable::from_rows(rows, k)
}

/// One recorded EM iteration.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EmIteration {
    /// 1-based iteration number.
    pub iteration: usize,
    /// Channel estimate after this iteration's update.
    pub theta: Vec<Vec<f64>>,
    /// Dev metric of the network after this iteration's M-step.
    pub dev_metric: f64,
    /// Fraction of originally-clean tokens whose E-step assignment differs
    /// from their observed label. Structurally 0 in clean-aware mode.
    pub clean_corruption: f64,
    /// Observed label x E-step assignment counts over originally-clean
    /// tokens (row-normalizable for inspection).
    pub clean_confusion: Vec<Vec<u64>>,
    /// Mean per-sentence training loss per M-step epoch.
    pub train_losses: Vec<f64>,
}

/// Full fit record: per-iteration snapshots plus which iterate was returned.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EmTrace {
    pub iterations: Vec<EmIteration>,
    /// Dev metric of the initial (pre-EM) model.
    pub initial_dev_metric: f64,
    /// 0 means the initial model was best; otherwise a 1-based iteration.
    pub best_iteration: usize,
}

/// Result of an EM fit: best-on-dev parameters, final channel, full trace.
#[derive(Debug, Clone)]
pub struct EmOutcome {
    pub params: ClassifierParams,
    pub channel: NoiseChannel,
    pub trace: EmTrace,
}

/// Everything visible to an iteration inspector, before the network M-step.
pub struct EmStepView<'a> {
    pub iteration: usize,
    pub theta: &'a NoiseChannel,
    pub posteriors: &'a PosteriorTable,
    pub targets: &'a TargetTable,
    /// The corpus the EM loop trains on (all-noisy view in NLNN mode).
    pub corpus: &'a LabeledCorpus,
}

pub type EmInspector<'a> = &'a mut dyn FnMut(&EmStepView<'_>);

#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum EmMode {
    /// CNLNN: provenance respected, clean targets pinned to one-hots.
    CleanAware,
    /// NLNN: every token treated as noisy.
    AllNoisy,
}

fn clean_diagnostics(
    original: &LabeledCorpus,
    posteriors: &PosteriorTable,
    k: usize,
) -> (f64, Vec<Vec<u64>>) {
    let mut confusion = vec![vec![0u64; k]; k];
    let mut clean = 0usize;
    let mut corrupted = 0usize;
    let mut flat = 0usize;
    for s in &original.sentences {
        for (&z, &prov) in s.labels.iter().zip(&s.provenance) {
            if prov == Provenance::Clean {
                clean += 1;
                let assigned = match posteriors.get(flat) {
                    Some(c) => argmax(c),
                    None => z,
                };
                confusion[z][assigned] += 1;
                if assigned != z {
                    corrupted += 1;
                }
            }
            flat += 1;
        }
    }
    let rate = if clean == 0 {
        0.0
    } else {
        corrupted as f64 / clean as f64
    };
    (rate, confusion)
}

fn dev_metric(params: &ClassifierParams, dev: &LabeledCorpus) -> Result<f64> {
    let pred = net::predict(params, dev)?;
    Ok(metrics::report(dev, &pred)?.primary())
}

/// The EM loop, generic over the trained model so the multi-task variant can
/// plug in its own M-step. `classifier_of` exposes the classifier used for
/// E-steps and dev evaluation; `m_step` trains the model against the mixed
/// targets; `reinit` replaces the model when warm starts are disabled.
pub(crate) fn fit_em_loop<M: Clone>(
    mode: EmMode,
    model0: &M,
    corpus: &LabeledCorpus,
    dev: &LabeledCorpus,
    em_cfg: &EmConfig,
    train_cfg: &TrainConfig,
    mut inspector: Option<EmInspector<'_>>,
    classifier_of: impl Fn(&M) -> &ClassifierParams,
    mut m_step: impl FnMut(&mut M, &LabeledCorpus, &TargetTable, &TrainConfig) -> Result<Vec<f64>>,
    reinit: impl Fn(&M, u64) -> Result<M>,
) -> Result<(M, NoiseChannel, EmTrace)> {
    let k = classifier_of(model0).config.n_labels;
    check_labels_in_range(corpus, k)?;
    em_cfg.validate(k)?;
    train_cfg.validate()?;

    // NLNN ignores provenance: every token passes through the channel.
    let work = match mode {
        EmMode::CleanAware => corpus.clone(),
        EmMode::AllNoisy => corpus.with_provenance(Provenance::Noisy),
    };

    let initial_dev = dev_metric(classifier_of(model0), dev)?;
    let mut model = model0.clone();
    let mut theta = init_theta(classifier_of(&model), &work, true, em_cfg.epsilon)?;
    let mut best_model = model0.clone();
    let mut best_metric = initial_dev;
    let mut best_iteration = 0usize;
    let mut since_best = 0usize;
    let mut iterations = Vec::new();

    for iteration in 1..=em_cfg.max_iters {
        let posteriors = e_step(classifier_of(&model), &work, &theta)?;
        theta = m_step_theta(&posteriors, &work, em_cfg.epsilon)?;
        let targets = build_targets(&work, &posteriors)?;
        let (clean_corruption, clean_confusion) = clean_diagnostics(corpus, &posteriors, k);
        if let Some(f) = inspector.as_mut() {
            f(&EmStepView {
                iteration,
                theta: &theta,
                posteriors: &posteriors,
                targets: &targets,
                corpus: &work,
            });
        }
        if !em_cfg.warm_start {
            model = reinit(&model, mix_seed(em_cfg.seed, 0x5EED_0000 + iteration as u64))?;
        }
        let m_cfg = TrainConfig {
            epochs: em_cfg.epochs_per_m,
            seed: mix_seed(train_cfg.seed, iteration as u64),
            ..*train_cfg
        };
        let train_losses = m_step(&mut model, &work, &targets, &m_cfg)?;
        let metric = dev_metric(classifier_of(&model), dev)?;
        iterations.push(EmIteration {
            iteration,
            theta: theta.to_nested(),
            dev_metric: metric,
            clean_corruption,
            clean_confusion,
            train_losses,
        });
        if metric > best_metric {
            best_metric = metric;
            best_model = model.clone();
            best_iteration = iteration;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= em_cfg.patience {
                break;
            }
        }
    }

    Ok((
        best_model,
        theta,
        EmTrace {
            iterations,
            initial_dev_metric: initial_dev,
            best_iteration,
        },
    ))
}

fn fit_em(
    mode: EmMode,
    params0: &ClassifierParams,
    corpus: &LabeledCorpus,
    dev: &LabeledCorpus,
    em_cfg: &EmConfig,
    train_cfg: &TrainConfig,
    inspector: Option<EmInspector<'_>>,
) -> Result<EmOutcome> {
    let (params, channel, trace) = fit_em_loop(
        mode,
        params0,
        corpus,
        dev,
        em_cfg,
        train_cfg,
        inspector,
        |p| p,
        |p, work, targets, cfg| net::train(p, work, targets, cfg),
        |p, seed| ClassifierParams::init(p.config, seed),
    )?;
    Ok(EmOutcome {
        params,
        channel,
        trace,
    })
}

/// Clean-and-noisy-label EM. `params0` is the baseline trained on the clean
/// data; the corpus must contain clean tokens. With no noisy tokens this
/// falls back to one plain training call under `train_cfg` (with a warning);
/// with no clean tokens it refuses and points at [`fit_nlnn`].
pub fn fit_cnlnn(
    params0: &ClassifierParams,
    corpus: &LabeledCorpus,
    dev: &LabeledCorpus,
    em_cfg: &EmConfig,
    train_cfg: &TrainConfig,
) -> Result<EmOutcome> {
    fit_cnlnn_with(params0, corpus, dev, em_cfg, train_cfg, None)
}

/// [`fit_cnlnn`] with a per-iteration inspector (used by tests and traces
/// that must observe posteriors/targets directly).
pub fn fit_cnlnn_with(
    params0: &ClassifierParams,
    corpus: &LabeledCorpus,
    dev: &LabeledCorpus,
    em_cfg: &EmConfig,
    train_cfg: &TrainConfig,
    inspector: Option<EmInspector<'_>>,
) -> Result<EmOutcome> {
    if corpus.n_clean() == 0 {
        return Err(CoreError::Precondition(
            "corpus has no clean tokens; use fit_nlnn for the all-noisy case".into(),
        ));
    }
    if corpus.n_noisy() == 0 {
        log::warn!("corpus has no noisy tokens; falling back to plain training");
        let initial_dev = dev_metric(params0, dev)?;
        let mut params = params0.clone();
        let targets = TargetTable::one_hot(corpus);
        let train_losses = net::train(&mut params, corpus, &targets, train_cfg)?;
        let metric = dev_metric(&params, dev)?;
        let k = corpus.label_vocab().len();
        let (rate, confusion) = clean_diagnostics(corpus, &PosteriorTable::empty(), k);
        let improved = metric > initial_dev;
        return Ok(EmOutcome {
            params: if improved { params } else { params0.clone() },
            channel: NoiseChannel::identity(k),
            trace: EmTrace {
                iterations: vec![EmIteration {
                    iteration: 1,
                    theta: NoiseChannel::identity(k).to_nested(),
                    dev_metric: metric,
                    clean_corruption: rate,
                    clean_confusion: confusion,
                    train_losses,
                }],
                initial_dev_metric: initial_dev,
                best_iteration: usize::from(improved),
            },
        });
    }
    fit_em(
        EmMode::CleanAware,
        params0,
        corpus,
        dev,
        em_cfg,
        train_cfg,
        inspector,
    )
}

/// All-noisy EM (the NLNN baseline): provenance is ignored and every token's
/// label passes through the channel. The trace's clean diagnostics still use
/// the *original* provenance so the drift of clean tokens stays observable.
pub fn fit_nlnn(
    params0: &ClassifierParams,
    corpus: &LabeledCorpus,
    dev: &LabeledCorpus,
    em_cfg: &EmConfig,
    train_cfg: &TrainConfig,
) -> Result<EmOutcome> {
    fit_nlnn_with(params0, corpus, dev, em_cfg, train_cfg, None)
}

pub fn fit_nlnn_with(
    params0: &ClassifierParams,
    corpus: &LabeledCorpus,
    dev: &LabeledCorpus,
    em_cfg: &EmConfig,
    train_cfg: &TrainConfig,
    inspector: Option<EmInspector<'_>>,
) -> Result<EmOutcome> {
    if corpus.n() == 0 {
        return Err(CoreError::Precondition("corpus is empty".into()));
    }
    fit_em(
        EmMode::AllNoisy,
        params0,
        corpus,
        dev,
        em_cfg,
        train_cfg,
        inspector,
    )
}

#[cfg(test)]
mod tests;
