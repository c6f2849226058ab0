//! Multi-task training: a shared embedding and first encoder layer feed both
//! the main tagging head and a small auxiliary head over its own label set.
//!
//! The auxiliary task is implicit noise handling: its reliable labels keep
//! the shared representation anchored while the main task trains on
//! possibly-noisy targets. Sentences from the two tasks alternate under a
//! ratio-controlled seeded shuffle. The main head accepts soft targets, so
//! the trainer composes with the EM fits (MTL+NLNN, MTL+CNLNN) unchanged.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::{LabeledCorpus, Sentence};
use crate::em::{self, EmConfig, EmInspector, EmTrace, NoiseChannel};
use crate::error::{CoreError, Result};
use crate::matrix::axpy;
use crate::net::{
    self, backward_with, clip_global_norm, forward_with, loss_from_cache, ClassifierParams, Layer,
    TargetTable, TrainConfig,
};
use crate::rngutil::{mix_seed, rng_from_seed, shuffled_indices};

/// Shared trunk plus two heads. `base` is a complete classifier (embedding,
/// encoder, main softmax); `aux_head` is a softmax over the auxiliary label
/// set hanging off the *first* encoder layer, so `base`'s upper layers and
/// main head stay exclusive to the main task.
#[derive(Debug, Clone, PartialEq)]
pub struct MtlModel {
    pub base: ClassifierParams,
    pub aux_head: Layer,
}

impl MtlModel {
    /// Fresh model: seeded base classifier plus a seeded auxiliary head for
    /// `k_aux` labels.
    pub fn init(config: net::NetConfig, k_aux: usize, seed: u64) -> Result<Self> {
        let base = ClassifierParams::init(config, seed)?;
        Self::from_base(base, k_aux, mix_seed(seed, 0xA0_07))
    }

    /// Wrap an existing classifier (e.g. the trained baseline) with a fresh
    /// auxiliary head.
    pub fn from_base(base: ClassifierParams, k_aux: usize, seed: u64) -> Result<Self> {
        if k_aux < 2 {
            return Err(CoreError::Shape(format!("need k_aux >= 2, got {k_aux}")));
        }
        let mut rng = rng_from_seed(seed);
        let aux_head = Layer::init(k_aux, base.config.first_layer_output_dim(), &mut rng);
        Ok(MtlModel { base, aux_head })
    }

    pub fn k_aux(&self) -> usize {
        self.aux_head.b.len()
    }
}

/// Per-epoch mean losses for both tasks.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MtlTrainTrace {
    pub main_losses: Vec<f64>,
    pub aux_losses: Vec<f64>,
}

/// Result of a multi-task EM fit.
#[derive(Debug, Clone)]
pub struct MtlEmOutcome {
    pub model: MtlModel,
    pub channel: NoiseChannel,
    pub trace: EmTrace,
}

fn one_main_step(
    model: &mut MtlModel,
    sentence: &Sentence,
    rows: &[Vec<f64>],
    lr: f64,
    cfg: &TrainConfig,
    rng: &mut impl rand::Rng,
) -> Result<f64> {
    let cache = forward_with(
        &model.base,
        &model.base.head,
        &sentence.token_ids,
        model.base.config.depth,
        Some((cfg.dropout, rng)),
    );
    let loss = loss_from_cache(&cache, rows);
    if !loss.is_finite() {
        return Err(CoreError::Diverged(format!("non-finite main-task loss {loss}")));
    }
    let mut grads = model.base.zeros_like();
    let mut head_grad = Layer::zeros(model.base.head.w.rows(), model.base.head.w.cols());
    backward_with(
        &model.base,
        &model.base.head,
        &sentence.token_ids,
        &cache,
        rows,
        &mut grads,
        &mut head_grad,
    );
    grads.head = head_grad;
    clip_global_norm(&mut grads.blocks_mut(), cfg.clip_norm);
    model.base.axpy(-lr, &grads);
    Ok(loss)
}

fn one_aux_step(
    model: &mut MtlModel,
    sentence: &Sentence,
    lr: f64,
    cfg: &TrainConfig,
    rng: &mut impl rand::Rng,
) -> Result<f64> {
    let k_aux = model.k_aux();
    let rows: Vec<Vec<f64>> = sentence
        .labels
        .iter()
        .map(|&l| {
            let mut row = vec![0.0; k_aux];
            row[l] = 1.0;
            row
        })
        .collect();
    // depth limit 1: only the shared trunk (embedding + first layer) is on
    // the auxiliary path
    let cache = forward_with(
        &model.base,
        &model.aux_head,
        &sentence.token_ids,
        1,
        Some((cfg.dropout, rng)),
    );
    let loss = loss_from_cache(&cache, &rows);
    if !loss.is_finite() {
        return Err(CoreError::Diverged(format!("non-finite aux-task loss {loss}")));
    }
    let mut grads = model.base.zeros_like();
    let mut aux_grad = Layer::zeros(k_aux, model.aux_head.w.cols());
    backward_with(
        &model.base,
        &model.aux_head,
        &sentence.token_ids,
        &cache,
        &rows,
        &mut grads,
        &mut aux_grad,
    );
    {
        let mut blocks = grads.blocks_mut();
        blocks.push(aux_grad.w.data_mut());
        blocks.push(&mut aux_grad.b);
        clip_global_norm(&mut blocks, cfg.clip_norm);
    }
    model.base.axpy(-lr, &grads);
    axpy(-lr, aux_grad.w.data(), model.aux_head.w.data_mut());
    axpy(-lr, &aux_grad.b, &mut model.aux_head.b);
    Ok(loss)
}

#[derive(Clone, Copy)]
enum DeckItem {
    Main(usize),
    Aux(usize),
}

/// Joint SGD over the main corpus (soft or hard `targets`) and an auxiliary
/// corpus with its own label set, alternating by sentence.
///
/// `aux_ratio` is the number of auxiliary sentences drawn per main sentence
/// and epoch (1.0 = balanced exposure). With no auxiliary data or a ratio of
/// zero this is exactly [`net::train`] on `model.base` (bit-identical given
/// equal seeds); the auxiliary head is then untouched.
pub fn train_mtl(
    model: &mut MtlModel,
    corpus: &LabeledCorpus,
    targets: &TargetTable,
    aux: Option<&LabeledCorpus>,
    aux_ratio: f64,
    cfg: &TrainConfig,
) -> Result<MtlTrainTrace> {
    if !(aux_ratio >= 0.0) {
        return Err(CoreError::Precondition(format!(
            "aux_ratio must be >= 0, got {aux_ratio}"
        )));
    }
    let aux = match aux {
        Some(a) if a.sentences.is_empty() => {
            log::warn!("auxiliary corpus is empty; training the main task only");
            None
        }
        other => other,
    };
    let aux = if aux_ratio == 0.0 { None } else { aux };
    let Some(aux) = aux else {
        let main_losses = net::train(&mut model.base, corpus, targets, cfg)?;
        return Ok(MtlTrainTrace {
            main_losses,
            aux_losses: Vec::new(),
        });
    };

    if *aux.token_vocab() != *corpus.token_vocab() {
        return Err(CoreError::VocabMismatch(
            "auxiliary corpus must share the token vocabulary (shared embedding)".into(),
        ));
    }
    if aux.label_vocab().len() != model.k_aux() {
        return Err(CoreError::Shape(format!(
            "auxiliary corpus has {} labels but the aux head expects {}",
            aux.label_vocab().len(),
            model.k_aux()
        )));
    }
    cfg.validate()?;
    if targets.len() != corpus.n() || targets.k() != model.base.config.n_labels {
        return Err(CoreError::Shape("target table does not match the main corpus".into()));
    }
    targets.validate()?;

    let offsets = corpus.token_offsets();
    let n_main = corpus.sentences.len();
    let n_aux = aux.sentences.len();
    let aux_per_epoch = (aux_ratio * n_main as f64).round() as usize;
    let mut rng = rng_from_seed(cfg.seed);
    let mut aux_queue: Vec<usize> = Vec::new();
    let mut lr = cfg.lr;
    let mut main_losses = Vec::with_capacity(cfg.epochs);
    let mut aux_losses = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        let mut deck: Vec<DeckItem> = (0..n_main).map(DeckItem::Main).collect();
        for _ in 0..aux_per_epoch {
            if aux_queue.is_empty() {
                aux_queue = shuffled_indices(&mut rng, n_aux);
            }
            deck.push(DeckItem::Aux(aux_queue.pop().expect("refilled above")));
        }
        let order = shuffled_indices(&mut rng, deck.len());
        let mut main_loss = 0.0;
        let mut aux_loss = 0.0;
        for &slot in &order {
            match deck[slot] {
                DeckItem::Main(si) => {
                    let s = &corpus.sentences[si];
                    let rows = &targets.rows()[offsets[si]..offsets[si] + s.len()];
                    main_loss += one_main_step(model, s, rows, lr, cfg, &mut rng)?;
                }
                DeckItem::Aux(si) => {
                    aux_loss += one_aux_step(model, &aux.sentences[si], lr, cfg, &mut rng)?;
                }
            }
        }
        main_losses.push(main_loss / n_main.max(1) as f64);
        aux_losses.push(if aux_per_epoch == 0 {
            0.0
        } else {
            aux_loss / aux_per_epoch as f64
        });
        lr *= cfg.lr_decay;
    }
    Ok(MtlTrainTrace {
        main_losses,
        aux_losses,
    })
}

fn fit_mtl_em(
    mode: em::EmMode,
    model0: &MtlModel,
    corpus: &LabeledCorpus,
    aux: Option<&LabeledCorpus>,
    dev: &LabeledCorpus,
    em_cfg: &EmConfig,
    train_cfg: &TrainConfig,
    aux_ratio: f64,
    inspector: Option<EmInspector<'_>>,
) -> Result<MtlEmOutcome> {
    let k_aux = model0.k_aux();
    let (model, channel, trace) = em::fit_em_loop(
        mode,
        model0,
        corpus,
        dev,
        em_cfg,
        train_cfg,
        inspector,
        |m: &MtlModel| &m.base,
        |m, work, targets, cfg| train_mtl(m, work, targets, aux, aux_ratio, cfg).map(|t| t.main_losses),
        |m, seed| MtlModel::init(m.base.config, k_aux, seed),
    )?;
    Ok(MtlEmOutcome {
        model,
        channel,
        trace,
    })
}

/// CNLNN EM where each network M-step is a [`train_mtl`] call. Guards match
/// [`em::fit_cnlnn`]; with an empty auxiliary corpus the trace equals the
/// plain CNLNN trace given equal seeds.
pub fn fit_mtl_cnlnn(
    model0: &MtlModel,
    corpus: &LabeledCorpus,
    aux: Option<&LabeledCorpus>,
    dev: &LabeledCorpus,
    em_cfg: &EmConfig,
    train_cfg: &TrainConfig,
    aux_ratio: f64,
) -> Result<MtlEmOutcome> {
    fit_mtl_cnlnn_with(model0, corpus, aux, dev, em_cfg, train_cfg, aux_ratio, None)
}

#[allow(clippy::too_many_arguments)]
pub fn fit_mtl_cnlnn_with(
    model0: &MtlModel,
    corpus: &LabeledCorpus,
    aux: Option<&LabeledCorpus>,
    dev: &LabeledCorpus,
    em_cfg: &EmConfig,
    train_cfg: &TrainConfig,
    aux_ratio: f64,
    inspector: Option<EmInspector<'_>>,
) -> Result<MtlEmOutcome> {
    if corpus.n_clean() == 0 {
        return Err(CoreError::Precondition(
            "corpus has no clean tokens; use fit_mtl_nlnn for the all-noisy case".into(),
        ));
    }
    if corpus.n_noisy() == 0 {
        log::warn!("corpus has no noisy tokens; falling back to plain multi-task training");
        let k = corpus.label_vocab().len();
        let metric_of = |params: &ClassifierParams| -> Result<f64> {
            let pred = net::predict(params, dev)?;
            Ok(crate::metrics::report(dev, &pred)?.primary())
        };
        let initial_dev_metric = metric_of(&model0.base)?;
        let mut model = model0.clone();
        let targets = TargetTable::one_hot(corpus);
        let tr = train_mtl(&mut model, corpus, &targets, aux, aux_ratio, train_cfg)?;
        let dev_metric = metric_of(&model.base)?;
        let improved = dev_metric > initial_dev_metric;
        return Ok(MtlEmOutcome {
            model: if improved { model } else { model0.clone() },
            channel: NoiseChannel::identity(k),
            trace: EmTrace {
                iterations: vec![em::EmIteration {
                    iteration: 1,
                    theta: NoiseChannel::identity(k).to_nested(),
                    dev_metric,
                    clean_corruption: 0.0,
                    clean_confusion: vec![vec![0; k]; k],
                    train_losses: tr.main_losses,
                }],
                initial_dev_metric,
                best_iteration: usize::from(improved),
            },
        });
    }
    fit_mtl_em(
        em::EmMode::CleanAware,
        model0,
        corpus,
        aux,
        dev,
        em_cfg,
        train_cfg,
        aux_ratio,
        inspector,
    )
}

/// All-noisy EM with multi-task M-steps.
pub fn fit_mtl_nlnn(
    model0: &MtlModel,
    corpus: &LabeledCorpus,
    aux: Option<&LabeledCorpus>,
    dev: &LabeledCorpus,
    em_cfg: &EmConfig,
    train_cfg: &TrainConfig,
    aux_ratio: f64,
) -> Result<MtlEmOutcome> {
    if corpus.n() == 0 {
        return Err(CoreError::Precondition("corpus is empty".into()));
    }
    fit_mtl_em(
        em::EmMode::AllNoisy,
        model0,
        corpus,
        aux,
        dev,
        em_cfg,
        train_cfg,
        aux_ratio,
        None,
    )
}

#[cfg(test)]
mod tests;
