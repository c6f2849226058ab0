use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::*;
use crate::corpus::{LabelVocab, Provenance, TokenVocab};
use crate::net::{EncoderKind, EncoderParams, NetConfig};
use crate::rngutil::rng_from_seed;
use crate::synth;

fn vocabs(v: usize, k: usize) -> (Arc<TokenVocab>, Arc<LabelVocab>) {
    let mut tv = TokenVocab::new();
    for t in 0..v.saturating_sub(1) {
        tv.intern(&format!("t{t}"));
    }
    let lv = LabelVocab::new((0..k).map(|i| format!("L{i}"))).unwrap();
    (Arc::new(tv), Arc::new(lv))
}

fn random_corpus(rng: &mut impl Rng, v: usize, k: usize, n_sentences: usize) -> LabeledCorpus {
    let (tv, lv) = vocabs(v, k);
    let sentences = (0..n_sentences)
        .map(|_| {
            let len = rng.gen_range(2..6);
            let tokens = (0..len).map(|_| rng.gen_range(0..v)).collect();
            let labels = (0..len).map(|_| rng.gen_range(0..k)).collect();
            Sentence::uniform(tokens, labels, Provenance::Clean).unwrap()
        })
        .collect();
    LabeledCorpus::new(sentences, tv, lv).unwrap()
}

fn deep_config() -> NetConfig {
    NetConfig::new(8, 3)
        .with_embed_dim(3)
        .with_encoder(EncoderKind::WindowMlp { radius: 1, hidden: 4 })
        .with_depth(2)
}

#[test]
fn ratio_zero_is_bit_identical_to_plain_training() {
    let mut rng = rng_from_seed(5);
    let corpus = random_corpus(&mut rng, 8, 3, 10);
    let aux = random_corpus(&mut rng, 8, 3, 6);
    let aux = synth::coarsen_labels(&aux, &[0, 0, 1]).unwrap();
    let targets = TargetTable::one_hot(&corpus);
    let cfg = TrainConfig {
        epochs: 3,
        seed: 9,
        ..TrainConfig::default()
    };

    let mut model = MtlModel::init(deep_config(), 2, 4).unwrap();
    let aux_head_before = model.aux_head.clone();
    let mut plain = model.base.clone();
    train_mtl(&mut model, &corpus, &targets, Some(&aux), 0.0, &cfg).unwrap();
    net::train(&mut plain, &corpus, &targets, &cfg).unwrap();
    assert_eq!(model.base, plain);
    assert_eq!(model.aux_head, aux_head_before);
}

#[test]
fn empty_aux_corpus_degenerates_to_plain_training() {
    let mut rng = rng_from_seed(6);
    let corpus = random_corpus(&mut rng, 8, 3, 8);
    let (tv, lv) = (corpus.token_vocab().clone(), corpus.label_vocab().clone());
    let empty = LabeledCorpus::new(Vec::new(), tv, lv).unwrap();
    let targets = TargetTable::one_hot(&corpus);
    let cfg = TrainConfig {
        epochs: 2,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut model = MtlModel::init(deep_config(), 2, 7).unwrap();
    let mut plain = model.base.clone();
    let trace = train_mtl(&mut model, &corpus, &targets, Some(&empty), 1.0, &cfg).unwrap();
    net::train(&mut plain, &corpus, &targets, &cfg).unwrap();
    assert_eq!(model.base, plain);
    assert!(trace.aux_losses.is_empty());
}

#[test]
fn aux_step_touches_only_the_shared_trunk_and_aux_head() {
    let mut rng = rng_from_seed(7);
    let corpus = random_corpus(&mut rng, 8, 2, 1);
    let aux = synth::coarsen_labels(&corpus, &[0, 1]).unwrap();
    let cfg = NetConfig::new(8, 2)
        .with_embed_dim(3)
        .with_encoder(EncoderKind::WindowMlp { radius: 1, hidden: 4 })
        .with_depth(2);
    let mut model = MtlModel::init(cfg, 2, 11).unwrap();
    let before = model.clone();
    let train_cfg = TrainConfig {
        dropout: 0.0,
        ..TrainConfig::default()
    };
    let mut step_rng = rng_from_seed(1);
    one_aux_step(&mut model, &aux.sentences[0], 0.1, &train_cfg, &mut step_rng).unwrap();

    // main head untouched, upper encoder layer untouched
    assert_eq!(model.base.head, before.base.head);
    match (&model.base.encoder, &before.base.encoder) {
        (EncoderParams::WindowMlp { layers: after }, EncoderParams::WindowMlp { layers: b4 }) => {
            assert_eq!(after[1], b4[1], "second layer is main-exclusive");
            assert_ne!(after[0], b4[0], "first layer is shared");
        }
        _ => unreachable!(),
    }
    assert_ne!(model.base.embedding, before.base.embedding);
    assert_ne!(model.aux_head, before.aux_head);
}

#[test]
fn main_step_leaves_aux_head_untouched() {
    let mut rng = rng_from_seed(8);
    let corpus = random_corpus(&mut rng, 8, 3, 1);
    let mut model = MtlModel::init(deep_config(), 2, 13).unwrap();
    let before_aux = model.aux_head.clone();
    let targets = TargetTable::one_hot(&corpus);
    let train_cfg = TrainConfig::default();
    let mut step_rng = rng_from_seed(2);
    let rows = &targets.rows()[0..corpus.sentences[0].len()];
    one_main_step(&mut model, &corpus.sentences[0], rows, 0.1, &train_cfg, &mut step_rng).unwrap();
    assert_eq!(model.aux_head, before_aux);
    assert_ne!(model.base.head, MtlModel::init(deep_config(), 2, 13).unwrap().base.head);
}

#[test]
fn both_tasks_move_shared_parameters() {
    let mut rng = rng_from_seed(9);
    let corpus = random_corpus(&mut rng, 8, 3, 6);
    let aux = synth::coarsen_labels(&random_corpus(&mut rng, 8, 3, 6), &[0, 0, 1]).unwrap();
    let targets = TargetTable::one_hot(&corpus);
    let cfg = TrainConfig {
        epochs: 2,
        seed: 31,
        ..TrainConfig::default()
    };
    let mut model = MtlModel::init(deep_config(), 2, 17).unwrap();
    let before = model.clone();
    let trace = train_mtl(&mut model, &corpus, &targets, Some(&aux), 1.0, &cfg).unwrap();
    assert_eq!(trace.main_losses.len(), 2);
    assert_eq!(trace.aux_losses.len(), 2);
    assert_ne!(model.base.embedding, before.base.embedding);
    assert_ne!(model.aux_head, before.aux_head);
    assert_ne!(model.base.head, before.base.head);
}

#[test]
fn train_mtl_is_deterministic() {
    let mut rng = rng_from_seed(10);
    let corpus = random_corpus(&mut rng, 8, 3, 8);
    let aux = synth::coarsen_labels(&random_corpus(&mut rng, 8, 3, 5), &[0, 1, 1]).unwrap();
    let targets = TargetTable::one_hot(&corpus);
    let cfg = TrainConfig {
        epochs: 3,
        seed: 41,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = MtlModel::init(deep_config(), 2, 19).unwrap();
        train_mtl(&mut m, &corpus, &targets, Some(&aux), 1.5, &cfg).unwrap();
        m
    };
    assert_eq!(run(), run());
}

#[test]
fn vocabulary_mismatch_is_rejected() {
    let mut rng = rng_from_seed(11);
    let corpus = random_corpus(&mut rng, 8, 3, 4);
    let foreign = {
        let mut tv = TokenVocab::new();
        tv.intern("zzz");
        let lv = LabelVocab::new(["A0", "A1"]).unwrap();
        LabeledCorpus::new(
            vec![Sentence::uniform(vec![1], vec![0], Provenance::Clean).unwrap()],
            Arc::new(tv),
            Arc::new(lv),
        )
        .unwrap()
    };
    let targets = TargetTable::one_hot(&corpus);
    let mut model = MtlModel::init(deep_config(), 2, 23).unwrap();
    let err = train_mtl(&mut model, &corpus, &targets, Some(&foreign), 1.0, &TrainConfig::default());
    assert!(matches!(err, Err(CoreError::VocabMismatch(_))));
}

#[test]
fn mtl_cnlnn_with_empty_aux_equals_plain_cnlnn() {
    let mut rng = rng_from_seed(12);
    let k = 3;
    let clean = random_corpus(&mut rng, 8, k, 6);
    let noisy = random_corpus(&mut rng, 8, k, 6).with_provenance(Provenance::Noisy);
    let corpus = clean.concat(&noisy).unwrap();
    let dev = random_corpus(&mut rng, 8, k, 4);
    let cfg = deep_config();
    let base = ClassifierParams::init(cfg, 29).unwrap();
    let model0 = MtlModel::from_base(base.clone(), 2, 31).unwrap();
    let em_cfg = EmConfig {
        max_iters: 2,
        epochs_per_m: 2,
        ..EmConfig::default()
    };
    let train_cfg = TrainConfig {
        seed: 43,
        ..TrainConfig::default()
    };
    let mtl_out = fit_mtl_cnlnn(&model0, &corpus, None, &dev, &em_cfg, &train_cfg, 1.0).unwrap();
    let plain_out = em::fit_cnlnn(&base, &corpus, &dev, &em_cfg, &train_cfg).unwrap();
    assert_eq!(mtl_out.trace, plain_out.trace);
    assert_eq!(mtl_out.model.base, plain_out.params);
    assert_eq!(mtl_out.channel, plain_out.channel);
}

#[test]
fn mtl_cnlnn_guards_match_cnlnn() {
    let mut rng = rng_from_seed(13);
    let noisy = random_corpus(&mut rng, 8, 3, 5).with_provenance(Provenance::Noisy);
    let dev = random_corpus(&mut rng, 8, 3, 3);
    let model0 = MtlModel::init(deep_config(), 2, 37).unwrap();
    let err = fit_mtl_cnlnn(
        &model0,
        &noisy,
        None,
        &dev,
        &EmConfig::default(),
        &TrainConfig::default(),
        1.0,
    );
    assert!(matches!(err, Err(CoreError::Precondition(_))));
}
