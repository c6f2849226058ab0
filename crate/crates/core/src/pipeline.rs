//! Self-training orchestration: train a baseline on the clean data, label
//! the pool with it, assemble the clean+noisy training set at the requested
//! size, hand it to the chosen handler, and score the result.
//!
//! Gold pool labels never reach a training path. They ride along in
//! [`SelfLabeled::gold_labels`] for diagnostics (and as the noise source in
//! channel mode, where the harness corrupts known-true labels on purpose),
//! but the corpus a handler trains on carries only predicted or injected
//! labels.
//!
//! Every stage derives its randomness from the run seed, so a run is a pure
//! function of (inputs, spec, seed).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use core::fmt;
use core::str::FromStr;

use crate::corpus::{LabeledCorpus, Provenance};
use crate::em::{self, EmConfig, EmTrace};
use crate::error::{CoreError, Result};
use crate::metrics::{self, MetricReport};
use crate::mtl::{self, MtlModel};
use crate::net::{self, ClassifierParams, NetConfig, TargetTable, TrainConfig};
use crate::rngutil::mix_seed;
use crate::synth::{self, TrueChannel};

const SALT_INIT: u64 = 0x01;
const SALT_EPOCH: u64 = 0x1000;
const SALT_EM_TRAIN: u64 = 0x02;
const SALT_EM: u64 = 0x03;
const SALT_NOISE: u64 = 0x04;
const SALT_AUX_HEAD: u64 = 0x05;

/// The model family applied after self-labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HandlerChoice {
    Nn,
    Nlnn,
    Cnlnn,
    Mtl,
    MtlNlnn,
    MtlCnlnn,
}

impl HandlerChoice {
    pub const ALL: [HandlerChoice; 6] = [
        HandlerChoice::Nn,
        HandlerChoice::Nlnn,
        HandlerChoice::Cnlnn,
        HandlerChoice::Mtl,
        HandlerChoice::MtlNlnn,
        HandlerChoice::MtlCnlnn,
    ];

    pub fn uses_aux(self) -> bool {
        matches!(
            self,
            HandlerChoice::Mtl | HandlerChoice::MtlNlnn | HandlerChoice::MtlCnlnn
        )
    }

    pub fn uses_em(self) -> bool {
        matches!(
            self,
            HandlerChoice::Nlnn
                | HandlerChoice::Cnlnn
                | HandlerChoice::MtlNlnn
                | HandlerChoice::MtlCnlnn
        )
    }
}

impl fmt::Display for HandlerChoice {
    fmt::Display::fmt works
}
