//! Corpus data model: token/label vocabularies, sentences with per-token
//! clean/noisy provenance, and whole-sentence corpus surgery.
//!
//! A corpus is immutable after construction and cheap to clone (vocabularies
//! are shared behind `Arc`), so it can be handed to parallel experiment
//! workers freely.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;
use alloc::{format, vec};

use crate::error::{CoreError, Result};

/// Reserved unknown-token string; always present at index 0.
pub const UNK_TOKEN: &str = "<unk>";

/// Ordered label inventory. Index <-> string is a bijection, `k >= 2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVocab {
    labels: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl LabelVocab {
    pub fn new<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() < 2 {
            return Err(CoreError::Vocab(format!(
                "need at least 2 labels, got {}",
                labels.len()
            )));
        }
        let mut index = BTreeMap::new();
        for (i, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), i).is_some() {
                return Err(CoreError::Vocab(format!("duplicate label {l:?}")));
            }
        }
        Ok(LabelVocab { labels, index })
    }

    /// Number of labels `k`.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// True when every label is `O` or `B-X`/`I-X`; span metrics apply then.
    pub fn is_bio(&self) -> bool {
        self.labels
            .iter()
            .all(|l| l == "O" || l.starts_with("B-") || l.starts_with("I-"))
    }
}

/// Token inventory with a reserved unknown entry at index 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Default for TokenVocab {
    fn default() -> Self {
        Self::new()
    }
}

impl TokenVocab {
    pub fn new() -> Self {
        let mut v = TokenVocab {
            tokens: Vec::new(),
            index: BTreeMap::new(),
        };
        v.intern(UNK_TOKEN);
        v
    }

    pub fn unk_id(&self) -> usize {
        0
    }

    /// Id of `token`, inserting it if unseen.
    pub fn intern(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or the unknown id for out-of-vocabulary tokens.
    pub fn get_or_unk(&self, token: &str) -> usize {
        self.get(token).unwrap_or(0)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Whether a token's observed label is trusted (human/gold) or came from an
/// unreliable source such as self-labeling or a noise channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Provenance {
    Clean,
    Noisy,
}

/// One sentence: token ids, observed label ids, per-token provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub token_ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub provenance: Vec<Provenance>,
}

impl Sentence {
    pub fn new(token_ids: Vec<usize>, labels: Vec<usize>, provenance: Vec<Provenance>) -> Result<Self> {
        if token_ids.is_empty() {
            return Err(CoreError::Corpus("empty sentence".into()));
        }
        if token_ids.len() != labels.len() || token_ids.len() != provenance.len() {
            return Err(CoreError::Corpus(format!(
                "sentence field lengths differ: {} tokens, {} labels, {} provenance flags",
                token_ids.len(),
                labels.len(),
                provenance.len()
            )));
        }
        Ok(Sentence {
            token_ids,
            labels,
            provenance,
        })
    }

    /// Convenience constructor with one provenance flag for the whole sentence.
    pub fn uniform(token_ids: Vec<usize>, labels: Vec<usize>, provenance: Provenance) -> Result<Self> {
        let n = token_ids.len();
        Sentence::new(token_ids, labels, vec![provenance; n])
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Sentences plus the shared vocabularies they are encoded against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledCorpus {
    pub sentences: Vec<Sentence>,
    token_vocab: Arc<TokenVocab>,
    label_vocab: Arc<LabelVocab>,
}

impl LabeledCorpus {
    pub fn new(
        sentences: Vec<Sentence>,
        token_vocab: Arc<TokenVocab>,
        label_vocab: Arc<LabelVocab>,
    ) -> Result<Self> {
        let k = label_vocab.len();
        let v = token_vocab.len();
        for (si, s) in sentences.iter().enumerate() {
            if let Some(&bad) = s.labels.iter().find(|&&l| l >= k) {
                return Err(CoreError::Corpus(format!(
                    "sentence {si}: label id {bad} out of range (k={k})"
                )));
            }
            if let Some(&bad) = s.token_ids.iter().find(|&&t| t >= v) {
                return Err(CoreError::Corpus(format!(
                    "sentence {si}: token id {bad} out of range (|V|={v})"
                )));
            }
        }
        Ok(LabeledCorpus {
            sentences,
            token_vocab,
            label_vocab,
        })
    }

    pub fn token_vocab(&self) -> &Arc<TokenVocab> {
        &self.token_vocab
    }

    pub fn label_vocab(&self) -> &Arc<LabelVocab> {
        &self.label_vocab
    }

    /// Total token count `n`.
    pub fn n(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }

    pub fn n_clean(&self) -> usize {
        self.count_provenance(Provenance::Clean)
    }

    pub fn n_noisy(&self) -> usize {
        self.count_provenance(Provenance::Noisy)
    }

    fn count_provenance(&self, p: Provenance) -> usize {
        self.sentences
            .iter()
            .map(|s| s.provenance.iter().filter(|&&q| q == p).count())
            .sum()
    }

    /// Flat index of each sentence's first token, in corpus order.
    pub fn token_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.sentences.len());
        let mut acc = 0;
        for s in &self.sentences {
            offsets.push(acc);
            acc += s.len();
        }
        offsets
    }

    /// Keeps whole sentences in order until adding the next one would exceed
    /// `budget` tokens. The first sentence is always kept, with a warning if
    /// it alone exceeds the budget.
    pub fn truncate_tokens(&self, budget: usize) -> Result<LabeledCorpus> {
        if budget == 0 {
            return Err(CoreError::Precondition("truncation budget must be >= 1".into()));
        }
        let mut kept = Vec::new();
        let mut used = 0;
        for s in &self.sentences {
            if kept.is_empty() {
                if s.len() > budget {
                    log::warn!(
                        "first sentence ({} tokens) exceeds truncation budget {budget}; keeping it",
                        s.len()
                    );
                }
                used += s.len();
                kept.push(s.clone());
                continue;
            }
            if used + s.len() > budget {
                break;
            }
            used += s.len();
            kept.push(s.clone());
        }
        if kept.is_empty() {
            return Err(CoreError::Precondition("cannot truncate an empty corpus".into()));
        }
        LabeledCorpus::new(kept, self.token_vocab.clone(), self.label_vocab.clone())
    }

    /// Clean corpus followed by noisy corpus; provenance flags are preserved.
    pub fn concat(&self, other: &LabeledCorpus) -> Result<LabeledCorpus> {
        if *self.token_vocab != *other.token_vocab {
            return Err(CoreError::VocabMismatch(
                "token vocabularies differ between corpora".into(),
            ));
        }
        if *self.label_vocab != *other.label_vocab {
            return Err(CoreError::VocabMismatch(
                "label vocabularies differ between corpora".into(),
            ));
        }
        let mut sentences = self.sentences.clone();
        sentences.extend(other.sentences.iter().cloned());
        LabeledCorpus::new(sentences, self.token_vocab.clone(), self.label_vocab.clone())
    }

    /// Copy of the corpus with every token flagged with `p`.
    pub fn with_provenance(&self, p: Provenance) -> LabeledCorpus {
        let sentences = self
            .sentences
            .iter()
            .map(|s| Sentence {
                token_ids: s.token_ids.clone(),
                labels: s.labels.clone(),
                provenance: vec![p; s.len()],
            })
            .collect();
        LabeledCorpus {
            sentences,
            token_vocab: self.token_vocab.clone(),
            label_vocab: self.label_vocab.clone(),
        }
    }

    /// Copy of the corpus with per-sentence labels replaced by `labels`.
    pub fn with_labels(&self, labels: &[Vec<usize>], p: Provenance) -> Result<LabeledCorpus> {
        if labels.len() != self.sentences.len() {
            return Err(CoreError::Shape(format!(
                "label rows ({}) != sentences ({})",
                labels.len(),
                self.sentences.len()
            )));
        }
        let mut sentences = Vec::with_capacity(self.sentences.len());
        for (s, row) in self.sentences.iter().zip(labels) {
            if row.len() != s.len() {
                return Err(CoreError::Shape("label row length != sentence length".into()));
            }
            sentences.push(Sentence {
                token_ids: s.token_ids.clone(),
                labels: row.clone(),
                provenance: vec![p; s.len()],
            });
        }
        LabeledCorpus::new(sentences, self.token_vocab.clone(), self.label_vocab.clone())
    }

    /// Iterate `(flat_index, sentence_index, position)` over all tokens.
    pub fn flat_positions(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.sentences
            .iter()
            .enumerate()
            .flat_map(|(si, s)| (0..s.len()).map(move |pos| (si, pos)))
            .enumerate()
            .map(|(flat, (si, pos))| (flat, si, pos))
    }

    /// Per-sentence gold label rows (a plain copy, for diagnostics).
    pub fn label_rows(&self) -> Vec<Vec<usize>> {
        self.sentences.iter().map(|s| s.labels.clone()).collect()
    }
}
