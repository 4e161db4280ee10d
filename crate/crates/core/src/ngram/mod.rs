//! Back-off n-gram language models.
//!
//! Probabilities are stored in ARPA form: for every listed n-gram a log10
//! probability and, for n-grams that serve as contexts, a log10 back-off
//! weight. Queries use the longest listed history and add back-off weights
//! for every shortening step.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

mod train;

pub use train::{train_ngram, Smoothing, TrainWarning, ADD_K_FALLBACK};

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

/// log10 probability written for `<s>`, which is never predicted.
pub const ARPA_LOG_ZERO: f64 = -99.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NGramError {
    #[error("the training corpus is empty")]
    EmptyCorpus,
    #[error("order must be at least 1")]
    ZeroOrder,
    #[error("{order}-gram {ngram:?} listed twice")]
    Duplicate { order: usize, ngram: Vec<String> },
    #[error("{order}-gram {ngram:?} has no {lower}-gram context entry", lower = order - 1)]
    DanglingContext { order: usize, ngram: Vec<String> },
    #[error("n-gram {ngram:?} does not fit a model of order {model_order}")]
    BadOrder { ngram: Vec<String>, model_order: usize },
    #[error("non-finite value for {ngram:?}")]
    NonFinite { ngram: Vec<String> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NGramEntry {
    pub log10_prob: f64,
    /// Zero (weight one) when the n-gram is never a context.
    pub log10_backoff: f64,
}

/// A word-level back-off model with `<s>`, `</s>` and usually `<unk>`.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    order: usize,
    words: Vec<String>,
    ids: BTreeMap<String, u32>,
    /// `tables[n - 1]` holds the n-grams.
    tables: Vec<BTreeMap<Vec<u32>, NGramEntry>>,
}

impl NGramModel {
    /// An empty model of the given order. Populate with [`NGramModel::insert`]
    /// lower orders first, then call [`NGramModel::validate`].
    pub fn empty(order: usize) -> Result<Self, NGramError> {
        if order == 0 {
            return Err(NGramError::ZeroOrder);
        }
        Ok(Self {
            order,
            words: Vec::new(),
            ids: BTreeMap::new(),
            tables: (0..order).map(|_| BTreeMap::new()).collect(),
        })
    }

    fn intern(&mut self, word: &str) -> u32 {
        if let Some(&id) = self.ids.get(word) {
            return id;
        }
        let id = self.words.len() as u32;
        self.words.push(word.to_string());
        self.ids.insert(word.to_string(), id);
        id
    }

    /// Adds one n-gram entry. Unigrams introduce vocabulary words; higher
    /// orders must have their context listed already.
    pub fn insert(&mut self, ngram: &[&str], entry: NGramEntry) -> Result<(), NGramError> {
        let owned = || ngram.iter().map(|w| w.to_string()).collect::<Vec<_>>();
        let n = ngram.len();
        if n == 0 || n > self.order {
            return Err(NGramError::BadOrder { ngram: owned(), model_order: self.order });
        }
        if entry.log10_prob.is_nan() || !entry.log10_backoff.is_finite() {
            return Err(NGramError::NonFinite { ngram: owned() });
        }
        let key: Vec<u32> = if n == 1 {
            alloc::vec![self.intern(ngram[0])]
        } else {
            let ids: Option<Vec<u32>> = ngram.iter().map(|w| self.ids.get(*w).copied()).collect();
            match ids {
                Some(ids) if self.tables[n - 2].contains_key(&ids[..n - 1]) => ids,
                _ => return Err(NGramError::DanglingContext { order: n, ngram: owned() }),
            }
        };
        if self.tables[n - 1].insert(key, entry).is_some() {
            return Err(NGramError::Duplicate { order: n, ngram: owned() });
        }
        Ok(())
    }

    /// Checks the structural invariant: every (n>1)-gram's context is listed.
    pub fn validate(&self) -> Result<(), NGramError> {
        for n in 2..=self.order {
            for key in self.tables[n - 1].keys() {
                if !self.tables[n - 2].contains_key(&key[..n - 1]) {
                    return Err(NGramError::DanglingContext { order: n, ngram: self.words_of(key) });
                }
            }
        }
        Ok(())
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Vocabulary size: unigram entries, including the special symbols.
    pub fn vocab_size(&self) -> usize {
        self.tables[0].len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.tables.iter().map(BTreeMap::len).collect()
    }

    pub fn has_unk(&self) -> bool {
        self.ids.get(UNK).is_some_and(|id| self.tables[0].contains_key(&[*id][..]))
    }

    /// Id of an in-vocabulary word.
    pub fn word_id(&self, word: &str) -> Option<u32> {
        self.ids.get(word).copied().filter(|id| self.tables[0].contains_key(&[*id][..]))
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    /// Id used to score `word`: itself when known, otherwise `<unk>` if the
    /// model has it.
    pub fn lookup(&self, word: &str) -> Option<u32> {
        self.word_id(word).or_else(|| self.word_id(UNK))
    }

    pub fn bos(&self) -> Option<u32> {
        self.word_id(BOS)
    }

    pub fn eos(&self) -> Option<u32> {
        self.word_id(EOS)
    }

    fn words_of(&self, key: &[u32]) -> Vec<String> {
        key.iter().map(|&id| self.words[id as usize].clone()).collect()
    }

    /// Iterates the n-grams of one order as `(words, entry)`, in id order.
    pub fn entries(&self, n: usize) -> impl Iterator<Item = (Vec<&str>, NGramEntry)> + '_ {
        self.tables[n - 1]
            .iter()
            .map(move |(key, entry)| (key.iter().map(|&id| self.words[id as usize].as_str()).collect(), *entry))
    }

    pub fn entry(&self, ngram: &[&str]) -> Option<NGramEntry> {
        let n = ngram.len();
        if n == 0 || n > self.order {
            return None;
        }
        let key: Option<Vec<u32>> = ngram.iter().map(|w| self.ids.get(*w).copied()).collect();
        self.tables[n - 1].get(&key?).copied()
    }

    /// log10 p(word | context) over ids; `context` is oldest first and may
    /// be longer than the model order.
    pub fn log10_prob_ids(&self, context: &[u32], word: u32) -> f64 {
        let keep = context.len().min(self.order - 1);
        let history = &context[context.len() - keep..];
        let mut backoff = 0.0;
        let mut key = Vec::with_capacity(keep + 1);
        for start in 0..=history.len() {
            let h = &history[start..];
            key.clear();
            key.extend_from_slice(h);
            key.push(word);
            if let Some(entry) = self.tables[h.len()].get(&key) {
                return backoff + entry.log10_prob;
            }
            if !h.is_empty() {
                if let Some(ctx) = self.tables[h.len() - 1].get(h) {
                    backoff += ctx.log10_backoff;
                }
            }
        }
        f64::NEG_INFINITY
    }

    /// log10 p(word | context) with out-of-vocabulary words mapped to `<unk>`.
    /// Without `<unk>` an unknown word scores negative infinity.
    pub fn score(&self, word: &str, context: &[&str]) -> f64 {
        let Some(id) = self.lookup(word) else {
            return f64::NEG_INFINITY;
        };
        let ctx: Vec<u32> = context.iter().filter_map(|w| self.lookup(w)).collect();
        self.log10_prob_ids(&ctx, id)
    }

    /// Words that may follow a context: the vocabulary plus `</s>`, minus `<s>`.
    pub fn predictable_ids(&self) -> impl Iterator<Item = u32> + '_ {
        let bos = self.bos();
        self.tables[0].keys().map(|k| k[0]).filter(move |&id| Some(id) != bos)
    }

    /// Every listed context (n-gram of order below the model order), oldest first.
    pub fn contexts(&self) -> impl Iterator<Item = &[u32]> + '_ {
        self.tables[..self.order - 1].iter().flat_map(|t| t.keys().map(Vec::as_slice)).chain(core::iter::once(&[][..]))
    }
}

/// Perplexity and out-of-vocabulary statistics. `token_count` counts every
/// scored position, sentence ends included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub ppl_including_oov: f64,
    pub ppl_excluding_oov: f64,
    pub oov_count: usize,
    pub token_count: usize,
    pub sentence_count: usize,
    pub log10_prob_total: f64,
}

impl PerplexityReport {
    pub fn oov_rate(&self) -> f64 {
        if self.token_count == 0 {
            0.0
        } else {
            self.oov_count as f64 / self.token_count as f64
        }
    }
}

fn ppl(log10_total: f64, count: usize) -> f64 {
    if count == 0 {
        return 1.0;
    }
    libm::pow(10.0, -log10_total / count as f64)
}

/// Scores each sentence with `<s>` as initial context and `</s>` at the end.
/// OOV positions are scored through `<unk>` for the including-OOV figure and
/// dropped from both sum and count for the excluding-OOV figure.
pub fn perplexity<S: AsRef<str>>(model: &NGramModel, sentences: &[Vec<S>]) -> PerplexityReport {
    let mut total = 0.0;
    let mut known_total = 0.0;
    let mut tokens = 0;
    let mut oov = 0;
    let bos = model.bos();
    for sentence in sentences {
        let mut context: Vec<u32> = bos.into_iter().collect();
        for word in sentence {
            let word = word.as_ref();
            let known = model.word_id(word).filter(|_| word != UNK);
            tokens += 1;
            match known {
                Some(id) => {
                    let p = model.log10_prob_ids(&context, id);
                    total += p;
                    known_total += p;
                    context.push(id);
                }
                None => {
                    oov += 1;
                    match model.word_id(UNK) {
                        Some(unk) => {
                            total += model.log10_prob_ids(&context, unk);
                            context.push(unk);
                        }
                        None => {
                            total = f64::NEG_INFINITY;
                            context.clear();
                        }
                    }
                }
            }
        }
        if let Some(eos) = model.eos() {
            let p = model.log10_prob_ids(&context, eos);
            total += p;
            known_total += p;
        }
        tokens += 1;
    }
    PerplexityReport {
        ppl_including_oov: ppl(total, tokens),
        ppl_excluding_oov: ppl(known_total, tokens - oov),
        oov_count: oov,
        token_count: tokens,
        sentence_count: sentences.len(),
        log10_prob_total: total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn entry(p: f64, b: f64) -> NGramEntry {
        NGramEntry { log10_prob: p, log10_backoff: b }
    }

    fn uniform_unigram() -> NGramModel {
        let mut m = NGramModel::empty(1).unwrap();
        let lp = libm::log10(0.5);
        m.insert(&[BOS], entry(ARPA_LOG_ZERO, 0.0)).unwrap();
        m.insert(&["a"], entry(lp, 0.0)).unwrap();
        m.insert(&["b"], entry(lp, 0.0)).unwrap();
        m
    }

    #[test]
    fn uniform_unigram_score() {
        let m = uniform_unigram();
        assert_eq!(m.score("a", &[]), libm::log10(0.5));
        assert_eq!(m.score("a", &["b", "a"]), libm::log10(0.5));
        assert_eq!(m.score("zzz", &[]), f64::NEG_INFINITY);
        assert!(!m.has_unk());
    }

    #[test]
    fn back_off_chain() {
        let mut m = NGramModel::empty(3).unwrap();
        m.insert(&["x"], entry(-1.0, -0.5)).unwrap();
        m.insert(&["y"], entry(-2.0, -0.25)).unwrap();
        m.insert(&["x", "y"], entry(-0.3, -0.1)).unwrap();
        m.insert(&["x", "y", "x"], entry(-0.2, 0.0)).unwrap();
        assert_eq!(m.score("x", &["x", "y"]), -0.2);
        // "x y y" unseen: bow(x y) + p(y | y) = bow(x y) + bow(y) + p(y)
        assert_eq!(m.score("y", &["x", "y"]), -0.1 + -0.25 + -2.0);
        assert_eq!(m.score("y", &["x"]), -0.3);
        // unlisted context contributes no back-off weight
        assert_eq!(m.score("y", &["y", "y"]), -0.25 + -2.0);
    }

    #[test]
    fn insertion_rules() {
        let mut m = NGramModel::empty(2).unwrap();
        m.insert(&["a"], entry(-1.0, 0.0)).unwrap();
        assert!(matches!(m.insert(&["b", "a"], entry(-1.0, 0.0)), Err(NGramError::DanglingContext { .. })));
        assert!(matches!(m.insert(&["a"], entry(-1.0, 0.0)), Err(NGramError::Duplicate { .. })));
        assert!(matches!(m.insert(&["a", "a", "a"], entry(-1.0, 0.0)), Err(NGramError::BadOrder { .. })));
        assert!(matches!(m.insert(&["c"], entry(f64::NAN, 0.0)), Err(NGramError::NonFinite { .. })));
    }

    #[test]
    fn perplexity_of_uniform_model_is_vocab_size() {
        let mut m = NGramModel::empty(1).unwrap();
        let lp = libm::log10(1.0 / 3.0);
        m.insert(&[BOS], entry(ARPA_LOG_ZERO, 0.0)).unwrap();
        for w in ["a", "b", EOS] {
            m.insert(&[w], entry(lp, 0.0)).unwrap();
        }
        let report = perplexity(&m, &[vec!["a", "b", "a"], vec!["b"]]);
        assert!((report.ppl_including_oov - 3.0).abs() < 1e-9);
        assert_eq!(report.ppl_including_oov, report.ppl_excluding_oov);
        assert_eq!((report.oov_count, report.token_count), (0, 6));
    }
}
