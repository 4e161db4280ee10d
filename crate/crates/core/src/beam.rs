//! CTC prefix beam search with optional word-level n-gram shallow fusion.
//!
//! Each prefix carries the log probability of all alignments that end in a
//! blank (`p_blank`) and of those that end in its last label (`p_nonblank`).
//! Prefixes are ranked by
//!
//! ```text
//! logaddexp(p_blank, p_nonblank) + α · ln P_lm(completed words) + β · words
//! ```
//!
//! where a word is completed when the delimiter is emitted after at least one
//! character; the trailing partial word is scored once after the last frame.
//! LM scores are converted from log10 to natural log before weighting. Without
//! a language model α and β play no role. Scores are compared raw, with no
//! length normalization; ties go to the lexicographically smaller prefix.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::ctc::{LogProbLattice, BLANK};
use crate::logmath::{log_add, NEG_INF};
use crate::ngram::NGramModel;
use crate::text::vocab::{CharVocabulary, SPACE_INDEX};

const LN_10: f64 = core::f64::consts::LN_10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderWeights {
    pub beam_width: usize,
    pub lm_weight: f64,
    pub word_bonus: f64,
}

impl Default for DecoderWeights {
    fn default() -> Self {
        Self { beam_width: 50, lm_weight: 0.5, word_bonus: 1.0 }
    }
}

/// One entry of the n-best list.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub labels: Vec<usize>,
    pub text: String,
    /// Combined ranking score.
    pub score: f64,
    /// `logaddexp(p_blank, p_nonblank)`.
    pub acoustic: f64,
    /// Natural-log LM probability of all words, unweighted.
    pub lm: f64,
    pub words: usize,
}

#[derive(Debug, Clone)]
struct LmState {
    /// Natural-log probability of completed words.
    score: f64,
    words: usize,
    /// Ids of preceding words, oldest first, starting with `<s>`.
    context: Vec<u32>,
    /// Position in the prefix where the current partial word starts.
    word_start: usize,
}

#[derive(Debug, Clone)]
struct Beam {
    p_blank: f64,
    p_nonblank: f64,
    lm: LmState,
}

impl Beam {
    fn acoustic(&self) -> f64 {
        log_add(self.p_blank, self.p_nonblank)
    }
}

struct Fusion<'a> {
    lm: &'a NGramModel,
    vocab: &'a CharVocabulary,
    weights: DecoderWeights,
}

impl Fusion<'_> {
    /// log10 probability of the word spelled by `labels` after `context`.
    fn word_score(&self, context: &[u32], labels: &[usize]) -> (f64, Option<u32>) {
        let Ok(word) = self.vocab.decode(labels) else {
            return (NEG_INF, None);
        };
        match self.lm.lookup(&word) {
            Some(id) => (self.lm.log10_prob_ids(context, id) * LN_10, Some(id)),
            None => (NEG_INF, None),
        }
    }

    fn extend(&self, parent: &LmState, prefix: &[usize]) -> LmState {
        let last = prefix.len() - 1;
        if prefix[last] != SPACE_INDEX {
            return parent.clone();
        }
        let word = &prefix[parent.word_start..last];
        if word.is_empty() {
            return LmState { word_start: prefix.len(), ..parent.clone() };
        }
        let (score, id) = self.word_score(&parent.context, word);
        let mut context = parent.context.clone();
        match id {
            Some(id) => context.push(id),
            None => context.clear(),
        }
        let keep = self.lm.order().saturating_sub(1);
        if context.len() > keep {
            context.drain(..context.len() - keep);
        }
        LmState { score: parent.score + score, words: parent.words + 1, context, word_start: prefix.len() }
    }

    fn rank(&self, beam: &Beam) -> f64 {
        // α = 0 must ignore the LM entirely, including -inf for OOV words.
        let lm = if self.weights.lm_weight == 0.0 { 0.0 } else { self.weights.lm_weight * beam.lm.score };
        beam.acoustic() + lm + self.weights.word_bonus * beam.lm.words as f64
    }
}

fn compare(a: &(f64, &Vec<usize>), b: &(f64, &Vec<usize>)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Runs the search and returns up to `beam_width` hypotheses, best first.
/// The language model is used only when `lm` is given; its words are matched
/// against the vocabulary's decoded characters.
///
/// The search runs at `beam_width` and at each halving of it down to 1, and
/// the final hypotheses are merged. A single pruned search can lose to a
/// narrower one; with the merge, doubling the width never lowers the best
/// score. The extra runs at most double the cost.
pub fn prefix_beam_search(
    lattice: &LogProbLattice,
    vocab: &CharVocabulary,
    lm: Option<&NGramModel>,
    weights: &DecoderWeights,
) -> Vec<Hypothesis> {
    let width = weights.beam_width.max(1);
    let mut merged: BTreeMap<Vec<usize>, Hypothesis> = BTreeMap::new();
    let mut w = width;
    loop {
        for h in search(lattice, vocab, lm, weights, w) {
            match merged.get(&h.labels) {
                Some(old) if old.score >= h.score => {}
                _ => {
                    merged.insert(h.labels.clone(), h);
                }
            }
        }
        if w == 1 {
            break;
        }
        w /= 2;
    }
    let mut finals: Vec<Hypothesis> = merged.into_values().collect();
    finals.sort_by(|a, b| compare(&(a.score, &a.labels), &(b.score, &b.labels)));
    finals.truncate(width);
    finals
}

fn search(
    lattice: &LogProbLattice,
    vocab: &CharVocabulary,
    lm: Option<&NGramModel>,
    weights: &DecoderWeights,
    width: usize,
) -> Vec<Hypothesis> {
    let fusion = lm.map(|lm| Fusion { lm, vocab, weights: *weights });
    let initial_context: Vec<u32> = lm.and_then(NGramModel::bos).into_iter().collect();
    let root = LmState { score: 0.0, words: 0, context: initial_context, word_start: 0 };

    let mut beams: BTreeMap<Vec<usize>, Beam> = BTreeMap::new();
    beams.insert(Vec::new(), Beam { p_blank: 0.0, p_nonblank: NEG_INF, lm: root });

    for t in 0..lattice.frames() {
        let row = lattice.row(t);
        let mut next: BTreeMap<Vec<usize>, Beam> = BTreeMap::new();
        for (prefix, beam) in &beams {
            let total = beam.acoustic();
            let entry = next.entry(prefix.clone()).or_insert_with(|| Beam {
                p_blank: NEG_INF,
                p_nonblank: NEG_INF,
                lm: beam.lm.clone(),
            });
            entry.p_blank = log_add(entry.p_blank, total + row[BLANK]);
            if let Some(&last) = prefix.last() {
                entry.p_nonblank = log_add(entry.p_nonblank, beam.p_nonblank + row[last]);
            }
            for (c, &lp) in row.iter().enumerate().skip(1) {
                // A repeated label only extends the prefix across a blank.
                let mass = if prefix.last() == Some(&c) { beam.p_blank + lp } else { total + lp };
                if mass == NEG_INF {
                    continue;
                }
                let mut extended = prefix.clone();
                extended.push(c);
                let child = next.entry(extended).or_insert_with_key(|key| {
                    let lm = match &fusion {
                        Some(f) => f.extend(&beam.lm, key),
                        None => beam.lm.clone(),
                    };
                    Beam { p_blank: NEG_INF, p_nonblank: NEG_INF, lm }
                });
                child.p_nonblank = log_add(child.p_nonblank, mass);
            }
        }
        beams = prune(next, width, |b| fusion.as_ref().map_or(b.acoustic(), |f| f.rank(b)));
    }

    let mut finals: Vec<Hypothesis> = beams
        .into_iter()
        .map(|(labels, mut beam)| {
            if let Some(f) = &fusion {
                let partial = &labels[beam.lm.word_start..];
                if !partial.is_empty() {
                    let (score, _) = f.word_score(&beam.lm.context, partial);
                    beam.lm.score += score;
                    beam.lm.words += 1;
                }
            }
            let score = fusion.as_ref().map_or(beam.acoustic(), |f| f.rank(&beam));
            let text = vocab.decode_transcript(&labels).unwrap_or_default();
            Hypothesis { score, acoustic: beam.acoustic(), lm: beam.lm.score, words: beam.lm.words, text, labels }
        })
        .collect();
    finals.sort_by(|a, b| compare(&(a.score, &a.labels), &(b.score, &b.labels)));
    finals
}

fn prune(beams: BTreeMap<Vec<usize>, Beam>, width: usize, score: impl Fn(&Beam) -> f64) -> BTreeMap<Vec<usize>, Beam> {
    if beams.len() <= width {
        return beams;
    }
    let mut ranked: Vec<(f64, Vec<usize>, Beam)> = beams.into_iter().map(|(p, b)| (score(&b), p, b)).collect();
    ranked.sort_by(|a, b| compare(&(a.0, &a.1), &(b.0, &b.1)));
    ranked.truncate(width);
    ranked.into_iter().map(|(_, p, b)| (p, b)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::greedy_labels;
    use crate::text::vocab::CharVocabulary;
    use alloc::vec;

    fn vocab() -> CharVocabulary {
        CharVocabulary::from_chars(['a', 'b'])
    }

    fn lattice(probs: &[&[f64]]) -> LogProbLattice {
        let width = probs[0].len();
        let values = probs.iter().flat_map(|r| r.iter().map(|p| p.ln())).collect();
        LogProbLattice::new(probs.len(), width, values).unwrap()
    }

    #[test]
    fn single_frame_picks_argmax() {
        let v = vocab();
        let w = DecoderWeights { beam_width: 4, ..Default::default() };
        let hyps = prefix_beam_search(&lattice(&[&[0.2, 0.1, 0.5, 0.2]]), &v, None, &w);
        assert_eq!(hyps[0].labels, [2]);
        let hyps = prefix_beam_search(&lattice(&[&[0.7, 0.1, 0.1, 0.1]]), &v, None, &w);
        assert!(hyps[0].labels.is_empty());
    }

    #[test]
    fn labeling_beats_best_path() {
        // Best path is blank,blank,blank (0.4^3 = 0.064) but "a" collects
        // 1 - 0.6^3 - ... enough alignments to win.
        let probs: &[&[f64]] = &[&[0.4, 0.0, 0.35, 0.25], &[0.4, 0.0, 0.35, 0.25], &[0.4, 0.0, 0.35, 0.25]];
        let probs: Vec<Vec<f64>> =
            probs.iter().map(|r| r.iter().map(|p| if *p == 0.0 { 1e-12 } else { *p }).collect()).collect();
        let rows: Vec<&[f64]> = probs.iter().map(Vec::as_slice).collect();
        let l = lattice(&rows);
        assert!(greedy_labels(&l).is_empty());
        let hyps = prefix_beam_search(&l, &vocab(), None, &DecoderWeights { beam_width: 8, ..Default::default() });
        assert_eq!(hyps[0].labels, [2]);
    }

    #[test]
    fn deterministic_n_best() {
        let probs: &[&[f64]] = &[&[0.3, 0.1, 0.3, 0.3], &[0.25, 0.25, 0.25, 0.25]];
        let l = lattice(probs);
        let w = DecoderWeights { beam_width: 3, ..Default::default() };
        let one = prefix_beam_search(&l, &vocab(), None, &w);
        let two = prefix_beam_search(&l, &vocab(), None, &w);
        assert_eq!(one, two);
        assert_eq!(one.len(), 3);
        assert!(one.windows(2).all(|p| p[0].score >= p[1].score));
    }

    #[test]
    fn empty_lattice_gives_empty_hypothesis() {
        let l = LogProbLattice::new(0, 4, vec![]).unwrap();
        let hyps = prefix_beam_search(&l, &vocab(), None, &DecoderWeights::default());
        assert_eq!(hyps.len(), 1);
        assert_eq!(hyps[0].text, "");
    }
}
