//! Character and word error rates.
//!
//! Error counts come from a unit-cost Levenshtein alignment between the
//! reference and the hypothesis. CER ignores inter-word spaces by default, so
//! a segmentation disagreement such as `wen poro` / `wenporo` costs word errors
//! but no character errors.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::translit::{transliterate, TransliterationTable};

/// Counts from one alignment. `insertions` are hypothesis tokens with no
/// reference counterpart, `deletions` are reference tokens that were missed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub distance: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    fn add(&mut self, other: EditCounts) {
        self.distance += other.distance;
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
    }
}

/// Minimal edit distance from `reference` to `hypothesis`.
///
/// The traceback prefers the diagonal move, so among minimal alignments the
/// one with the most substitutions (fewest insert/delete pairs) is reported.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    let n = reference.len();
    let m = hypothesis.len();
    let cols = m + 1;
    let mut table = vec![0usize; (n + 1) * cols];
    for i in 0..=n {
        table[i * cols] = i;
    }
    for j in 0..=m {
        table[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = table[(i - 1) * cols + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = table[(i - 1) * cols + j] + 1;
            let ins = table[i * cols + j - 1] + 1;
            table[i * cols + j] = diag.min(del).min(ins);
        }
    }

    let mut counts = EditCounts { distance: table[n * cols + m], ..Default::default() };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = table[i * cols + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if here == table[(i - 1) * cols + j - 1] + usize::from(!same) {
                if !same {
                    counts.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == table[(i - 1) * cols + j] + 1 {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

/// Transformations applied identically to references and hypotheses before
/// scoring.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelaxationPolicy {
    /// Romanize kana (Hepburn, doubled long vowels).
    pub romanize_kana: bool,
    pub case_fold: bool,
}

impl RelaxationPolicy {
    pub fn apply(&self, text: &str, table: &TransliterationTable) -> String {
        let mut out = if self.romanize_kana { transliterate(text, table) } else { String::from(text) };
        if self.case_fold {
            out = out.chars().flat_map(char::to_lowercase).collect();
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreOptions {
    pub relaxation: RelaxationPolicy,
    /// Count inter-word spaces as characters in CER.
    pub cer_includes_spaces: bool,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self { relaxation: RelaxationPolicy::default(), cer_includes_spaces: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub chars: EditCounts,
    pub ref_chars: usize,
    pub words: EditCounts,
    pub ref_words: usize,
}

/// Corpus-level error rates. Rates are pooled: total distance over total
/// reference length, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cer: f64,
    pub wer: f64,
    pub chars: EditCounts,
    pub ref_chars: usize,
    pub words: EditCounts,
    pub ref_words: usize,
    pub utterances: Vec<UtteranceScore>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScoreError {
    #[error("utterance ids missing from the hypotheses: {0:?}")]
    MissingHypotheses(Vec<String>),
    #[error("hypothesis ids with no reference: {0:?}")]
    UnknownHypotheses(Vec<String>),
    #[error("duplicate utterance id {0:?}")]
    DuplicateId(String),
}

/// Percentage with an empty reference scored as 0 when nothing was inserted
/// and 100 otherwise.
pub fn rate(distance: usize, reference_len: usize) -> f64 {
    match (distance, reference_len) {
        (0, _) => 0.0,
        (_, 0) => 100.0,
        (d, n) => 100.0 * d as f64 / n as f64,
    }
}

fn char_units(text: &str, include_spaces: bool) -> Vec<char> {
    if include_spaces {
        let words: Vec<&str> = text.split_whitespace().collect();
        words.join(" ").chars().collect()
    } else {
        text.chars().filter(|c| !c.is_whitespace()).collect()
    }
}

fn collect_ids<'a>(items: &'a [(String, String)]) -> Result<BTreeMap<&'a str, &'a str>, ScoreError> {
    let mut map = BTreeMap::new();
    for (id, text) in items {
        if map.insert(id.as_str(), text.as_str()).is_some() {
            return Err(ScoreError::DuplicateId(id.clone()));
        }
    }
    Ok(map)
}

/// Scores `(id, text)` hypotheses against references. Utterances are matched by
/// id; the per-utterance breakdown is sorted by id, so the report does not
/// depend on input order.
pub fn score(
    references: &[(String, String)],
    hypotheses: &[(String, String)],
    options: &ScoreOptions,
    table: &TransliterationTable,
) -> Result<EvalReport, ScoreError> {
    let refs = collect_ids(references)?;
    let hyps = collect_ids(hypotheses)?;
    let missing: Vec<String> = refs.keys().filter(|id| !hyps.contains_key(*id)).map(|id| String::from(*id)).collect();
    if !missing.is_empty() {
        return Err(ScoreError::MissingHypotheses(missing));
    }
    let unknown: Vec<String> = hyps.keys().filter(|id| !refs.contains_key(*id)).map(|id| String::from(*id)).collect();
    if !unknown.is_empty() {
        return Err(ScoreError::UnknownHypotheses(unknown));
    }

    let mut report = EvalReport {
        cer: 0.0,
        wer: 0.0,
        chars: EditCounts::default(),
        ref_chars: 0,
        words: EditCounts::default(),
        ref_words: 0,
        utterances: Vec::with_capacity(refs.len()),
    };
    for (id, reference) in &refs {
        let reference = options.relaxation.apply(reference, table);
        let hypothesis = options.relaxation.apply(hyps[id], table);
        let ref_chars = char_units(&reference, options.cer_includes_spaces);
        let hyp_chars = char_units(&hypothesis, options.cer_includes_spaces);
        let ref_words: Vec<&str> = reference.split_whitespace().collect();
        let hyp_words: Vec<&str> = hypothesis.split_whitespace().collect();
        let chars = edit_distance(&ref_chars, &hyp_chars);
        let words = edit_distance(&ref_words, &hyp_words);
        report.chars.add(chars);
        report.words.add(words);
        report.ref_chars += ref_chars.len();
        report.ref_words += ref_words.len();
        let ref_words = ref_words.len();
        report.utterances.push(UtteranceScore {
            id: String::from(*id),
            ref_chars: ref_chars.len(),
            ref_words,
            chars,
            words,
            reference,
            hypothesis,
        });
    }
    report.cer = rate(report.chars.distance, report.ref_chars);
    report.wer = rate(report.words.distance, report.ref_words);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    #[test]
    fn identical_strings() {
        assert_eq!(edit_distance(&chars("kotan"), &chars("kotan")), EditCounts::default());
    }

    #[test]
    fn single_substitution() {
        let c = edit_distance(&chars("abc"), &chars("axc"));
        assert_eq!(c, EditCounts { distance: 1, substitutions: 1, insertions: 0, deletions: 0 });
    }

    #[test]
    fn merged_word_is_substitution_plus_deletion() {
        let c = edit_distance(&["wen", "poro"], &["wenporo"]);
        assert_eq!(c, EditCounts { distance: 2, substitutions: 1, insertions: 0, deletions: 1 });
        let c = edit_distance(&["wenporo"], &["wen", "poro"]);
        assert_eq!(c, EditCounts { distance: 2, substitutions: 1, insertions: 1, deletions: 0 });
    }

    #[test]
    fn empty_sides() {
        assert_eq!(edit_distance::<char>(&[], &chars("ab")).insertions, 2);
        assert_eq!(edit_distance::<char>(&chars("ab"), &[]).deletions, 2);
    }

    #[test]
    fn perfect_hypotheses_score_zero() {
        let refs = pairs(&[("u1", "sine kotan"), ("u2", "'oyanruru")]);
        let report = score(&refs, &refs, &ScoreOptions::default(), &TransliterationTable::hepburn()).unwrap();
        assert_eq!((report.cer, report.wer), (0.0, 0.0));
    }

    #[test]
    fn romanization_forgives_script_choice() {
        let refs = pairs(&[("u", "アノ opompaki")]);
        let hyps = pairs(&[("u", "ano opompaki")]);
        let table = TransliterationTable::hepburn();
        let strict = score(&refs, &hyps, &ScoreOptions::default(), &table).unwrap();
        assert!(strict.cer > 0.0);
        let options = ScoreOptions {
            relaxation: RelaxationPolicy { romanize_kana: true, case_fold: false },
            ..Default::default()
        };
        let relaxed = score(&refs, &hyps, &options, &table).unwrap();
        assert_eq!((relaxed.cer, relaxed.wer), (0.0, 0.0));
    }

    #[test]
    fn corpus_rates_are_pooled() {
        let refs = pairs(&[("a", "abcdefghij"), ("b", "klmno")]);
        let hyps = pairs(&[("a", "abcdefghix"), ("b", "klmnp")]);
        let report = score(&refs, &hyps, &ScoreOptions::default(), &TransliterationTable::hepburn()).unwrap();
        assert_eq!(report.ref_chars, 15);
        assert!((report.cer - 200.0 / 15.0).abs() < 1e-12);
    }

    #[test]
    fn cer_ignores_spaces_unless_asked() {
        let refs = pairs(&[("a", "wen poro kotan")]);
        let hyps = pairs(&[("a", "wenporo kotan")]);
        let table = TransliterationTable::hepburn();
        let report = score(&refs, &hyps, &ScoreOptions::default(), &table).unwrap();
        assert_eq!(report.cer, 0.0);
        assert_eq!(report.words.distance, 2);
        let spaced = ScoreOptions { cer_includes_spaces: true, ..Default::default() };
        assert_eq!(score(&refs, &hyps, &spaced, &table).unwrap().chars.distance, 1);
    }

    #[test]
    fn id_mismatches_are_listed() {
        let table = TransliterationTable::hepburn();
        let refs = pairs(&[("a", "x"), ("b", "y")]);
        let hyps = pairs(&[("a", "x"), ("c", "y")]);
        assert_eq!(
            score(&refs, &hyps, &ScoreOptions::default(), &table),
            Err(ScoreError::MissingHypotheses(vec!["b".to_string()]))
        );
        let hyps = pairs(&[("a", "x"), ("b", "y"), ("c", "z")]);
        assert_eq!(
            score(&refs, &hyps, &ScoreOptions::default(), &table),
            Err(ScoreError::UnknownHypotheses(vec!["c".to_string()]))
        );
    }

    #[test]
    fn reordering_does_not_change_the_report() {
        let table = TransliterationTable::hepburn();
        let refs = pairs(&[("a", "sine kotan"), ("b", "tani 'oha")]);
        let hyps = pairs(&[("b", "tani oha"), ("a", "sine kotan 'an")]);
        let mut refs_rev = refs.clone();
        refs_rev.reverse();
        let one = score(&refs, &hyps, &ScoreOptions::default(), &table).unwrap();
        let two = score(&refs_rev, &hyps, &ScoreOptions::default(), &table).unwrap();
        assert_eq!(one, two);
    }
}
