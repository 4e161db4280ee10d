use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CaseFold {
    #[default]
    None,
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizationPolicy {
    pub strip_punctuation: bool,
    /// Remove bracketed editorial annotations, brackets included.
    pub strip_metadata: bool,
    pub case_fold: CaseFold,
    pub collapse_whitespace: bool,
}

impl Default for NormalizationPolicy {
    /// The fine-tuning transcript policy: everything stripped, lower case.
    fn default() -> Self {
        Self { strip_punctuation: true, strip_metadata: true, case_fold: CaseFold::Lower, collapse_whitespace: true }
    }
}

/// Apostrophe variants used for the Ainu glottal stop. Never punctuation.
pub fn is_glottal_mark(c: char) -> bool {
    matches!(c, '\'' | '\u{2019}' | '\u{02BC}')
}

pub fn is_punctuation(c: char) -> bool {
    if is_glottal_mark(c) || c == '=' {
        return false;
    }
    match c {
        c if c.is_ascii_punctuation() => true,
        '\u{00A1}' | '\u{00A7}' | '\u{00AB}' | '\u{00B6}' | '\u{00B7}' | '\u{00BB}' | '\u{00BF}' => true,
        '\u{2010}'..='\u{2027}' | '\u{2030}'..='\u{205E}' => true,
        // CJK symbols and punctuation, minus the ideographic space and iteration marks.
        '\u{3001}'..='\u{3004}' | '\u{3008}'..='\u{3020}' | '\u{3030}' | '\u{303D}' => true,
        '\u{30FB}' => true,
        '\u{FF01}'..='\u{FF0F}' | '\u{FF1A}'..='\u{FF20}' | '\u{FF3B}'..='\u{FF40}' | '\u{FF5B}'..='\u{FF65}' => true,
        _ => false,
    }
}

fn closing_bracket(open: char) -> Option<char> {
    match open {
        '(' => Some(')'),
        '[' => Some(']'),
        '{' => Some('}'),
        '\u{FF08}' => Some('\u{FF09}'),
        '\u{FF3B}' => Some('\u{FF3D}'),
        '\u{FF5B}' => Some('\u{FF5D}'),
        _ => None,
    }
}

/// Removes every matched bracket pair together with its contents. Unmatched
/// brackets are left alone.
fn strip_metadata(chars: &[char]) -> Vec<char> {
    let mut removed = alloc::vec![false; chars.len()];
    let mut stack: Vec<(usize, char)> = Vec::new();
    for (i, &c) in chars.iter().enumerate() {
        if let Some(close) = closing_bracket(c) {
            stack.push((i, close));
        } else if let Some(&(start, close)) = stack.last() {
            if c == close {
                stack.pop();
                removed[start..=i].iter_mut().for_each(|r| *r = true);
            }
        }
    }
    // Keep a word boundary where an annotation sat between two words.
    let mut out = Vec::with_capacity(chars.len());
    let mut i = 0;
    while i < chars.len() {
        if removed[i] {
            while i < chars.len() && removed[i] {
                i += 1;
            }
            out.push(' ');
        } else {
            out.push(chars[i]);
            i += 1;
        }
    }
    out
}

/// Applies `policy` to one transcript. Idempotent for every policy.
pub fn normalize(text: &str, policy: &NormalizationPolicy) -> String {
    let mut chars: Vec<char> = text.chars().collect();
    if policy.strip_metadata {
        chars = strip_metadata(&chars);
    }
    if policy.strip_punctuation {
        chars.iter_mut().filter(|c| is_punctuation(**c)).for_each(|c| *c = ' ');
    }
    let folded: String = match policy.case_fold {
        CaseFold::None => chars.into_iter().collect(),
        CaseFold::Lower => chars.into_iter().flat_map(char::to_lowercase).collect(),
        CaseFold::Upper => chars.into_iter().flat_map(char::to_uppercase).collect(),
    };
    if policy.collapse_whitespace {
        let words: Vec<&str> = folded.split_whitespace().collect();
        words.join(" ")
    } else {
        folded
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn transcript_excerpt() {
        let policy = NormalizationPolicy::default();
        assert_eq!(normalize("sine, sine.. 'oyanruru kotan 'ohta", &policy), "sine sine 'oyanruru kotan 'ohta");
    }

    #[test]
    fn lower_folding() {
        let policy = NormalizationPolicy { case_fold: CaseFold::Lower, ..Default::default() };
        assert_eq!(normalize("ABC Def", &policy), "abc def");
        let upper = NormalizationPolicy { case_fold: CaseFold::Upper, ..Default::default() };
        assert_eq!(normalize("abc Def", &upper), "ABC DEF");
    }

    #[test]
    fn empty_text() {
        assert_eq!(normalize("", &NormalizationPolicy::default()), "");
    }

    #[test]
    fn metadata_spans_are_removed() {
        let policy = NormalizationPolicy::default();
        assert_eq!(normalize("tuy wa (tuy)pa wa", &policy), "tuy wa pa wa");
        assert_eq!(normalize("kotan [laughs] 'an {noise}manu", &policy), "kotan 'an manu");
        assert_eq!(normalize("ソ（笑）'oヤw", &policy), "ソ 'oヤw");
        assert_eq!(normalize("a (b [c] d) e", &policy), "a e");
    }

    #[test]
    fn unmatched_brackets_survive_metadata_only_policy() {
        let policy = NormalizationPolicy {
            strip_punctuation: false,
            strip_metadata: true,
            case_fold: CaseFold::None,
            collapse_whitespace: false,
        };
        assert_eq!(normalize("a ) b (c", &policy), "a ) b (c");
    }

    #[test]
    fn glottal_marks_and_equals_are_kept() {
        let policy = NormalizationPolicy::default();
        assert_eq!(normalize("'an ’oha a=kor, “x”", &policy), "'an ’oha a=kor x");
    }

    #[test]
    fn cjk_punctuation() {
        let policy = NormalizationPolicy::default();
        assert_eq!(normalize("アノ、ジン。「koy」", &policy), "アノ ジン koy");
    }

    #[test]
    fn case_fold_only_touches_letters() {
        let policy = NormalizationPolicy { case_fold: CaseFold::Upper, ..Default::default() };
        assert_eq!(normalize("アノ 'a1", &policy), "アノ 'A1");
    }

    fn arb_text() -> impl Strategy<Value = String> {
        proptest::collection::vec(
            prop_oneof![
                Just('a'),
                Just('B'),
                Just(' '),
                Just('\''),
                Just(','),
                Just('('),
                Just(')'),
                Just('['),
                Just(']'),
                Just('ア'),
                Just('。'),
                Just('ß'),
                Just('İ'),
                Just('\t'),
                Just('（'),
                Just('）'),
                Just('='),
                Just('.'),
            ],
            0..40,
        )
        .prop_map(|v| v.into_iter().collect())
    }

    proptest! {
        #[test]
        fn idempotent(text in arb_text(), p in any::<bool>(), m in any::<bool>(), w in any::<bool>(), f in 0u8..3) {
            let case_fold = [CaseFold::None, CaseFold::Lower, CaseFold::Upper][f as usize];
            let policy = NormalizationPolicy { strip_punctuation: p, strip_metadata: m, case_fold, collapse_whitespace: w };
            let once = normalize(&text, &policy);
            prop_assert_eq!(normalize(&once, &policy), once.clone());
            if p {
                prop_assert!(!once.chars().any(is_punctuation));
            }
            if w {
                prop_assert!(!once.contains("  ") && once.trim() == once);
            }
        }
    }
}
