//! Table-driven transliteration with greedy longest-match lookup.
//!
//! The built-in table romanizes katakana and hiragana (including the small
//! katakana used for Ainu syllable-final consonants) in Hepburn style with
//! doubled long vowels: `ソー` → `soo`, `ッカ` → `kka`, `ッチ` → `tchi`.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use thiserror::Error;

/// What a matched source cluster produces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Text(String),
    /// Sokuon: doubles the first consonant of the next romanized cluster.
    Geminate,
    /// Long-vowel mark: repeats the preceding vowel.
    Lengthen,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TableError {
    #[error("cluster {cluster:?} already maps to {existing:?}, refusing {new:?}")]
    Conflict { cluster: String, existing: String, new: String },
    #[error("empty source cluster on lexicon line {line}")]
    EmptySource { line: usize },
    #[error("lexicon line {line} is not `source<TAB>target`")]
    Malformed { line: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarningKind {
    /// Sokuon with nothing after it to geminate.
    DanglingSokuon,
    /// Long-vowel mark not preceded by a vowel.
    DanglingLongVowel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransliterationWarning {
    /// Character offset in the input.
    pub position: usize,
    pub kind: WarningKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransliterationTable {
    entries: BTreeMap<String, Target>,
    max_cluster_len: usize,
    direction: String,
}

const KATAKANA: &[(&str, &str)] = &[
    ("ア", "a"),
    ("イ", "i"),
    ("ウ", "u"),
    ("エ", "e"),
    ("オ", "o"),
    ("カ", "ka"),
    ("キ", "ki"),
    ("ク", "ku"),
    ("ケ", "ke"),
    ("コ", "ko"),
    ("ガ", "ga"),
    ("ギ", "gi"),
    ("グ", "gu"),
    ("ゲ", "ge"),
    ("ゴ", "go"),
    ("サ", "sa"),
    ("シ", "shi"),
    ("ス", "su"),
    ("セ", "se"),
    ("ソ", "so"),
    ("ザ", "za"),
    ("ジ", "ji"),
    ("ズ", "zu"),
    ("ゼ", "ze"),
    ("ゾ", "zo"),
    ("タ", "ta"),
    ("チ", "chi"),
    ("ツ", "tsu"),
    ("テ", "te"),
    ("ト", "to"),
    ("ダ", "da"),
    ("ヂ", "ji"),
    ("ヅ", "zu"),
    ("デ", "de"),
    ("ド", "do"),
    ("ナ", "na"),
    ("ニ", "ni"),
    ("ヌ", "nu"),
    ("ネ", "ne"),
    ("ノ", "no"),
    ("ハ", "ha"),
    ("ヒ", "hi"),
    ("フ", "fu"),
    ("ヘ", "he"),
    ("ホ", "ho"),
    ("バ", "ba"),
    ("ビ", "bi"),
    ("ブ", "bu"),
    ("ベ", "be"),
    ("ボ", "bo"),
    ("パ", "pa"),
    ("ピ", "pi"),
    ("プ", "pu"),
    ("ペ", "pe"),
    ("ポ", "po"),
    ("マ", "ma"),
    ("ミ", "mi"),
    ("ム", "mu"),
    ("メ", "me"),
    ("モ", "mo"),
    ("ヤ", "ya"),
    ("ユ", "yu"),
    ("ヨ", "yo"),
    ("ラ", "ra"),
    ("リ", "ri"),
    ("ル", "ru"),
    ("レ", "re"),
    ("ロ", "ro"),
    ("ワ", "wa"),
    ("ヰ", "i"),
    ("ヱ", "e"),
    ("ヲ", "o"),
    ("ン", "n"),
    ("ヴ", "vu"),
    ("ァ", "a"),
    ("ィ", "i"),
    ("ゥ", "u"),
    ("ェ", "e"),
    ("ォ", "o"),
    ("ャ", "ya"),
    ("ュ", "yu"),
    ("ョ", "yo"),
    ("ヮ", "wa"),
    ("ヵ", "ka"),
    ("ヶ", "ke"),
    ("キャ", "kya"),
    ("キュ", "kyu"),
    ("キョ", "kyo"),
    ("ギャ", "gya"),
    ("ギュ", "gyu"),
    ("ギョ", "gyo"),
    ("シャ", "sha"),
    ("シュ", "shu"),
    ("ショ", "sho"),
    ("シェ", "she"),
    ("ジャ", "ja"),
    ("ジュ", "ju"),
    ("ジョ", "jo"),
    ("ジェ", "je"),
    ("チャ", "cha"),
    ("チュ", "chu"),
    ("チョ", "cho"),
    ("チェ", "che"),
    ("ヂャ", "ja"),
    ("ヂュ", "ju"),
    ("ヂョ", "jo"),
    ("ニャ", "nya"),
    ("ニュ", "nyu"),
    ("ニョ", "nyo"),
    ("ヒャ", "hya"),
    ("ヒュ", "hyu"),
    ("ヒョ", "hyo"),
    ("ビャ", "bya"),
    ("ビュ", "byu"),
    ("ビョ", "byo"),
    ("ピャ", "pya"),
    ("ピュ", "pyu"),
    ("ピョ", "pyo"),
    ("ミャ", "mya"),
    ("ミュ", "myu"),
    ("ミョ", "myo"),
    ("リャ", "rya"),
    ("リュ", "ryu"),
    ("リョ", "ryo"),
    ("ファ", "fa"),
    ("フィ", "fi"),
    ("フェ", "fe"),
    ("フォ", "fo"),
    ("フュ", "fyu"),
    ("ティ", "ti"),
    ("ディ", "di"),
    ("トゥ", "tu"),
    ("ドゥ", "du"),
    ("テュ", "tyu"),
    ("デュ", "dyu"),
    ("ウィ", "wi"),
    ("ウェ", "we"),
    ("ウォ", "wo"),
    ("イェ", "ye"),
    ("ヴァ", "va"),
    ("ヴィ", "vi"),
    ("ヴェ", "ve"),
    ("ヴォ", "vo"),
    ("ツァ", "tsa"),
    ("ツィ", "tsi"),
    ("ツェ", "tse"),
    ("ツォ", "tso"),
    ("クァ", "kwa"),
    ("グァ", "gwa"),
];

/// Small katakana for Ainu syllable-final consonants, plus the semi-voiced
/// forms written with a combining mark.
const AINU_KATAKANA: &[(&str, &str)] = &[
    ("ㇰ", "k"),
    ("ㇱ", "s"),
    ("ㇲ", "s"),
    ("ㇳ", "t"),
    ("ㇴ", "n"),
    ("ㇵ", "h"),
    ("ㇶ", "h"),
    ("ㇷ", "h"),
    ("ㇸ", "h"),
    ("ㇹ", "h"),
    ("ㇺ", "m"),
    ("ㇻ", "r"),
    ("ㇼ", "r"),
    ("ㇽ", "r"),
    ("ㇾ", "r"),
    ("ㇿ", "r"),
    ("ㇷ\u{309A}", "p"),
    ("ト\u{309A}", "tu"),
    ("セ\u{309A}", "ce"),
];

/// Katakana U+30A1..=U+30F6 sit exactly 0x60 above their hiragana.
fn to_hiragana(katakana: &str) -> Option<String> {
    katakana
        .chars()
        .map(|c| match c as u32 {
            0x30A1..=0x30F6 => char::from_u32(c as u32 - 0x60),
            _ => None,
        })
        .collect()
}

fn is_vowel(c: char) -> bool {
    matches!(c, 'a' | 'e' | 'i' | 'o' | 'u')
}

impl TransliterationTable {
    pub fn new(direction: &str) -> Self {
        Self { entries: BTreeMap::new(), max_cluster_len: 0, direction: direction.to_string() }
    }

    /// Kana → Latin, Hepburn with doubled long vowels.
    pub fn hepburn() -> Self {
        let mut table = Self::new("kana->latin");
        for &(kana, latin) in KATAKANA {
            table.insert(kana, Target::Text(latin.to_string())).expect("built-in table is consistent");
            if let Some(hira) = to_hiragana(kana) {
                table.insert(&hira, Target::Text(latin.to_string())).expect("built-in table is consistent");
            }
        }
        for &(kana, latin) in AINU_KATAKANA {
            table.insert(kana, Target::Text(latin.to_string())).expect("built-in table is consistent");
        }
        for sokuon in ["ッ", "っ"] {
            table.insert(sokuon, Target::Geminate).expect("built-in table is consistent");
        }
        table.insert("ー", Target::Lengthen).expect("built-in table is consistent");
        table
    }

    /// Adds one mapping. Re-inserting an identical mapping is a no-op.
    pub fn insert(&mut self, source: &str, target: Target) -> Result<(), TableError> {
        if let Some(existing) = self.entries.get(source) {
            if *existing == target {
                return Ok(());
            }
            return Err(TableError::Conflict {
                cluster: source.to_string(),
                existing: alloc::format!("{existing:?}"),
                new: alloc::format!("{target:?}"),
            });
        }
        self.max_cluster_len = self.max_cluster_len.max(source.chars().count());
        self.entries.insert(source.to_string(), target);
        Ok(())
    }

    /// Extends the table from a `source<TAB>target` lexicon. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn extend_from_tsv(&mut self, tsv: &str) -> Result<usize, TableError> {
        let mut added = 0;
        for (i, line) in tsv.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (source, target) = line.split_once('\t').ok_or(TableError::Malformed { line: line_no })?;
            if source.is_empty() {
                return Err(TableError::EmptySource { line: line_no });
            }
            if target.contains('\t') {
                return Err(TableError::Malformed { line: line_no });
            }
            self.insert(source, Target::Text(target.to_string()))?;
            added += 1;
        }
        Ok(added)
    }

    pub fn max_cluster_len(&self) -> usize {
        self.max_cluster_len
    }

    pub fn direction(&self) -> &str {
        &self.direction
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, source: &str) -> Option<&Target> {
        self.entries.get(source)
    }
}

/// Result of [`transliterate_with_warnings`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transliteration {
    pub text: String,
    pub warnings: Vec<TransliterationWarning>,
    /// Number of input characters that matched no entry and were copied.
    pub unmapped: usize,
}

pub fn transliterate(text: &str, table: &TransliterationTable) -> String {
    transliterate_with_warnings(text, table).text
}

/// Greedy longest-match, left to right. Characters with no entry are copied
/// unchanged.
pub fn transliterate_with_warnings(text: &str, table: &TransliterationTable) -> Transliteration {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut warnings = Vec::new();
    let mut unmapped = 0;
    let mut pending_geminate: Option<usize> = None;
    let mut key = String::new();
    let mut i = 0;
    while i < chars.len() {
        let longest = table.max_cluster_len.min(chars.len() - i);
        let mut matched = None;
        for len in (1..=longest).rev() {
            key.clear();
            key.extend(&chars[i..i + len]);
            if let Some(target) = table.entries.get(key.as_str()) {
                matched = Some((len, target));
                break;
            }
        }
        match matched {
            Some((len, Target::Text(latin))) => {
                if pending_geminate.take().is_some() {
                    geminate_into(&mut out, latin);
                }
                out.push_str(latin);
                i += len;
            }
            Some((len, Target::Geminate)) => {
                if let Some(position) = pending_geminate.replace(i) {
                    warnings.push(TransliterationWarning { position, kind: WarningKind::DanglingSokuon });
                }
                i += len;
            }
            Some((len, Target::Lengthen)) => {
                match out.chars().last() {
                    Some(v) if is_vowel(v) && pending_geminate.is_none() => out.push(v),
                    _ => warnings.push(TransliterationWarning { position: i, kind: WarningKind::DanglingLongVowel }),
                }
                i += len;
            }
            None => {
                if let Some(position) = pending_geminate.take() {
                    warnings.push(TransliterationWarning { position, kind: WarningKind::DanglingSokuon });
                }
                out.push(chars[i]);
                unmapped += 1;
                i += 1;
            }
        }
    }
    if let Some(position) = pending_geminate {
        warnings.push(TransliterationWarning { position, kind: WarningKind::DanglingSokuon });
    }
    Transliteration { text: out, warnings, unmapped }
}

/// Writes the doubled consonant for a sokuon in front of `next`.
fn geminate_into(out: &mut String, next: &str) {
    match next.chars().next() {
        Some('c') if next.starts_with("ch") => out.push('t'),
        Some(c) if !is_vowel(c) && c.is_ascii_alphabetic() => out.push(c),
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn roman(s: &str) -> String {
        transliterate(s, &TransliterationTable::hepburn())
    }

    #[test]
    fn examples_from_model_output() {
        assert_eq!(roman("アノ"), "ano");
        assert_eq!(roman("ソ"), "so");
        assert_eq!(roman("ソ'oヤw"), "so'oyaw");
        assert_eq!(roman("アノ ジンkoy"), "ano jinkoy");
        assert_eq!(roman("オota'asi"), "oota'asi");
        assert_eq!(roman("'タ 'asi"), "'ta 'asi");
    }

    #[test]
    fn latin_passes_through() {
        assert_eq!(roman("tanna abc"), "tanna abc");
    }

    #[test]
    fn digraphs_win_over_single_kana() {
        assert_eq!(roman("キャ"), "kya");
        assert_eq!(roman("ジョ"), "jo");
        assert_eq!(roman("ちゃ"), "cha");
        assert_eq!(roman("キヤ"), "kiya");
    }

    #[test]
    fn long_vowel_doubles() {
        assert_eq!(roman("ソー"), "soo");
        assert_eq!(roman("レーコㇷ"), "reekoh");
        let t = transliterate_with_warnings("ーa", &TransliterationTable::hepburn());
        assert_eq!(t.text, "a");
        assert_eq!(t.warnings, [TransliterationWarning { position: 0, kind: WarningKind::DanglingLongVowel }]);
    }

    #[test]
    fn sokuon_geminates_the_next_consonant() {
        assert_eq!(roman("ニッポン"), "nippon");
        assert_eq!(roman("マッチ"), "matchi");
        assert_eq!(roman("ざっし"), "zasshi");
    }

    #[test]
    fn final_sokuon_maps_to_nothing_with_a_warning() {
        let t = transliterate_with_warnings("アッ", &TransliterationTable::hepburn());
        assert_eq!(t.text, "a");
        assert_eq!(t.warnings, [TransliterationWarning { position: 1, kind: WarningKind::DanglingSokuon }]);
        let t = transliterate_with_warnings("アッ x", &TransliterationTable::hepburn());
        assert_eq!(t.text, "a x");
        assert_eq!(t.warnings.len(), 1);
    }

    #[test]
    fn ainu_small_kana() {
        assert_eq!(roman("コタㇴ"), "kotan");
        assert_eq!(roman("ㇷ\u{309A}"), "p");
    }

    #[test]
    fn lexicon_extends_and_rejects_conflicts() {
        let mut table = TransliterationTable::hepburn();
        assert_eq!(table.extend_from_tsv("# readings\n村\tmura\n\n大村\toomura\n"), Ok(2));
        assert_eq!(table.max_cluster_len(), 2);
        assert_eq!(transliterate("大村 村", &table), "oomura mura");
        assert!(matches!(table.extend_from_tsv("ア\tx"), Err(TableError::Conflict { .. })));
        assert_eq!(table.extend_from_tsv("ア\ta"), Ok(1));
        assert_eq!(table.extend_from_tsv("bad line"), Err(TableError::Malformed { line: 1 }));
        assert_eq!(table.extend_from_tsv("\tx"), Err(TableError::EmptySource { line: 1 }));
    }

    #[test]
    fn table_covers_every_standard_katakana() {
        let table = TransliterationTable::hepburn();
        for cp in 0x30A1u32..=0x30FA {
            let c = char::from_u32(cp).unwrap();
            if matches!(c, 'ヷ' | 'ヸ' | 'ヹ' | 'ヺ') {
                continue;
            }
            let mut s = String::new();
            s.push(c);
            assert!(table.get(&s).is_some(), "missing {c}");
        }
    }

    fn arb_mixed() -> impl Strategy<Value = String> {
        proptest::collection::vec(
            prop_oneof![
                Just('ア'),
                Just('キ'),
                Just('ャ'),
                Just('ッ'),
                Just('ー'),
                Just('ン'),
                Just('チ'),
                Just('の'),
                Just('a'),
                Just('k'),
                Just(' '),
                Just('\''),
                Just('漢'),
                Just('ㇰ'),
            ],
            0..30,
        )
        .prop_map(|v| v.into_iter().collect())
    }

    proptest! {
        #[test]
        fn idempotent(text in arb_mixed()) {
            let table = TransliterationTable::hepburn();
            let once = transliterate(&text, &table);
            prop_assert_eq!(transliterate(&once, &table), once);
        }

        #[test]
        fn unmapped_characters_are_preserved(text in arb_mixed()) {
            let table = TransliterationTable::hepburn();
            let result = transliterate_with_warnings(&text, &table);
            let expected = text.chars().filter(|c| matches!(c, 'a' | 'k' | ' ' | '\'' | '漢')).count();
            prop_assert_eq!(result.unmapped, expected);
            let kept = result.text.chars().filter(|c| matches!(c, ' ' | '\'' | '漢')).count();
            prop_assert_eq!(kept, text.chars().filter(|c| matches!(c, ' ' | '\'' | '漢')).count());
        }
    }
}
