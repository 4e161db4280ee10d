use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BLANK_SYMBOL: &str = "<blank>";
pub const SPACE_SYMBOL: &str = "<space>";
pub const BLANK_INDEX: usize = 0;
pub const SPACE_INDEX: usize = 1;

/// How transcripts from different languages share output symbols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingPolicy {
    /// Fold case in every script, so `A` and `a` share one symbol.
    SharedFolded,
    /// Keep transcripts as normalized; differently cased letters stay apart.
    SeparateByCase,
    /// Fold case within Latin only; other scripts keep their own forms.
    SeparateByScript,
}

impl SharingPolicy {
    fn fold(self, c: char) -> char {
        let lower = |c: char| {
            let mut it = c.to_lowercase();
            match (it.next(), it.next()) {
                (Some(l), None) => l,
                _ => c,
            }
        };
        match self {
            SharingPolicy::SharedFolded => lower(c),
            SharingPolicy::SeparateByCase => c,
            SharingPolicy::SeparateByScript if is_latin(c) => lower(c),
            SharingPolicy::SeparateByScript => c,
        }
    }

    /// The transform the vocabulary was built under; apply it to transcripts
    /// before [`CharVocabulary::encode`].
    pub fn apply(self, text: &str) -> String {
        text.chars().map(|c| self.fold(c)).collect()
    }
}

fn is_latin(c: char) -> bool {
    c.is_ascii_alphabetic() || matches!(c as u32, 0x00C0..=0x024F | 0x1E00..=0x1EFF)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VocabError {
    #[error("no characters in the corpus; the vocabulary would not cover any output")]
    EmptyCorpus,
    #[error("character {0:?} is not in the vocabulary")]
    Uncovered(char),
    #[error("index {0} is outside the vocabulary")]
    BadIndex(usize),
    #[error("vocabulary line {line}: {reason}")]
    Format { line: usize, reason: &'static str },
}

/// Output symbols of the CTC head. Index 0 is the blank and index 1 the word
/// delimiter; the rest are single characters in codepoint order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocabulary {
    symbols: Vec<String>,
    index: BTreeMap<char, usize>,
}

impl CharVocabulary {
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let set: BTreeSet<char> = chars.into_iter().filter(|c| !c.is_whitespace()).collect();
        let mut symbols = alloc::vec![BLANK_SYMBOL.to_string(), SPACE_SYMBOL.to_string()];
        let mut index = BTreeMap::new();
        for c in set {
            index.insert(c, symbols.len());
            symbols.push(c.to_string());
        }
        Self { symbols, index }
    }

    /// Parses the one-symbol-per-line file form.
    pub fn parse(text: &str) -> Result<Self, VocabError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, BLANK_SYMBOL)) => {}
            _ => return Err(VocabError::Format { line: 1, reason: "first symbol must be <blank>" }),
        }
        match lines.next() {
            Some((_, SPACE_SYMBOL)) => {}
            _ => return Err(VocabError::Format { line: 2, reason: "second symbol must be <space>" }),
        }
        let mut symbols = alloc::vec![BLANK_SYMBOL.to_string(), SPACE_SYMBOL.to_string()];
        let mut index = BTreeMap::new();
        for (i, line) in lines {
            let mut chars = line.chars();
            let c = match (chars.next(), chars.next()) {
                (Some(c), None) if !c.is_whitespace() => c,
                _ => return Err(VocabError::Format { line: i + 1, reason: "expected a single non-space character" }),
            };
            if index.insert(c, symbols.len()).is_some() {
                return Err(VocabError::Format { line: i + 1, reason: "duplicate symbol" });
            }
            symbols.push(line.to_string());
        }
        Ok(Self { symbols, index })
    }

    /// File form: one symbol per line, newline terminated.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for s in &self.symbols {
            out.push_str(s);
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        if c == ' ' {
            return Some(SPACE_INDEX);
        }
        self.index.get(&c).copied()
    }

    /// Maps a transcript to label indices. Every whitespace character becomes
    /// the delimiter; normalized transcripts only contain single spaces.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>, VocabError> {
        text.chars()
            .map(|c| if c.is_whitespace() { Ok(SPACE_INDEX) } else { self.index_of(c).ok_or(VocabError::Uncovered(c)) })
            .collect()
    }

    /// Maps label indices back to text. Blanks are dropped.
    pub fn decode(&self, labels: &[usize]) -> Result<String, VocabError> {
        let mut out = String::new();
        for &k in labels {
            match k {
                BLANK_INDEX => {}
                SPACE_INDEX => out.push(' '),
                k if k < self.symbols.len() => out.push_str(&self.symbols[k]),
                k => return Err(VocabError::BadIndex(k)),
            }
        }
        Ok(out)
    }

    /// Decodes model output, trimming and collapsing delimiters so the result
    /// looks like a normalized transcript.
    pub fn decode_transcript(&self, labels: &[usize]) -> Result<String, VocabError> {
        let raw = self.decode(labels)?;
        let words: Vec<&str> = raw.split(' ').filter(|w| !w.is_empty()).collect();
        Ok(words.join(" "))
    }
}

/// Builds the vocabulary covering every transcript after the policy's fold.
pub fn build_vocabulary<'a>(
    transcripts: impl IntoIterator<Item = &'a str>,
    policy: SharingPolicy,
) -> Result<CharVocabulary, VocabError> {
    let mut chars = BTreeSet::new();
    for t in transcripts {
        chars.extend(t.chars().filter(|c| !c.is_whitespace()).map(|c| policy.fold(c)));
    }
    if chars.is_empty() {
        return Err(VocabError::EmptyCorpus);
    }
    Ok(CharVocabulary::from_chars(chars))
}
