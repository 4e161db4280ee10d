//! ARPA back-off model text: a `\data\` section with `ngram N=count` lines,
//! one `\N-grams:` section per order with tab-separated
//! `log10_prob<TAB>w1 w2 …[<TAB>log10_backoff]` lines, and `\end\`.

use std::fmt::Write as _;

use lrasr_core::ngram::{NGramEntry, NGramModel};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("line {line}: {message}")]
pub struct ArpaError {
    pub line: usize,
    pub message: String,
}

fn err(line: usize, message: impl Into<String>) -> ArpaError {
    ArpaError { line, message: message.into() }
}

/// Backoff weights are written for every order below the highest, zeros
/// included, so that output is a function of the model alone.
pub fn write_arpa(model: &NGramModel) -> String {
    let mut out = String::from("\\data\\\n");
    for (n, count) in model.counts().iter().enumerate() {
        let _ = writeln!(out, "ngram {}={}", n + 1, count);
    }
    for n in 1..=model.order() {
        let _ = write!(out, "\n\\{n}-grams:\n");
        for (words, e) in model.entries(n) {
            let _ = write!(out, "{}\t{}", e.log10_prob, words.join(" "));
            if n < model.order() {
                let _ = write!(out, "\t{}", e.log10_backoff);
            }
            out.push('\n');
        }
    }
    out.push_str("\n\\end\\\n");
    out
}

fn number(line: usize, field: &str) -> Result<f64, ArpaError> {
    field.parse::<f64>().map_err(|_| err(line, format!("not a number: {field:?}")))
}

pub fn read_arpa(text: &str) -> Result<NGramModel, ArpaError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).filter(|(_, l)| !l.trim().is_empty()).peekable();
    match lines.next() {
        Some((_, "\\data\\")) => {}
        Some((n, l)) => return Err(err(n, format!("expected \\data\\, found {l:?}"))),
        None => return Err(err(1, "empty file")),
    }
    let mut counts: Vec<usize> = Vec::new();
    while let Some(&(n, l)) = lines.peek() {
        let Some(rest) = l.strip_prefix("ngram ") else { break };
        lines.next();
        let (order, count) = rest.split_once('=').ok_or_else(|| err(n, "expected ngram N=count"))?;
        let order: usize = order.trim().parse().map_err(|_| err(n, "bad order"))?;
        let count: usize = count.trim().parse().map_err(|_| err(n, "bad count"))?;
        if order != counts.len() + 1 {
            return Err(err(n, format!("ngram {order} listed out of order")));
        }
        counts.push(count);
    }
    if counts.is_empty() {
        let line = lines.peek().map_or(1, |&(n, _)| n);
        return Err(err(line, "no ngram counts in \\data\\"));
    }
    let mut model = NGramModel::empty(counts.len()).map_err(|e| err(1, e.to_string()))?;
    for (k, &expected) in counts.iter().enumerate() {
        let order = k + 1;
        let header = format!("\\{order}-grams:");
        match lines.next() {
            Some((_, l)) if l == header => {}
            Some((n, l)) => return Err(err(n, format!("expected {header}, found {l:?}"))),
            None => return Err(err(text.lines().count(), format!("missing {header}"))),
        }
        let mut seen = 0;
        while let Some(&(n, l)) = lines.peek() {
            if l.starts_with('\\') {
                break;
            }
            lines.next();
            let fields: Vec<&str> = l.split('\t').collect();
            let backoff = match (fields.len(), order < counts.len()) {
                (2, _) => 0.0,
                (3, true) => number(n, fields[2])?,
                (3, false) => return Err(err(n, "backoff weight on a highest-order n-gram")),
                _ => return Err(err(n, "expected 2 or 3 tab-separated fields")),
            };
            let words: Vec<&str> = fields[1].split(' ').collect();
            if words.len() != order || words.iter().any(|w| w.is_empty()) {
                return Err(err(n, format!("expected {order} space-separated words")));
            }
            let entry = NGramEntry { log10_prob: number(n, fields[0])?, log10_backoff: backoff };
            model.insert(&words, entry).map_err(|e| err(n, e.to_string()))?;
            seen += 1;
        }
        if seen != expected {
            let line = lines.peek().map_or(text.lines().count(), |&(n, _)| n);
            return Err(err(line, format!("\\data\\ lists {expected} {order}-grams, section has {seen}")));
        }
    }
    match lines.next() {
        Some((_, "\\end\\")) => {}
        Some((n, l)) => return Err(err(n, format!("expected \\end\\, found {l:?}"))),
        None => return Err(err(text.lines().count(), "missing \\end\\")),
    }
    if let Some((n, _)) = lines.next() {
        return Err(err(n, "content after \\end\\"));
    }
    model.validate().map_err(|e| err(0, e.to_string()))?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use lrasr_core::ngram::{train_ngram, Smoothing};

    fn corpus() -> Vec<Vec<&'static str>> {
        vec![vec!["a", "b", "a"], vec!["b", "a", "c", "a"], vec!["c", "b"]]
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let (m, _) = train_ngram(&corpus(), 3, Smoothing::ModifiedKneserNey).unwrap();
        let text = write_arpa(&m);
        let back = read_arpa(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(write_arpa(&back), text);
    }

    #[test]
    fn unigram_model_has_one_section() {
        let mut m = NGramModel::empty(1).unwrap();
        for w in ["<s>", "</s>", "<unk>", "a"] {
            m.insert(&[w], NGramEntry { log10_prob: -0.6, log10_backoff: 0.0 }).unwrap();
        }
        let text = write_arpa(&m);
        assert_eq!(text.matches("-grams:").count(), 1);
        assert_eq!(read_arpa(&text).unwrap(), m);
    }

    #[test]
    fn grammar_errors_name_the_line() {
        assert_eq!(read_arpa("\\data\\\nngram 1=1\n\n\\1-grams:\n-1\ta\n").unwrap_err().line, 5);
        assert_eq!(read_arpa("\\data\\\nngram 1=2\n\n\\1-grams:\n-1\ta\n\\end\\\n").unwrap_err().line, 6);
        assert_eq!(read_arpa("\\data\\\nngram 1=1\n\n\\1-grams:\n-1 a\n\\end\\\n").unwrap_err().line, 5);
        assert_eq!(read_arpa("\\data\\\nngram 1=1\n\n\\1-grams:\nx\ta\n\\end\\\n").unwrap_err().line, 5);
        let dangling = "\\data\\\nngram 1=1\nngram 2=1\n\n\\1-grams:\n-1\ta\t0\n\n\\2-grams:\n-1\ta b\n\\end\\\n";
        assert_eq!(read_arpa(dangling).unwrap_err().line, 9);
        assert_eq!(read_arpa("ngram 1=1").unwrap_err().line, 1);
    }
}
