//! Interpolated modified Kneser-Ney estimation with an additive fallback.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;

use super::{NGramEntry, NGramError, NGramModel, ARPA_LOG_ZERO, BOS, EOS, UNK};

/// Additive constant used when Kneser-Ney discounts cannot be estimated.
pub const ADD_K_FALLBACK: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Smoothing {
    ModifiedKneserNey,
    /// Interpolated additive smoothing with pseudo-count `k` per word.
    AddK(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainWarning {
    /// Count-of-counts at this order could not support the discounts; the
    /// whole model was estimated with add-k instead.
    DegenerateCountOfCounts { order: usize, count_of_counts: [usize; 4] },
}

type Counts = BTreeMap<Vec<u32>, u64>;

struct Vocab {
    ids: BTreeMap<alloc::string::String, u32>,
    words: Vec<alloc::string::String>,
}

impl Vocab {
    fn id(&mut self, w: &str) -> u32 {
        if let Some(&id) = self.ids.get(w) {
            return id;
        }
        let id = self.words.len() as u32;
        self.ids.insert(w.into(), id);
        self.words.push(w.into());
        id
    }
}

/// Trains an order-`order` model on whitespace-tokenized sentences. Each
/// sentence is wrapped in `<s> … </s>`; `<unk>` always receives smoothed
/// unigram mass.
pub fn train_ngram<S: AsRef<str>>(
    corpus: &[Vec<S>],
    order: usize,
    smoothing: Smoothing,
) -> Result<(NGramModel, Vec<TrainWarning>), NGramError> {
    if order == 0 {
        return Err(NGramError::ZeroOrder);
    }
    if corpus.is_empty() {
        return Err(NGramError::EmptyCorpus);
    }

    // Sorted vocabulary so ids, and with them everything downstream, are
    // independent of corpus order.
    let mut vocab = Vocab { ids: BTreeMap::new(), words: Vec::new() };
    let mut sorted: BTreeSet<&str> = corpus.iter().flatten().map(AsRef::as_ref).collect();
    sorted.extend([BOS, EOS, UNK]);
    for w in sorted {
        vocab.id(w);
    }
    let bos = vocab.ids[BOS];
    let unk = vocab.ids[UNK];

    let mut counts: Vec<Counts> = vec![BTreeMap::new(); order];
    for sentence in corpus {
        let mut tokens = vec![bos];
        tokens.extend(sentence.iter().map(|w| vocab.ids[w.as_ref()]));
        tokens.push(vocab.ids[EOS]);
        for end in 1..tokens.len() {
            for n in 1..=order.min(end + 1) {
                *counts[n - 1].entry(tokens[end + 1 - n..=end].to_vec()).or_insert(0) += 1;
            }
        }
    }

    // Words a context may predict: everything except <s>.
    let predictable: Vec<u32> = (0..vocab.words.len() as u32).filter(|&id| id != bos).collect();

    let mut warnings = Vec::new();
    let probs = match smoothing {
        Smoothing::ModifiedKneserNey => {
            let adjusted = adjusted_counts(&counts, bos);
            let mut discounts = Vec::with_capacity(order);
            for (n, table) in adjusted.iter().enumerate() {
                match discounts_for(table) {
                    Ok(d) => discounts.push(d),
                    Err(count_of_counts) => {
                        warnings.push(TrainWarning::DegenerateCountOfCounts { order: n + 1, count_of_counts });
                        break;
                    }
                }
            }
            if warnings.is_empty() {
                estimate(&adjusted, &predictable, |n, count| discounts[n][bucket(count)])
            } else {
                additive(&counts, &predictable, ADD_K_FALLBACK)
            }
        }
        Smoothing::AddK(k) => additive(&counts, &predictable, k),
    };

    let mut model = NGramModel { order, words: vocab.words, ids: vocab.ids, tables: vec![BTreeMap::new(); order] };
    let Estimate { probs, backoffs } = probs;
    for (n, table) in probs.into_iter().enumerate() {
        for (key, p) in table {
            let backoff = backoffs.get(&key).copied().unwrap_or(1.0);
            model.tables[n].insert(key, NGramEntry { log10_prob: libm::log10(p), log10_backoff: libm::log10(backoff) });
        }
    }
    let bos_backoff = backoffs.get(&vec![bos]).copied().unwrap_or(1.0);
    model.tables[0]
        .insert(vec![bos], NGramEntry { log10_prob: ARPA_LOG_ZERO, log10_backoff: libm::log10(bos_backoff) });
    debug_assert!(model.tables[0].contains_key(&vec![unk]));
    Ok((model, warnings))
}

/// Highest order keeps raw counts. Lower orders use the number of distinct
/// left extensions, except n-grams starting with `<s>`, which have none and
/// keep their raw counts.
fn adjusted_counts(raw: &[Counts], bos: u32) -> Vec<Counts> {
    let order = raw.len();
    let mut adjusted = raw.to_vec();
    for n in 1..order {
        let mut continuation: Counts = BTreeMap::new();
        for key in raw[n].keys() {
            *continuation.entry(key[1..].to_vec()).or_insert(0) += 1;
        }
        for (key, value) in adjusted[n - 1].iter_mut() {
            if key[0] != bos {
                *value = continuation.get(key).copied().unwrap_or(0);
            }
        }
    }
    adjusted
}

fn bucket(count: u64) -> usize {
    (count.min(3) - 1) as usize
}

/// Discounts `D1, D2, D3+` from count-of-counts `t1..t4`:
/// `Y = t1 / (t1 + 2 t2)`, `Dk = k - (k + 1) Y t(k+1) / tk`.
///
/// A discount is needed only for buckets that hold n-grams; it is rejected
/// when its denominator count-of-count is zero or it falls outside `[0, k]`.
fn discounts_for(table: &Counts) -> Result<[f64; 3], [usize; 4]> {
    let mut t = [0usize; 4];
    let mut populated = [false; 3];
    for &c in table.values() {
        if (1..=4).contains(&c) {
            t[c as usize - 1] += 1;
        }
        if c >= 1 {
            populated[bucket(c)] = true;
        }
    }
    let mut d = [0.0; 3];
    if t[0] == 0 {
        return Err(t);
    }
    let y = t[0] as f64 / (t[0] as f64 + 2.0 * t[1] as f64);
    for k in 0..3 {
        if !populated[k] {
            continue;
        }
        if t[k] == 0 {
            return Err(t);
        }
        let kf = (k + 1) as f64;
        d[k] = kf - (kf + 1.0) * y * t[k + 1] as f64 / t[k] as f64;
        if !(0.0..=kf).contains(&d[k]) {
            return Err(t);
        }
    }
    Ok(d)
}

struct Estimate {
    /// Interpolated probabilities per order, linear domain.
    probs: Vec<BTreeMap<Vec<u32>, f64>>,
    /// Back-off weight per context, linear domain.
    backoffs: BTreeMap<Vec<u32>, f64>,
}

#[derive(Default, Clone, Copy)]
struct ContextStats {
    total: f64,
    discounted: f64,
}

/// Interpolated absolute discounting:
/// `p(w|h) = (a(hw) - D(a(hw))) / S(h) + γ(h) p(w|h')`, `γ(h) = ΣD / S(h)`,
/// bottoming out in the uniform distribution over predictable words.
fn estimate(adjusted: &[Counts], predictable: &[u32], discount: impl Fn(usize, u64) -> f64) -> Estimate {
    let mut probs: Vec<BTreeMap<Vec<u32>, f64>> = Vec::with_capacity(adjusted.len());
    let mut backoffs = BTreeMap::new();
    for (n, table) in adjusted.iter().enumerate() {
        let mut stats: BTreeMap<&[u32], ContextStats> = BTreeMap::new();
        for (key, &a) in table {
            let s = stats.entry(&key[..n]).or_default();
            s.total += a as f64;
            s.discounted += discount(n, a);
        }
        let mut level = BTreeMap::new();
        if n == 0 {
            let s = stats.get(&[][..]).copied().unwrap_or_default();
            let gamma = s.discounted / s.total;
            let uniform = 1.0 / predictable.len() as f64;
            for &w in predictable {
                let a = table.get(&vec![w][..]).copied().unwrap_or(0);
                let own = if a > 0 { (a as f64 - discount(0, a)) / s.total } else { 0.0 };
                level.insert(vec![w], own + gamma * uniform);
            }
        } else {
            for (key, &a) in table {
                let s = stats[&key[..n]];
                let gamma = s.discounted / s.total;
                let lower = probs[n - 1][&key[1..]];
                level.insert(key.clone(), (a as f64 - discount(n, a)) / s.total + gamma * lower);
            }
        }
        for (context, s) in &stats {
            if !context.is_empty() {
                backoffs.insert(context.to_vec(), s.discounted / s.total);
            }
        }
        probs.push(level);
    }
    Estimate { probs, backoffs }
}

/// `p(w|h) = (c(hw) + k|V| p(w|h')) / (S(h) + k|V|)` with raw counts.
fn additive(raw: &[Counts], predictable: &[u32], k: f64) -> Estimate {
    let strength = k * predictable.len() as f64;
    let mut probs: Vec<BTreeMap<Vec<u32>, f64>> = Vec::with_capacity(raw.len());
    let mut backoffs = BTreeMap::new();
    for (n, table) in raw.iter().enumerate() {
        let mut totals: BTreeMap<&[u32], f64> = BTreeMap::new();
        for (key, &c) in table {
            *totals.entry(&key[..n]).or_insert(0.0) += c as f64;
        }
        let mut level = BTreeMap::new();
        if n == 0 {
            let total = totals.get(&[][..]).copied().unwrap_or(0.0);
            for &w in predictable {
                let c = table.get(&vec![w][..]).copied().unwrap_or(0) as f64;
                level.insert(vec![w], (c + k) / (total + strength));
            }
        } else {
            for (key, &c) in table {
                let total = totals[&key[..n]];
                let lower = probs[n - 1][&key[1..]];
                level.insert(key.clone(), (c as f64 + strength * lower) / (total + strength));
            }
        }
        for (context, total) in totals {
            if !context.is_empty() {
                backoffs.insert(context.to_vec(), strength / (total + strength));
            }
        }
        probs.push(level);
    }
    Estimate { probs, backoffs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ngram::perplexity;
    use alloc::string::String;
    use alloc::vec;

    fn corpus(lines: &[&str]) -> Vec<Vec<String>> {
        lines.iter().map(|l| l.split_whitespace().map(String::from).collect()).collect()
    }

    #[test]
    fn empty_corpus() {
        let c: Vec<Vec<String>> = vec![];
        assert_eq!(train_ngram(&c, 2, Smoothing::ModifiedKneserNey).unwrap_err(), NGramError::EmptyCorpus);
        assert_eq!(train_ngram(&corpus(&["a"]), 0, Smoothing::ModifiedKneserNey).unwrap_err(), NGramError::ZeroOrder);
    }

    #[test]
    fn single_symbol_limit() {
        let line = vec!["a"; 1000].join(" ");
        let (model, warnings) = train_ngram(&corpus(&[&line]), 1, Smoothing::ModifiedKneserNey).unwrap();
        assert_eq!(warnings.len(), 1, "bucket 3+ without any count-3 unigram is degenerate");
        assert!(libm::pow(10.0, model.score("a", &[])) > 0.998);
        let report = perplexity(&model, &corpus(&[&line]));
        assert!(report.ppl_including_oov < 1.01, "{}", report.ppl_including_oov);
    }

    #[test]
    fn two_sentence_bigram_is_not_degenerate() {
        let (model, warnings) = train_ngram(&corpus(&["a b", "a c"]), 2, Smoothing::ModifiedKneserNey).unwrap();
        assert!(warnings.is_empty());
        assert!(model.has_unk());
        assert_eq!(model.counts(), [6, 5]);
    }

    #[test]
    fn bos_is_never_predicted() {
        let (model, _) = train_ngram(&corpus(&["x y", "y"]), 3, Smoothing::ModifiedKneserNey).unwrap();
        assert_eq!(model.entry(&[BOS]).unwrap().log10_prob, ARPA_LOG_ZERO);
        assert!(model.predictable_ids().all(|id| model.word(id) != BOS));
    }

    #[test]
    fn add_k_unigram_formula() {
        let (model, warnings) = train_ngram(&corpus(&["a a b"]), 1, Smoothing::AddK(0.5)).unwrap();
        assert!(warnings.is_empty());
        // predictable: a, b, </s>, <unk>; total count 4
        let p = |w: &str| libm::pow(10.0, model.score(w, &[]));
        assert!((p("a") - 2.5 / 6.0).abs() < 1e-12);
        assert!((p("zzz") - 0.5 / 6.0).abs() < 1e-12);
    }
}
