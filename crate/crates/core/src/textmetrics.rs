//! Length, repetition and diversity statistics for generated responses.
//!
//! Tokens are maximal runs of non-whitespace. For `n`-grams over those
//! tokens, `rep_n = 1 - distinct / total`. Diversity is
//! `D = (1 - rep_2)(1 - rep_3)(1 - rep_4)` and
//! `log_diversity = -ln(1 - D)`, reported as [`LOG_DIVERSITY_CAP`] when
//! `D == 1` (no repeated n-gram at all). Repetition and diversity are
//! computed on each response's first `k` tokens; shorter responses are
//! excluded from those statistics but still count toward lengths.

use std::collections::HashSet;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LOG_DIVERSITY_CAP: f64 = 20.0;

/// Orders combined into the diversity product.
pub const DIVERSITY_ORDERS: [usize; 3] = [2, 3, 4];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("need at least {needed} tokens, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("n-gram order must be at least 1")]
    ZeroOrder,
    #[error("k_words must be at least {min}, got {got}")]
    BadK { min: usize, got: usize },
    #[error("all {total} responses are shorter than {k_words} words")]
    AllExcluded { total: usize, k_words: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub prompt: String,
    pub response: String,
}

pub fn read_corpus(path: &Path) -> Result<Vec<ResponseRecord>> {
    let io = |source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| MetricsError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_corpus(records: &[ResponseRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect()
}

pub fn tokens(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Mean character count (Unicode scalar values) and mean whitespace-token
/// count.
pub fn length_stats<S: AsRef<str>>(responses: &[S]) -> Result<(f64, f64)> {
    if responses.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let n = responses.len() as f64;
    let chars: usize = responses.iter().map(|r| r.as_ref().chars().count()).sum();
    let words: usize = responses.iter().map(|r| tokens(r.as_ref()).len()).sum();
    Ok((chars as f64 / n, words as f64 / n))
}

/// The first `k` tokens joined by single spaces, or `None` when the text
/// has fewer than `k`.
pub fn truncate_first_k_words(text: &str, k: usize) -> Option<String> {
    let t = tokens(text);
    (t.len() >= k).then(|| t[..k].join(" "))
}

fn repetition_of(tokens: &[&str], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(MetricsError::ZeroOrder);
    }
    if tokens.len() < n {
        return Err(MetricsError::TooShort {
            needed: n,
            got: tokens.len(),
        });
    }
    let grams: Vec<&[&str]> = tokens.windows(n).collect();
    let distinct: HashSet<&[&str]> = grams.iter().copied().collect();
    Ok(1.0 - distinct.len() as f64 / grams.len() as f64)
}

pub fn ngram_repetition(text: &str, n: usize) -> Result<f64> {
    repetition_of(&tokens(text), n)
}

pub fn diversity(text: &str) -> Result<f64> {
    let t = tokens(text);
    DIVERSITY_ORDERS
        .iter()
        .try_fold(1.0, |d, &n| Ok(d * (1.0 - repetition_of(&t, n)?)))
}

pub fn log_diversity_of(d: f64) -> f64 {
    if d >= 1.0 {
        LOG_DIVERSITY_CAP
    } else {
        (-(1.0 - d).ln()).min(LOG_DIVERSITY_CAP)
    }
}

pub fn log_diversity(text: &str) -> Result<f64> {
    Ok(log_diversity_of(diversity(text)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityStats {
    /// Mean `rep_n` for `n` = 2, 3, 4.
    pub repetition: [f64; 3],
    pub diversity: f64,
    pub log_diversity: f64,
    pub n_included: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub k_words: usize,
    pub n_responses: usize,
    pub n_empty: usize,
    pub mean_chars: f64,
    pub mean_words: f64,
    pub diversity: DiversityStats,
}

/// Lengths over every response; repetition and diversity means over the
/// responses with at least `k_words` tokens, truncated to that many.
pub fn corpus_report<S: AsRef<str>>(responses: &[S], k_words: usize) -> Result<CorpusReport> {
    let min = *DIVERSITY_ORDERS.iter().max().expect("non-empty");
    if k_words < min {
        return Err(MetricsError::BadK { min, got: k_words });
    }
    let (mean_chars, mean_words) = length_stats(responses)?;
    let kept: Vec<String> = responses
        .iter()
        .filter_map(|r| truncate_first_k_words(r.as_ref(), k_words))
        .collect();
    if kept.is_empty() {
        return Err(MetricsError::AllExcluded {
            total: responses.len(),
            k_words,
        });
    }
    let n = kept.len() as f64;
    let mut repetition = [0.0; 3];
    let mut div = 0.0;
    let mut log_div = 0.0;
    for text in &kept {
        for (slot, &order) in repetition.iter_mut().zip(&DIVERSITY_ORDERS) {
            *slot += ngram_repetition(text, order)? / n;
        }
        let d = diversity(text)?;
        div += d / n;
        log_div += log_diversity_of(d) / n;
    }
    Ok(CorpusReport {
        k_words,
        n_responses: responses.len(),
        n_empty: responses.iter().filter(|r| r.as_ref().trim().is_empty()).count(),
        mean_chars,
        mean_words,
        diversity: DiversityStats {
            repetition,
            diversity: div,
            log_diversity: log_div,
            n_included: kept.len(),
        },
    })
}

impl CorpusReport {
    pub fn to_table(&self) -> String {
        let rows = [
            ("responses", self.n_responses.to_string()),
            ("empty", self.n_empty.to_string()),
            (
                "included",
                format!("{} (first {} words)", self.diversity.n_included, self.k_words),
            ),
            ("mean chars", format!("{:.2}", self.mean_chars)),
            ("mean words", format!("{:.2}", self.mean_words)),
            ("2-gram rep %", format!("{:.2}", 100.0 * self.diversity.repetition[0])),
            ("3-gram rep %", format!("{:.2}", 100.0 * self.diversity.repetition[1])),
            ("4-gram rep %", format!("{:.2}", 100.0 * self.diversity.repetition[2])),
            ("diversity", format!("{:.4}", self.diversity.diversity)),
            ("log-diversity", format!("{:.4}", self.diversity.log_diversity)),
        ];
        rows.iter().map(|(k, v)| format!("{k:<14} {v:>24}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lengths() {
        assert_eq!(length_stats(&["ab cd"]).unwrap(), (5.0, 2.0));
        assert_eq!(length_stats(&["", "abcd"]).unwrap(), (2.0, 0.5));
        assert_eq!(length_stats(&["héllo wörld"]).unwrap(), (11.0, 2.0));
        assert!(matches!(length_stats::<&str>(&[]), Err(MetricsError::EmptyCorpus)));
    }

    #[test]
    fn truncation() {
        assert_eq!(truncate_first_k_words("a b c d", 2).as_deref(), Some("a b"));
        assert_eq!(truncate_first_k_words("a b", 3), None);
        assert_eq!(truncate_first_k_words("a  b\tc", 3).as_deref(), Some("a b c"));
    }

    #[test]
    fn repetition_hand_cases() {
        assert_eq!(ngram_repetition("a b c d", 2).unwrap(), 0.0);
        assert_eq!(ngram_repetition("a b a b a", 2).unwrap(), 0.5);
        assert_eq!(ngram_repetition("x x x x", 2).unwrap(), 1.0 - 1.0 / 3.0);
        assert!(matches!(ngram_repetition("a", 2), Err(MetricsError::TooShort { .. })));
    }

    #[test]
    fn log_diversity_hand_cases() {
        assert_eq!(log_diversity("a b c d e").unwrap(), LOG_DIVERSITY_CAP);
        let d = 0.25 * (1.0 / 3.0) * 0.5;
        assert!((diversity("x x x x x").unwrap() - d).abs() < 1e-15);
        let v = log_diversity("x x x x x").unwrap();
        assert!((v - (24.0f64 / 23.0).ln()).abs() < 1e-12);
        assert!((v - 0.0426).abs() < 5e-5);
        assert!(log_diversity("a b c").is_err());
    }

    #[test]
    fn report_counts_exclusions() {
        let r = corpus_report(&["a b c d e f", "short", "", "g h i j k l"], 5).unwrap();
        assert_eq!(r.diversity.n_included, 2);
        assert_eq!(r.n_empty, 1);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<CorpusReport>(&json).unwrap(), r);
        assert!(matches!(
            corpus_report(&["a b"], 4),
            Err(MetricsError::AllExcluded { total: 1, .. })
        ));
        assert!(matches!(corpus_report(&["a b c d"], 3), Err(MetricsError::BadK { .. })));
    }

    #[test]
    fn single_response_report_equals_its_metrics() {
        let text = "the cat sat on the mat and the cat sat down";
        let r = corpus_report(&[text], 8).unwrap();
        let cut = truncate_first_k_words(text, 8).unwrap();
        assert_eq!(r.diversity.repetition[0], ngram_repetition(&cut, 2).unwrap());
        assert_eq!(r.diversity.log_diversity, log_diversity(&cut).unwrap());
        assert_eq!(r.mean_chars, text.chars().count() as f64);
    }

    fn oracle(words: &[String], n: usize) -> f64 {
        let mut seen: Vec<Vec<String>> = Vec::new();
        let mut total = 0;
        for i in 0..=words.len() - n {
            let g = words[i..i + n].to_vec();
            total += 1;
            if !seen.contains(&g) {
                seen.push(g);
            }
        }
        1.0 - seen.len() as f64 / total as f64
    }

    proptest! {
        #[test]
        fn repetition_matches_oracle(words in prop::collection::vec("[a-c]{1,2}", 4..30), n in 1usize..5) {
            let text = words.join(" ");
            let got = ngram_repetition(&text, n).unwrap();
            prop_assert_eq!(got, oracle(&words, n));
            prop_assert!((0.0..=1.0).contains(&got));
        }

        #[test]
        fn appending_a_novel_word_never_lowers_diversity(words in prop::collection::vec("[a-c]{1,2}", 4..20)) {
            let text = words.join(" ");
            let longer = format!("{text} zzzz");
            prop_assert!(diversity(&longer).unwrap() >= diversity(&text).unwrap());
        }
    }
}
