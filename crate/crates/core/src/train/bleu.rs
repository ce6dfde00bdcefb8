//! Corpus BLEU-4 with 13a-style tokenization.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

fn rules() -> &'static [(Regex, &'static str); 4] {
    static RULES: OnceLock<[(Regex, &'static str); 4]> = OnceLock::new();
    RULES.get_or_init(|| {
        [
            (Regex::new(r"([\{-~\[-` -&\(-\+:-@/])").unwrap(), " $1 "),
            (Regex::new(r"([^0-9])([\.,])").unwrap(), "$1 $2 "),
            (Regex::new(r"([\.,])([^0-9])").unwrap(), " $1 $2"),
            (Regex::new(r"([0-9])(-)").unwrap(), "$1 $2 "),
        ]
    })
}

/// Splits on whitespace after isolating ASCII punctuation. Periods and
/// commas between digits stay attached.
pub fn tokenize_13a(line: &str) -> Vec<String> {
    let mut text = line
        .replace("<skipped>", "")
        .replace("-\n", "")
        .replace('\n', " ")
        .replace("&quot;", "\"")
        .replace("&amp;", "&")
        .replace("&lt;", "<")
        .replace("&gt;", ">");
    text = format!(" {text} ");
    for (re, rep) in rules() {
        text = re.replace_all(&text, *rep).into_owned();
    }
    text.split_whitespace().map(str::to_string).collect()
}

/// Sufficient statistics of corpus BLEU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

impl BleuStats {
    pub fn add_sentence(&mut self, hyp: &str, reference: &str) {
        let h = tokenize_13a(hyp);
        let r = tokenize_13a(reference);
        self.hyp_len += h.len();
        self.ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            self.totals[n - 1] += h.len().saturating_sub(n - 1);
            self.matches[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }

    pub fn precision(&self, n: usize) -> f64 {
        self.matches[n - 1] as f64 / self.totals[n - 1] as f64
    }

    /// Score in 0..=100. Orders with no hypothesis n-grams at all are left
    /// out of the geometric mean, so a corpus of short sentences can still
    /// score 100 against itself. Otherwise any zero precision gives 0.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 {
            return if self.ref_len == 0 { 100.0 } else { 0.0 };
        }
        let orders: Vec<usize> = (1..=MAX_ORDER)
            .filter(|&n| self.totals[n - 1] > 0)
            .collect();
        if orders.iter().any(|&n| self.matches[n - 1] == 0) {
            return 0.0;
        }
        let log_mean =
            orders.iter().map(|&n| self.precision(n).ln()).sum::<f64>() / orders.len() as f64;
        100.0 * self.brevity_penalty() * log_mean.exp()
    }

    /// `exp(1 - ref_len / hyp_len)` for short hypotheses, else 1.
    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        }
    }
}

pub fn corpus_bleu_stats<H: AsRef<str>, R: AsRef<str>>(
    hyps: &[H],
    refs: &[R],
) -> Result<BleuStats> {
    if hyps.is_empty() {
        return Err(Error::Empty("no hypotheses to score".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Corpus(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut stats = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        stats.add_sentence(h.as_ref(), r.as_ref());
    }
    Ok(stats)
}

pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<f64> {
    Ok(corpus_bleu_stats(hyps, refs)?.score())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenization() {
        assert_eq!(tokenize_13a("Hello, world!"), ["Hello", ",", "world", "!"]);
        assert_eq!(
            tokenize_13a("It costs 3.50, ok."),
            ["It", "costs", "3.50", ",", "ok", "."]
        );
        assert_eq!(
            tokenize_13a("a (b) \"c\""),
            ["a", "(", "b", ")", "\"", "c", "\""]
        );
        assert_eq!(tokenize_13a("1990-2000 x-y"), ["1990", "-", "2000", "x-y"]);
        assert_eq!(tokenize_13a("&quot;hi&quot;"), ["\"", "hi", "\""]);
        assert_eq!(tokenize_13a("привет  мир"), ["привет", "мир"]);
    }

    #[test]
    fn identical_is_perfect() {
        let x = ["the cat sat on the mat", "a b", "z"];
        assert_eq!(corpus_bleu(&x, &x).unwrap(), 100.0);
    }

    #[test]
    fn no_four_gram_overlap_scores_zero() {
        let hyp = ["a b c d e"];
        let reference = ["a b c x d e"];
        let stats = corpus_bleu_stats(&hyp, &reference).unwrap();
        assert_eq!(stats.matches[3], 0);
        assert!(stats.totals[3] > 0);
        assert_eq!(stats.score(), 0.0);
    }

    #[test]
    fn clipped_unigram_precision_by_hand() {
        let stats = corpus_bleu_stats(&["the the the"], &["the cat sat"]).unwrap();
        // "the" appears three times but only once in the reference.
        assert_eq!((stats.matches[0], stats.totals[0]), (1, 3));
        assert_eq!(stats.precision(1), 1.0 / 3.0);
        assert_eq!((stats.matches[1], stats.totals[1]), (0, 2));
    }

    #[test]
    fn brevity_penalty_by_hand() {
        // Every hypothesis n-gram matches; only the length differs.
        let score = corpus_bleu(&["a b c d"], &["a b c d e f"]).unwrap();
        let expected = 100.0 * (1.0f64 - 6.0 / 4.0).exp();
        assert!((score - expected).abs() < 1e-12);
    }

    #[test]
    fn partial_overlap_by_hand() {
        // unigrams 6/6, bigrams 3/5, trigrams 2/4, 4-grams 1/3; equal lengths.
        let score = corpus_bleu(&["w x y z q v"], &["w x y z v q"]).unwrap();
        let stats = corpus_bleu_stats(&["w x y z q v"], &["w x y z v q"]).unwrap();
        assert_eq!(stats.matches, [6, 3, 2, 1]);
        assert_eq!(stats.totals, [6, 5, 4, 3]);
        let expected = 100.0 * (1.0f64 * 0.6 * 0.5 * (1.0 / 3.0)).powf(0.25);
        assert!((score - expected).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let empty: [&str; 0] = [];
        assert!(corpus_bleu(&empty, &empty).is_err());
        assert!(corpus_bleu(&["a"], &["a", "b"]).is_err());
    }

    proptest! {
        #[test]
        fn self_bleu_is_100(lines in prop::collection::vec("[a-z ,.!]{1,30}", 1..8)) {
            let lines: Vec<String> = lines.into_iter().map(|l| format!("x{l}")).collect();
            prop_assert!((corpus_bleu(&lines, &lines).unwrap() - 100.0).abs() < 1e-9);
        }

        #[test]
        fn score_in_range(h in prop::collection::vec("[a-c ]{0,12}", 1..5), r in prop::collection::vec("[a-c ]{0,12}", 1..5)) {
            let n = h.len().min(r.len());
            let s = corpus_bleu(&h[..n], &r[..n]).unwrap();
            prop_assert!((0.0..=100.0 + 1e-9).contains(&s));
        }
    }
}
