//! Corpus BLEU, corpus chrF, and SQuAD-style token F1.
//!
//! BLEU follows the usual corpus definition: clipped n-gram counts summed
//! over the corpus, geometric mean of orders `1..=bleu_max_ngram`, brevity
//! penalty `min(1, exp(1 - r/c))`. Orders with no hypothesis n-grams at all
//! are left out of the mean (so very short identical corpora still score 100).
//! Without smoothing any order with zero matches yields 0.
//!
//! Spaced scripts are tokenized with the "13a" punctuation-splitting rules;
//! languages in `bleu_charlevel_langs` are split into characters.
//!
//! chrF sums character n-gram statistics over the corpus, computes
//! `F_β = (1+β²)PR / (β²P + R)` for every order that has n-grams on both
//! sides, and averages those F scores.

use std::collections::{BTreeSet, HashMap};
use std::hash::Hash;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("{hyps} hypotheses but {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid metric config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub bleu_max_ngram: usize,
    /// Add-k smoothing for orders ≥ 2; `None` means no smoothing.
    pub bleu_smoothing: Option<f64>,
    pub bleu_charlevel_langs: BTreeSet<String>,
    pub chrf_char_order: usize,
    pub chrf_beta: f64,
    pub chrf_remove_whitespace: bool,
    pub f1_charlevel_langs: BTreeSet<String>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        let cjk: BTreeSet<String> = ["zho", "jpn"].into_iter().map(String::from).collect();
        Self {
            bleu_max_ngram: 4,
            bleu_smoothing: None,
            bleu_charlevel_langs: cjk.clone(),
            chrf_char_order: 6,
            chrf_beta: 2.0,
            chrf_remove_whitespace: true,
            f1_charlevel_langs: cjk,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<(), MetricError> {
        if self.bleu_max_ngram == 0 || self.chrf_char_order == 0 {
            return Err(MetricError::InvalidConfig("orders must be >= 1".into()));
        }
        if !(self.chrf_beta > 0.0) {
            return Err(MetricError::InvalidConfig("chrf_beta must be > 0".into()));
        }
        if self.bleu_smoothing.is_some_and(|k| !(k >= 0.0)) {
            return Err(MetricError::InvalidConfig("smoothing k must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BleuTokenizer {
    Thirteen,
    Char,
}

fn check_lengths(hyps: &[String], refs: &[String]) -> Result<(), MetricError> {
    if hyps.len() != refs.len() {
        return Err(MetricError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    Ok(())
}

fn ngram_counts<T: Eq + Hash + Clone>(items: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if items.len() >= n {
        for w in items.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// `(matches, hyp_total, ref_total)` for one order.
fn clipped<T: Eq + Hash + Clone>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matches = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (
        matches,
        hyp.len().saturating_sub(n - 1),
        reference.len().saturating_sub(n - 1),
    )
}

fn thirteen_a_rules() -> &'static [(Regex, &'static str)] {
    static RULES: OnceLock<Vec<(Regex, &'static str)>> = OnceLock::new();
    RULES.get_or_init(|| {
        vec![
            (Regex::new(r"([{-~\[-` -&(-+:-@/])").unwrap(), " $1 "),
            (Regex::new(r"([^0-9])([\.,])").unwrap(), "$1 $2 "),
            (Regex::new(r"([\.,])([^0-9])").unwrap(), " $1 $2"),
            (Regex::new(r"([0-9])(-)").unwrap(), "$1 $2 "),
        ]
    })
}

/// The "13a" tokenization: unescape a few entities, pad punctuation, split.
pub fn tokenize_13a(line: &str) -> Vec<String> {
    let mut s = line
        .replace("<skipped>", "")
        .replace("-\n", "")
        .replace('\n', " ");
    if s.contains('&') {
        s = s
            .replace("&quot;", "\"")
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">");
    }
    let mut s = format!(" {s} ");
    for (re, rep) in thirteen_a_rules() {
        s = re.replace_all(&s, *rep).into_owned();
    }
    s.split_whitespace().map(str::to_string).collect()
}

fn bleu_tokens(s: &str, tok: BleuTokenizer) -> Vec<String> {
    match tok {
        BleuTokenizer::Thirteen => tokenize_13a(s),
        BleuTokenizer::Char => s
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(String::from)
            .collect(),
    }
}

pub fn corpus_bleu_with(
    hyps: &[String],
    refs: &[String],
    tok: BleuTokenizer,
    cfg: &MetricConfig,
) -> Result<f64, MetricError> {
    check_lengths(hyps, refs)?;
    cfg.validate()?;
    let max_n = cfg.bleu_max_ngram;
    let mut correct = vec![0.0f64; max_n];
    let mut total = vec![0.0f64; max_n];
    let (mut sys_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let ht = bleu_tokens(h, tok);
        let rt = bleu_tokens(r, tok);
        sys_len += ht.len();
        ref_len += rt.len();
        for n in 1..=max_n {
            let (m, t, _) = clipped(&ht, &rt, n);
            correct[n - 1] += m as f64;
            total[n - 1] += t as f64;
        }
    }
    if sys_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 0..max_n {
        let (mut c, mut t) = (correct[n], total[n]);
        if n > 0 {
            if let Some(k) = cfg.bleu_smoothing {
                c += k;
                t += k;
            }
        }
        if t == 0.0 {
            continue;
        }
        if c == 0.0 {
            return Ok(0.0);
        }
        log_sum += (c / t).ln();
        orders += 1;
    }
    let bp = if sys_len < ref_len {
        (1.0 - ref_len as f64 / sys_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * (log_sum / orders as f64).exp())
}

/// Corpus BLEU with 13a tokenization.
pub fn corpus_bleu(hyps: &[String], refs: &[String], cfg: &MetricConfig) -> Result<f64, MetricError> {
    corpus_bleu_with(hyps, refs, BleuTokenizer::Thirteen, cfg)
}

/// Corpus BLEU with the tokenization configured for `lang`.
pub fn corpus_bleu_lang(
    hyps: &[String],
    refs: &[String],
    lang: &str,
    cfg: &MetricConfig,
) -> Result<f64, MetricError> {
    let tok = if cfg.bleu_charlevel_langs.contains(lang) {
        BleuTokenizer::Char
    } else {
        BleuTokenizer::Thirteen
    };
    corpus_bleu_with(hyps, refs, tok, cfg)
}

pub fn corpus_chrf(hyps: &[String], refs: &[String], cfg: &MetricConfig) -> Result<f64, MetricError> {
    check_lengths(hyps, refs)?;
    cfg.validate()?;
    let order = cfg.chrf_char_order;
    let mut stats = vec![(0usize, 0usize, 0usize); order];
    let chars = |s: &str| -> Vec<char> {
        if cfg.chrf_remove_whitespace {
            s.chars().filter(|c| !c.is_whitespace()).collect()
        } else {
            s.chars().collect()
        }
    };
    for (h, r) in hyps.iter().zip(refs) {
        let hc = chars(h);
        let rc = chars(r);
        for n in 1..=order {
            let (m, th, tr) = clipped(&hc, &rc, n);
            let st = &mut stats[n - 1];
            st.0 += m;
            st.1 += th;
            st.2 += tr;
        }
    }
    let beta2 = cfg.chrf_beta * cfg.chrf_beta;
    let mut sum = 0.0;
    let mut effective = 0usize;
    for &(m, th, tr) in &stats {
        if th == 0 || tr == 0 {
            continue;
        }
        effective += 1;
        let p = m as f64 / th as f64;
        let r = m as f64 / tr as f64;
        let denom = beta2 * p + r;
        if denom > 0.0 {
            sum += (1.0 + beta2) * p * r / denom;
        }
    }
    if effective == 0 {
        return Ok(0.0);
    }
    Ok(100.0 * sum / effective as f64)
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            get_general_category(c),
            GeneralCategory::ConnectorPunctuation
                | GeneralCategory::DashPunctuation
                | GeneralCategory::OpenPunctuation
                | GeneralCategory::ClosePunctuation
                | GeneralCategory::InitialPunctuation
                | GeneralCategory::FinalPunctuation
                | GeneralCategory::OtherPunctuation
        )
}

/// Lowercased, punctuation-free tokens: whitespace words, or characters for
/// character-level languages.
pub fn answer_tokens(s: &str, char_level: bool) -> Vec<String> {
    let cleaned: String = s
        .to_lowercase()
        .chars()
        .map(|c| if is_punct(c) { ' ' } else { c })
        .collect();
    if char_level {
        cleaned
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(String::from)
            .collect()
    } else {
        cleaned.split_whitespace().map(str::to_string).collect()
    }
}

const UNANSWERABLE: &str = "unanswerable";

/// Token-overlap F1 in `[0, 1]`.
///
/// If either side normalizes to exactly "unanswerable" the score is 1 when
/// both do and 0 otherwise.
pub fn answer_f1(pred: &str, gold: &str, lang: &str, cfg: &MetricConfig) -> f64 {
    let char_level = cfg.f1_charlevel_langs.contains(lang);
    let unans = |s: &str| answer_tokens(s, false) == [UNANSWERABLE];
    let (pu, gu) = (unans(pred), unans(gold));
    if pu || gu {
        return if pu && gu { 1.0 } else { 0.0 };
    }
    let p = answer_tokens(pred, char_level);
    let g = answer_tokens(gold, char_level);
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let mut gc: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *gc.entry(t.as_str()).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(c) = gc.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Mean F1 over a corpus, scaled to `[0, 100]`.
pub fn corpus_f1(
    hyps: &[String],
    refs: &[String],
    lang: &str,
    cfg: &MetricConfig,
) -> Result<f64, MetricError> {
    check_lengths(hyps, refs)?;
    let sum: f64 = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| answer_f1(h, r, lang, cfg))
        .sum();
    Ok(100.0 * sum / hyps.len() as f64)
}
