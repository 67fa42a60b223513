//! Named-entity metrics (translation accuracy, strict span F1, category
//! accuracy and confusion), corpus BLEU and the one-sided t-test.
//!
//! Surfaces are compared token by token after lowercasing. Matching is greedy,
//! left to right, and consumes each reference span or hypothesis position at
//! most once.

mod bleu;
mod stats;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::tagset::{AnnotatedText, NeCategory, NeSpan};

pub use bleu::corpus_bleu;
pub use stats::{ttest_mean_greater, TTest};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("{refs} references but {hyps} hypotheses")]
    LengthMismatch { refs: usize, hyps: usize },
    #[error("t-test needs at least two values per sample (got {a} and {b})")]
    SampleTooSmall { a: usize, b: usize },
    #[error("both samples are constant with equal means")]
    DegenerateSample,
}

fn check_len(refs: usize, hyps: usize) -> Result<(), EvalError> {
    if refs == hyps {
        Ok(())
    } else {
        Err(EvalError::LengthMismatch { refs, hyps })
    }
}

fn fold(tokens: &[String]) -> Vec<String> {
    tokens.iter().map(|t| t.to_lowercase()).collect()
}

fn span_surface(text: &AnnotatedText, span: &NeSpan) -> Vec<String> {
    fold(&text.tokens[span.start..span.end])
}

fn sorted_spans(text: &AnnotatedText) -> Vec<NeSpan> {
    let mut spans = text.spans.clone();
    spans.sort_by_key(|s| (s.start, s.end));
    spans
}

/// Fraction of reference entities whose surface appears in the hypothesis.
pub fn ne_translation_accuracy(refs: &[AnnotatedText], hyps: &[Vec<String>]) -> Result<f64, EvalError> {
    check_len(refs.len(), hyps.len())?;
    let (mut matched, mut total) = (0usize, 0usize);
    for (r, h) in refs.iter().zip(hyps) {
        let hyp = fold(h);
        let mut used = vec![false; hyp.len()];
        for span in sorted_spans(r) {
            total += 1;
            let needle = span_surface(r, &span);
            let n = needle.len();
            if n == 0 || n > hyp.len() {
                continue;
            }
            let hit = (0..=hyp.len() - n)
                .find(|&s| hyp[s..s + n] == needle[..] && !used[s..s + n].iter().any(|&u| u));
            if let Some(s) = hit {
                used[s..s + n].fill(true);
                matched += 1;
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { matched as f64 / total as f64 })
}

/// A true positive: reference and hypothesis categories of a matched entity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatchedPair {
    pub reference: NeCategory,
    pub predicted: NeCategory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpanScores {
    pub true_positives: usize,
    pub hyp_spans: usize,
    pub ref_spans: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub pairs: Vec<MatchedPair>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Span-level P/R/F1 where a hypothesis span is correct iff its surface equals
/// an unmatched reference span's surface; categories are ignored.
pub fn strict_span_f1(refs: &[AnnotatedText], hyps: &[AnnotatedText]) -> Result<SpanScores, EvalError> {
    check_len(refs.len(), hyps.len())?;
    let mut out = SpanScores {
        true_positives: 0,
        hyp_spans: 0,
        ref_spans: 0,
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
        pairs: Vec::new(),
    };
    for (r, h) in refs.iter().zip(hyps) {
        let rspans = sorted_spans(r);
        let rsurf: Vec<Vec<String>> = rspans.iter().map(|s| span_surface(r, s)).collect();
        let mut used = vec![false; rspans.len()];
        out.ref_spans += rspans.len();
        for hs in sorted_spans(h) {
            out.hyp_spans += 1;
            let surf = span_surface(h, &hs);
            if let Some(i) = (0..rspans.len()).find(|&i| !used[i] && rsurf[i] == surf) {
                used[i] = true;
                out.true_positives += 1;
                out.pairs.push(MatchedPair {
                    reference: rspans[i].category,
                    predicted: hs.category,
                });
            }
        }
    }
    out.precision = ratio(out.true_positives, out.hyp_spans);
    out.recall = ratio(out.true_positives, out.ref_spans);
    out.f1 = harmonic(out.precision, out.recall);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryMetrics {
    pub accuracy: f64,
    /// Reference category → predicted category → percentage of that row.
    pub confusion: BTreeMap<NeCategory, BTreeMap<NeCategory, f64>>,
    /// True positives per reference category.
    pub counts: BTreeMap<NeCategory, usize>,
}

/// Category accuracy and row-normalized confusion over matched pairs.
pub fn category_metrics(pairs: &[MatchedPair]) -> CategoryMetrics {
    let mut raw: BTreeMap<NeCategory, BTreeMap<NeCategory, usize>> = BTreeMap::new();
    for p in pairs {
        *raw.entry(p.reference).or_default().entry(p.predicted).or_default() += 1;
    }
    let counts: BTreeMap<NeCategory, usize> = raw.iter().map(|(c, row)| (*c, row.values().sum())).collect();
    let confusion = raw
        .iter()
        .map(|(c, row)| {
            let n = counts[c] as f64;
            (*c, row.iter().map(|(p, k)| (*p, 100.0 * *k as f64 / n)).collect())
        })
        .collect();
    let correct = pairs.iter().filter(|p| p.reference == p.predicted).count();
    CategoryMetrics {
        accuracy: ratio(correct, pairs.len()),
        confusion,
        counts,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeEvalReport {
    pub ne_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub cat_accuracy: f64,
    pub confusion: BTreeMap<NeCategory, BTreeMap<NeCategory, f64>>,
    pub counts: BTreeMap<NeCategory, usize>,
    pub true_positives: usize,
    pub hyp_spans: usize,
    pub ref_spans: usize,
}

pub fn evaluate_ne(refs: &[AnnotatedText], hyps: &[AnnotatedText]) -> Result<NeEvalReport, EvalError> {
    let hyp_tokens: Vec<Vec<String>> = hyps.iter().map(|h| h.tokens.clone()).collect();
    let ne_accuracy = ne_translation_accuracy(refs, &hyp_tokens)?;
    let s = strict_span_f1(refs, hyps)?;
    let c = category_metrics(&s.pairs);
    Ok(NeEvalReport {
        ne_accuracy,
        precision: s.precision,
        recall: s.recall,
        f1: s.f1,
        cat_accuracy: c.accuracy,
        confusion: c.confusion,
        counts: c.counts,
        true_positives: s.true_positives,
        hyp_spans: s.hyp_spans,
        ref_spans: s.ref_spans,
    })
}

/// Everything `eval` reports for one hypothesis file.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub bleu: f64,
    pub ne: NeEvalReport,
    pub sentences: usize,
}

pub fn evaluate(refs: &[AnnotatedText], hyps: &[AnnotatedText]) -> Result<EvalSummary, EvalError> {
    let ne = evaluate_ne(refs, hyps)?;
    let r: Vec<Vec<String>> = refs.iter().map(|t| t.tokens.clone()).collect();
    let h: Vec<Vec<String>> = hyps.iter().map(|t| t.tokens.clone()).collect();
    Ok(EvalSummary {
        bleu: corpus_bleu(&r, &h)?,
        ne,
        sentences: refs.len(),
    })
}

impl EvalSummary {
    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let ne = &self.ne;
        let mut s = String::new();
        let _ = writeln!(s, "sentences: {}", self.sentences);
        let _ = writeln!(s, "bleu: {:.4}", self.bleu);
        let _ = writeln!(s, "ne_accuracy: {:.6}", ne.ne_accuracy);
        let _ = writeln!(s, "precision: {:.6}", ne.precision);
        let _ = writeln!(s, "recall: {:.6}", ne.recall);
        let _ = writeln!(s, "f1: {:.6}", ne.f1);
        let _ = writeln!(s, "cat_accuracy: {:.6}", ne.cat_accuracy);
        let _ = writeln!(s, "true_positives: {}", ne.true_positives);
        let _ = writeln!(s, "hyp_spans: {}", ne.hyp_spans);
        let _ = writeln!(s, "ref_spans: {}", ne.ref_spans);
        s
    }
}

/// Confusion matrix as CSV: one row per reference category with at least one
/// true positive, one column per category, cells in percent.
pub fn confusion_csv(report: &NeEvalReport) -> String {
    let cats = NeCategory::entities();
    let mut s = String::from("reference,count");
    for c in cats {
        s.push(',');
        s.push_str(c.name());
    }
    s.push('\n');
    for (rc, row) in &report.confusion {
        let _ = write!(s, "{},{}", rc.name(), report.counts[rc]);
        for c in cats {
            let _ = write!(s, ",{:.4}", row.get(c).copied().unwrap_or(0.0));
        }
        s.push('\n');
    }
    s
}
