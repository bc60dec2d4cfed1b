//! Exact match over ASTs and corpus-level BLEU.

use std::collections::HashMap;

use serde::Serialize;
use thiserror::Error;

use crate::ast::AstNode;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("BLEU needs at least one hypothesis/reference pair")]
    Empty,
}

/// Structural equality: constructors, field order and token lists.
pub fn exact_match(pred: &AstNode, gold: &AstNode) -> bool {
    pred == gold
}

pub const BLEU_ORDER: usize = 4;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU with n-grams 1 to 4, uniform weights, clipped counts and no
/// smoothing. Any zero modified precision gives 0.
pub fn corpus_bleu(pairs: &[(Vec<String>, Vec<String>)]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut matched = [0usize; BLEU_ORDER];
    let mut total = [0usize; BLEU_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (hyp, reference) in pairs {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=BLEU_ORDER {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            for (gram, &c) in &h {
                matched[n - 1] += c.min(r.get(gram).copied().unwrap_or(0));
            }
            total[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 0..BLEU_ORDER {
        if matched[n] == 0 {
            return Ok(0.0);
        }
        log_p += (matched[n] as f64 / total[n] as f64).ln();
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * (log_p / BLEU_ORDER as f64).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExampleRecord {
    pub gold: String,
    pub predicted: Option<String>,
    #[serde(rename = "match")]
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub n_examples: usize,
    pub exact_match: f64,
    pub bleu: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_example: Option<Vec<ExampleRecord>>,
}

/// One evaluated example: gold and (if decoding succeeded) predicted AST.
pub struct Scored<'a> {
    pub gold: &'a AstNode,
    pub predicted: Option<&'a AstNode>,
}

/// Aggregate exact match and BLEU. A failed prediction counts as a miss
/// with an empty hypothesis.
pub fn evaluate(spec: &crate::grammar::GrammarSpec, items: &[Scored<'_>], per_example: bool) -> EvalReport {
    let n = items.len();
    let mut hits = 0usize;
    let mut pairs = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    for it in items {
        let matched = it.predicted.is_some_and(|p| exact_match(p, it.gold));
        hits += usize::from(matched);
        pairs.push((
            it.predicted.map(|p| p.linearize(spec)).unwrap_or_default(),
            it.gold.linearize(spec),
        ));
        if per_example {
            records.push(ExampleRecord {
                gold: it.gold.to_sexpr(spec),
                predicted: it.predicted.map(|p| p.to_sexpr(spec)),
                matched,
            });
        }
    }
    EvalReport {
        n_examples: n,
        exact_match: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
        bleu: corpus_bleu(&pairs).unwrap_or(0.0),
        per_example: per_example.then_some(records),
    }
}
