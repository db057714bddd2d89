//! Translation and edit-prediction metrics: corpus BLEU-4 with add-one
//! smoothing on the 2-4 gram precisions, deletion/insertion scoring against
//! gold first rounds, and wall-clock latency per sentence.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::editsup::{EditRound, EditTrace};
use crate::textops::TokenSeq;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("hypothesis count {hyps} != reference count {refs}")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("misaligned traces at sentence {index}: {reason}")]
    Misaligned { index: usize, reason: String },
    #[error("empty test set")]
    EmptyTestSet,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<String, u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.join("\u{1f}")).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4, scaled to 0-100: geometric mean of the 1-4 gram
/// precisions times the brevity penalty, with add-one smoothing on the 2-4
/// gram precisions only. Identical corpora score exactly 100; sharing no
/// unigram scores exactly 0.
pub fn bleu4(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64, EvalError> {
    if hyps.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    if hyps.len() != refs.len() {
        return Err(EvalError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    let mut matches = [0u64; 4];
    let mut totals = [0u64; 4];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len() as u64;
        ref_len += r.len() as u64;
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            for (gram, &count) in &hc {
                totals[n - 1] += count;
                matches[n - 1] += count.min(rc.get(gram).copied().unwrap_or(0));
            }
        }
    }
    if hyp_len == 0 || totals[0] == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0f64;
    for n in 0..4 {
        let p = if n == 0 {
            matches[0] as f64 / totals[0] as f64
        } else {
            (matches[n] + 1) as f64 / (totals[n] + 1) as f64
        };
        log_sum += p.ln();
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * (log_sum / 4.0).exp())
}

/// Single-pair BLEU, used to rank worst sentences for diff dumps.
pub fn sentence_bleu(hyp: &[String], reference: &[String]) -> f64 {
    bleu4(
        std::slice::from_ref(&hyp.to_vec()),
        std::slice::from_ref(&reference.to_vec()),
    )
    .unwrap_or(0.0)
}

/// Indices of the k worst hypotheses by sentence BLEU, ascending.
pub fn worst_k(hyps: &[Vec<String>], refs: &[Vec<String>], k: usize) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = hyps
        .iter()
        .zip(refs)
        .enumerate()
        .map(|(i, (h, r))| (i, sentence_bleu(h, r)))
        .collect();
    scored.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// Micro-averaged first-round edit scores. Deletion is scored per position of
/// the shared input; insertion per boundary of the gold post-deletion
/// sequence (predicted labels must be produced on that same sequence).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EditScores {
    pub del_precision: f64,
    pub del_recall: f64,
    pub del_f1: f64,
    /// False when no deletions were predicted corpus-wide, which leaves
    /// precision undefined (reported as 0).
    pub del_precision_defined: bool,
    pub ins_accuracy: f64,
}

pub fn edit_metrics(
    predicted: &[EditTrace],
    gold: &[EditTrace],
    inputs: &[TokenSeq],
) -> Result<EditScores, EvalError> {
    if predicted.len() != gold.len() || predicted.len() != inputs.len() {
        return Err(EvalError::LengthMismatch {
            hyps: predicted.len(),
            refs: gold.len(),
        });
    }
    if predicted.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    let mut ins_correct = 0u64;
    let mut ins_total = 0u64;
    for (i, ((p, g), input)) in predicted.iter().zip(gold).zip(inputs).enumerate() {
        let identity = EditRound::identity(input.len());
        let p1 = p.rounds.first().unwrap_or(&identity);
        let g1 = g.rounds.first().unwrap_or(&identity);
        if p1.del_mask.len() != input.len() || g1.del_mask.len() != input.len() {
            return Err(EvalError::Misaligned {
                index: i,
                reason: format!(
                    "deletion masks ({}, {}) do not fit input of {} tokens",
                    p1.del_mask.len(),
                    g1.del_mask.len(),
                    input.len()
                ),
            });
        }
        for (&pd, &gd) in p1.del_mask.iter().zip(&g1.del_mask) {
            match (pd, gd) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        // both label vectors must cover the gold post-deletion boundaries
        let gold_post = g1.del_mask.iter().filter(|&&d| !d).count();
        if g1.ins_labels.len() != gold_post + 1 || p1.ins_labels.len() != gold_post + 1 {
            return Err(EvalError::Misaligned {
                index: i,
                reason: format!(
                    "insertion labels ({}, {}) do not fit {} gold boundaries",
                    p1.ins_labels.len(),
                    g1.ins_labels.len(),
                    gold_post + 1
                ),
            });
        }
        for (&pl, &gl) in p1.ins_labels.iter().zip(&g1.ins_labels) {
            ins_total += 1;
            if pl == gl {
                ins_correct += 1;
            }
        }
    }
    let del_precision_defined = tp + fp > 0;
    let del_precision = if del_precision_defined {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let del_recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    let del_f1 = if del_precision + del_recall > 0.0 {
        2.0 * del_precision * del_recall / (del_precision + del_recall)
    } else {
        0.0
    };
    Ok(EditScores {
        del_precision,
        del_recall,
        del_f1,
        del_precision_defined,
        ins_accuracy: ins_correct as f64 / ins_total as f64,
    })
}

/// Mean wall-clock milliseconds per sentence, batch size 1, single-threaded.
/// Warmup calls cycle through the set and are excluded from the mean.
pub fn measure_latency<T>(
    mut decode: impl FnMut(&TokenSeq) -> T,
    test_set: &[TokenSeq],
    warmup: usize,
) -> Result<f64, EvalError> {
    if test_set.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    for i in 0..warmup {
        decode(&test_set[i % test_set.len()]);
    }
    let mut total = 0f64;
    for s in test_set {
        let t0 = Instant::now();
        decode(s);
        total += t0.elapsed().as_secs_f64() * 1e3;
    }
    Ok(total / test_set.len() as f64)
}

/// Metrics block for one decoding mode.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub bleu: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edit: Option<EditScores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avg_iterations: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<f64>,
}
