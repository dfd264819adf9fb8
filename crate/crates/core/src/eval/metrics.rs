use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, SiteAdapter, TokenId, ToyModel};
use crate::real::Real;

use super::suite::{GenItem, McItem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn lcs_len<E: PartialEq>(a: &[E], b: &[E]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based Rouge-L with β = 1. Two empty sequences score 1; one empty
/// sequence scores 0.
pub fn rouge_l<E: PartialEq>(candidate: &[E], reference: &[E]) -> RougeScore {
    match (candidate.is_empty(), reference.is_empty()) {
        (true, true) => {
            return RougeScore {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            }
        }
        (true, false) | (false, true) => {
            return RougeScore {
                precision: 0.0,
                recall: 0.0,
                f1: 0.0,
            }
        }
        _ => {}
    }
    let lcs = lcs_len(candidate, reference) as f64;
    let precision = lcs / candidate.len() as f64;
    let recall = lcs / reference.len() as f64;
    let f1 = if lcs == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    RougeScore { precision, recall, f1 }
}

/// Rouge-L over whitespace-separated tokens.
pub fn rouge_l_text(candidate: &str, reference: &str) -> RougeScore {
    let c: Vec<&str> = candidate.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    rouge_l(&c, &r)
}

fn log_softmax_at<T: Real>(row: &[T], target: usize) -> f64 {
    let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
    row[target].as_f64() - lse
}

/// Mean per-token log-likelihood of `completion` after `prompt`.
pub fn completion_logprob<T: Real>(model: &ToyModel<T>, adapters: &dyn SiteAdapter<T>, prompt: &[TokenId], completion: &[TokenId]) -> Result<f64> {
    if prompt.is_empty() || completion.is_empty() {
        return Err(Error::Empty("completion_logprob"));
    }
    let mut input = prompt.to_vec();
    input.extend_from_slice(&completion[..completion.len() - 1]);
    let logits = forward(model, &input, adapters)?;
    let start = prompt.len() - 1;
    let total: f64 = completion
        .iter()
        .enumerate()
        .map(|(k, &tok)| log_softmax_at(logits.row(start + k), tok as usize))
        .sum();
    Ok(total / completion.len() as f64)
}

/// Index of the winning candidate. Ties go to the lowest index.
pub fn choose<T: Real>(model: &ToyModel<T>, adapters: &dyn SiteAdapter<T>, item: &McItem) -> Result<usize> {
    if item.candidates.is_empty() {
        return Err(Error::Empty("multiple-choice candidates"));
    }
    let mut best = (0, f64::NEG_INFINITY);
    // Single-token candidates share one forward pass over the prompt.
    let single = item.candidates.iter().all(|c| c.len() == 1);
    let shared = if single {
        Some(forward(model, &item.prompt, adapters)?)
    } else {
        None
    };
    for (i, cand) in item.candidates.iter().enumerate() {
        let score = match &shared {
            Some(logits) => {
                if item.prompt.is_empty() {
                    return Err(Error::Empty("completion_logprob"));
                }
                log_softmax_at(logits.row(item.prompt.len() - 1), cand[0] as usize)
            }
            None => completion_logprob(model, adapters, &item.prompt, cand)?,
        };
        if score > best.1 {
            best = (i, score);
        }
    }
    Ok(best.0)
}

/// Fraction of items whose chosen candidate is the gold one.
pub fn accuracy<T: Real>(model: &ToyModel<T>, adapters: &dyn SiteAdapter<T>, items: &[McItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Empty("accuracy: evaluation set"));
    }
    let mut correct = 0usize;
    for item in items {
        if choose(model, adapters, item)? == item.gold {
            correct += 1;
        }
    }
    Ok(correct as f64 / items.len() as f64)
}

/// Greedy prediction at each answer slot with the true prefix fed in.
pub fn greedy_answers<T: Real>(model: &ToyModel<T>, adapters: &dyn SiteAdapter<T>, item: &GenItem) -> Result<Vec<TokenId>> {
    let last = *item
        .answer_positions
        .iter()
        .max()
        .ok_or(Error::Empty("generation item answer slots"))?;
    if item.answer_positions.contains(&0) {
        return Err(Error::InvalidArgument("answer slot at position 0 has no prefix".into()));
    }
    let logits = forward(model, &item.tokens[..last], adapters)?;
    Ok(item
        .answer_positions
        .iter()
        .map(|&p| {
            let row = logits.row(p - 1);
            // first maximum wins
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best as TokenId
        })
        .collect())
}

/// Mean Rouge-L F1 of greedy answers against the references.
pub fn mean_rouge_l<T: Real>(model: &ToyModel<T>, adapters: &dyn SiteAdapter<T>, items: &[GenItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Empty("rouge: evaluation set"));
    }
    let mut total = 0.0;
    for item in items {
        total += rouge_l(&greedy_answers(model, adapters, item)?, &item.reference()).f1;
    }
    Ok(total / items.len() as f64)
}
