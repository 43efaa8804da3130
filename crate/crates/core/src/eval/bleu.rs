use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::data::split_words;
use crate::error::{Error, Result};

const MAX_ORDER: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BleuSmoothing {
    /// A zero precision at any order makes the score zero.
    #[default]
    None,
    /// `(matches + 1) / (total + 1)` for orders 2 to 4.
    AddOne,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level 4-gram BLEU on a 0 to 100 scale with clipped n-gram
/// precisions and the brevity penalty `exp(1 - r/c)` when `c <= r`.
pub fn corpus_bleu<T: Eq + Hash>(
    hypotheses: &[Vec<T>],
    references: &[Vec<T>],
    smoothing: BleuSmoothing,
) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..MAX_ORDER {
        let (m, t) = match smoothing {
            BleuSmoothing::AddOne if n > 0 => (matches[n] + 1, totals[n] + 1),
            _ => (matches[n], totals[n]),
        };
        if m == 0 || t == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * (log_sum / MAX_ORDER as f64).exp())
}

/// BLEU over raw strings, tokenized with the crate tokenizer.
pub fn corpus_bleu_text(
    hypotheses: &[String],
    references: &[String],
    smoothing: BleuSmoothing,
) -> Result<f64> {
    let h: Vec<Vec<String>> = hypotheses.iter().map(|s| split_words(s)).collect();
    let r: Vec<Vec<String>> = references.iter().map(|s| split_words(s)).collect();
    corpus_bleu(&h, &r, smoothing)
}
