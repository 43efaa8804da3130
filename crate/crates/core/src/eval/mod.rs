//! Perplexity, contrastive ranking, corpus BLEU and attention-norm analysis.

mod attention;
mod bleu;
mod contrastive;

pub use attention::{attention_scores_for, normalized_attention_scores};
pub use bleu::{corpus_bleu, corpus_bleu_text, BleuSmoothing};
pub use contrastive::{
    contrastive_evaluate, ComparisonOutcome, ContrastiveReport, ItemOutcome, ModelScorer,
    PerplexityScorer, TIE_TOLERANCE,
};

use crate::error::{Error, Result};

/// `exp(-(1/N) sum log q_i)`.
pub fn perplexity(log_probs: &[f64]) -> Result<f64> {
    if log_probs.is_empty() {
        return Err(Error::Contract("perplexity of an empty sequence".into()));
    }
    if let Some(bad) = log_probs.iter().find(|v| !v.is_finite()) {
        return Err(Error::Contract(format!("non-finite log-probability {bad}")));
    }
    let mean = log_probs.iter().sum::<f64>() / log_probs.len() as f64;
    Ok((-mean).exp())
}
