use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{with_bos_eos, Choice, ContrastiveItem};
use crate::error::Result;
use crate::model::{InputAblation, Model};

use super::perplexity;

/// Perplexity gaps below this count as ties.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Anything that can assign a perplexity to one translation of an item
/// given one of its images.
pub trait PerplexityScorer {
    fn perplexity(&self, item: &ContrastiveItem, image: usize, translation: Choice) -> Result<f64>;
}

/// Teacher-forced model perplexity under an input ablation.
pub struct ModelScorer<'a> {
    pub model: &'a Model,
    pub ablation: InputAblation,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Model) -> Self {
        Self {
            model,
            ablation: InputAblation::default(),
        }
    }
}

impl PerplexityScorer for ModelScorer<'_> {
    fn perplexity(&self, item: &ContrastiveItem, image: usize, translation: Choice) -> Result<f64> {
        let input = self.ablation.apply(&item.input_for_image(image)?);
        let target = with_bos_eos(item.translation(translation));
        perplexity(&self.model.sequence_log_prob(&input, &target)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonOutcome {
    pub image: usize,
    pub correct_translation: Choice,
    pub ppl_correct: f64,
    pub ppl_incorrect: f64,
    pub correct: bool,
    pub tie: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub id: String,
    /// `ppl[image - 1][0]` for translation A, `[1]` for B.
    pub ppl: [[f64; 2]; 2],
    pub comparisons: [ComparisonOutcome; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveReport {
    pub items: Vec<ItemOutcome>,
    pub correct: usize,
    pub total: usize,
    pub ties: usize,
    pub accuracy: f64,
}

impl ContrastiveReport {
    /// One JSON record per item followed by a summary record.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for it in &self.items {
            out.push_str(&serde_json::to_string(it).expect("serializable"));
            out.push('\n');
        }
        let summary = serde_json::json!({
            "summary": {
                "items": self.items.len(),
                "correct": self.correct,
                "total": self.total,
                "ties": self.ties,
                "accuracy": self.accuracy,
            }
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }
}

impl fmt::Display for ContrastiveReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "accuracy {:.2}% ({}/{} comparisons over {} items, {} ties)",
            100.0 * self.accuracy,
            self.correct,
            self.total,
            self.items.len(),
            self.ties
        )
    }
}

/// Ranks both translations under each image. A comparison is correct when
/// the right translation's perplexity is not larger than the other one's;
/// near-equal perplexities are counted as correct and also reported as
/// ties.
pub fn contrastive_evaluate(
    items: &[ContrastiveItem],
    scorer: &impl PerplexityScorer,
) -> Result<ContrastiveReport> {
    let mut outcomes = Vec::with_capacity(items.len());
    let (mut correct, mut ties) = (0, 0);
    for item in items {
        let mut ppl = [[0.0; 2]; 2];
        for image in [1, 2] {
            for (k, c) in [Choice::A, Choice::B].into_iter().enumerate() {
                ppl[image - 1][k] = scorer.perplexity(item, image, c)?;
            }
        }
        let comparisons = [1, 2].map(|image| {
            let right = item.correct_for_image(image);
            let idx = |c: Choice| if c == Choice::A { 0 } else { 1 };
            let pc = ppl[image - 1][idx(right)];
            let pi = ppl[image - 1][idx(right.other())];
            let tie = (pc - pi).abs() < TIE_TOLERANCE;
            ComparisonOutcome {
                image,
                correct_translation: right,
                ppl_correct: pc,
                ppl_incorrect: pi,
                correct: tie || pc <= pi,
                tie,
            }
        });
        correct += comparisons.iter().filter(|c| c.correct).count();
        ties += comparisons.iter().filter(|c| c.tie).count();
        outcomes.push(ItemOutcome {
            id: item.id.clone(),
            ppl,
            comparisons,
        });
    }
    let total = 2 * items.len();
    Ok(ContrastiveReport {
        items: outcomes,
        correct,
        total,
        ties,
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
    })
}
