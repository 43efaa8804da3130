use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{is_reserved, MASK};

/// Masked copy of a sequence plus the prediction targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedTokens {
    pub ids: Vec<usize>,
    /// Positions that were selected, ascending.
    pub positions: Vec<usize>,
    /// Original ids at `positions`.
    pub targets: Vec<usize>,
}

/// Masking knobs. With `corrupt` enabled selected positions become MASK 80%
/// of the time, a random word 10% and stay unchanged 10%.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub rate: f64,
    pub corrupt: bool,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            rate: 0.25,
            corrupt: false,
        }
    }
}

/// Selects every non-reserved position independently with probability
/// `rate` and replaces it with MASK. The selection may be empty.
pub fn mask_tokens(ids: &[usize], rate: f64, rng: &mut impl Rng) -> MaskedTokens {
    mask_tokens_with(ids, MaskingConfig { rate, corrupt: false }, 0, rng)
}

/// `vocab_size` is only consulted when corruption is enabled.
pub fn mask_tokens_with(
    ids: &[usize],
    cfg: MaskingConfig,
    vocab_size: usize,
    rng: &mut impl Rng,
) -> MaskedTokens {
    assert!((0.0..=1.0).contains(&cfg.rate), "mask rate {} outside [0, 1]", cfg.rate);
    let maskable: Vec<usize> = (0..ids.len()).filter(|&i| !is_reserved(ids[i])).collect();
    let positions: Vec<usize> = maskable
        .iter()
        .copied()
        .filter(|_| rng.gen::<f64>() < cfg.rate)
        .collect();
    let mut out = ids.to_vec();
    let targets = positions.iter().map(|&p| ids[p]).collect();
    for &p in &positions {
        out[p] = if cfg.corrupt && vocab_size > super::vocab::RESERVED_TOKENS {
            let u: f64 = rng.gen();
            if u < 0.8 {
                MASK
            } else if u < 0.9 {
                rng.gen_range(super::vocab::RESERVED_TOKENS..vocab_size)
            } else {
                ids[p]
            }
        } else {
            MASK
        };
    }
    MaskedTokens {
        ids: out,
        positions,
        targets,
    }
}

/// Training objective drawn for one batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Mmt,
    Vmlm,
}

/// Bernoulli draw: VMLM with probability `p_vmlm`, MMT otherwise.
pub fn sample_objective(p_vmlm: f64, rng: &mut impl Rng) -> Objective {
    assert!((0.0..=1.0).contains(&p_vmlm), "p_vmlm {p_vmlm} outside [0, 1]");
    if rng.gen::<f64>() < p_vmlm {
        Objective::Vmlm
    } else {
        Objective::Mmt
    }
}
