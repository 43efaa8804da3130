use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{mask_tokens_with, MaskingConfig, MultimodalExample};
use crate::error::{Error, Result};
use crate::model::{Forward, InputAblation, Model, MultimodalInput};
use crate::numerics::{Tensor, Var};

/// Translation example: encoder input and `BOS target EOS`.
#[derive(Clone, Debug, PartialEq)]
pub struct MmtSample {
    pub input: MultimodalInput,
    pub target: Vec<usize>,
}

/// Masked-token example: masked encoder input plus the original ids at the
/// masked positions.
#[derive(Clone, Debug, PartialEq)]
pub struct VmlmSample {
    pub input: MultimodalInput,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Batch {
    Mmt(Vec<MmtSample>),
    Vmlm(Vec<VmlmSample>),
}

pub fn mmt_sample(ex: &MultimodalExample, ablation: InputAblation) -> Result<MmtSample> {
    let target = ex
        .target_sequence()
        .ok_or_else(|| Error::Contract(format!("example '{}' has no target", ex.id)))?;
    Ok(MmtSample {
        input: ablation.apply(&ex.input()?),
        target,
    })
}

pub fn vmlm_sample(
    ex: &MultimodalExample,
    masking: MaskingConfig,
    vocab_size: usize,
    ablation: InputAblation,
    rng: &mut impl Rng,
) -> Result<VmlmSample> {
    let mut input = ablation.apply(&ex.input()?);
    let m = mask_tokens_with(&input.text_ids, masking, vocab_size, rng);
    input.text_ids = m.ids;
    Ok(VmlmSample {
        input,
        positions: m.positions,
        targets: m.targets,
    })
}

/// Token-averaged label-smoothed cross-entropy of the gold targets under
/// teacher forcing.
pub fn mmt_loss_var(fwd: &mut Forward<'_>, batch: &[MmtSample], smoothing: f64) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Contract("empty translation batch".into()));
    }
    let mut parts = Vec::with_capacity(batch.len());
    let mut tokens = 0;
    for s in batch {
        if s.target.len() < 2 {
            return Err(Error::Contract("target needs BOS and EOS".into()));
        }
        let enc = fwd.encode(&s.input)?;
        let logits = fwd.decode(&enc, &s.target[..s.target.len() - 1])?;
        parts.push(fwd.tape.smoothed_ce(logits, &s.target[1..], smoothing)?);
        tokens += s.target.len() - 1;
    }
    let total = fwd.tape.sum(&parts)?;
    Ok(fwd.tape.scale(total, 1.0 / tokens as f64))
}

/// Cross-entropy averaged over masked positions, predicted from encoder
/// states at those positions.
pub fn vmlm_loss_var(fwd: &mut Forward<'_>, batch: &[VmlmSample], smoothing: f64) -> Result<Var> {
    let masked: usize = batch.iter().map(|s| s.positions.len()).sum();
    if masked == 0 {
        return Err(Error::Contract("masked-token batch has no masked positions".into()));
    }
    let mut parts = Vec::with_capacity(batch.len());
    for s in batch.iter().filter(|s| !s.positions.is_empty()) {
        let enc = fwd.encode(&s.input)?;
        let logits = fwd.vmlm_logits(&enc, &s.positions)?;
        parts.push(fwd.tape.smoothed_ce(logits, &s.targets, smoothing)?);
    }
    let total = fwd.tape.sum(&parts)?;
    Ok(fwd.tape.scale(total, 1.0 / masked as f64))
}

pub fn mmt_loss(model: &Model, batch: &[MmtSample], smoothing: f64) -> Result<f64> {
    let mut fwd = Forward::new(model);
    let l = mmt_loss_var(&mut fwd, batch, smoothing)?;
    Ok(fwd.tape.value(l).data()[0])
}

pub fn vmlm_loss(model: &Model, batch: &[VmlmSample], smoothing: f64) -> Result<f64> {
    let mut fwd = Forward::new(model);
    let l = vmlm_loss_var(&mut fwd, batch, smoothing)?;
    Ok(fwd.tape.value(l).data()[0])
}

/// Loss of one batch and the gradient of every trainable parameter it
/// reaches.
pub fn loss_and_gradients(
    model: &Model,
    batch: &Batch,
    smoothing: f64,
    dropout: Option<ChaCha8Rng>,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut fwd = Forward::new(model).with_grads();
    if let Some(rng) = dropout {
        fwd = fwd.with_dropout(rng);
    }
    let l = match batch {
        Batch::Mmt(b) => mmt_loss_var(&mut fwd, b, smoothing)?,
        Batch::Vmlm(b) => vmlm_loss_var(&mut fwd, b, smoothing)?,
    };
    fwd.tape.backward(l)?;
    Ok((fwd.tape.value(l).data()[0], fwd.gradients()))
}

/// Sum of the translation and masked-token losses on one tape.
pub fn joint_loss_and_gradients(
    model: &Model,
    mmt: &[MmtSample],
    vmlm: &[VmlmSample],
    smoothing: f64,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut fwd = Forward::new(model).with_grads();
    let a = mmt_loss_var(&mut fwd, mmt, smoothing)?;
    let b = vmlm_loss_var(&mut fwd, vmlm, smoothing)?;
    let l = fwd.tape.sum(&[a, b])?;
    fwd.tape.backward(l)?;
    Ok((fwd.tape.value(l).data()[0], fwd.gradients()))
}
