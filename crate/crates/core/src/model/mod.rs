//! Encoder-decoder transformer over `[text | regions | global image]`
//! inputs. The encoder runs guided self-attention; the decoder cross-attends
//! to the text span of the encoder output only.

mod checkpoint;
mod config;
mod forward;
mod params;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{partition_parameters, FreezePolicy, ParameterRegistry, PartitionSummary};
use crate::data::{BOS, EOS};
use crate::error::{Error, Result};
use crate::guidance::{degrade_guidance, GuidanceMatrix, GuidanceMode, Layout};
use crate::numerics::{log_softmax, Tensor};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::ModelConfig;
pub use forward::{sinusoidal, EncoderOutput, Forward, LayerAttention};
pub use params::init_params;

/// Encoder input for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalInput {
    pub text_ids: Vec<usize>,
    /// `N x d_local_in`; `N` may be zero.
    pub local_features: Tensor,
    pub global_feature: Option<Vec<f64>>,
    pub guidance: GuidanceMatrix,
}

impl MultimodalInput {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let layout = self.guidance.layout();
        let t = self.text_ids.len();
        if t == 0 {
            return Err(Error::Contract("empty text input".into()));
        }
        if t > cfg.max_text_len {
            return Err(Error::Length {
                len: t,
                max: cfg.max_text_len,
            });
        }
        if let Some(&bad) = self.text_ids.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::Index {
                what: "token id",
                index: bad,
                limit: cfg.vocab_size,
            });
        }
        let n = self.local_features.rows();
        let expected = Layout::new(t, n, self.global_feature.is_some());
        if layout != expected {
            return Err(Error::Validation(format!(
                "guidance layout {layout:?} does not match input layout {expected:?}"
            )));
        }
        if n > cfg.n_local_features {
            return Err(Error::Validation(format!(
                "{n} region features exceed the configured maximum {}",
                cfg.n_local_features
            )));
        }
        if self.local_features.shape().len() != 2 || self.local_features.cols() != cfg.d_local_in
        {
            return Err(Error::dim(
                "local features",
                self.local_features.shape(),
                &[n, cfg.d_local_in],
            ));
        }
        if let Some(g) = &self.global_feature {
            if g.len() != cfg.d_global_in {
                return Err(Error::dim("global feature", &[g.len()], &[cfg.d_global_in]));
            }
        }
        Ok(())
    }

    /// Applies an attention/feature ablation: features removed by the mode
    /// are dropped from the input, not merely masked.
    pub fn degrade(&self, mode: GuidanceMode) -> Self {
        let guidance = degrade_guidance(&self.guidance, mode);
        let layout = guidance.layout();
        let local_features = if layout.n_local == self.local_features.rows() {
            self.local_features.clone()
        } else {
            Tensor::zeros(&[0, self.local_features.cols()])
        };
        Self {
            text_ids: self.text_ids.clone(),
            local_features,
            global_feature: if layout.has_global {
                self.global_feature.clone()
            } else {
                None
            },
            guidance,
        }
    }

    /// Same input, with every text-to-visual connection cleared from the
    /// guidance matrix (global column included). Visual features stay in
    /// the input but cannot reach text positions.
    pub fn severed(&self) -> Self {
        Self {
            guidance: self.guidance.without_cross_modal(),
            ..self.clone()
        }
    }
}

/// Feature and attention ablations applied to every encoder input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputAblation {
    /// Alignment-guided attention; `false` attends over every position.
    pub guided: bool,
    pub use_local: bool,
    pub use_global: bool,
    /// Keep visual positions but cut every text-to-visual connection.
    pub severed: bool,
}

impl Default for InputAblation {
    fn default() -> Self {
        Self {
            guided: true,
            use_local: true,
            use_global: true,
            severed: false,
        }
    }
}

impl InputAblation {
    /// Inputs carry no visual positions at all.
    pub fn text_only() -> Self {
        Self {
            use_local: false,
            use_global: false,
            ..Self::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }

    pub fn apply(&self, input: &MultimodalInput) -> MultimodalInput {
        let mut out = input.clone();
        if !self.use_local {
            out = out.degrade(GuidanceMode::DropLocal);
        }
        if !self.use_global {
            out = out.degrade(GuidanceMode::DropGlobal);
        }
        if !self.guided {
            out = out.degrade(GuidanceMode::Full);
        }
        if self.severed {
            out = out.severed();
        }
        out
    }
}

/// Encoder states detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedStates {
    pub states: Tensor,
    pub layout: Layout,
}

impl EncodedStates {
    /// Rows the decoder may attend to.
    pub fn text_states(&self) -> Vec<&[f64]> {
        self.layout.text_span().map(|i| self.states.row(i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterRegistry,
}

impl Model {
    /// Fresh model with the partition of `policy` applied.
    pub fn init(config: ModelConfig, policy: FreezePolicy, rng: &mut impl Rng) -> Result<Self> {
        let full = init_params(&config, rng)?;
        let (params, _) = partition_parameters(&full, policy);
        Ok(Self { config, params })
    }

    /// Re-partitions the current parameters.
    pub fn with_policy(&self, policy: FreezePolicy) -> (Self, PartitionSummary) {
        let (params, summary) = partition_parameters(&self.params, policy);
        (
            Self {
                config: self.config.clone(),
                params,
            },
            summary,
        )
    }

    /// Copy of the model with every adapter parameter removed.
    pub fn without_adapters(&self) -> Self {
        let mut params = self.params.clone();
        let names: Vec<String> = params
            .names()
            .filter(|n| crate::adapters::is_adapter_param(n))
            .map(str::to_string)
            .collect();
        for n in names {
            params.remove(&n);
        }
        Self {
            config: self.config.clone(),
            params,
        }
    }

    pub fn encode(&self, input: &MultimodalInput) -> Result<EncodedStates> {
        let mut fwd = Forward::new(self);
        let enc = fwd.encode(input)?;
        Ok(EncodedStates {
            states: fwd.tape.value(enc.states).clone(),
            layout: enc.layout,
        })
    }

    /// Vocabulary logits for the token following `prefix`.
    pub fn decode_step(&self, enc: &EncodedStates, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut fwd = Forward::new(self);
        let e = fwd.encoder_constant(&enc.states, enc.layout)?;
        let logits = fwd.decode(&e, prefix)?;
        let t = fwd.tape.value(logits);
        Ok(t.row(t.rows() - 1).to_vec())
    }

    /// Teacher-forced log-probabilities of every target token after BOS.
    pub fn sequence_log_prob(&self, input: &MultimodalInput, target: &[usize]) -> Result<Vec<f64>> {
        if target.len() < 2 || target[0] != BOS || *target.last().unwrap() != EOS {
            return Err(Error::Contract(
                "target must start with BOS, end with EOS and contain at least one more token"
                    .into(),
            ));
        }
        let mut fwd = Forward::new(self);
        let enc = fwd.encode(input)?;
        let logits = fwd.decode(&enc, &target[..target.len() - 1])?;
        let t = fwd.tape.value(logits);
        Ok(target[1..]
            .iter()
            .enumerate()
            .map(|(i, &gold)| log_softmax(t.row(i))[gold])
            .collect())
    }

    /// Argmax decoding from BOS. Stops after EOS or `max_len` generated
    /// tokens; the returned ids exclude BOS and EOS. Ties go to the lowest id.
    pub fn greedy_translate(&self, input: &MultimodalInput, max_len: usize) -> Result<Vec<usize>> {
        let mut fwd = Forward::new(self);
        let enc = fwd.encode(input)?;
        let enc = EncodedStates {
            states: fwd.tape.value(enc.states).clone(),
            layout: enc.layout,
        };
        let mut prefix = vec![BOS];
        let mut out = Vec::new();
        for _ in 0..max_len {
            let logits = self.decode_step(&enc, &prefix)?;
            let next = argmax(&logits);
            if next == EOS {
                break;
            }
            out.push(next);
            prefix.push(next);
        }
        Ok(out)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
