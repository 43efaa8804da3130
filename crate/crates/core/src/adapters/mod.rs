//! Bottleneck adapters and the frozen/trainable parameter partition.

mod registry;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub use registry::{Param, ParameterRegistry};

/// Name fragment shared by every adapter parameter.
pub const ADAPTER_TAG: &str = ".adapter_";
/// Prefix of the visual projection parameters.
pub const VISUAL_PREFIX: &str = "visual.";

pub fn is_adapter_param(name: &str) -> bool {
    name.contains(ADAPTER_TAG)
}

pub fn is_visual_param(name: &str) -> bool {
    name.starts_with(VISUAL_PREFIX)
}

/// Residual bottleneck `x + Up(ReLU(Down(x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckAdapter {
    /// `d_model x d_bottleneck`
    pub down: Tensor,
    pub down_bias: Tensor,
    /// `d_bottleneck x d_model`
    pub up: Tensor,
    pub up_bias: Tensor,
}

pub fn bottleneck_width(d_model: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || d_model % reduction != 0 {
        return Err(Error::Config(format!(
            "adapter reduction factor {reduction} must divide d_model {d_model}"
        )));
    }
    Ok(d_model / reduction)
}

impl BottleneckAdapter {
    /// Small random down-projection and an all-zero up-projection, so the
    /// adapter starts as the identity map.
    pub fn init(d_model: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        let b = bottleneck_width(d_model, reduction)?;
        let scale = 1.0 / (d_model as f64).sqrt();
        let down = (0..d_model * b).map(|_| rng.gen_range(-scale..scale)).collect();
        Ok(Self {
            down: Tensor::matrix(d_model, b, down)?,
            down_bias: Tensor::zeros(&[b]),
            up: Tensor::zeros(&[b, d_model]),
            up_bias: Tensor::zeros(&[d_model]),
        })
    }

    pub fn d_model(&self) -> usize {
        self.down.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.down.shape()[1]
    }

    /// Registers the four tensors under `prefix` (e.g. `enc.0.adapter_attn`).
    pub fn register(self, registry: &mut ParameterRegistry, prefix: &str, frozen: bool) {
        registry.insert(format!("{prefix}.down.w"), self.down, frozen);
        registry.insert(format!("{prefix}.down.b"), self.down_bias, frozen);
        registry.insert(format!("{prefix}.up.w"), self.up, frozen);
        registry.insert(format!("{prefix}.up.b"), self.up_bias, frozen);
    }

    pub fn from_registry(registry: &ParameterRegistry, prefix: &str) -> Option<Self> {
        let get = |s: &str| registry.get(&format!("{prefix}.{s}")).cloned();
        Some(Self {
            down: get("down.w")?,
            down_bias: get("down.b")?,
            up: get("up.w")?,
            up_bias: get("up.b")?,
        })
    }
}

/// Untracked adapter forward over the rows of `x`.
pub fn adapter_forward(x: &Tensor, adapter: &BottleneckAdapter) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = AdapterVars {
        down: tape.constant(adapter.down.clone()),
        down_bias: tape.constant(adapter.down_bias.clone()),
        up: tape.constant(adapter.up.clone()),
        up_bias: tape.constant(adapter.up_bias.clone()),
    };
    let out = apply_adapter(&mut tape, xv, &vars)?;
    Ok(tape.value(out).clone())
}

/// Adapter tensors bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub down: Var,
    pub down_bias: Var,
    pub up: Var,
    pub up_bias: Var,
}

pub fn apply_adapter(tape: &mut Tape, x: Var, a: &AdapterVars) -> Result<Var> {
    let d = tape.value(x).cols();
    if tape.shape(a.down)[0] != d {
        return Err(Error::dim("adapter", tape.shape(x), tape.shape(a.down)));
    }
    let h = tape.matmul(x, a.down)?;
    let h = tape.add_row(h, a.down_bias)?;
    let h = tape.relu(h);
    let h = tape.matmul(h, a.up)?;
    let h = tape.add_row(h, a.up_bias)?;
    tape.add(x, h)
}

/// Which parameters train and which stay frozen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezePolicy {
    /// Backbone frozen; adapters and visual projections train.
    #[default]
    FrozenWithAdapters,
    /// No adapters; every remaining parameter trains.
    FullyUnfrozenNoAdapters,
    /// No visual projections; adapters train over a frozen backbone.
    TextOnlyNoVisual,
}

impl FreezePolicy {
    pub const ALL: [FreezePolicy; 3] = [
        FreezePolicy::FrozenWithAdapters,
        FreezePolicy::FullyUnfrozenNoAdapters,
        FreezePolicy::TextOnlyNoVisual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FreezePolicy::FrozenWithAdapters => "frozen-with-adapters",
            FreezePolicy::FullyUnfrozenNoAdapters => "fully-unfrozen-no-adapters",
            FreezePolicy::TextOnlyNoVisual => "text-only-no-visual",
        }
    }
}

impl fmt::Display for FreezePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FreezePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnknownName {
                kind: "freeze policy",
                name: s.to_string(),
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub trainable: usize,
    pub frozen: usize,
}

/// Applies `policy` to a full parameter set (backbone, adapters and visual
/// projections), dropping the parameters the policy excludes.
pub fn partition_parameters(
    model_params: &ParameterRegistry,
    policy: FreezePolicy,
) -> (ParameterRegistry, PartitionSummary) {
    let mut out = ParameterRegistry::default();
    for (name, p) in model_params.iter() {
        let adapter = is_adapter_param(name);
        let visual = is_visual_param(name);
        let keep_frozen = match policy {
            FreezePolicy::FrozenWithAdapters => Some(!(adapter || visual)),
            FreezePolicy::FullyUnfrozenNoAdapters => (!adapter).then_some(false),
            FreezePolicy::TextOnlyNoVisual => (!visual).then_some(!adapter),
        };
        if let Some(frozen) = keep_frozen {
            out.insert(name, p.tensor.clone(), frozen);
        }
    }
    let summary = PartitionSummary {
        trainable: out.trainable_count(),
        frozen: out.frozen_count(),
    };
    (out, summary)
}
