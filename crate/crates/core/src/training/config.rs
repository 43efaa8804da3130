use serde::{Deserialize, Serialize};

use crate::adapters::FreezePolicy;
use crate::error::{Error, Result};
use crate::eval::BleuSmoothing;
use crate::model::InputAblation;
use crate::numerics::AdamConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// Objective drawn per batch.
    #[default]
    Joint,
    /// `vmlm_phase_steps` masked-token steps, then translation only.
    Disjoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub p_vmlm: f64,
    pub mask_rate: f64,
    /// Replace some selected tokens with random words or keep them instead
    /// of always writing MASK.
    pub mask_corrupt: bool,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub label_smoothing: f64,
    pub max_steps: usize,
    /// Dev BLEU every this many steps, plus once after the last step.
    pub eval_every: usize,
    pub seed: u64,
    /// Train the masked-token objective at all.
    pub vmlm: bool,
    pub ablation: InputAblation,
    /// Partition used when the model is created for this run.
    pub freeze_policy: FreezePolicy,
    pub schedule: Schedule,
    pub vmlm_phase_steps: usize,
    /// Text-only translation steps on the whole backbone (no adapters, no
    /// visual input) before the main run.
    pub backbone_steps: usize,
    pub backbone_lr: f64,
    /// Generation cap for dev decoding.
    pub dev_max_len: usize,
    pub dev_bleu_smoothing: BleuSmoothing,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p_vmlm: 0.5,
            mask_rate: 0.25,
            mask_corrupt: false,
            batch_size: 16,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            label_smoothing: 0.1,
            max_steps: 1000,
            eval_every: 250,
            seed: 1,
            vmlm: true,
            ablation: InputAblation::default(),
            freeze_policy: FreezePolicy::FrozenWithAdapters,
            schedule: Schedule::Joint,
            vmlm_phase_steps: 0,
            backbone_steps: 0,
            backbone_lr: 1e-3,
            dev_max_len: 16,
            dev_bleu_smoothing: BleuSmoothing::AddOne,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("p_vmlm", self.p_vmlm),
            ("mask_rate", self.mask_rate),
            ("label_smoothing", self.label_smoothing),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} {v} outside [0, 1]"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return fail(format!("{name} {v} outside [0, 1)"));
            }
        }
        for (name, v) in [("lr", self.lr), ("backbone_lr", self.backbone_lr), ("eps", self.eps)] {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.batch_size == 0 || self.max_steps == 0 || self.eval_every == 0 {
            return fail("batch_size, max_steps and eval_every must be positive".into());
        }
        if self.dev_max_len == 0 {
            return fail("dev_max_len must be positive".into());
        }
        if self.schedule == Schedule::Disjoint && self.vmlm_phase_steps > self.max_steps {
            return fail(format!(
                "vmlm_phase_steps {} exceeds max_steps {}",
                self.vmlm_phase_steps, self.max_steps
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// The ablation actually applied: a model without visual projections
    /// only ever sees text.
    pub fn effective_ablation(&self) -> InputAblation {
        if self.freeze_policy == FreezePolicy::TextOnlyNoVisual {
            InputAblation::text_only()
        } else {
            self.ablation
        }
    }

    /// Whether any masked-token step can happen.
    pub fn uses_vmlm(&self) -> bool {
        self.vmlm
            && match self.schedule {
                Schedule::Joint => self.p_vmlm > 0.0,
                Schedule::Disjoint => self.vmlm_phase_steps > 0,
            }
    }
}

/// Named ablation settings, one per row of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Default,
    /// Translation objective only.
    NoVmlm,
    /// Every position attends to every other one.
    FullAttention,
    NoLocal,
    NoGlobal,
    /// No adapters; the whole model trains.
    Unfrozen,
    /// Masked-token phase first, translation phase second, instead of
    /// mixing objectives per batch.
    PretrainThenFinetune,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::Default,
        Preset::NoVmlm,
        Preset::FullAttention,
        Preset::NoLocal,
        Preset::NoGlobal,
        Preset::Unfrozen,
        Preset::PretrainThenFinetune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Default => "default",
            Preset::NoVmlm => "no-vmlm",
            Preset::FullAttention => "full-attention",
            Preset::NoLocal => "no-local",
            Preset::NoGlobal => "no-global",
            Preset::Unfrozen => "unfrozen",
            Preset::PretrainThenFinetune => "pretrain-then-finetune",
        }
    }

    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        match self {
            Preset::Default => {}
            Preset::NoVmlm => c.vmlm = false,
            Preset::FullAttention => c.ablation.guided = false,
            Preset::NoLocal => c.ablation.use_local = false,
            Preset::NoGlobal => c.ablation.use_global = false,
            Preset::Unfrozen => c.freeze_policy = FreezePolicy::FullyUnfrozenNoAdapters,
            Preset::PretrainThenFinetune => {
                c.schedule = Schedule::Disjoint;
                c.vmlm_phase_steps = c.max_steps / 2;
            }
        }
        c
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnknownName {
                kind: "preset",
                name: s.to_string(),
            })
    }
}
