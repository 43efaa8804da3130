//! Joint translation and masked-token training over a frozen backbone.

mod config;
mod loss;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{is_adapter_param, is_visual_param, ParameterRegistry};
use crate::data::{sample_objective, MaskingConfig, MultimodalExample, Objective};
use crate::error::{Error, Result};
use crate::eval::{corpus_bleu, BleuSmoothing};
use crate::model::{InputAblation, Model};
use crate::numerics::Adam;

pub use config::{Preset, Schedule, TrainConfig};
pub use loss::{
    joint_loss_and_gradients, loss_and_gradients, mmt_loss, mmt_loss_var, mmt_sample, vmlm_loss,
    vmlm_loss_var, vmlm_sample, Batch, MmtSample, VmlmSample,
};

/// Datasets consumed by [`train`].
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub parallel: Vec<MultimodalExample>,
    pub monolingual: Vec<MultimodalExample>,
    pub dev: Vec<MultimodalExample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Backbone,
    Main,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
pub enum MetricRecord {
    Step {
        phase: Phase,
        step: usize,
        objective: Objective,
        loss: f64,
    },
    Eval {
        step: usize,
        dev_bleu: f64,
        best_dev_bleu: f64,
        improved: bool,
    },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best dev BLEU, or the last ones without a dev set.
    pub best: Model,
    pub last: Model,
    pub best_step: usize,
    pub best_dev_bleu: Option<f64>,
    pub metrics: Vec<MetricRecord>,
    /// Main-phase steps per objective: `[mmt, vmlm]`.
    pub objective_counts: [usize; 2],
}

/// Mutable state of one run.
pub struct TrainState {
    pub step: usize,
    pub optimizer: Adam,
    pub best_dev_bleu: Option<f64>,
    pub best_step: usize,
    pub best_params: ParameterRegistry,
    objective_rng: ChaCha8Rng,
    data_rng: ChaCha8Rng,
}

/// Walks a dataset in shuffled epochs.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize, rng: &mut impl Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn take(&mut self, k: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Corpus BLEU of greedy translations against the dev targets.
pub fn dev_bleu(
    model: &Model,
    dev: &[MultimodalExample],
    ablation: InputAblation,
    max_len: usize,
    smoothing: BleuSmoothing,
) -> Result<f64> {
    let mut hyps = Vec::with_capacity(dev.len());
    let mut refs = Vec::with_capacity(dev.len());
    for ex in dev {
        let target = ex
            .target
            .clone()
            .ok_or_else(|| Error::Contract(format!("dev example '{}' has no target", ex.id)))?;
        hyps.push(model.greedy_translate(&ablation.apply(&ex.input()?), max_len)?);
        refs.push(target);
    }
    corpus_bleu(&hyps, &refs, smoothing)
}

fn check_finite(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { step, loss })
    }
}

/// Text-only translation training of every backbone parameter. Adapters
/// and visual projections are left out and come back unchanged.
fn pretrain_backbone(
    model: &Model,
    data: &TrainData,
    cfg: &TrainConfig,
    metrics: &mut dyn FnMut(MetricRecord),
) -> Result<Model> {
    let mut params = ParameterRegistry::default();
    for (name, p) in model.params.iter() {
        if !is_adapter_param(name) && !is_visual_param(name) {
            params.insert(name, p.tensor.clone(), false);
        }
    }
    let mut backbone = Model {
        config: model.config.clone(),
        params,
    };
    let adam = crate::numerics::AdamConfig {
        lr: cfg.backbone_lr,
        ..cfg.adam()
    };
    let mut opt = Adam::new(adam, &backbone.params);
    let mut rng = stream_rng(cfg.seed, 3);
    let mut cycler = Cycler::new(data.parallel.len(), &mut rng);
    let text_only = InputAblation::text_only();
    for step in 1..=cfg.backbone_steps {
        let idx = cycler.take(cfg.batch_size, &mut rng);
        let batch = idx
            .iter()
            .map(|&i| mmt_sample(&data.parallel[i], text_only))
            .collect::<Result<Vec<_>>>()?;
        let (loss, grads) = loss_and_gradients(&backbone, &Batch::Mmt(batch), cfg.label_smoothing, None)?;
        check_finite(step, loss)?;
        opt.step(&mut backbone.params, &grads)?;
        metrics(MetricRecord::Step {
            phase: Phase::Backbone,
            step,
            objective: Objective::Mmt,
            loss,
        });
    }
    let mut out = model.clone();
    for (name, p) in backbone.params.iter() {
        out.params.overwrite(name, p.tensor.clone())?;
    }
    Ok(out)
}

/// Runs the configured schedule and returns the best and last parameters.
pub fn train(model: &Model, data: &TrainData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, data, cfg, &mut |_| {})
}

/// [`train`] with every metric record also passed to `observer` as it is
/// produced.
pub fn train_with(
    model: &Model,
    data: &TrainData,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&MetricRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.parallel.is_empty() {
        return Err(Error::Config("no parallel training examples".into()));
    }
    if cfg.uses_vmlm() && cfg.mask_rate == 0.0 {
        return Err(Error::Config(
            "masked-token training is enabled but mask_rate is 0".into(),
        ));
    }
    if cfg.uses_vmlm() && data.monolingual.is_empty() {
        return Err(Error::Config(
            "masked-token training is enabled but the monolingual set is empty".into(),
        ));
    }
    let mut metrics = Vec::new();
    let mut record = |r: MetricRecord| {
        observer(&r);
        metrics.push(r);
    };

    let mut model = if cfg.backbone_steps > 0 {
        pretrain_backbone(model, data, cfg, &mut record)?
    } else {
        model.clone()
    };
    let ablation = cfg.effective_ablation();
    let masking = MaskingConfig {
        rate: cfg.mask_rate,
        corrupt: cfg.mask_corrupt,
    };
    let mut state = TrainState {
        step: 0,
        optimizer: Adam::new(cfg.adam(), &model.params),
        best_dev_bleu: None,
        best_step: 0,
        best_params: model.params.clone(),
        objective_rng: stream_rng(cfg.seed, 0),
        data_rng: stream_rng(cfg.seed, 1),
    };
    let mut parallel = Cycler::new(data.parallel.len(), &mut state.data_rng);
    let mut mono = Cycler::new(data.monolingual.len(), &mut state.data_rng);
    let mut counts = [0usize; 2];

    while state.step < cfg.max_steps {
        state.step += 1;
        let step = state.step;
        let objective = if !cfg.vmlm {
            Objective::Mmt
        } else {
            match cfg.schedule {
                Schedule::Joint => sample_objective(cfg.p_vmlm, &mut state.objective_rng),
                Schedule::Disjoint if step <= cfg.vmlm_phase_steps => Objective::Vmlm,
                Schedule::Disjoint => Objective::Mmt,
            }
        };
        let batch = match objective {
            Objective::Mmt => {
                counts[0] += 1;
                let idx = parallel.take(cfg.batch_size, &mut state.data_rng);
                Batch::Mmt(
                    idx.iter()
                        .map(|&i| mmt_sample(&data.parallel[i], ablation))
                        .collect::<Result<_>>()?,
                )
            }
            Objective::Vmlm => {
                counts[1] += 1;
                let idx = mono.take(cfg.batch_size, &mut state.data_rng);
                let mut samples: Vec<VmlmSample>;
                let mut attempts = 0;
                // Redraw the masks if none was selected in the whole batch.
                loop {
                    samples = idx
                        .iter()
                        .map(|&i| {
                            vmlm_sample(
                                &data.monolingual[i],
                                masking,
                                model.config.vocab_size,
                                ablation,
                                &mut state.data_rng,
                            )
                        })
                        .collect::<Result<_>>()?;
                    if samples.iter().any(|s| !s.positions.is_empty()) {
                        break;
                    }
                    attempts += 1;
                    if attempts == 1000 {
                        return Err(Error::Contract(format!(
                            "step {step}: no maskable token in the masked-token batch"
                        )));
                    }
                }
                Batch::Vmlm(samples)
            }
        };
        let dropout = (model.config.dropout > 0.0).then(|| stream_rng(cfg.seed ^ step as u64, 2));
        let (loss, grads) = loss_and_gradients(&model, &batch, cfg.label_smoothing, dropout)?;
        check_finite(step, loss)?;
        state.optimizer.step(&mut model.params, &grads)?;
        record(MetricRecord::Step {
            phase: Phase::Main,
            step,
            objective,
            loss,
        });

        if !data.dev.is_empty() && (step % cfg.eval_every == 0 || step == cfg.max_steps) {
            let bleu = dev_bleu(&model, &data.dev, ablation, cfg.dev_max_len, cfg.dev_bleu_smoothing)?;
            let improved = state.best_dev_bleu.map_or(true, |b| bleu >= b);
            if improved {
                state.best_dev_bleu = Some(bleu);
                state.best_step = step;
                state.best_params = model.params.clone();
            }
            log::info!("step {step}: dev BLEU {bleu:.2}{}", if improved { " (best)" } else { "" });
            record(MetricRecord::Eval {
                step,
                dev_bleu: bleu,
                best_dev_bleu: state.best_dev_bleu.unwrap_or(bleu),
                improved,
            });
        }
    }

    let (best_params, best_step) = if state.best_dev_bleu.is_some() {
        (state.best_params, state.best_step)
    } else {
        (model.params.clone(), state.step)
    };
    Ok(TrainOutcome {
        best: Model {
            config: model.config.clone(),
            params: best_params,
        },
        last: model,
        best_step,
        best_dev_bleu: state.best_dev_bleu,
        metrics,
        objective_counts: counts,
    })
}
