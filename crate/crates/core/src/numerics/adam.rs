use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapters::ParameterRegistry;
use crate::error::{Error, Result};

use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Adam with bias correction. Moment buffers exist only for trainable
/// parameters of the registry it was created from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig, registry: &ParameterRegistry) -> Self {
        let moments = registry
            .trainable()
            .map(|(name, t)| {
                (
                    name.to_string(),
                    Moments {
                        first: vec![0.0; t.numel()],
                        second: vec![0.0; t.numel()],
                    },
                )
            })
            .collect();
        Self {
            config,
            step: 0,
            moments,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn tracked(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    /// Applies one update. Parameters without an entry in `grads` are left
    /// untouched; a gradient for a frozen or unknown parameter is an error.
    pub fn step(
        &mut self,
        registry: &mut ParameterRegistry,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        for (name, g) in grads {
            let moments = self.moments.get(name).ok_or_else(|| {
                Error::Registry(format!("gradient for untracked parameter '{name}'"))
            })?;
            if moments.first.len() != g.numel() {
                return Err(Error::Registry(format!(
                    "gradient for '{name}' has {} values, parameter has {}",
                    g.numel(),
                    moments.first.len()
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let m = self.moments.get_mut(name).expect("checked above");
            let param = registry.trainable_mut(name)?;
            for (((p, m1), m2), &gv) in param
                .data_mut()
                .iter_mut()
                .zip(m.first.iter_mut())
                .zip(m.second.iter_mut())
                .zip(g.data())
            {
                *m1 = beta1 * *m1 + (1.0 - beta1) * gv;
                *m2 = beta2 * *m2 + (1.0 - beta2) * gv * gv;
                let mhat = *m1 / bc1;
                let vhat = *m2 / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry() -> ParameterRegistry {
        let mut r = ParameterRegistry::default();
        r.insert("w", Tensor::vector(vec![0.5]), false);
        r.insert("frozen", Tensor::vector(vec![1.5, -2.0]), true);
        r
    }

    #[test]
    fn default_hyperparameters() {
        let c = AdamConfig::default();
        assert_eq!((c.lr, c.beta1, c.beta2), (1e-4, 0.9, 0.99));
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut r = registry();
        let mut adam = Adam::new(AdamConfig::default(), &r);
        let grads = BTreeMap::from([("w".to_string(), Tensor::vector(vec![0.0]))]);
        adam.step(&mut r, &grads).unwrap();
        assert_eq!(r.get("w").unwrap().data(), &[0.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = v_hat = 1 after one step with g = 1, so the update is lr/(1+eps)
        let mut r = registry();
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(cfg, &r);
        let grads = BTreeMap::from([("w".to_string(), Tensor::vector(vec![1.0]))]);
        adam.step(&mut r, &grads).unwrap();
        let expected = 0.5 - cfg.lr / (1.0 + cfg.eps);
        assert!((r.get("w").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameters_are_not_tracked() {
        let mut r = registry();
        let mut adam = Adam::new(AdamConfig::default(), &r);
        assert_eq!(adam.tracked().collect::<Vec<_>>(), vec!["w"]);
        let grads = BTreeMap::from([("frozen".to_string(), Tensor::vector(vec![1.0, 1.0]))]);
        assert!(matches!(adam.step(&mut r, &grads), Err(Error::Registry(_))));
        assert_eq!(r.get("frozen").unwrap().data(), &[1.5, -2.0]);
        let bad = BTreeMap::from([("w".to_string(), Tensor::vector(vec![1.0, 1.0]))]);
        assert!(matches!(adam.step(&mut r, &bad), Err(Error::Registry(_))));
    }
}
