use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Mat};
use crate::error::{ensure, Result};
use crate::nn::params::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.01
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig {
            lr,
            betas: default_betas(),
            eps: default_eps(),
            weight_decay: default_weight_decay(),
            clip_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), "learning rate must be positive");
        ensure!(
            (0.0..1.0).contains(&self.betas.0) && (0.0..1.0).contains(&self.betas.1),
            "betas must lie in [0, 1)"
        );
        ensure!(self.eps > 0.0, "eps must be positive");
        ensure!(self.weight_decay >= 0.0, "weight decay must be non-negative");
        if let Some(c) = self.clip_norm {
            ensure!(c > 0.0, "clip_norm must be positive");
        }
        Ok(())
    }
}

struct Moments {
    m: Mat,
    v: Mat,
}

/// Decoupled-weight-decay Adam. Only parameters that are trainable in the
/// store and received a gradient are touched.
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    state: BTreeMap<ParamId, Moments>,
    lr_scale: BTreeMap<ParamId, f64>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(AdamW {
            cfg,
            step: 0,
            state: BTreeMap::new(),
            lr_scale: BTreeMap::new(),
        })
    }

    /// Multiply the learning rate of one parameter by `scale`.
    pub fn set_lr_scale(&mut self, id: ParamId, scale: f64) {
        self.lr_scale.insert(id, scale);
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update. Returns the global gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) -> f64 {
        let updates: Vec<(ParamId, &Mat)> = grads.params().filter(|(id, _)| store.is_trainable(*id)).collect();
        let norm = updates
            .iter()
            .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = match self.cfg.clip_norm {
            Some(c) if norm > c => c / (norm + 1e-12),
            _ => 1.0,
        };
        self.step += 1;
        let (b1, b2) = self.cfg.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (wd, eps) = (self.cfg.weight_decay, self.cfg.eps);
        for (id, g) in updates {
            let lr = self.cfg.lr * self.lr_scale.get(&id).copied().unwrap_or(1.0);
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: Mat::zeros(g.dim()),
                v: Mat::zeros(g.dim()),
            });
            let p = store.value_mut(id);
            ndarray::Zip::from(p)
                .and(&mut st.m)
                .and(&mut st.v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    let g = g * clip;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
                });
        }
        norm
    }
}
