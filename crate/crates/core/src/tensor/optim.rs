use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::array::Array;
use super::params::{ParamGroup, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Learning-rate factor for backbone parameters.
    pub backbone_lr_factor: f64,
    /// Learning-rate factor for deformable sampling-offset projections.
    pub sampling_lr_factor: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            backbone_lr_factor: 0.1,
            sampling_lr_factor: 0.1,
            clip_norm: Some(0.1),
        }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    /// First and second moments keyed by parameter name.
    moments: BTreeMap<String, (Array, Array)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    fn lr_factor(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Default => 1.0,
            ParamGroup::Backbone => self.config.backbone_lr_factor,
            ParamGroup::SamplingProjection => self.config.sampling_lr_factor,
        }
    }

    /// Applies one update with base learning rate `lr`. Returns the pre-clip
    /// global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<ParamId, Array>, lr: f64) -> f64 {
        self.step += 1;
        // sorted so the norm, and hence clipping, is reproducible bitwise
        let mut ids: Vec<ParamId> = grads.keys().copied().collect();
        ids.sort();
        let norm = ids.iter().map(|id| grads[id].dot(&grads[id])).sum::<f64>().sqrt();
        let clip = match self.config.clip_norm {
            Some(max) if norm > max => max / (norm + 1e-6),
            _ => 1.0,
        };
        let c = self.config.clone();
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for id in ids {
            if !store.trainable(id) {
                continue;
            }
            let g = &grads[&id];
            let plr = lr * self.lr_factor(store.group(id));
            let decay = if store.decays(id) { c.weight_decay } else { 0.0 };
            let name = store.name(id).to_string();
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (Array::zeros(g.shape()), Array::zeros(g.shape())));
            let p = store.value_mut(id);
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i] * clip;
                md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * gi;
                vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= plr * decay * pd[i];
                pd[i] -= plr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        norm
    }
}
