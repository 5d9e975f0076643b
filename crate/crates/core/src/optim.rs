//! Per-group learning rates with layer-wise decay, Adam updates and the
//! per-epoch rate schedule.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlrdConfig {
    pub lr_backend: f64,
    /// Rate of the bottom transformer layer.
    pub lr_encoder_base: f64,
    /// Layer `l` trains at `lr_encoder_base · xi^(l-1)`.
    pub xi: f64,
    pub epoch_decay: f64,
    pub freeze_encoder: bool,
    /// Global gradient-norm cap applied before every step.
    pub grad_clip: f64,
}

impl Default for LlrdConfig {
    fn default() -> Self {
        Self {
            lr_backend: 1e-3,
            lr_encoder_base: 2e-5,
            xi: 1.5,
            epoch_decay: 0.95,
            freeze_encoder: false,
            grad_clip: 5.0,
        }
    }
}

impl LlrdConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("llrd.{name} must be positive, got {v}")))
            }
        };
        pos("lr_backend", self.lr_backend)?;
        pos("lr_encoder_base", self.lr_encoder_base)?;
        pos("xi", self.xi)?;
        pos("epoch_decay", self.epoch_decay)?;
        pos("grad_clip", self.grad_clip)?;
        Ok(())
    }

    /// Initial rate of transformer layer `layer` (1-based).
    pub fn layer_rate(&self, layer: usize) -> f64 {
        self.lr_encoder_base * self.xi.powi(layer as i32 - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GroupKind {
    /// Transformer layer, 1-based.
    EncoderLayer(usize),
    Backend,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub kind: GroupKind,
    pub members: Vec<ParamId>,
    initial_lr: f64,
    decay: f64,
    ticks: u32,
}

impl ParamGroup {
    pub fn new(kind: GroupKind, members: Vec<ParamId>, lr: f64, decay: f64) -> Self {
        Self {
            kind,
            members,
            initial_lr: lr,
            decay,
            ticks: 0,
        }
    }

    /// Current rate: the initial rate times `decay^ticks`, evaluated in
    /// closed form so that layer ratios never accumulate rounding drift.
    pub fn lr(&self) -> f64 {
        self.initial_lr * self.decay.powi(self.ticks as i32)
    }

    pub fn initial_lr(&self) -> f64 {
        self.initial_lr
    }

    pub fn ticks(&self) -> u32 {
        self.ticks
    }

    pub(crate) fn set_ticks(&mut self, ticks: u32) {
        self.ticks = ticks;
    }
}

/// Groups for one encoder/back-end pair. Encoder layer `l` maps to group
/// `l`; non-layer encoder parameters join group 1; the frozen front-end is
/// never grouped.
pub fn build_groups(encoder: &EncoderParams, backend: &[ParamId], cfg: &LlrdConfig) -> Vec<ParamGroup> {
    let mut groups = Vec::new();
    if !cfg.freeze_encoder {
        for l in 1..=encoder.n_layers() {
            let mut members = encoder.layer_ids(l);
            if l == 1 {
                members.extend(encoder.non_layer_ids());
            }
            groups.push(ParamGroup::new(
                GroupKind::EncoderLayer(l),
                members,
                cfg.layer_rate(l),
                cfg.epoch_decay,
            ));
        }
    }
    let mut seen = BTreeSet::new();
    let backend: Vec<ParamId> = backend.iter().copied().filter(|id| seen.insert(*id)).collect();
    groups.push(ParamGroup::new(GroupKind::Backend, backend, cfg.lr_backend, cfg.epoch_decay));
    groups
}

/// Multiplies every group's rate by its decay factor.
pub fn epoch_tick(groups: &mut [ParamGroup]) {
    for g in groups {
        g.ticks += 1;
    }
}

/// Scales group gradients so their global L2 norm is at most `cap`.
/// Returns the norm before clipping.
pub fn clip_global_norm(store: &mut ParamStore, groups: &[ParamGroup], cap: f64) -> f64 {
    let mut sq = 0.0;
    for g in groups {
        for &id in &g.members {
            if let Some(gr) = store.get(id).grad() {
                sq += gr.iter().map(|v| v * v).sum::<f64>();
            }
        }
    }
    let norm = sq.sqrt();
    if norm > cap {
        let s = cap / norm;
        for g in groups {
            for &id in &g.members {
                if let Some(gr) = store.get_mut(id).grad_mut() {
                    gr.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    state: BTreeMap<usize, Moments>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            state: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn iteration(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, key: usize) -> Option<&Moments> {
        self.state.get(&key)
    }

    pub(crate) fn restore(&mut self, step: u64, state: BTreeMap<usize, Moments>) {
        self.step = step;
        self.state = state;
    }

    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Bias-corrected Adam update of one buffer. `key` identifies its
    /// moment state; call [`Adam::begin_step`] once per iteration first.
    pub fn update_slice(&mut self, key: usize, param: &mut [f64], grad: &[f64], lr: f64) {
        let n = param.len();
        let st = self.state.entry(key).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        let t = self.step.max(1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..n {
            let g = grad[i];
            st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * g;
            st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * g * g;
            let mh = st.m[i] / bc1;
            let vh = st.v[i] / bc2;
            param[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }

    /// One update of every group member at its group's rate. Every member
    /// must carry a gradient; all gradient buffers are cleared afterwards.
    pub fn step(&mut self, store: &mut ParamStore, groups: &[ParamGroup]) -> Result<()> {
        for g in groups {
            for &id in &g.members {
                if store.get(id).grad().is_none() {
                    return Err(Error::Consistency(format!(
                        "parameter `{}` has no gradient",
                        store.name(id)
                    )));
                }
            }
        }
        self.begin_step();
        for g in groups {
            let lr = g.lr();
            for &id in &g.members {
                let t = store.get_mut(id);
                let grad = t.take_grad().expect("checked above");
                self.update_slice(id.index(), t.data_mut(), &grad, lr);
            }
        }
        store.zero_grads();
        Ok(())
    }
}
