//! Speaker classification loss and the pull towards pre-trained weights.

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderParams, PretrainedSnapshot};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

/// Embeddings entering the loss must have unit norm within this tolerance.
const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AamConfig {
    pub margin: f64,
    pub scale: f64,
    pub n_classes: usize,
}

impl Default for AamConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            scale: 30.0,
            n_classes: 20,
        }
    }
}

impl AamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::Config(format!("aam.margin {} outside [0, π/2)", self.margin)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("aam.scale must be positive, got {}", self.scale)));
        }
        if self.n_classes == 0 {
            return Err(Error::Config("aam.n_classes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegConfig {
    pub lambda: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self { lambda: 1e-4 }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("reg.lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Batch-mean additive-angular-margin loss of unit-norm `embeddings`
/// `[B×E]` against `class_weights` `[E×C]`, whose columns are normalised
/// on every call.
pub fn aam_loss(g: &mut Graph, cfg: &AamConfig, embeddings: Var, class_weights: Var, labels: &[usize]) -> Result<Var> {
    let (b, e) = match g.shape(embeddings) {
        [b, e] => (*b, *e),
        s => return Err(Error::Shape(format!("embeddings of shape {s:?} are not a batch matrix"))),
    };
    let cw = g.shape(class_weights).to_vec();
    if cw.len() != 2 || cw[0] != e || cw[1] != cfg.n_classes {
        return Err(Error::dim("aam_loss", &[e, cfg.n_classes], &cw));
    }
    let ev = g.value(embeddings);
    for i in 0..b {
        let n = ev.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::Contract(format!("embedding {i} has norm {n}")));
        }
    }
    let wn = g.l2_normalize_cols(class_weights)?;
    let cos = g.matmul(embeddings, wn)?;
    g.aam_cross_entropy(cos, labels, cfg.margin, cfg.scale)
}

/// `Σ(θ − θ_p)²` over every trainable encoder tensor.
pub fn reg_loss(g: &mut Graph, store: &ParamStore, enc: &EncoderParams, snapshot: &PretrainedSnapshot) -> Result<Var> {
    snapshot.check(store, enc)?;
    let mut total: Option<Var> = None;
    for id in enc.trainable_ids() {
        let p = g.param(store, id);
        let target = g.constant(snapshot.get(id).expect("checked").clone());
        let d = g.sub(p, target)?;
        let sq = g.mul(d, d)?;
        let s = g.sum_all(sq);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    total.ok_or_else(|| Error::EmptyInput("encoder without parameters".into()))
}

/// `spk + lambda · reg`.
pub fn total_loss(g: &mut Graph, spk: Var, reg: Var, lambda: f64) -> Result<Var> {
    let r = g.scale(reg, lambda);
    g.add(spk, r)
}
