//! Utterance-level pooling back-ends that turn a stack of per-layer frame
//! representations into a unit-norm speaker embedding.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Variance floor under the square root of the attentive std statistic.
pub const STD_FLOOR: f64 = 1e-9;

/// Per-layer frame representations Z_0..Z_L of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    layers: Vec<Tensor>,
}

impl LayerStack {
    pub fn new(layers: Vec<Tensor>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::EmptyInput("layer stack with no layers".into()))?;
        if first.shape().len() != 2 {
            return Err(Error::Shape(format!("layer of shape {:?} is not a matrix", first.shape())));
        }
        for z in &layers {
            if z.shape() != first.shape() {
                return Err(Error::Shape(format!(
                    "ragged layer stack: {:?} vs {:?}",
                    first.shape(),
                    z.shape()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    /// Number of layers including layer 0.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn frames(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].cols()
    }

    /// Same stack with frames reordered: row `i` of the result is row
    /// `perm[i]` of the input, in every layer.
    pub fn permute_frames(&self, perm: &[usize]) -> Result<Self> {
        let t = self.frames();
        let mut seen = vec![false; t];
        if perm.len() != t || perm.iter().any(|&p| p >= t || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("{perm:?} is not a permutation of {t} frames")));
        }
        let f = self.dim();
        let layers = self
            .layers
            .iter()
            .map(|z| {
                let data = perm.iter().flat_map(|&p| z.row(p).iter().copied()).collect();
                Tensor::new(&[t, f], data)
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    fn vars(&self, g: &mut Graph) -> Vec<Var> {
        self.layers.iter().map(|z| g.constant(z.clone())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    #[default]
    None,
    SharedWeights,
    SharedLinear,
    SharedBoth,
}

impl ConstraintMode {
    pub const ALL: [ConstraintMode; 4] = [
        ConstraintMode::None,
        ConstraintMode::SharedWeights,
        ConstraintMode::SharedLinear,
        ConstraintMode::SharedBoth,
    ];

    pub fn shares_weights(self) -> bool {
        matches!(self, ConstraintMode::SharedWeights | ConstraintMode::SharedBoth)
    }

    pub fn shares_linear(self) -> bool {
        matches!(self, ConstraintMode::SharedLinear | ConstraintMode::SharedBoth)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConstraintMode::None => "none",
            ConstraintMode::SharedWeights => "shared_weights",
            ConstraintMode::SharedLinear => "shared_linear",
            ConstraintMode::SharedBoth => "shared_both",
        }
    }
}

impl fmt::Display for ConstraintMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConstraintMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown constraint mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[serde(rename = "topattn")]
    TopAttn,
    Wavg,
    #[default]
    Mhfa,
}

impl BackendKind {
    pub const ALL: [BackendKind; 3] = [BackendKind::TopAttn, BackendKind::Wavg, BackendKind::Mhfa];

    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::TopAttn => "topattn",
            BackendKind::Wavg => "wavg",
            BackendKind::Mhfa => "mhfa",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown backend `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub constraint: ConstraintMode,
    /// Attention heads H (MHFA only).
    pub heads: usize,
    /// Compressed key/value width D (MHFA only).
    pub compressed_dim: usize,
    pub embed_dim: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mhfa,
            constraint: ConstraintMode::None,
            heads: 8,
            compressed_dim: 16,
            embed_dim: 32,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("heads", self.heads),
            ("compressed_dim", self.compressed_dim),
            ("embed_dim", self.embed_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("backend.{k} must be positive")));
            }
        }
        Ok(())
    }
}

fn fan_in(n: usize) -> f64 {
    1.0 / (n as f64).sqrt()
}

fn uniform_layer_weights(depth: usize) -> Tensor {
    Tensor::full(&[depth], 1.0 / depth as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhfaParams {
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub s_k: ParamId,
    pub s_v: ParamId,
    pub q: ParamId,
    pub w_emb: ParamId,
    pub mode: ConstraintMode,
}

impl MhfaParams {
    /// Registers untied MHFA tensors for a stack of `depth` layers of width
    /// `dim`.
    pub fn init<R: Rng>(store: &mut ParamStore, depth: usize, dim: usize, cfg: &BackendConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, h, e) = (cfg.compressed_dim, cfg.heads, cfg.embed_dim);
        let w_k = store.add("backend.w_k", uniform_layer_weights(depth), true)?;
        let w_v = store.add("backend.w_v", uniform_layer_weights(depth), true)?;
        let s_k = store.add("backend.s_k", Tensor::uniform(&[dim, d], fan_in(dim), rng), true)?;
        let s_v = store.add("backend.s_v", Tensor::uniform(&[dim, d], fan_in(dim), rng), true)?;
        let q = store.add("backend.q", Tensor::randn(&[d, h], fan_in(d), rng), true)?;
        let w_emb = store.add("backend.w_emb", Tensor::uniform(&[h * d, e], fan_in(h * d), rng), true)?;
        Ok(Self {
            w_k,
            w_v,
            s_k,
            s_v,
            q,
            w_emb,
            mode: ConstraintMode::None,
        })
    }

    /// Distinct trainable tensors.
    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w_k];
        if self.w_v != self.w_k {
            ids.push(self.w_v);
        }
        ids.push(self.s_k);
        if self.s_v != self.s_k {
            ids.push(self.s_v);
        }
        ids.push(self.q);
        ids.push(self.w_emb);
        ids
    }

    pub fn heads(&self, store: &ParamStore) -> usize {
        store.get(self.q).cols()
    }

    /// Graph of the concatenated head outputs `[1×HD]` plus the attention
    /// matrix `[T×H]`.
    pub fn pooled_graph(&self, g: &mut Graph, store: &ParamStore, layers: &[Var]) -> Result<(Var, Var)> {
        let (wk, wv) = (g.param(store, self.w_k), g.param(store, self.w_v));
        let (sk, sv) = (g.param(store, self.s_k), g.param(store, self.s_v));
        let q = g.param(store, self.q);
        let ok = g.weighted_layer_sum(layers, wk)?;
        let ov = g.weighted_layer_sum(layers, wv)?;
        let k = g.matmul(ok, sk)?;
        let v = g.matmul(ov, sv)?;
        let logits = g.matmul(k, q)?;
        let a = g.softmax(logits, 0)?;
        let at = g.transpose(a)?;
        let c = g.matmul(at, v)?;
        let (h, d) = (g.shape(c)[0], g.shape(c)[1]);
        Ok((g.reshape(c, &[1, h * d])?, a))
    }

    /// Graph of the embedding `[1×E]` plus the attention matrix `[T×H]`.
    pub fn forward_graph(&self, g: &mut Graph, store: &ParamStore, layers: &[Var]) -> Result<(Var, Var)> {
        let (c, a) = self.pooled_graph(g, store, layers)?;
        let w_emb = g.param(store, self.w_emb);
        let e = g.matmul(c, w_emb)?;
        Ok((g.l2_normalize_rows(e)?, a))
    }

    /// Attention weights `[T×H]` for a stack; each column sums to 1.
    pub fn attention(&self, store: &ParamStore, stack: &LayerStack) -> Result<Tensor> {
        let mut g = Graph::new();
        let layers = stack.vars(&mut g);
        let (_, a) = self.forward_graph(&mut g, store, &layers)?;
        Ok(g.value(a).clone())
    }
}

/// Ties the tensors designated by `mode` so both streams read and update one
/// object. The key-side tensor is kept.
pub fn apply_constraint(p: MhfaParams, mode: ConstraintMode) -> MhfaParams {
    MhfaParams {
        w_v: if mode.shares_weights() { p.w_k } else { p.w_v },
        s_v: if mode.shares_linear() { p.s_k } else { p.s_v },
        mode,
        ..p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WavgParams {
    pub w: ParamId,
    pub w_emb: ParamId,
}

impl WavgParams {
    pub fn init<R: Rng>(store: &mut ParamStore, depth: usize, dim: usize, cfg: &BackendConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let w = store.add("backend.w", uniform_layer_weights(depth), true)?;
        let w_emb = store.add("backend.w_emb", Tensor::uniform(&[dim, cfg.embed_dim], fan_in(dim), rng), true)?;
        Ok(Self { w, w_emb })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w, self.w_emb]
    }

    pub fn forward_graph(&self, g: &mut Graph, store: &ParamStore, layers: &[Var]) -> Result<Var> {
        let w = g.param(store, self.w);
        let w_emb = g.param(store, self.w_emb);
        let o = g.weighted_layer_sum(layers, w)?;
        let m = g.mean_rows(o)?;
        let e = g.matmul(m, w_emb)?;
        g.l2_normalize_rows(e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopAttnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub w_emb: ParamId,
}

impl TopAttnParams {
    pub fn init<R: Rng>(store: &mut ParamStore, dim: usize, cfg: &BackendConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let hidden = dim.div_ceil(2);
        let w1 = store.add("backend.att_w1", Tensor::uniform(&[dim, hidden], fan_in(dim), rng), true)?;
        let b1 = store.add("backend.att_b1", Tensor::zeros(&[hidden]), true)?;
        let w2 = store.add("backend.att_w2", Tensor::uniform(&[hidden, 1], fan_in(hidden), rng), true)?;
        let w_emb = store.add(
            "backend.w_emb",
            Tensor::uniform(&[2 * dim, cfg.embed_dim], fan_in(2 * dim), rng),
            true,
        )?;
        Ok(Self { w1, b1, w2, w_emb })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w1, self.b1, self.w2, self.w_emb]
    }

    /// Graph of `[weighted mean ‖ weighted std]` `[1×2F]` of the top layer
    /// plus the frame weights `[T×1]`.
    pub fn pooled_graph(&self, g: &mut Graph, store: &ParamStore, layers: &[Var]) -> Result<(Var, Var)> {
        let x = *layers
            .last()
            .ok_or_else(|| Error::EmptyInput("layer stack with no layers".into()))?;
        let (w1, b1) = (g.param(store, self.w1), g.param(store, self.b1));
        let w2 = g.param(store, self.w2);
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.tanh(h);
        let s = g.matmul(h, w2)?;
        let a = g.softmax(s, 0)?;
        let at = g.transpose(a)?;
        let mean = g.matmul(at, x)?;
        let neg = g.scale(mean, -1.0);
        let d = g.add_row(x, neg)?;
        let d2 = g.mul(d, d)?;
        let var = g.matmul(at, d2)?;
        let std = g.sqrt_clamp(var, STD_FLOOR);
        Ok((g.concat_cols(&[mean, std])?, a))
    }

    /// Graph of the embedding `[1×E]` plus the frame weights `[T×1]`.
    pub fn forward_graph(&self, g: &mut Graph, store: &ParamStore, layers: &[Var]) -> Result<(Var, Var)> {
        let (pooled, a) = self.pooled_graph(g, store, layers)?;
        let w_emb = g.param(store, self.w_emb);
        let e = g.matmul(pooled, w_emb)?;
        Ok((g.l2_normalize_rows(e)?, a))
    }
}

/// A pooling back-end bound to tensors in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub enum Backend {
    TopAttn(TopAttnParams),
    Wavg(WavgParams),
    Mhfa(MhfaParams),
}

impl Backend {
    /// Registers a fresh back-end for stacks of `depth` layers of width
    /// `dim`, with any MHFA constraint already applied.
    pub fn init<R: Rng>(store: &mut ParamStore, depth: usize, dim: usize, cfg: &BackendConfig, rng: &mut R) -> Result<Self> {
        match cfg.kind {
            BackendKind::TopAttn => Ok(Backend::TopAttn(TopAttnParams::init(store, dim, cfg, rng)?)),
            BackendKind::Wavg => Ok(Backend::Wavg(WavgParams::init(store, depth, dim, cfg, rng)?)),
            BackendKind::Mhfa => {
                // Tied tensors are registered once so the store holds no orphans.
                let mut tmp = ParamStore::new();
                let p = apply_constraint(MhfaParams::init(&mut tmp, depth, dim, cfg, rng)?, cfg.constraint);
                let mut map = |id: ParamId| -> Result<ParamId> {
                    match store.id(tmp.name(id)) {
                        Some(existing) => Ok(existing),
                        None => store.add(tmp.name(id), tmp.get(id).clone(), true),
                    }
                };
                Ok(Backend::Mhfa(MhfaParams {
                    w_k: map(p.w_k)?,
                    w_v: map(p.w_v)?,
                    s_k: map(p.s_k)?,
                    s_v: map(p.s_v)?,
                    q: map(p.q)?,
                    w_emb: map(p.w_emb)?,
                    mode: p.mode,
                }))
            }
        }
    }

    /// Re-binds a back-end already present in `store` (e.g. loaded from a
    /// checkpoint), checking every tensor's shape.
    pub fn bind(store: &ParamStore, depth: usize, dim: usize, cfg: &BackendConfig) -> Result<Self> {
        let mut tmp = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let proto = Self::init(&mut tmp, depth, dim, cfg, &mut rng)?;
        let find = |id: ParamId| -> Result<ParamId> {
            let name = tmp.name(id);
            let real = store
                .id(name)
                .ok_or_else(|| Error::Config(format!("missing back-end tensor `{name}`")))?;
            if store.get(real).shape() != tmp.get(id).shape() {
                return Err(Error::Config(format!(
                    "back-end tensor `{name}` has shape {:?}, expected {:?}",
                    store.get(real).shape(),
                    tmp.get(id).shape()
                )));
            }
            Ok(real)
        };
        Ok(match proto {
            Backend::TopAttn(p) => Backend::TopAttn(TopAttnParams {
                w1: find(p.w1)?,
                b1: find(p.b1)?,
                w2: find(p.w2)?,
                w_emb: find(p.w_emb)?,
            }),
            Backend::Wavg(p) => Backend::Wavg(WavgParams {
                w: find(p.w)?,
                w_emb: find(p.w_emb)?,
            }),
            Backend::Mhfa(p) => Backend::Mhfa(MhfaParams {
                w_k: find(p.w_k)?,
                w_v: find(p.w_v)?,
                s_k: find(p.s_k)?,
                s_v: find(p.s_v)?,
                q: find(p.q)?,
                w_emb: find(p.w_emb)?,
                mode: p.mode,
            }),
        })
    }

    pub fn kind(&self) -> BackendKind {
        match self {
            Backend::TopAttn(_) => BackendKind::TopAttn,
            Backend::Wavg(_) => BackendKind::Wavg,
            Backend::Mhfa(_) => BackendKind::Mhfa,
        }
    }

    /// Distinct trainable tensors.
    pub fn ids(&self) -> Vec<ParamId> {
        match self {
            Backend::TopAttn(p) => p.ids(),
            Backend::Wavg(p) => p.ids(),
            Backend::Mhfa(p) => p.ids(),
        }
    }

    /// Embedding node `[1×E]` for the layer nodes of one utterance.
    pub fn forward_graph(&self, g: &mut Graph, store: &ParamStore, layers: &[Var]) -> Result<Var> {
        match self {
            Backend::TopAttn(p) => Ok(p.forward_graph(g, store, layers)?.0),
            Backend::Wavg(p) => p.forward_graph(g, store, layers),
            Backend::Mhfa(p) => Ok(p.forward_graph(g, store, layers)?.0),
        }
    }

    /// Unit-norm embedding `[E]` of a stack.
    pub fn embed(&self, store: &ParamStore, stack: &LayerStack) -> Result<Tensor> {
        let mut g = Graph::new();
        let layers = stack.vars(&mut g);
        let e = self.forward_graph(&mut g, store, &layers)?;
        let t = g.value(e);
        Tensor::new(&[t.len()], t.data().to_vec())
    }
}

pub fn mhfa_forward(store: &ParamStore, p: &MhfaParams, stack: &LayerStack) -> Result<Tensor> {
    Backend::Mhfa(p.clone()).embed(store, stack)
}

pub fn wavg_forward(store: &ParamStore, p: &WavgParams, stack: &LayerStack) -> Result<Tensor> {
    Backend::Wavg(p.clone()).embed(store, stack)
}

pub fn topattn_forward(store: &ParamStore, p: &TopAttnParams, stack: &LayerStack) -> Result<Tensor> {
    Backend::TopAttn(p.clone()).embed(store, stack)
}

/// Softmax-normalised layer weights of the key and value streams (the key
/// stream is absent for weighted averaging).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerWeights {
    pub key: Option<Vec<f64>>,
    pub value: Vec<f64>,
}

pub fn softmax_vec(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn layer_weight_report(store: &ParamStore, backend: &Backend) -> Result<LayerWeights> {
    match backend {
        Backend::Mhfa(p) => Ok(LayerWeights {
            key: Some(softmax_vec(store.get(p.w_k).data())),
            value: softmax_vec(store.get(p.w_v).data()),
        }),
        Backend::Wavg(p) => Ok(LayerWeights {
            key: None,
            value: softmax_vec(store.get(p.w).data()),
        }),
        Backend::TopAttn(_) => Err(Error::Unsupported(
            "top-layer attentive pooling has no layer weights".into(),
        )),
    }
}

/// Closed-form MHFA trainable count without tying.
pub fn mhfa_param_count(depth: usize, dim: usize, d: usize, h: usize, e: usize) -> usize {
    2 * depth + 2 * dim * d + d * h + h * d * e
}
