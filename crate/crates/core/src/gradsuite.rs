//! Finite-difference checks of every differentiable component at small
//! dimensions, as run by `mhfa gradcheck`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{EncoderConfig, EncoderParams, PretrainedSnapshot};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check_store, GradCheck};
use crate::graph::{Graph, Var};
use crate::objective::{aam_loss, reg_loss, AamConfig};
use crate::params::{ParamId, ParamStore};
use crate::pooling::{Backend, BackendConfig, BackendKind, ConstraintMode};
use crate::tensor::Tensor;

pub const COMPONENTS: [&str; 6] = ["tensor-core", "topattn", "wavg", "mhfa", "aam", "reg"];

/// Largest relative error a component may show.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteDims {
    pub layers: usize,
    pub frames: usize,
    pub dim: usize,
    pub compressed_dim: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub batch: usize,
    pub classes: usize,
}

impl Default for SuiteDims {
    fn default() -> Self {
        Self {
            layers: 3,
            frames: 5,
            dim: 8,
            compressed_dim: 4,
            heads: 2,
            embed_dim: 6,
            batch: 4,
            classes: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteSettings {
    pub dims: SuiteDims,
    pub margin: f64,
    pub scale: f64,
    pub constraint: ConstraintMode,
    pub seed: u64,
    /// Component whose analytic gradient gets one entry corrupted.
    pub fault: Option<String>,
}

impl Default for SuiteSettings {
    fn default() -> Self {
        let aam = AamConfig::default();
        Self {
            dims: SuiteDims::default(),
            margin: aam.margin,
            scale: aam.scale,
            constraint: ConstraintMode::None,
            seed: 0,
            fault: None,
        }
    }
}

fn opts(s: &SuiteSettings, name: &str, eps: f64) -> GradCheck {
    GradCheck {
        eps,
        corrupt_entry: (s.fault.as_deref() == Some(name)).then_some(0),
    }
}

/// Contracts `out` with a fixed pseudo-random tensor to get a scalar whose
/// gradient reaches every output entry.
fn probe(g: &mut Graph, out: Var) -> Result<Var> {
    let n = g.value(out).len();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.61).sin()).collect();
    let p = g.constant(Tensor::new(g.shape(out), w)?);
    let m = g.mul(out, p)?;
    Ok(g.sum_all(m))
}

fn check_vars<F>(params: Vec<Tensor>, opts: GradCheck, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = params
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("x{i}"), t, true))
        .collect::<Result<_>>()?;
    grad_check_store(&store, &ids, opts, |g, s| {
        let v: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
        let out = f(g, &v)?;
        probe(g, out)
    })
}

fn tensor_core(s: &SuiteSettings) -> Result<f64> {
    let d = &s.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let (t, f) = (d.frames, d.dim);
    let a = Tensor::randn(&[t, f], 1.0, &mut rng);
    let b = Tensor::randn(&[t, f], 1.0, &mut rng);
    let w = Tensor::randn(&[f, d.compressed_dim], 1.0, &mut rng);
    let row = Tensor::randn(&[f], 1.0, &mut rng);
    let lw = Tensor::randn(&[d.layers + 1], 1.0, &mut rng);
    let o = opts(s, "tensor-core", 1e-6);
    let clean = GradCheck {
        corrupt_entry: None,
        ..o
    };

    let mut worst = check_vars(vec![a.clone(), w.clone()], o, |g, v| g.matmul(v[0], v[1]))?;
    let mut more = |e: f64| worst = worst.max(e);
    more(check_vars(vec![a.clone(), b.clone()], clean, |g, v| {
        let x = g.add(v[0], v[1])?;
        let x = g.sub(x, v[1])?;
        let x = g.mul(x, v[1])?;
        Ok(g.scale(x, 0.7))
    })?);
    more(check_vars(vec![a.clone(), row.clone()], clean, |g, v| {
        let x = g.mul_row(v[0], v[1])?;
        g.add_row(x, v[1])
    })?);
    more(check_vars(vec![a.clone()], clean, |g, v| {
        let x = g.softmax(v[0], 0)?;
        let y = g.softmax(v[0], 1)?;
        g.add(x, y)
    })?);
    let mut stack: Vec<Tensor> = (0..=d.layers).map(|_| Tensor::randn(&[t, f], 1.0, &mut rng)).collect();
    stack.push(lw);
    more(check_vars(stack, clean, |g, v| g.weighted_layer_sum(&v[..v.len() - 1], v[v.len() - 1]))?);
    more(check_vars(vec![a.clone()], clean, |g, v| {
        let x = g.layer_norm(v[0])?;
        let x = g.gelu(x);
        Ok(g.tanh(x))
    })?);
    more(check_vars(vec![a.clone(), b.clone()], clean, |g, v| {
        let x = g.transpose(v[0])?;
        let x = g.slice_cols(x, 1, 2)?;
        let y = g.slice_rows(v[1], 1, 2)?;
        let y = g.reshape(y, &[f, 2])?;
        let c = g.concat_cols(&[x, y])?;
        let c = g.concat_rows(&[c, c])?;
        g.mean_rows(c)
    })?);
    more(check_vars(vec![a.clone()], clean, |g, v| {
        let x = g.l2_normalize_rows(v[0])?;
        g.l2_normalize_cols(x)
    })?);
    let pos = Tensor::new(&[t, f], a.data().iter().map(|x| x * x + 0.1).collect())?;
    more(check_vars(vec![pos], clean, |g, v| Ok(g.sqrt_clamp(v[0], 1e-9)))?);
    Ok(worst)
}

fn backend(s: &SuiteSettings, kind: BackendKind) -> Result<f64> {
    let d = &s.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0xbac);
    let cfg = BackendConfig {
        kind,
        constraint: if kind == BackendKind::Mhfa { s.constraint } else { ConstraintMode::None },
        heads: d.heads,
        compressed_dim: d.compressed_dim,
        embed_dim: d.embed_dim,
    };
    let mut store = ParamStore::new();
    let b = Backend::init(&mut store, d.layers + 1, d.dim, &cfg, &mut rng)?;
    for id in b.ids() {
        let shape = store.get(id).shape().to_vec();
        let jitter = Tensor::randn(&shape, 0.3, &mut rng);
        let t = store.get_mut(id);
        for (x, j) in t.data_mut().iter_mut().zip(jitter.data()) {
            *x += j;
        }
    }
    let layers: Vec<ParamId> = (0..=d.layers)
        .map(|l| store.add(format!("z{l}"), Tensor::randn(&[d.frames, d.dim], 1.0, &mut rng), true))
        .collect::<Result<_>>()?;
    let mut ids = b.ids();
    ids.extend(&layers);
    grad_check_store(&store, &ids, opts(s, kind.as_str(), 1e-6), |g, st| {
        let lv: Vec<Var> = layers.iter().map(|&id| g.param(st, id)).collect();
        let e = b.forward_graph(g, st, &lv)?;
        probe(g, e)
    })
}

fn aam(s: &SuiteSettings) -> Result<f64> {
    let d = &s.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0xaa);
    let cfg = AamConfig {
        margin: s.margin,
        scale: s.scale,
        n_classes: d.classes,
    };
    let labels: Vec<usize> = (0..d.batch).map(|i| (i * 3 + 1) % d.classes).collect();
    let raw = Tensor::randn(&[d.batch, d.embed_dim], 1.0, &mut rng);
    let w = Tensor::randn(&[d.embed_dim, d.classes], 1.0, &mut rng);
    let mut store = ParamStore::new();
    let ids = vec![store.add("emb", raw, true)?, store.add("w", w, true)?];
    grad_check_store(&store, &ids, opts(s, "aam", 1e-5), |g, st| {
        let e = g.param(st, ids[0]);
        let e = g.l2_normalize_rows(e)?;
        let w = g.param(st, ids[1]);
        aam_loss(g, &cfg, e, w, &labels)
    })
}

fn reg(s: &SuiteSettings) -> Result<f64> {
    let d = &s.dims;
    let enc_cfg = EncoderConfig {
        n_layers: d.layers,
        model_dim: d.dim,
        n_attn_heads: d.heads,
        ffn_dim: d.dim,
        input_dim: d.dim,
        max_frames: d.frames,
        seed: s.seed,
    };
    let mut store = ParamStore::new();
    let enc = EncoderParams::init(&enc_cfg, &mut store)?;
    let snap = PretrainedSnapshot::capture(&store, &enc);
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0x4e9);
    let ids = enc.trainable_ids();
    for &id in &ids {
        let shape = store.get(id).shape().to_vec();
        let jitter = Tensor::randn(&shape, 0.1, &mut rng);
        for (x, j) in store.get_mut(id).data_mut().iter_mut().zip(jitter.data()) {
            *x += j;
        }
    }
    grad_check_store(&store, &ids, opts(s, "reg", 1e-6), |g, st| reg_loss(g, st, &enc, &snap))
}

/// Maximum relative gradient error of one component.
pub fn run_component(name: &str, s: &SuiteSettings) -> Result<f64> {
    match name {
        "tensor-core" => tensor_core(s),
        "topattn" => backend(s, BackendKind::TopAttn),
        "wavg" => backend(s, BackendKind::Wavg),
        "mhfa" => backend(s, BackendKind::Mhfa),
        "aam" => aam(s),
        "reg" => reg(s),
        other => Err(Error::Usage(format!(
            "unknown component `{other}`; components: {}",
            COMPONENTS.join(", ")
        ))),
    }
}

/// Every component in [`COMPONENTS`] order. A component that fails to run
/// reports an infinite error.
pub fn run_suite(s: &SuiteSettings) -> Vec<(&'static str, f64)> {
    COMPONENTS
        .iter()
        .map(|&c| (c, run_component(c, s).unwrap_or(f64::INFINITY)))
        .collect()
}
