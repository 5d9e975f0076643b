//! Toy transformer encoder: a frozen linear front-end followed by pre-norm
//! self-attention blocks, plus masked-frame warmup and drift tracking
//! against a frozen parameter snapshot.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::Adam;
use crate::params::{ParamId, ParamStore};
use crate::pooling::LayerStack;
use crate::tensor::Tensor;

/// Per-block tensor names, in a fixed order.
pub const BLOCK_PARTS: [&str; 12] = [
    "ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
];

const POS_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub model_dim: usize,
    pub n_attn_heads: usize,
    pub ffn_dim: usize,
    /// Width of the raw input frames.
    pub input_dim: usize,
    /// Length of the learned position table; longer inputs are rejected.
    pub max_frames: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            model_dim: 32,
            n_attn_heads: 2,
            ffn_dim: 64,
            input_dim: 16,
            max_frames: 64,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Config("encoder.n_layers must be at least 1".into()));
        }
        for (k, v) in [
            ("model_dim", self.model_dim),
            ("n_attn_heads", self.n_attn_heads),
            ("ffn_dim", self.ffn_dim),
            ("input_dim", self.input_dim),
            ("max_frames", self.max_frames),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("encoder.{k} must be positive")));
            }
        }
        if !self.model_dim.is_multiple_of(self.n_attn_heads) {
            return Err(Error::Config(format!(
                "encoder.model_dim {} not divisible by encoder.n_attn_heads {}",
                self.model_dim, self.n_attn_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl BlockParams {
    pub fn ids(&self) -> Vec<ParamId> {
        vec![
            self.ln1_g, self.ln1_b, self.wq, self.wk, self.wv, self.wo, self.ln2_g, self.ln2_b, self.w1, self.b1,
            self.w2, self.b2,
        ]
    }
}

/// Handles to the encoder tensors inside a [`ParamStore`]. Block `l`
/// (1-based) owns the tensors named `layer{l}.*`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    cfg: EncoderConfig,
    frontend: ParamId,
    pos: ParamId,
    blocks: Vec<BlockParams>,
}

fn sinusoid(rows: usize, cols: usize) -> Tensor {
    let mut data = vec![0.0; rows * cols];
    for t in 0..rows {
        for j in 0..cols {
            let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / cols as f64);
            let a = t as f64 * freq;
            data[t * cols + j] = POS_SCALE * if j % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::new(&[rows, cols], data).expect("shape matches")
}

impl EncoderParams {
    /// Registers a freshly initialised encoder in `store`.
    pub fn init(cfg: &EncoderConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (f0, f, h) = (cfg.input_dim, cfg.model_dim, cfg.ffn_dim);
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let frontend = store.add("frontend.proj", Tensor::randn(&[f0, f], fan(f0), &mut rng), false)?;
        let pos = store.add("encoder.pos_embed", sinusoid(cfg.max_frames, f), true)?;
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 1..=cfg.n_layers {
            let mut add = |part: &str, t: Tensor| store.add(format!("layer{l}.{part}"), t, true);
            blocks.push(BlockParams {
                ln1_g: add("ln1_g", Tensor::full(&[f], 1.0))?,
                ln1_b: add("ln1_b", Tensor::zeros(&[f]))?,
                wq: add("wq", Tensor::uniform(&[f, f], fan(f), &mut rng))?,
                wk: add("wk", Tensor::uniform(&[f, f], fan(f), &mut rng))?,
                wv: add("wv", Tensor::uniform(&[f, f], fan(f), &mut rng))?,
                wo: add("wo", Tensor::uniform(&[f, f], fan(f), &mut rng))?,
                ln2_g: add("ln2_g", Tensor::full(&[f], 1.0))?,
                ln2_b: add("ln2_b", Tensor::zeros(&[f]))?,
                w1: add("w1", Tensor::uniform(&[f, h], fan(f), &mut rng))?,
                b1: add("b1", Tensor::zeros(&[h]))?,
                w2: add("w2", Tensor::uniform(&[h, f], fan(h), &mut rng))?,
                b2: add("b2", Tensor::zeros(&[f]))?,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            frontend,
            pos,
            blocks,
        })
    }

    /// Re-binds handles to an encoder already present in `store`, e.g.
    /// after loading a checkpoint.
    pub fn bind(cfg: &EncoderConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let find = |name: String, shape: &[usize]| -> Result<ParamId> {
            let id = store
                .id(&name)
                .ok_or_else(|| Error::Config(format!("missing encoder tensor `{name}`")))?;
            if store.get(id).shape() != shape {
                return Err(Error::Config(format!(
                    "encoder tensor `{name}` has shape {:?}, expected {shape:?}",
                    store.get(id).shape()
                )));
            }
            Ok(id)
        };
        let (f0, f, h) = (cfg.input_dim, cfg.model_dim, cfg.ffn_dim);
        let frontend = find("frontend.proj".into(), &[f0, f])?;
        let pos = find("encoder.pos_embed".into(), &[cfg.max_frames, f])?;
        let mut blocks = Vec::new();
        for l in 1..=cfg.n_layers {
            let p = |part: &str, shape: &[usize]| find(format!("layer{l}.{part}"), shape);
            blocks.push(BlockParams {
                ln1_g: p("ln1_g", &[f])?,
                ln1_b: p("ln1_b", &[f])?,
                wq: p("wq", &[f, f])?,
                wk: p("wk", &[f, f])?,
                wv: p("wv", &[f, f])?,
                wo: p("wo", &[f, f])?,
                ln2_g: p("ln2_g", &[f])?,
                ln2_b: p("ln2_b", &[f])?,
                w1: p("w1", &[f, h])?,
                b1: p("b1", &[h])?,
                w2: p("w2", &[h, f])?,
                b2: p("b2", &[f])?,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            frontend,
            pos,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn frontend_id(&self) -> ParamId {
        self.frontend
    }

    pub fn block(&self, layer: usize) -> &BlockParams {
        &self.blocks[layer - 1]
    }

    /// Tensors of transformer layer `layer` (1-based).
    pub fn layer_ids(&self, layer: usize) -> Vec<ParamId> {
        self.blocks[layer - 1].ids()
    }

    /// Trainable encoder tensors that belong to no block.
    pub fn non_layer_ids(&self) -> Vec<ParamId> {
        vec![self.pos]
    }

    /// Every tensor inherited from pre-training that fine-tuning may move.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let mut ids = self.non_layer_ids();
        for b in &self.blocks {
            ids.extend(b.ids());
        }
        ids
    }

    fn check_frames(&self, frames: &Tensor) -> Result<()> {
        if frames.shape().len() != 2 || frames.cols() != self.cfg.input_dim {
            return Err(Error::Shape(format!(
                "frames of shape {:?} do not match input width {}",
                frames.shape(),
                self.cfg.input_dim
            )));
        }
        if frames.rows() > self.cfg.max_frames {
            return Err(Error::Shape(format!(
                "{} frames exceed the position table of {}",
                frames.rows(),
                self.cfg.max_frames
            )));
        }
        if !frames.is_finite() {
            return Err(Error::Numeric("non-finite input frames".into()));
        }
        Ok(())
    }

    fn block_graph(&self, g: &mut Graph, store: &ParamStore, b: &BlockParams, x: Var) -> Result<Var> {
        let f = self.cfg.model_dim;
        let nh = self.cfg.n_attn_heads;
        let dh = f / nh;
        let p = |g: &mut Graph, id| g.param(store, id);

        let n = g.layer_norm(x)?;
        let (g1, b1) = (p(g, b.ln1_g), p(g, b.ln1_b));
        let n = g.mul_row(n, g1)?;
        let h = g.add_row(n, b1)?;
        let (wq, wk, wv, wo) = (p(g, b.wq), p(g, b.wk), p(g, b.wv), p(g, b.wo));
        let q = g.matmul(h, wq)?;
        let k = g.matmul(h, wk)?;
        let v = g.matmul(h, wv)?;
        let mut heads = Vec::with_capacity(nh);
        for i in 0..nh {
            let qh = g.slice_cols(q, i * dh, dh)?;
            let kh = g.slice_cols(k, i * dh, dh)?;
            let vh = g.slice_cols(v, i * dh, dh)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, 1.0 / (dh as f64).sqrt());
            let a = g.softmax(s, 1)?;
            heads.push(g.matmul(a, vh)?);
        }
        let o = g.concat_cols(&heads)?;
        let o = g.matmul(o, wo)?;
        let x1 = g.add(x, o)?;

        let n2 = g.layer_norm(x1)?;
        let (g2, b2) = (p(g, b.ln2_g), p(g, b.ln2_b));
        let n2 = g.mul_row(n2, g2)?;
        let h2 = g.add_row(n2, b2)?;
        let (w1, fb1, w2, fb2) = (p(g, b.w1), p(g, b.b1), p(g, b.w2), p(g, b.b2));
        let u = g.matmul(h2, w1)?;
        let u = g.add_row(u, fb1)?;
        let u = g.gelu(u);
        let u = g.matmul(u, w2)?;
        let u = g.add_row(u, fb2)?;
        g.add(x1, u)
    }

    /// Front-end output before position encodings, `frames·W_frozen`.
    pub fn project(&self, store: &ParamStore, frames: &Tensor) -> Result<Tensor> {
        self.check_frames(frames)?;
        let mut g = Graph::new();
        let x = g.constant(frames.clone());
        let w = g.param(store, self.frontend);
        let z = g.matmul(x, w)?;
        Ok(g.value(z).clone())
    }

    /// Records the encoder on `g` and returns the nodes Z_0..Z_L. Rows of
    /// the projected input flagged in `mask` are zeroed before position
    /// encodings are added.
    pub fn encode_graph_masked(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        frames: &Tensor,
        mask: Option<&[bool]>,
    ) -> Result<Vec<Var>> {
        self.check_frames(frames)?;
        let t = frames.rows();
        let x = g.constant(frames.clone());
        let w = g.param(store, self.frontend);
        let mut z = g.matmul(x, w)?;
        if let Some(mask) = mask {
            if mask.len() != t {
                return Err(Error::Shape(format!("mask of length {} for {t} frames", mask.len())));
            }
            let mut keep = Tensor::zeros(&[t, self.cfg.model_dim]);
            for (r, &m) in mask.iter().enumerate() {
                if !m {
                    let f = self.cfg.model_dim;
                    keep.data_mut()[r * f..(r + 1) * f].fill(1.0);
                }
            }
            let keep = g.constant(keep);
            z = g.mul(z, keep)?;
        }
        let pos = g.param(store, self.pos);
        let pos = g.slice_rows(pos, 0, t)?;
        let z0 = g.add(z, pos)?;
        let mut out = Vec::with_capacity(self.blocks.len() + 1);
        out.push(z0);
        for b in &self.blocks {
            let prev = *out.last().expect("non-empty");
            out.push(self.block_graph(g, store, b, prev)?);
        }
        Ok(out)
    }

    pub fn encode_graph(&self, g: &mut Graph, store: &ParamStore, frames: &Tensor) -> Result<Vec<Var>> {
        self.encode_graph_masked(g, store, frames, None)
    }

    /// Layer outputs Z_0..Z_L as plain tensors.
    pub fn encode(&self, store: &ParamStore, frames: &Tensor) -> Result<LayerStack> {
        let mut g = Graph::new();
        let vars = self.encode_graph(&mut g, store, frames)?;
        LayerStack::new(vars.into_iter().map(|v| g.value(v).clone()).collect())
    }
}

/// Frozen copy of the encoder tensors taken right after pre-training.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedSnapshot {
    entries: Vec<(ParamId, String, Tensor)>,
}

impl PretrainedSnapshot {
    pub fn capture(store: &ParamStore, enc: &EncoderParams) -> Self {
        let entries = enc
            .trainable_ids()
            .into_iter()
            .map(|id| (id, store.name(id).to_string(), store.get(id).detached()))
            .collect();
        Self { entries }
    }

    /// Rebuilds a snapshot from named tensors, checking them against `enc`.
    pub fn from_named(store: &ParamStore, enc: &EncoderParams, mut named: Vec<(String, Tensor)>) -> Result<Self> {
        let ids = enc.trainable_ids();
        if named.len() != ids.len() {
            return Err(Error::Config(format!(
                "snapshot holds {} tensors, encoder has {}",
                named.len(),
                ids.len()
            )));
        }
        let mut entries = Vec::with_capacity(ids.len());
        for id in ids {
            let name = store.name(id);
            let pos = named
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Config(format!("snapshot lacks `{name}`")))?;
            let (_, t) = named.swap_remove(pos);
            if t.shape() != store.get(id).shape() {
                return Err(Error::Config(format!("snapshot tensor `{name}` has shape {:?}", t.shape())));
            }
            entries.push((id, name.to_string(), t));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries.iter().map(|(id, n, t)| (*id, n.as_str(), t))
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.iter().find(|(i, _, _)| *i == id).map(|(_, _, t)| t)
    }

    /// Checks that the snapshot covers exactly the tensors of `enc`.
    pub fn check(&self, store: &ParamStore, enc: &EncoderParams) -> Result<()> {
        let ids = enc.trainable_ids();
        if ids.len() != self.entries.len() {
            return Err(Error::Config(format!(
                "snapshot holds {} tensors, encoder has {}",
                self.entries.len(),
                ids.len()
            )));
        }
        for id in ids {
            let snap = self
                .get(id)
                .ok_or_else(|| Error::Config(format!("snapshot lacks `{}`", store.name(id))))?;
            if snap.shape() != store.get(id).shape() {
                return Err(Error::Config(format!(
                    "snapshot tensor `{}` has shape {:?}, encoder has {:?}",
                    store.name(id),
                    snap.shape(),
                    store.get(id).shape()
                )));
            }
        }
        Ok(())
    }
}

/// Σ(θ − θ_p)² per transformer layer.
pub fn layer_drift(store: &ParamStore, enc: &EncoderParams, snapshot: &PretrainedSnapshot) -> Result<Vec<f64>> {
    snapshot.check(store, enc)?;
    (1..=enc.n_layers())
        .map(|l| {
            enc.layer_ids(l).into_iter().try_fold(0.0, |acc, id| {
                let snap = snapshot.get(id).expect("checked");
                Ok(acc + store.get(id).sq_dist(snap)?)
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mask_frac: f64,
    pub crop_frames: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            lr: 1e-3,
            mask_frac: 0.15,
            crop_frames: 32,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.crop_frames == 0 {
            return Err(Error::Config("pretrain.batch_size and pretrain.crop_frames must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("pretrain.lr must be positive, got {}", self.lr)));
        }
        if !(self.mask_frac > 0.0 && self.mask_frac < 1.0) {
            return Err(Error::Config(format!("pretrain.mask_frac must lie in (0, 1), got {}", self.mask_frac)));
        }
        Ok(())
    }
}

/// Masked-frame reconstruction: a fraction of the projected input frames
/// is zeroed and a linear head must recover them from the top layer.
#[derive(Debug, Clone)]
pub struct MaskedReconstruction {
    cfg: PretrainConfig,
    head: Tensor,
    adam: Adam,
}

const HEAD_KEY: usize = usize::MAX;

fn crop<R: Rng>(frames: &Tensor, len: usize, rng: &mut R) -> Tensor {
    let t = frames.rows();
    if t <= len {
        return frames.clone();
    }
    let start = rng.random_range(0..=t - len);
    let f = frames.cols();
    Tensor::new(&[len, f], frames.data()[start * f..(start + len) * f].to_vec()).expect("shape matches")
}

fn draw_mask<R: Rng>(t: usize, frac: f64, rng: &mut R) -> Vec<bool> {
    let n = ((t as f64 * frac).round() as usize).clamp(1, t);
    let mut idx: Vec<usize> = (0..t).collect();
    idx.shuffle(rng);
    let mut mask = vec![false; t];
    for &i in &idx[..n] {
        mask[i] = true;
    }
    mask
}

impl MaskedReconstruction {
    pub fn new(enc: &EncoderConfig, cfg: &PretrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_4ead);
        let f = enc.model_dim;
        Ok(Self {
            cfg: cfg.clone(),
            head: Tensor::uniform(&[f, f], 1.0 / (f as f64).sqrt(), &mut rng),
            adam: Adam::new(),
        })
    }

    fn loss_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        enc: &EncoderParams,
        frames: &Tensor,
        mask: &[bool],
        head: Var,
    ) -> Result<Var> {
        let target = enc.project(store, frames)?;
        let layers = enc.encode_graph_masked(g, store, frames, Some(mask))?;
        let top = *layers.last().expect("non-empty");
        let pred = g.matmul(top, head)?;
        let f = enc.config().model_dim;
        let n_masked = mask.iter().filter(|&&m| m).count();
        let mut sel = Tensor::zeros(&[frames.rows(), f]);
        let mut tgt = Tensor::zeros(&[frames.rows(), f]);
        for (r, &m) in mask.iter().enumerate() {
            if m {
                sel.data_mut()[r * f..(r + 1) * f].fill(1.0);
                tgt.data_mut()[r * f..(r + 1) * f].copy_from_slice(target.row(r));
            }
        }
        let sel = g.constant(sel);
        let tgt = g.constant(tgt);
        let pred = g.mul(pred, sel)?;
        let diff = g.sub(pred, tgt)?;
        let sq = g.mul(diff, diff)?;
        let total = g.sum_all(sq);
        Ok(g.scale(total, 1.0 / (n_masked * f) as f64))
    }

    /// Mean masked reconstruction error over `utts`, with masks and crops
    /// drawn from a fixed seed so repeated calls are comparable.
    pub fn loss(&self, store: &ParamStore, enc: &EncoderParams, utts: &[Tensor]) -> Result<f64> {
        if utts.is_empty() {
            return Err(Error::EmptyInput("no utterances to score".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0xe7a1);
        let mut sum = 0.0;
        for u in utts {
            let frames = crop(u, self.cfg.crop_frames, &mut rng);
            let mask = draw_mask(frames.rows(), self.cfg.mask_frac, &mut rng);
            let mut g = Graph::new();
            let head = g.constant(self.head.clone());
            let l = self.loss_graph(&mut g, store, enc, &frames, &mask, head)?;
            sum += g.value(l).data()[0];
        }
        Ok(sum / utts.len() as f64)
    }

    /// Runs `steps` Adam iterations on the encoder and the head.
    pub fn train(&mut self, store: &mut ParamStore, enc: &EncoderParams, corpus: &[Tensor], steps: usize) -> Result<()> {
        if corpus.is_empty() {
            if steps == 0 {
                return Ok(());
            }
            return Err(Error::EmptyInput("warmup needs at least one utterance".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let ids = enc.trainable_ids();
        for _ in 0..steps {
            store.zero_grads();
            let mut head_grad = vec![0.0; self.head.len()];
            let scale = 1.0 / self.cfg.batch_size as f64;
            for _ in 0..self.cfg.batch_size {
                let u = &corpus[rng.random_range(0..corpus.len())];
                let frames = crop(u, self.cfg.crop_frames, &mut rng);
                let mask = draw_mask(frames.rows(), self.cfg.mask_frac, &mut rng);
                let mut g = Graph::new();
                let head = g.input(self.head.clone());
                let l = self.loss_graph(&mut g, store, enc, &frames, &mask, head)?;
                let l = g.scale(l, scale);
                let grads = g.backward(l)?;
                g.accumulate_param_grads(&grads, store);
                if let Some(hg) = grads.get(head) {
                    head_grad.iter_mut().zip(hg).for_each(|(a, b)| *a += b);
                }
            }
            self.adam.begin_step();
            for &id in &ids {
                let t = store.get_mut(id);
                let grad = t.take_grad().unwrap_or_else(|| vec![0.0; t.len()]);
                self.adam.update_slice(id.index(), t.data_mut(), &grad, self.cfg.lr);
            }
            let lr = self.cfg.lr;
            self.adam.update_slice(HEAD_KEY, self.head.data_mut(), &head_grad, lr);
        }
        store.zero_grads();
        Ok(())
    }
}

/// Warms up a freshly initialised encoder with masked-frame reconstruction
/// and returns the resulting snapshot θ_p. The reconstruction head is
/// discarded.
pub fn pretrain_warmup(
    store: &mut ParamStore,
    enc: &EncoderParams,
    corpus: &[Tensor],
    cfg: &PretrainConfig,
) -> Result<PretrainedSnapshot> {
    let mut task = MaskedReconstruction::new(enc.config(), cfg)?;
    task.train(store, enc, corpus, cfg.steps)?;
    Ok(PretrainedSnapshot::capture(store, enc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check_store, GradCheck};
    use crate::synth::{make_corpus, SynthConfig};

    fn small() -> EncoderConfig {
        EncoderConfig {
            n_layers: 2,
            model_dim: 8,
            n_attn_heads: 2,
            ffn_dim: 12,
            input_dim: 5,
            max_frames: 16,
            seed: 3,
        }
    }

    fn frames(t: usize, f: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[t, f], 1.0, &mut rng)
    }

    #[test]
    fn zero_block_passes_input_through() {
        let cfg = EncoderConfig {
            n_layers: 1,
            ..small()
        };
        let mut store = ParamStore::new();
        let enc = EncoderParams::init(&cfg, &mut store).unwrap();
        for id in enc.layer_ids(1) {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let stack = enc.encode(&store, &frames(6, 5, 1)).unwrap();
        assert_eq!(stack.layers()[1].data(), stack.layers()[0].data());
    }

    #[test]
    fn stack_shapes() {
        let mut store = ParamStore::new();
        let enc = EncoderParams::init(&small(), &mut store).unwrap();
        let stack = enc.encode(&store, &frames(7, 5, 2)).unwrap();
        assert_eq!(stack.layers().len(), 3);
        for z in stack.layers() {
            assert_eq!(z.shape(), &[7, 8]);
        }
        let again = enc.encode(&store, &frames(7, 5, 2)).unwrap();
        assert_eq!(stack, again);
    }

    #[test]
    fn wrong_input_width_is_shape_error() {
        let mut store = ParamStore::new();
        let enc = EncoderParams::init(&small(), &mut store).unwrap();
        assert!(matches!(enc.encode(&store, &frames(4, 6, 0)), Err(Error::Shape(_))));
        assert!(matches!(enc.encode(&store, &frames(17, 5, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn indivisible_heads_rejected() {
        let cfg = EncoderConfig {
            n_attn_heads: 3,
            ..small()
        };
        assert!(matches!(EncoderParams::init(&cfg, &mut ParamStore::new()), Err(Error::Config(_))));
    }

    #[test]
    fn block_one_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let enc = EncoderParams::init(&small(), &mut store).unwrap();
        let x = frames(5, 5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let proj = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let ids = enc.layer_ids(1);
        let err = grad_check_store(&store, &ids, GradCheck::default(), |g, s| {
            let zs = enc.encode_graph(g, s, &x)?;
            let p = g.constant(proj.clone());
            let m = g.mul(zs[2], p)?;
            Ok(g.sum_all(m))
        })
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn frontend_receives_no_gradient() {
        let mut store = ParamStore::new();
        let enc = EncoderParams::init(&small(), &mut store).unwrap();
        let mut g = Graph::new();
        let zs = enc.encode_graph(&mut g, &store, &frames(5, 5, 1)).unwrap();
        let l = g.sum_all(zs[2]);
        let grads = g.backward(l).unwrap();
        g.accumulate_param_grads(&grads, &mut store);
        let fg = store.get(enc.frontend_id()).grad();
        assert!(fg.is_none_or(|g| g.iter().all(|&v| v == 0.0)));
        assert!(store.get(enc.block(1).wq).grad().is_some());
    }

    #[test]
    fn layer_names_round_trip_through_bind() {
        let mut store = ParamStore::new();
        let enc = EncoderParams::init(&small(), &mut store).unwrap();
        assert_eq!(store.name(enc.block(2).w1), "layer2.w1");
        let bound = EncoderParams::bind(&small(), &store).unwrap();
        assert_eq!(bound, enc);
    }

    #[test]
    fn zero_step_warmup_returns_init() {
        let mut store = ParamStore::new();
        let enc = EncoderParams::init(&small(), &mut store).unwrap();
        let init = store.clone();
        let snap = pretrain_warmup(
            &mut store,
            &enc,
            &[],
            &PretrainConfig {
                steps: 0,
                ..PretrainConfig::default()
            },
        )
        .unwrap();
        for (id, _, t) in snap.entries() {
            assert_eq!(t.data(), init.get(id).data());
        }
    }

    #[test]
    fn drift_isolates_perturbed_layer() {
        let mut store = ParamStore::new();
        let enc = EncoderParams::init(&small(), &mut store).unwrap();
        let snap = PretrainedSnapshot::capture(&store, &enc);
        assert_eq!(layer_drift(&store, &enc, &snap).unwrap(), vec![0.0, 0.0]);
        let w = enc.block(2).wk;
        store.get_mut(w).data_mut()[3] += 0.5;
        store.get_mut(w).data_mut()[7] -= 0.25;
        let d = layer_drift(&store, &enc, &snap).unwrap();
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 0.3125).abs() < 1e-12);
        // Snapshot is a deep copy.
        assert_ne!(snap.get(w).unwrap().data()[3], store.get(w).data()[3]);
    }

    #[test]
    fn drift_rejects_other_architecture() {
        let mut s1 = ParamStore::new();
        let e1 = EncoderParams::init(&small(), &mut s1).unwrap();
        let mut s2 = ParamStore::new();
        let e2 = EncoderParams::init(
            &EncoderConfig {
                n_layers: 3,
                ..small()
            },
            &mut s2,
        )
        .unwrap();
        let snap = PretrainedSnapshot::capture(&s1, &e1);
        assert!(matches!(layer_drift(&s2, &e2, &snap), Err(Error::Config(_))));
    }

    #[test]
    fn warmup_reduces_heldout_reconstruction() {
        let synth = SynthConfig {
            n_speakers: 6,
            frame_dim: 5,
            frames_per_utt: 20,
            ..SynthConfig::default()
        };
        let corpus: Vec<Tensor> = make_corpus(&synth, 4).unwrap().into_iter().map(|u| u.frames).collect();
        let (train, held) = corpus.split_at(18);
        let mut store = ParamStore::new();
        let enc = EncoderParams::init(&small(), &mut store).unwrap();
        let cfg = PretrainConfig {
            steps: 200,
            batch_size: 2,
            crop_frames: 16,
            ..PretrainConfig::default()
        };
        let mut task = MaskedReconstruction::new(enc.config(), &cfg).unwrap();
        let before = task.loss(&store, &enc, held).unwrap();
        task.train(&mut store, &enc, train, 200).unwrap();
        let after = task.loss(&store, &enc, held).unwrap();
        assert!(after < before, "{after} !< {before}");
    }
}
