//! Joint fine-tuning loop, evaluation with an embedding cache, and one-axis
//! sweeps.
//!
//! Each utterance in a batch gets its own graph, built on a worker thread.
//! The batch loss lives in a small second graph whose inputs are the
//! embeddings; its gradient with respect to each embedding row seeds the
//! per-utterance backward passes. Gradients are summed into the store in
//! batch order, so results do not depend on the thread count.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, Sample, TrialRef};
use crate::encoder::{layer_drift, pretrain_warmup, EncoderConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::graph::{Grads, Graph, Var};
use crate::metrics::{cosine_score, MetricsReport, TrialScoreSet};
use crate::model::{hex, Model, OptimState};
use crate::objective::{aam_loss, reg_loss, total_loss, AamConfig, RegConfig};
use crate::optim::{build_groups, clip_global_norm, epoch_tick, LlrdConfig};
use crate::pooling::{BackendConfig, BackendKind, ConstraintMode};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmftConfig {
    pub enabled: bool,
    pub epochs: usize,
    pub margin: f64,
    pub segment_frames: usize,
}

impl Default for LmftConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            epochs: 3,
            margin: 0.5,
            segment_frames: 48,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Crop length in frames for every training segment.
    pub segment_frames: usize,
    pub backend: BackendConfig,
    pub aam: AamConfig,
    pub reg: RegConfig,
    pub llrd: LlrdConfig,
    pub lmft: LmftConfig,
    pub pretrain: PretrainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 10,
            batch_size: 32,
            segment_frames: 32,
            backend: BackendConfig::default(),
            aam: AamConfig::default(),
            reg: RegConfig::default(),
            llrd: LlrdConfig::default(),
            lmft: LmftConfig::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, encoder: &EncoderConfig) -> Result<()> {
        encoder.validate()?;
        self.backend.validate()?;
        self.aam.validate()?;
        self.reg.validate()?;
        self.llrd.validate()?;
        self.pretrain.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        let mut segments = vec![("train.segment_frames", self.segment_frames)];
        if self.lmft.enabled {
            segments.push(("train.lmft.segment_frames", self.lmft.segment_frames));
            if !(self.lmft.margin >= 0.0 && self.lmft.margin.is_finite()) {
                return Err(Error::Config(format!(
                    "train.lmft.margin must be non-negative, got {}",
                    self.lmft.margin
                )));
            }
        }
        for (key, t) in segments {
            if t == 0 || t > encoder.max_frames {
                return Err(Error::Config(format!(
                    "{key} must lie in 1..={} (encoder.max_frames), got {t}",
                    encoder.max_frames
                )));
            }
        }
        Ok(())
    }

    /// The configuration of the large-margin phase: margin and segment
    /// length swapped in, everything else untouched.
    pub fn lmft_phase(&self) -> TrainConfig {
        let mut c = self.clone();
        c.aam.margin = self.lmft.margin;
        c.segment_frames = self.lmft.segment_frames;
        c
    }
}

#[derive(Serialize)]
struct HashInput<'a> {
    encoder: &'a EncoderConfig,
    train: &'a TrainConfig,
}

/// Hex SHA-256 of the serialized encoder and training configuration.
pub fn config_hash(encoder: &EncoderConfig, cfg: &TrainConfig) -> String {
    let text = toml::to_string(&HashInput { encoder, train: cfg }).expect("config serialises");
    hex(&Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    /// Mean training loss per epoch, LM-FT epochs included.
    pub epoch_loss: Vec<f64>,
    /// Row 0 is the state after pre-training; row `e` follows epoch `e`.
    pub drift: Vec<Vec<f64>>,
    pub backend_params: usize,
    pub metrics: Option<MetricsReport>,
    pub checkpoint_hash: String,
    /// Wall time of the run. Kept out of the serialized record so that
    /// identical runs produce identical files.
    #[serde(skip)]
    pub elapsed_secs: f64,
}

impl RunRecord {
    pub fn final_drift_total(&self) -> f64 {
        self.drift.last().map(|d| d.iter().sum()).unwrap_or(0.0)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("record serialises");
        s.push('\n');
        s
    }

    /// `epoch,layer,drift` rows, layers numbered from 1.
    pub fn drift_csv(&self) -> String {
        let mut out = String::from("epoch,layer,drift\n");
        for (e, row) in self.drift.iter().enumerate() {
            for (l, d) in row.iter().enumerate() {
                out.push_str(&format!("{e},{},{d}\n", l + 1));
            }
        }
        out
    }
}

pub struct TrainOutput {
    pub model: Model,
    pub optim: OptimState,
    pub record: RunRecord,
}

/// Runs `f` over `items` on up to `threads` workers, returning results in
/// item order.
pub fn par_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

fn crop<R: Rng>(frames: &Tensor, len: usize, rng: &mut R) -> Tensor {
    let t = frames.rows();
    if t <= len {
        return frames.clone();
    }
    let start = rng.random_range(0..=t - len);
    let f = frames.cols();
    Tensor::new(&[len, f], frames.data()[start * f..(start + len) * f].to_vec()).expect("shape matches")
}

struct StepLoss {
    loss: f64,
}

/// Forward and backward for one batch; leaves summed gradients in the store.
fn batch_gradients(
    model: &mut Model,
    crops: &[Tensor],
    labels: &[usize],
    aam: &AamConfig,
    lambda: f64,
    train_encoder: bool,
    threads: usize,
) -> Result<StepLoss> {
    let forwards: Vec<Result<(Graph, Var)>> = {
        let m = &*model;
        par_map(crops, threads, |frames| {
            let mut g = Graph::new();
            let layers = m.encoder.encode_graph(&mut g, &m.store, frames)?;
            let e = m.backend.forward_graph(&mut g, &m.store, &layers)?;
            Ok((g, e))
        })
    };
    let forwards: Vec<(Graph, Var)> = forwards.into_iter().collect::<Result<_>>()?;
    let e_dim = model.backend_cfg.embed_dim;
    let mut emb = Vec::with_capacity(crops.len() * e_dim);
    for (g, e) in &forwards {
        emb.extend_from_slice(g.value(*e).data());
    }

    let mut head = Graph::new();
    let ev = head.input(Tensor::new(&[crops.len(), e_dim], emb)?);
    let w = head.param(&model.store, model.class_weights);
    let spk = aam_loss(&mut head, aam, ev, w, labels)?;
    let out = if train_encoder && lambda > 0.0 {
        let reg = reg_loss(&mut head, &model.store, &model.encoder, &model.snapshot)?;
        total_loss(&mut head, spk, reg, lambda)?
    } else {
        spk
    };
    let loss = head.value(out).data()[0];
    if !loss.is_finite() {
        return Ok(StepLoss { loss });
    }
    let hg = head.backward(out)?;
    head.accumulate_param_grads(&hg, &mut model.store);
    let de = hg.get(ev).expect("embeddings feed the loss").to_vec();

    let jobs: Vec<(usize, &(Graph, Var))> = forwards.iter().enumerate().collect();
    let grads: Vec<Result<Grads>> = par_map(&jobs, threads, |(i, (g, e))| {
        g.backward_seeded(*e, &de[i * e_dim..(i + 1) * e_dim])
    });
    for ((g, _), gr) in forwards.iter().zip(grads) {
        g.accumulate_param_grads(&gr?, &mut model.store);
    }
    Ok(StepLoss { loss })
}

/// Trains on `data.train`, then scores `data.trials` if there are any.
pub fn train(encoder: &EncoderConfig, cfg: &TrainConfig, data: &Dataset, threads: usize) -> Result<TrainOutput> {
    let start = std::time::Instant::now();
    cfg.validate(encoder)?;
    let n_spk = data.n_train_speakers();
    if n_spk != cfg.aam.n_classes {
        return Err(Error::Config(format!(
            "corpus has {n_spk} training speakers but aam.n_classes is {}",
            cfg.aam.n_classes
        )));
    }
    if data.train.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    for s in &data.train {
        if s.frames.cols() != encoder.input_dim {
            return Err(Error::Config(format!(
                "utterance {} has {} features per frame, encoder.input_dim is {}",
                s.key,
                s.frames.cols(),
                encoder.input_dim
            )));
        }
        if !s.frames.is_finite() {
            return Err(Error::Config(format!("utterance {} contains non-finite values", s.key)));
        }
    }

    let mut model = Model::init(encoder, &cfg.backend, cfg.aam.n_classes, cfg.seed)?;
    let frames: Vec<Tensor> = data.train.iter().map(|s| s.frames.clone()).collect();
    model.snapshot = pretrain_warmup(&mut model.store, &model.encoder, &frames, &cfg.pretrain)?;

    let train_encoder = !cfg.llrd.freeze_encoder;
    if !train_encoder {
        for id in model.encoder.trainable_ids() {
            model.store.set_trainable(id, false);
        }
    }
    let mut optim = OptimState {
        groups: build_groups(&model.encoder, &model.backend_ids(), &cfg.llrd),
        ..OptimState::default()
    };
    let mut record = RunRecord {
        config_hash: config_hash(encoder, cfg),
        epoch_loss: Vec::new(),
        drift: vec![layer_drift(&model.store, &model.encoder, &model.snapshot)?],
        backend_params: model.store.count(model.backend.ids()),
        metrics: None,
        checkpoint_hash: String::new(),
        elapsed_secs: 0.0,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_0c0d);
    let mut phases = vec![(cfg.clone(), cfg.epochs)];
    if cfg.lmft.enabled {
        phases.push((cfg.lmft_phase(), cfg.lmft.epochs));
    }
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut epoch = 0;
    for (phase, n_epochs) in phases {
        for _ in 0..n_epochs {
            epoch += 1;
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            let mut n_batches = 0;
            for (step, batch) in order.chunks(phase.batch_size).enumerate() {
                let crops: Vec<Tensor> = batch
                    .iter()
                    .map(|&i| crop(&data.train[i].frames, phase.segment_frames, &mut rng))
                    .collect();
                let labels: Vec<usize> = batch.iter().map(|&i| data.train[i].speaker).collect();
                let diverged = |loss: f64| Error::Divergence {
                    epoch,
                    step: step + 1,
                    loss,
                };
                let res = batch_gradients(
                    &mut model,
                    &crops,
                    &labels,
                    &phase.aam,
                    phase.reg.lambda,
                    train_encoder,
                    threads,
                );
                let loss = match res {
                    Ok(s) if s.loss.is_finite() => s.loss,
                    Ok(s) => return Err(diverged(s.loss)),
                    Err(Error::Numeric(_)) => return Err(diverged(f64::NAN)),
                    Err(e) => return Err(e),
                };
                clip_global_norm(&mut model.store, &optim.groups, phase.llrd.grad_clip);
                optim.adam.step(&mut model.store, &optim.groups)?;
                if model.store.iter().any(|(_, p)| !p.tensor.data().iter().all(|v| v.is_finite())) {
                    return Err(diverged(loss));
                }
                sum += loss;
                n_batches += 1;
            }
            epoch_tick(&mut optim.groups);
            optim.epoch_ticks += 1;
            record.epoch_loss.push(sum / n_batches as f64);
            record
                .drift
                .push(layer_drift(&model.store, &model.encoder, &model.snapshot)?);
        }
    }

    for id in model.encoder.trainable_ids() {
        model.store.set_trainable(id, true);
    }
    if !data.trials.is_empty() {
        let mut cache = EmbeddingCache::new();
        let (report, _) = evaluate(&model, &data.eval, &data.trials, &mut cache, threads)?;
        record.metrics = Some(report);
    }
    record.checkpoint_hash = model.hash();
    record.elapsed_secs = start.elapsed().as_secs_f64();
    Ok(TrainOutput { model, optim, record })
}

/// Embeddings keyed by (model hash, utterance key).
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    map: HashMap<(String, String), Tensor>,
    computed: usize,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Number of embeddings actually computed so far.
    pub fn computed(&self) -> usize {
        self.computed
    }

    /// Embeds every sample in `samples` not yet cached for `model`.
    pub fn fill(&mut self, model: &Model, samples: &[&Sample], threads: usize) -> Result<String> {
        let hash = model.hash();
        let mut missing: Vec<&Sample> = Vec::new();
        for s in samples {
            let k = (hash.clone(), s.key.clone());
            if !self.map.contains_key(&k) && !missing.iter().any(|m| m.key == s.key) {
                missing.push(s);
            }
        }
        let embs = par_map(&missing, threads, |s| model.embed(&s.frames));
        for (s, e) in missing.iter().zip(embs) {
            self.map.insert((hash.clone(), s.key.clone()), e?);
            self.computed += 1;
        }
        Ok(hash)
    }

    pub fn get(&self, hash: &str, key: &str) -> Option<&Tensor> {
        self.map.get(&(hash.to_string(), key.to_string()))
    }
}

/// Scores every trial by cosine similarity of cached embeddings.
pub fn evaluate(
    model: &Model,
    samples: &[Sample],
    trials: &[TrialRef],
    cache: &mut EmbeddingCache,
    threads: usize,
) -> Result<(MetricsReport, TrialScoreSet)> {
    let mut used = vec![false; samples.len()];
    for t in trials {
        for i in [t.enroll, t.test] {
            if i >= samples.len() {
                return Err(Error::Config(format!(
                    "trial refers to utterance {i} of {}",
                    samples.len()
                )));
            }
            used[i] = true;
        }
    }
    let refs: Vec<&Sample> = samples.iter().zip(&used).filter(|(_, &u)| u).map(|(s, _)| s).collect();
    let hash = cache.fill(model, &refs, threads)?;
    let mut scores = Vec::with_capacity(trials.len());
    for t in trials {
        let a = cache.get(&hash, &samples[t.enroll].key).expect("filled");
        let b = cache.get(&hash, &samples[t.test].key).expect("filled");
        scores.push((cosine_score(a.data(), b.data())?, t.is_target));
    }
    let set = TrialScoreSet::new(scores);
    Ok((MetricsReport::compute(&set)?, set))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Xi,
    Heads,
    Lambda,
    Constraint,
    Backend,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 5] = [
        SweepAxis::Xi,
        SweepAxis::Heads,
        SweepAxis::Lambda,
        SweepAxis::Constraint,
        SweepAxis::Backend,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Xi => "xi",
            SweepAxis::Heads => "heads",
            SweepAxis::Lambda => "lambda",
            SweepAxis::Constraint => "constraint",
            SweepAxis::Backend => "backend",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| {
            let valid: Vec<&str> = Self::ALL.iter().map(|a| a.as_str()).collect();
            Error::Usage(format!("unknown axis `{s}`; valid axes: {}", valid.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum AxisValue {
    Num(f64),
    Count(usize),
    Constraint(ConstraintMode),
    Backend(BackendKind),
}

impl AxisValue {
    fn parse(axis: SweepAxis, s: &str) -> Result<Self> {
        let bad = |what: &str| Error::Usage(format!("axis {axis}: `{s}` is not {what}"));
        let v = match axis {
            SweepAxis::Xi | SweepAxis::Lambda => {
                let v: f64 = s.parse().map_err(|_| bad("a number"))?;
                if !v.is_finite() || v < 0.0 || (axis == SweepAxis::Xi && v == 0.0) {
                    return Err(bad(if axis == SweepAxis::Xi { "a positive number" } else { "a non-negative number" }));
                }
                AxisValue::Num(v)
            }
            SweepAxis::Heads => {
                let v: usize = s.parse().map_err(|_| bad("a positive integer"))?;
                if v == 0 {
                    return Err(bad("a positive integer"));
                }
                AxisValue::Count(v)
            }
            SweepAxis::Constraint => AxisValue::Constraint(s.parse().map_err(|_| bad("a constraint mode"))?),
            SweepAxis::Backend => AxisValue::Backend(s.parse().map_err(|_| bad("a back-end"))?),
        };
        Ok(v)
    }

    fn sort_key(&self) -> (f64, usize) {
        match self {
            AxisValue::Num(v) => (*v, 0),
            AxisValue::Count(v) => (*v as f64, 0),
            AxisValue::Constraint(m) => (0.0, ConstraintMode::ALL.iter().position(|x| x == m).unwrap_or(0)),
            AxisValue::Backend(b) => (0.0, BackendKind::ALL.iter().position(|x| x == b).unwrap_or(0)),
        }
    }

    fn apply(&self, axis: SweepAxis, cfg: &mut TrainConfig) {
        match *self {
            AxisValue::Num(x) if axis == SweepAxis::Xi => cfg.llrd.xi = x,
            AxisValue::Num(x) => cfg.reg.lambda = x,
            AxisValue::Count(h) => cfg.backend.heads = h,
            AxisValue::Constraint(m) => cfg.backend.constraint = m,
            AxisValue::Backend(b) => cfg.backend.kind = b,
        }
    }
}

/// `base` with one axis set to `value`.
pub fn apply_axis(base: &TrainConfig, axis: SweepAxis, value: &str) -> Result<TrainConfig> {
    let v = AxisValue::parse(axis, value)?;
    let mut cfg = base.clone();
    v.apply(axis, &mut cfg);
    Ok(cfg)
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: String,
    pub record: Option<RunRecord>,
    pub status: String,
}

/// Parses and sorts `values`, failing before any run if one is invalid.
pub fn sweep_values(axis: SweepAxis, values: &[String]) -> Result<Vec<String>> {
    let mut parsed: Vec<(AxisValue, String)> = values
        .iter()
        .map(|s| Ok((AxisValue::parse(axis, s)?, s.clone())))
        .collect::<Result<_>>()?;
    parsed.sort_by(|a, b| {
        let (x, y) = (a.0.sort_key(), b.0.sort_key());
        x.0.total_cmp(&y.0).then(x.1.cmp(&y.1))
    });
    Ok(parsed.into_iter().map(|(_, s)| s).collect())
}

/// One training run per value with the base seed. A failing run is
/// recorded in its row and the sweep moves on.
pub fn sweep(
    encoder: &EncoderConfig,
    base: &TrainConfig,
    axis: SweepAxis,
    values: &[String],
    data: &Dataset,
    threads: usize,
) -> Result<Vec<SweepRow>> {
    let values = sweep_values(axis, values)?;
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let cfg = apply_axis(base, axis, &value)?;
        let row = match train(encoder, &cfg, data, threads) {
            Ok(out) => SweepRow {
                value,
                record: Some(out.record),
                status: "ok".into(),
            },
            Err(Error::Divergence { epoch, step, .. }) => SweepRow {
                value,
                record: None,
                status: format!("diverged at epoch {epoch} step {step}"),
            },
            Err(e) => SweepRow {
                value,
                record: None,
                status: format!("failed: {e}"),
            },
        };
        rows.push(row);
    }
    Ok(rows)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Comparison table; failed cells are `nan` with the reason in `status`.
pub fn sweep_csv(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let mut out = format!("{axis},eer,dcf1,dcf5,drift_total,status\n");
    for r in rows {
        let cells = match r.record.as_ref() {
            Some(rec) => {
                let (eer, d1, d5) = rec
                    .metrics
                    .as_ref()
                    .map(|m| (m.eer.to_string(), m.dcf1.to_string(), m.dcf5.to_string()))
                    .unwrap_or(("nan".into(), "nan".into(), "nan".into()));
                format!("{eer},{d1},{d5},{}", rec.final_drift_total())
            }
            None => "nan,nan,nan,nan".into(),
        };
        out.push_str(&format!("{},{cells},{}\n", csv_field(&r.value), csv_field(&r.status)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, GenConfig};
    use crate::synth::SynthConfig;

    pub(crate) fn tiny() -> (EncoderConfig, TrainConfig, Dataset) {
        let synth = SynthConfig {
            n_speakers: 6,
            frames_per_utt: 12,
            frame_dim: 6,
            ..SynthConfig::default()
        };
        let gen = GenConfig {
            utts_per_speaker: 4,
            train_speakers: 3,
            n_target: 10,
            n_nontarget: 10,
            trial_seed: 2,
        };
        let data = build_dataset(&synth, &gen).unwrap();
        let enc = EncoderConfig {
            n_layers: 2,
            model_dim: 8,
            n_attn_heads: 2,
            ffn_dim: 8,
            input_dim: 6,
            max_frames: 12,
            seed: 1,
        };
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            segment_frames: 8,
            backend: BackendConfig {
                heads: 2,
                compressed_dim: 4,
                embed_dim: 6,
                ..BackendConfig::default()
            },
            aam: AamConfig {
                n_classes: 3,
                ..AamConfig::default()
            },
            pretrain: PretrainConfig {
                steps: 3,
                batch_size: 2,
                crop_frames: 8,
                ..PretrainConfig::default()
            },
            ..TrainConfig::default()
        };
        (enc, cfg, data)
    }

    #[test]
    fn zero_epochs_leave_the_warm_start_in_place() {
        let (enc, mut cfg, data) = tiny();
        cfg.epochs = 0;
        let out = train(&enc, &cfg, &data, 1).unwrap();
        assert_eq!(out.record.drift.len(), 1);
        assert!(out.record.drift[0].iter().all(|&d| d == 0.0));
        assert!(out.record.epoch_loss.is_empty());
        assert_eq!(out.optim.adam.iteration(), 0);
        for (id, _, t) in out.model.snapshot.entries() {
            assert_eq!(out.model.store.get(id), t);
        }
    }

    #[test]
    fn thread_count_does_not_change_the_result() {
        let (enc, cfg, data) = tiny();
        let mut a = train(&enc, &cfg, &data, 1).unwrap();
        let mut b = train(&enc, &cfg, &data, 3).unwrap();
        a.record.elapsed_secs = 0.0;
        b.record.elapsed_secs = 0.0;
        assert_eq!(a.record, b.record);
        assert_eq!(a.model.hash(), b.model.hash());
    }

    #[test]
    fn drift_rows_have_one_entry_per_layer() {
        let (enc, cfg, data) = tiny();
        let out = train(&enc, &cfg, &data, 2).unwrap();
        assert_eq!(out.record.drift.len(), cfg.epochs + 1);
        assert!(out.record.drift.iter().all(|r| r.len() == enc.n_layers));
        assert!(out.record.final_drift_total() > 0.0);
        let m = out.record.metrics.unwrap();
        for v in [m.eer, m.dcf1, m.dcf5] {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn frozen_encoder_never_drifts() {
        let (enc, mut cfg, data) = tiny();
        cfg.llrd.freeze_encoder = true;
        let out = train(&enc, &cfg, &data, 2).unwrap();
        for row in &out.record.drift {
            assert!(row.iter().all(|&d| d == 0.0));
        }
    }

    #[test]
    fn speaker_count_must_match_classes() {
        let (enc, mut cfg, data) = tiny();
        cfg.aam.n_classes = 4;
        assert!(matches!(train(&enc, &cfg, &data, 1), Err(Error::Config(_))));
    }

    #[test]
    fn lmft_phase_touches_only_margin_and_length() {
        let (_, mut cfg, _) = tiny();
        cfg.lmft.enabled = true;
        let p = cfg.lmft_phase();
        assert_eq!(p.aam.margin, cfg.lmft.margin);
        assert_eq!(p.segment_frames, cfg.lmft.segment_frames);
        let mut back = p.clone();
        back.aam.margin = cfg.aam.margin;
        back.segment_frames = cfg.segment_frames;
        assert_eq!(back, cfg);
    }

    #[test]
    fn lmft_adds_epochs() {
        let (enc, mut cfg, data) = tiny();
        cfg.lmft = LmftConfig {
            enabled: true,
            epochs: 1,
            margin: 0.5,
            segment_frames: 12,
        };
        let out = train(&enc, &cfg, &data, 2).unwrap();
        assert_eq!(out.record.epoch_loss.len(), 3);
        assert_eq!(out.optim.epoch_ticks, 3);
    }

    #[test]
    fn corrupted_parameters_are_reported_as_divergence() {
        let (enc, cfg, data) = tiny();
        let mut model = Model::init(&enc, &cfg.backend, 3, 0).unwrap();
        let id = model.encoder.block(1).wq;
        model.store.get_mut(id).data_mut()[0] = f64::NAN;
        let crops = vec![data.train[0].frames.clone()];
        let r = batch_gradients(&mut model, &crops, &[0], &cfg.aam, 0.0, true, 1);
        match r {
            Ok(s) => assert!(!s.loss.is_finite()),
            Err(e) => assert!(matches!(e, Error::Numeric(_)), "{e}"),
        }
    }

    #[test]
    fn runaway_learning_rate_aborts_with_the_step() {
        let (enc, mut cfg, data) = tiny();
        cfg.llrd.lr_backend = 1e200;
        cfg.llrd.lr_encoder_base = 1e200;
        match train(&enc, &cfg, &data, 1) {
            Err(Error::Divergence { epoch, step, .. }) => assert!(epoch >= 1 && step >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.record)),
        }
    }

    #[test]
    fn non_finite_training_data_is_rejected_up_front() {
        let (enc, cfg, mut data) = tiny();
        data.train[2].frames.data_mut()[0] = f64::NAN;
        assert!(matches!(train(&enc, &cfg, &data, 1), Err(Error::Config(_))));
    }

    #[test]
    fn self_pairs_score_one_and_each_utterance_is_embedded_once() {
        let (enc, cfg, data) = tiny();
        let model = Model::init(&enc, &cfg.backend, 3, 0).unwrap();
        let mut trials: Vec<TrialRef> = (0..data.eval.len())
            .map(|i| TrialRef {
                enroll: i,
                test: i,
                is_target: true,
            })
            .collect();
        trials.push(TrialRef {
            enroll: 0,
            test: 1,
            is_target: false,
        });
        let mut cache = EmbeddingCache::new();
        let (_, set) = evaluate(&model, &data.eval, &trials, &mut cache, 2).unwrap();
        assert_eq!(cache.computed(), data.eval.len());
        for &(s, t) in &set.scores {
            if t {
                assert_eq!(s, 1.0);
            }
        }
        evaluate(&model, &data.eval, &trials, &mut cache, 2).unwrap();
        assert_eq!(cache.computed(), data.eval.len());
    }

    #[test]
    fn sweep_parses_sorts_and_rejects() {
        let v: Vec<String> = ["2.0", "0.6", "1.5"].iter().map(|s| s.to_string()).collect();
        assert_eq!(sweep_values(SweepAxis::Xi, &v).unwrap(), ["0.6", "1.5", "2.0"]);
        let c: Vec<String> = ["shared_both", "none"].iter().map(|s| s.to_string()).collect();
        assert_eq!(sweep_values(SweepAxis::Constraint, &c).unwrap(), ["none", "shared_both"]);
        assert!(matches!(
            sweep_values(SweepAxis::Heads, &["x".to_string()]),
            Err(Error::Usage(_))
        ));
        let e = "bogus".parse::<SweepAxis>().unwrap_err().to_string();
        for a in SweepAxis::ALL {
            assert!(e.contains(a.as_str()));
        }
        let base = TrainConfig::default();
        assert_eq!(apply_axis(&base, SweepAxis::Lambda, "0.01").unwrap().reg.lambda, 0.01);
        assert_eq!(apply_axis(&base, SweepAxis::Xi, "0.8").unwrap().llrd.xi, 0.8);
        assert_eq!(apply_axis(&base, SweepAxis::Heads, "1").unwrap().backend.heads, 1);
    }

    #[test]
    fn empty_sweep_runs_nothing() {
        let (enc, cfg, data) = tiny();
        let rows = sweep(&enc, &cfg, SweepAxis::Xi, &[], &data, 1).unwrap();
        assert!(rows.is_empty());
        assert_eq!(sweep_csv(SweepAxis::Xi, &rows), "xi,eer,dcf1,dcf5,drift_total,status\n");
    }

    #[test]
    fn sweep_marks_failures_and_continues() {
        let (enc, mut cfg, data) = tiny();
        cfg.epochs = 1;
        let rows = sweep(&enc, &cfg, SweepAxis::Heads, &["1".into(), "2".into()], &data, 2).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.status == "ok"));
        let p1 = rows[0].record.as_ref().unwrap().backend_params;
        let p8 = rows[1].record.as_ref().unwrap().backend_params;
        let (d, e) = (cfg.backend.compressed_dim, cfg.backend.embed_dim);
        assert_eq!(p8 - p1, d + d * e);

        let mut bad = cfg.clone();
        bad.segment_frames = 100;
        let rows = sweep(&enc, &bad, SweepAxis::Xi, &["1.0".into()], &data, 1).unwrap();
        assert!(rows[0].status.starts_with("failed"));
        let csv = sweep_csv(SweepAxis::Xi, &rows);
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.lines().nth(1).unwrap().starts_with("1.0,nan,nan,nan,nan,"));
    }
}
