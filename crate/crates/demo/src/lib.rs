//! Browser-facing wrappers around the core crate. Each exported function
//! takes plain numbers and returns a JSON document; failures come back as
//! `{"error": "..."}` so the page never has to catch exceptions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use wasm_bindgen::prelude::wasm_bindgen;

use mhfa_core::encoder::{EncoderConfig, EncoderParams};
use mhfa_core::metrics::{eer, min_dcf, operating_points, DcfConfig, TrialScoreSet};
use mhfa_core::optim::{build_groups, epoch_tick, GroupKind, LlrdConfig};
use mhfa_core::params::ParamStore;
use mhfa_core::pooling::{layer_weight_report, Backend, BackendConfig, BackendKind};
use mhfa_core::synth::{make_corpus, SynthConfig};
use mhfa_core::{Error, Result};

const MAX_LAYERS: usize = 48;
const MAX_HEADS: usize = 64;
const MAX_TRIALS: usize = 20_000;

fn to_json<T: Serialize>(r: Result<T>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).expect("serialisable"),
        Err(e) => serde_json::json!({ "error": e.to_string() }).to_string(),
    }
}

#[derive(Debug, Serialize)]
pub struct RateTable {
    /// `rates[k][l]`: rate of encoder layer `l + 1` after `k` epochs.
    pub rates: Vec<Vec<f64>>,
    pub backend: Vec<f64>,
}

pub fn rate_table(lr1: f64, xi: f64, layers: usize, epochs: u32, decay: f64) -> Result<RateTable> {
    if layers == 0 || layers > MAX_LAYERS {
        return Err(Error::Config(format!("layers must lie in 1..={MAX_LAYERS}")));
    }
    let cfg = LlrdConfig {
        lr_encoder_base: lr1,
        xi,
        epoch_decay: decay,
        ..LlrdConfig::default()
    };
    cfg.validate()?;
    let enc_cfg = EncoderConfig {
        n_layers: layers,
        model_dim: 1,
        n_attn_heads: 1,
        ffn_dim: 1,
        input_dim: 1,
        max_frames: 1,
        seed: 0,
    };
    let mut store = ParamStore::new();
    let enc = EncoderParams::init(&enc_cfg, &mut store)?;
    let head = store.add("head", mhfa_core::Tensor::zeros(&[1]), true)?;
    let mut groups = build_groups(&enc, &[head], &cfg);
    let mut table = RateTable {
        rates: Vec::new(),
        backend: Vec::new(),
    };
    for _ in 0..=epochs {
        let mut row = vec![0.0; layers];
        for g in &groups {
            match g.kind {
                GroupKind::EncoderLayer(l) => row[l - 1] = g.lr(),
                GroupKind::Backend => table.backend.push(g.lr()),
            }
        }
        table.rates.push(row);
        epoch_tick(&mut groups);
    }
    Ok(table)
}

/// Per-layer learning rates over epochs.
#[wasm_bindgen]
pub fn llrd_rates(lr1: f64, xi: f64, layers: usize, epochs: u32, decay: f64) -> String {
    to_json(rate_table(lr1, xi, layers, epochs, decay))
}

#[derive(Debug, Serialize)]
pub struct AttentionView {
    pub frames: usize,
    pub heads: usize,
    /// `attention[t][h]`; every head's column sums to 1.
    pub attention: Vec<Vec<f64>>,
    /// Ground-truth phone of each frame.
    pub phones: Vec<usize>,
    pub key_weights: Vec<f64>,
    pub value_weights: Vec<f64>,
}

pub fn attention_view(seed: u64, heads: usize, phone_scale: f64, sharpness: f64) -> Result<AttentionView> {
    if heads == 0 || heads > MAX_HEADS {
        return Err(Error::Config(format!("heads must lie in 1..={MAX_HEADS}")));
    }
    if !(sharpness > 0.0 && sharpness.is_finite()) {
        return Err(Error::Config("sharpness must be positive".into()));
    }
    let synth = SynthConfig {
        n_speakers: 2,
        phone_scale,
        seed,
        ..SynthConfig::default()
    };
    let utt = make_corpus(&synth, 1)?.swap_remove(0);
    let enc_cfg = EncoderConfig {
        seed,
        ..EncoderConfig::default()
    };
    let mut store = ParamStore::new();
    let enc = EncoderParams::init(&enc_cfg, &mut store)?;
    let cfg = BackendConfig {
        kind: BackendKind::Mhfa,
        heads,
        ..BackendConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backend = Backend::init(&mut store, enc_cfg.n_layers + 1, enc_cfg.model_dim, &cfg, &mut rng)?;
    let Backend::Mhfa(p) = &backend else {
        unreachable!("configured as mhfa")
    };
    for v in store.get_mut(p.q).data_mut() {
        *v *= sharpness;
    }
    let stack = enc.encode(&store, &utt.frames)?;
    let a = p.attention(&store, &stack)?;
    let w = layer_weight_report(&store, &backend)?;
    Ok(AttentionView {
        frames: a.rows(),
        heads: a.cols(),
        attention: (0..a.rows()).map(|t| a.row(t).to_vec()).collect(),
        phones: utt.phone_seq,
        key_weights: w.key.unwrap_or_default(),
        value_weights: w.value,
    })
}

/// MHFA attention over the frames of one synthetic utterance.
#[wasm_bindgen]
pub fn attention_map(seed: u64, heads: usize, phone_scale: f64, sharpness: f64) -> String {
    to_json(attention_view(seed, heads, phone_scale, sharpness))
}

#[derive(Debug, Serialize)]
pub struct Tradeoff {
    pub eer: f64,
    pub eer_threshold: f64,
    pub dcf1: f64,
    pub dcf5: f64,
    /// Error rates when accepting scores at or above the chosen threshold.
    pub p_fa: f64,
    pub p_fr: f64,
    /// `(p_fa, p_fr)` at every operating point.
    pub curve: Vec<(f64, f64)>,
}

pub fn score_tradeoff(separation: f64, n_target: usize, n_nontarget: usize, seed: u64, threshold: f64) -> Result<Tradeoff> {
    if n_target == 0 || n_nontarget == 0 || n_target + n_nontarget > MAX_TRIALS {
        return Err(Error::Config(format!(
            "need at least one trial of each kind and at most {MAX_TRIALS} in total"
        )));
    }
    if !separation.is_finite() {
        return Err(Error::Config("separation must be finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tar = Normal::new(separation, 1.0).expect("unit spread");
    let non = Normal::new(0.0, 1.0).expect("unit spread");
    let mut scores: Vec<(f64, bool)> = (0..n_target).map(|_| (tar.sample(&mut rng), true)).collect();
    scores.extend((0..n_nontarget).map(|_| (non.sample(&mut rng), false)));
    let set = TrialScoreSet::new(scores);
    let e = eer(&set)?;
    let fa = set.scores.iter().filter(|s| !s.1 && s.0 >= threshold).count();
    let fr = set.scores.iter().filter(|s| s.1 && s.0 < threshold).count();
    Ok(Tradeoff {
        eer: e.rate,
        eer_threshold: e.threshold,
        dcf1: min_dcf(&set, &DcfConfig::new(0.01))?,
        dcf5: min_dcf(&set, &DcfConfig::new(0.05))?,
        p_fa: fa as f64 / n_nontarget as f64,
        p_fr: fr as f64 / n_target as f64,
        curve: operating_points(&set)?
            .iter()
            .map(|o| {
                (
                    o.false_accepts as f64 / n_nontarget as f64,
                    o.false_rejects as f64 / n_target as f64,
                )
            })
            .collect(),
    })
}

/// EER, minDCF and the error trade-off for Gaussian target and non-target
/// scores `separation` standard deviations apart.
#[wasm_bindgen]
pub fn score_curve(separation: f64, n_target: usize, n_nontarget: usize, seed: u64, threshold: f64) -> String {
    to_json(score_tradeoff(separation, n_target, n_nontarget, seed, threshold))
}
