//! Seeded synthetic utterances with separable speaker and phonetic factors.
//!
//! Each frame is `speaker_scale·u(spk) + phone_scale·v(phone_t) + noise_scale·ε_t`
//! with `u`, `v` fixed unit vectors and phones following a sticky Markov
//! chain, so frames carry both a per-utterance constant (the speaker) and a
//! time-varying nuisance (the phone) that attention can cluster on.

use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probability that the phone chain stays on the current phone.
pub const PHONE_SELF_TRANSITION: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub n_phones: usize,
    pub frame_dim: usize,
    pub frames_per_utt: usize,
    pub speaker_scale: f64,
    pub phone_scale: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_speakers: 40,
            n_phones: 8,
            frame_dim: 16,
            frames_per_utt: 48,
            speaker_scale: 1.0,
            phone_scale: 2.0,
            noise_scale: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 {
            return Err(Error::Config("synth.n_speakers must be at least 2".into()));
        }
        if self.n_phones < 1 {
            return Err(Error::Config("synth.n_phones must be at least 1".into()));
        }
        if self.frames_per_utt < 1 {
            return Err(Error::Config("synth.frames_per_utt must be at least 1".into()));
        }
        if self.frame_dim < 1 {
            return Err(Error::Config("synth.frame_dim must be at least 1".into()));
        }
        for (k, v) in [
            ("speaker_scale", self.speaker_scale),
            ("phone_scale", self.phone_scale),
            ("noise_scale", self.noise_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("synth.{k} must be a non-negative number")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub frames: Tensor,
    pub speaker_id: usize,
    /// Ground-truth phone per frame. Never fed to a model.
    pub phone_seq: Vec<usize>,
}

impl Utterance {
    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }
}

fn unit_vector<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Generates `n_utts_per_speaker` utterances for every speaker, ordered by
/// speaker then utterance index.
pub fn make_corpus(cfg: &SynthConfig, n_utts_per_speaker: usize) -> Result<Vec<Utterance>> {
    cfg.validate()?;
    if n_utts_per_speaker == 0 {
        return Err(Error::Config("utterances per speaker must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = cfg.frame_dim;
    let speakers: Vec<Vec<f64>> = (0..cfg.n_speakers).map(|_| unit_vector(dim, &mut rng)).collect();
    let phones: Vec<Vec<f64>> = (0..cfg.n_phones).map(|_| unit_vector(dim, &mut rng)).collect();

    let t_len = cfg.frames_per_utt;
    let mut corpus = Vec::with_capacity(cfg.n_speakers * n_utts_per_speaker);
    for (spk, u) in speakers.iter().enumerate() {
        for _ in 0..n_utts_per_speaker {
            let mut phone_seq = Vec::with_capacity(t_len);
            let mut phone = rng.random_range(0..cfg.n_phones);
            let mut data = Vec::with_capacity(t_len * dim);
            for t in 0..t_len {
                if t > 0 && cfg.n_phones > 1 && !rng.random_bool(PHONE_SELF_TRANSITION) {
                    let other = rng.random_range(0..cfg.n_phones - 1);
                    phone = if other >= phone { other + 1 } else { other };
                }
                phone_seq.push(phone);
                let v = &phones[phone];
                for d in 0..dim {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    data.push(cfg.speaker_scale * u[d] + cfg.phone_scale * v[d] + cfg.noise_scale * eps);
                }
            }
            corpus.push(Utterance {
                frames: Tensor::new(&[t_len, dim], data)?,
                speaker_id: spk,
                phone_seq,
            });
        }
    }
    Ok(corpus)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Trial {
    pub enroll: usize,
    pub test: usize,
    pub is_target: bool,
}

/// Samples target and non-target pairs of distinct utterances.
///
/// Targets are drawn without replacement from all same-speaker pairs.
/// Non-targets are drawn without replacement from all cross-speaker pairs.
/// The returned list is shuffled.
pub fn split_trials(corpus: &[Utterance], n_target: usize, n_nontarget: usize, seed: u64) -> Result<Vec<Trial>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = corpus.len();

    let mut target_pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if corpus[i].speaker_id == corpus[j].speaker_id {
                target_pairs.push((i, j));
            }
        }
    }
    if n_target > target_pairs.len() {
        return Err(Error::Capacity(format!(
            "requested {n_target} target trials but only {} same-speaker pairs exist",
            target_pairs.len()
        )));
    }
    let total_pairs = n * n.saturating_sub(1) / 2;
    let nontarget_capacity = total_pairs - target_pairs.len();
    if n_nontarget > nontarget_capacity {
        return Err(Error::Capacity(format!(
            "requested {n_nontarget} non-target trials but only {nontarget_capacity} cross-speaker pairs exist"
        )));
    }

    let mut trials: Vec<Trial> = index::sample(&mut rng, target_pairs.len(), n_target)
        .into_iter()
        .map(|k| {
            let (a, b) = target_pairs[k];
            Trial {
                enroll: a,
                test: b,
                is_target: true,
            }
        })
        .collect();

    if n_nontarget > 0 {
        let mut picked: Vec<(usize, usize)> = if 2 * n_nontarget <= nontarget_capacity {
            let mut seen = HashSet::with_capacity(n_nontarget);
            let mut out = Vec::with_capacity(n_nontarget);
            while out.len() < n_nontarget {
                let a = rng.random_range(0..n);
                let b = rng.random_range(0..n);
                let (a, b) = (a.min(b), a.max(b));
                if a == b || corpus[a].speaker_id == corpus[b].speaker_id {
                    continue;
                }
                if seen.insert((a, b)) {
                    out.push((a, b));
                }
            }
            out
        } else {
            let mut all = Vec::with_capacity(nontarget_capacity);
            for i in 0..n {
                for j in i + 1..n {
                    if corpus[i].speaker_id != corpus[j].speaker_id {
                        all.push((i, j));
                    }
                }
            }
            index::sample(&mut rng, all.len(), n_nontarget)
                .into_iter()
                .map(|k| all[k])
                .collect()
        };
        trials.extend(picked.drain(..).map(|(a, b)| Trial {
            enroll: a,
            test: b,
            is_target: false,
        }));
    }
    trials.shuffle(&mut rng);
    Ok(trials)
}
