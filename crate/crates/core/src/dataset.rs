//! Speaker-disjoint train/eval corpora and their on-disk layout.
//!
//! A corpus directory holds one tensor file per utterance under `utts/`,
//! `manifest.txt`, `train.txt` and `eval.txt` (lines `path speaker_id`),
//! `trials.txt` (lines `label enroll_path test_path`) and the generating
//! configuration in `synth.toml`. Paths are relative to the directory.

use std::collections::HashMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{make_corpus, split_trials, SynthConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub utts_per_speaker: usize,
    /// The first `train_speakers` speakers train; the rest are held out for
    /// trials.
    pub train_speakers: usize,
    pub n_target: usize,
    pub n_nontarget: usize,
    pub trial_seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            utts_per_speaker: 10,
            train_speakers: 20,
            n_target: 500,
            n_nontarget: 500,
            trial_seed: 1,
        }
    }
}

/// An utterance as the trainer sees it: frames plus a speaker label, keyed
/// by its path relative to the corpus root.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub key: String,
    pub frames: Tensor,
    pub speaker: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialRef {
    pub enroll: usize,
    pub test: usize,
    pub is_target: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
    /// Indices into `eval`.
    pub trials: Vec<TrialRef>,
}

impl Dataset {
    pub fn n_train_speakers(&self) -> usize {
        self.train.iter().map(|s| s.speaker + 1).max().unwrap_or(0)
    }
}

fn utt_key(spk: usize, k: usize) -> String {
    format!("utts/spk{spk:03}_utt{k:03}.bin")
}

/// Generates the corpus in memory. Training labels are the speaker ids of
/// the first `train_speakers` speakers, so they already run `0..n`.
pub fn build_dataset(synth: &SynthConfig, gen: &GenConfig) -> Result<Dataset> {
    if gen.train_speakers == 0 || gen.train_speakers >= synth.n_speakers {
        return Err(Error::Config(format!(
            "gen.train_speakers must lie in 1..{}, got {}",
            synth.n_speakers, gen.train_speakers
        )));
    }
    let corpus = make_corpus(synth, gen.utts_per_speaker)?;
    let mut train = Vec::new();
    let mut eval_utts = Vec::new();
    let mut eval = Vec::new();
    for (i, u) in corpus.into_iter().enumerate() {
        let s = Sample {
            key: utt_key(u.speaker_id, i % gen.utts_per_speaker),
            frames: u.frames.clone(),
            speaker: u.speaker_id,
        };
        if u.speaker_id < gen.train_speakers {
            train.push(s);
        } else {
            eval.push(s);
            eval_utts.push(u);
        }
    }
    let trials = split_trials(&eval_utts, gen.n_target, gen.n_nontarget, gen.trial_seed)?
        .into_iter()
        .map(|t| TrialRef {
            enroll: t.enroll,
            test: t.test,
            is_target: t.is_target,
        })
        .collect();
    Ok(Dataset { train, eval, trials })
}

#[derive(Serialize)]
struct GenRecord<'a> {
    synth: &'a SynthConfig,
    gen: &'a GenConfig,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn list_text(samples: &[Sample]) -> String {
    samples.iter().map(|s| format!("{} {}\n", s.key, s.speaker)).collect()
}

/// Writes `data` under `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, synth: &SynthConfig, gen: &GenConfig, data: &Dataset) -> Result<()> {
    let utts = dir.join("utts");
    fs::create_dir_all(&utts).map_err(|e| Error::io(&utts, e))?;
    for s in data.train.iter().chain(&data.eval) {
        write_tensor(&dir.join(&s.key), &s.frames)?;
    }
    let mut all = data.train.clone();
    all.extend(data.eval.iter().cloned());
    write_file(&dir.join("manifest.txt"), list_text(&all).as_bytes())?;
    write_file(&dir.join("train.txt"), list_text(&data.train).as_bytes())?;
    write_file(&dir.join("eval.txt"), list_text(&data.eval).as_bytes())?;
    let trials: String = data
        .trials
        .iter()
        .map(|t| {
            format!(
                "{} {} {}\n",
                u8::from(t.is_target),
                data.eval[t.enroll].key,
                data.eval[t.test].key
            )
        })
        .collect();
    write_file(&dir.join("trials.txt"), trials.as_bytes())?;
    let record = toml::to_string(&GenRecord { synth, gen }).expect("plain config serialises");
    write_file(&dir.join("synth.toml"), record.as_bytes())
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    t.write_to(&mut w).map_err(|e| Error::io(path, e))?;
    std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = bytes.as_slice();
    let t = Tensor::read_from(&mut r).map_err(|e| Error::io(path, e))?;
    if !r.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            line: 0,
            msg: format!("{} trailing bytes after tensor record", r.len()),
        });
    }
    Ok(t)
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

/// Reads a `path speaker_id` list and the tensors it names.
pub fn read_list(root: &Path, list: &Path) -> Result<Vec<Sample>> {
    read_lines(list)?
        .into_iter()
        .map(|(line, text)| {
            let f: Vec<&str> = text.split_whitespace().collect();
            let bad = |msg: String| Error::Format {
                path: list.to_path_buf(),
                line,
                msg,
            };
            if f.len() != 2 {
                return Err(bad(format!("expected `path speaker_id`, got {} fields", f.len())));
            }
            let speaker = f[1]
                .parse()
                .map_err(|_| bad(format!("speaker id `{}` is not a non-negative integer", f[1])))?;
            Ok(Sample {
                key: f[0].to_string(),
                frames: read_tensor(&root.join(f[0]))?,
                speaker,
            })
        })
        .collect()
}

/// A trial list entry with utterance keys instead of indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialLine {
    pub is_target: bool,
    pub enroll: String,
    pub test: String,
}

pub fn read_trials(path: &Path) -> Result<Vec<TrialLine>> {
    read_lines(path)?
        .into_iter()
        .map(|(line, text)| {
            let bad = |msg: String| Error::Format {
                path: path.to_path_buf(),
                line,
                msg,
            };
            let f: Vec<&str> = text.split_whitespace().collect();
            if f.len() != 3 {
                return Err(bad(format!(
                    "expected `label enroll test`, got {} field{}",
                    f.len(),
                    if f.len() == 1 { "" } else { "s" }
                )));
            }
            let is_target = match f[0] {
                "1" => true,
                "0" => false,
                other => return Err(bad(format!("label `{other}` is not 0 or 1"))),
            };
            Ok(TrialLine {
                is_target,
                enroll: f[1].to_string(),
                test: f[2].to_string(),
            })
        })
        .collect()
}

/// Loads the utterances referenced by `trials`, each once, from paths
/// relative to `root`. Returns the samples and index-based trials.
pub fn resolve_trials(root: &Path, trials: &[TrialLine]) -> Result<(Vec<Sample>, Vec<TrialRef>)> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut samples = Vec::new();
    let mut refs = Vec::with_capacity(trials.len());
    for t in trials {
        let mut ix = [0usize; 2];
        for (slot, key) in ix.iter_mut().zip([&t.enroll, &t.test]) {
            *slot = match index.get(key.as_str()) {
                Some(&i) => i,
                None => {
                    let frames = read_tensor(&root.join(key))?;
                    samples.push(Sample {
                        key: key.clone(),
                        frames,
                        speaker: usize::MAX,
                    });
                    index.insert(key, samples.len() - 1);
                    samples.len() - 1
                }
            };
        }
        refs.push(TrialRef {
            enroll: ix[0],
            test: ix[1],
            is_target: t.is_target,
        });
    }
    Ok((samples, refs))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let train = read_list(dir, &dir.join("train.txt"))?;
    let eval = read_list(dir, &dir.join("eval.txt"))?;
    let index: HashMap<&str, usize> = eval.iter().enumerate().map(|(i, s)| (s.key.as_str(), i)).collect();
    let trials_path = dir.join("trials.txt");
    let trials = read_trials(&trials_path)?
        .into_iter()
        .map(|t| {
            let find = |k: &str| {
                index.get(k).copied().ok_or_else(|| Error::Format {
                    path: trials_path.clone(),
                    line: 0,
                    msg: format!("trial utterance `{k}` is not in eval.txt"),
                })
            };
            Ok(TrialRef {
                enroll: find(&t.enroll)?,
                test: find(&t.test)?,
                is_target: t.is_target,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { train, eval, trials })
}

/// Parent directory used to resolve relative paths inside `file`.
pub fn root_of(file: &Path) -> PathBuf {
    file.parent().map(Path::to_path_buf).unwrap_or_default()
}
