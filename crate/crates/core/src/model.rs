//! Encoder, back-end and classifier head bound to one parameter store, and
//! their checkpoint container.
//!
//! A checkpoint is a directory with `manifest.toml` (configuration, optimizer
//! counters, group rates) and `tensors.bin`: a sequence of records
//! `name_len: u64 LE, name bytes, tensor`. Besides the model tensors it holds
//! the pre-trained snapshot under `pretrained.*` and Adam moments under
//! `optim.m.*` / `optim.v.*`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderConfig, EncoderParams, PretrainedSnapshot};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::optim::{Adam, Moments, ParamGroup};
use crate::params::{ParamId, ParamStore};
use crate::pooling::{Backend, BackendConfig};
use crate::tensor::{read_u64, Tensor};

pub const CLASS_WEIGHTS: &str = "head.class_weights";
const FORMAT: u32 = 1;

#[derive(Debug, Clone)]
pub struct Model {
    pub encoder_cfg: EncoderConfig,
    pub backend_cfg: BackendConfig,
    pub n_classes: usize,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub backend: Backend,
    pub class_weights: ParamId,
    pub snapshot: PretrainedSnapshot,
}

impl Model {
    /// Fresh encoder (seeded by its own config) plus a back-end and
    /// classifier head seeded by `seed`. The snapshot is the encoder's
    /// initial state until replaced by pre-training.
    pub fn init(encoder_cfg: &EncoderConfig, backend_cfg: &BackendConfig, n_classes: usize, seed: u64) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        let mut store = ParamStore::new();
        let encoder = EncoderParams::init(encoder_cfg, &mut store)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backend = Backend::init(
            &mut store,
            encoder_cfg.n_layers + 1,
            encoder_cfg.model_dim,
            backend_cfg,
            &mut rng,
        )?;
        let class_weights = store.add(
            CLASS_WEIGHTS,
            Tensor::randn(&[backend_cfg.embed_dim, n_classes], 1.0, &mut rng),
            true,
        )?;
        let snapshot = PretrainedSnapshot::capture(&store, &encoder);
        Ok(Self {
            encoder_cfg: encoder_cfg.clone(),
            backend_cfg: backend_cfg.clone(),
            n_classes,
            store,
            encoder,
            backend,
            class_weights,
            snapshot,
        })
    }

    /// Unit-norm embedding `[E]` of one utterance.
    pub fn embed(&self, frames: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let layers = self.encoder.encode_graph(&mut g, &self.store, frames)?;
        let e = self.backend.forward_graph(&mut g, &self.store, &layers)?;
        let t = g.value(e);
        Tensor::new(&[t.len()], t.data().to_vec())
    }

    /// Back-end and classifier tensors, in a fixed order.
    pub fn backend_ids(&self) -> Vec<ParamId> {
        let mut ids = self.backend.ids();
        ids.push(self.class_weights);
        ids
    }

    /// Hex SHA-256 over every tensor name and value.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (_, p) in self.store.iter() {
            h.update((p.name.len() as u64).to_le_bytes());
            h.update(p.name.as_bytes());
            h.update(p.tensor.to_bytes());
        }
        hex(&h.finalize())
    }

    pub fn save(&self, dir: &Path, optim: &OptimState) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            format: FORMAT,
            n_classes: self.n_classes,
            optimizer_iteration: optim.adam.iteration(),
            epoch_ticks: optim.epoch_ticks,
            groups: optim
                .groups
                .iter()
                .map(|g| GroupRecord {
                    group: format!("{:?}", g.kind),
                    lr: g.lr(),
                })
                .collect(),
            encoder: self.encoder_cfg.clone(),
            backend: self.backend_cfg.clone(),
        };
        let text = toml::to_string(&manifest).expect("manifest serialises");
        let mpath = dir.join("manifest.toml");
        fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;

        let tpath = dir.join("tensors.bin");
        let f = fs::File::create(&tpath).map_err(|e| Error::io(&tpath, e))?;
        let mut w = BufWriter::new(f);
        let mut put = |name: &str, t: &Tensor| -> std::io::Result<()> {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            t.write_to(&mut w)
        };
        let io = |e| Error::io(&tpath, e);
        for (_, p) in self.store.iter() {
            put(&p.name, &p.tensor.detached()).map_err(io)?;
        }
        for (_, name, t) in self.snapshot.entries() {
            put(&format!("pretrained.{name}"), t).map_err(io)?;
        }
        for (id, p) in self.store.iter() {
            if let Some(m) = optim.adam.moments(id.index()) {
                let shape = p.tensor.shape();
                put(&format!("optim.m.{}", p.name), &Tensor::new(shape, m.m.clone())?).map_err(io)?;
                put(&format!("optim.v.{}", p.name), &Tensor::new(shape, m.v.clone())?).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(dir: &Path) -> Result<(Self, OptimState)> {
        let mpath = dir.join("manifest.toml");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", mpath.display())))?;
        if manifest.format != FORMAT {
            return Err(Error::Config(format!("unsupported checkpoint format {}", manifest.format)));
        }

        let tpath = dir.join("tensors.bin");
        let bytes = fs::read(&tpath).map_err(|e| Error::io(&tpath, e))?;
        let mut r = bytes.as_slice();
        let mut named: Vec<(String, Tensor)> = Vec::new();
        let io = |e| Error::io(&tpath, e);
        while !r.is_empty() {
            let n = read_u64(&mut r).map_err(io)? as usize;
            if n > r.len() {
                return Err(Error::Format {
                    path: tpath.clone(),
                    line: 0,
                    msg: format!("name length {n} overruns file"),
                });
            }
            let mut name = vec![0u8; n];
            r.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format {
                path: tpath.clone(),
                line: 0,
                msg: "tensor name is not UTF-8".into(),
            })?;
            named.push((name, Tensor::read_from(&mut r).map_err(io)?));
        }

        let mut model = Model::init(&manifest.encoder, &manifest.backend, manifest.n_classes, 0)?;
        let mut pretrained = Vec::new();
        let mut moments: BTreeMap<String, (Option<Vec<f64>>, Option<Vec<f64>>)> = BTreeMap::new();
        let mut seen = 0;
        for (name, t) in named {
            if let Some(rest) = name.strip_prefix("pretrained.") {
                pretrained.push((rest.to_string(), t));
            } else if let Some(rest) = name.strip_prefix("optim.m.") {
                moments.entry(rest.to_string()).or_default().0 = Some(t.into_data());
            } else if let Some(rest) = name.strip_prefix("optim.v.") {
                moments.entry(rest.to_string()).or_default().1 = Some(t.into_data());
            } else {
                let id = model
                    .store
                    .id(&name)
                    .ok_or_else(|| Error::Config(format!("checkpoint tensor `{name}` matches no parameter")))?;
                if model.store.get(id).shape() != t.shape() {
                    return Err(Error::Config(format!(
                        "checkpoint tensor `{name}` has shape {:?}, expected {:?}",
                        t.shape(),
                        model.store.get(id).shape()
                    )));
                }
                *model.store.get_mut(id) = t;
                seen += 1;
            }
        }
        if seen != model.store.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {seen} of {} parameters",
                model.store.len()
            )));
        }
        model.snapshot = PretrainedSnapshot::from_named(&model.store, &model.encoder, pretrained)?;

        let mut state = BTreeMap::new();
        for (name, mv) in moments {
            let id = model
                .store
                .id(&name)
                .ok_or_else(|| Error::Config(format!("optimizer state for unknown parameter `{name}`")))?;
            match mv {
                (Some(m), Some(v)) => {
                    state.insert(id.index(), Moments { m, v });
                }
                _ => return Err(Error::Config(format!("incomplete optimizer state for `{name}`"))),
            }
        }
        let mut adam = Adam::new();
        adam.restore(manifest.optimizer_iteration, state);
        Ok((
            model,
            OptimState {
                adam,
                epoch_ticks: manifest.epoch_ticks,
                groups: Vec::new(),
            },
        ))
    }
}

/// Optimizer progress stored alongside a checkpoint.
#[derive(Debug, Clone, Default)]
pub struct OptimState {
    pub adam: Adam,
    pub epoch_ticks: u32,
    pub groups: Vec<ParamGroup>,
}

impl OptimState {
    /// Applies the stored tick count to freshly built groups.
    pub fn resume(&self, groups: &mut [ParamGroup]) {
        for g in groups {
            g.set_ticks(self.epoch_ticks);
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupRecord {
    group: String,
    lr: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: u32,
    n_classes: usize,
    optimizer_iteration: u64,
    epoch_ticks: u32,
    groups: Vec<GroupRecord>,
    encoder: EncoderConfig,
    backend: BackendConfig,
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
