//! Acceptance suite. Runs every criterion in order, prints one line per
//! criterion and exits non-zero if any fails.
//!
//! Run with `cargo test --release -p mhfa-core --test acceptance`.

use std::collections::HashMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use mhfa_core::dataset::{build_dataset, Dataset, GenConfig};
use mhfa_core::encoder::{EncoderConfig, EncoderParams};
use mhfa_core::graph::Graph;
use mhfa_core::metrics::{eer, min_dcf, DcfConfig, TrialScoreSet};
use mhfa_core::objective::{aam_loss, AamConfig};
use mhfa_core::optim::{build_groups, epoch_tick, Adam, GroupKind, LlrdConfig};
use mhfa_core::params::ParamStore;
use mhfa_core::pooling::{
    mhfa_forward, wavg_forward, Backend, BackendConfig, BackendKind, ConstraintMode, LayerStack,
};
use mhfa_core::synth::SynthConfig;
use mhfa_core::tensor::Tensor;
use mhfa_core::trainer::{train, RunRecord, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const SEEDS: u64 = 5;

fn mhfa() -> &'static str {
    env!("CARGO_BIN_EXE_mhfa")
}

fn cli(args: &[&str]) -> (i32, String, String) {
    let o = Command::new(mhfa()).args(args).output().expect("binary runs");
    (
        o.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&o.stdout).into_owned(),
        String::from_utf8_lossy(&o.stderr).into_owned(),
    )
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, t: Instant) -> Result<(), String> {
    ensure(t.elapsed() < limit, || {
        format!("took {:.1}s, limit {:.0}s", t.elapsed().as_secs_f64(), limit.as_secs_f64())
    })
}

/// Runs on the standard benchmark, memoised by configuration and seed.
struct Bench {
    runs: HashMap<(String, u64), RunRecord>,
}

impl Bench {
    fn data(seed: u64) -> Dataset {
        let synth = SynthConfig {
            seed,
            ..SynthConfig::default()
        };
        build_dataset(&synth, &GenConfig::default()).expect("benchmark builds")
    }

    fn run(&mut self, seed: u64, tweak: impl Fn(&mut TrainConfig)) -> Result<RunRecord, String> {
        let enc = EncoderConfig {
            seed,
            ..EncoderConfig::default()
        };
        let mut cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        cfg.pretrain.seed = seed;
        tweak(&mut cfg);
        let key = (format!("{cfg:?}"), seed);
        if let Some(r) = self.runs.get(&key) {
            return Ok(r.clone());
        }
        let out = train(&enc, &cfg, &Self::data(seed), 1).map_err(|e| format!("seed {seed}: {e}"))?;
        self.runs.insert(key, out.record.clone());
        Ok(out.record)
    }

    fn mean_eer(&mut self, tweak: impl Fn(&mut TrainConfig)) -> Result<(f64, Vec<f64>), String> {
        let mut all = Vec::new();
        for s in 0..SEEDS {
            let r = self.run(s, &tweak)?;
            all.push(r.metrics.ok_or("run without metrics")?.eer);
        }
        Ok((all.iter().sum::<f64>() / all.len() as f64, all))
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let (code, out, err) = cli(&["gradcheck"]);
    within(Duration::from_secs(120), t)?;
    ensure(code == 0, || format!("exit {code}: {out}{err}"))?;
    let mut worst = 0.0f64;
    let mut names = Vec::new();
    for line in out.lines() {
        let f: Vec<&str> = line.split_whitespace().collect();
        let e: f64 = f[2].parse().map_err(|_| format!("bad line `{line}`"))?;
        ensure(e < 1e-4, || format!("{} at {e}", f[0]))?;
        worst = worst.max(e);
        names.push(f[0].to_string());
    }
    ensure(names == ["tensor-core", "topattn", "wavg", "mhfa", "aam", "reg"], || {
        format!("components {names:?}")
    })?;
    Ok(format!("max rel err {worst:.2e} over {} components", names.len()))
}

fn llrd_schedule() -> Outcome {
    let enc_cfg = EncoderConfig {
        n_layers: 12,
        model_dim: 4,
        n_attn_heads: 1,
        ffn_dim: 4,
        input_dim: 2,
        max_frames: 2,
        seed: 0,
    };
    let mut store = ParamStore::new();
    let enc = EncoderParams::init(&enc_cfg, &mut store).unwrap();
    let lr1 = 2e-5;
    for xi in [0.6, 0.8, 1.0, 1.5, 1.8, 2.0] {
        let cfg = LlrdConfig {
            lr_encoder_base: lr1,
            xi,
            ..LlrdConfig::default()
        };
        let mut groups = build_groups(&enc, &[], &cfg);
        for k in 0..=10 {
            for g in &groups {
                if let GroupKind::EncoderLayer(l) = g.kind {
                    let expect = lr1 * xi.powi(l as i32 - 1) * 0.95f64.powi(k);
                    ensure(g.lr().to_bits() == expect.to_bits(), || {
                        format!("xi {xi} layer {l} tick {k}: {} vs {expect}", g.lr())
                    })?;
                }
            }
            epoch_tick(&mut groups);
        }
        let layers = groups.iter().filter(|g| matches!(g.kind, GroupKind::EncoderLayer(_))).count();
        ensure(layers == 12, || format!("{layers} encoder groups"))?;
    }
    Ok("6 ratios x 12 layers x 11 epochs bit-exact".into())
}

// Exact EER oracle: every pair of operating points straddling the diagonal
// is interpolated and the lowest crossing kept.
fn oracle(set: &[(f64, bool)], p_tar: f64) -> (f64, f64) {
    let nt = set.iter().filter(|s| s.1).count();
    let nn = set.len() - nt;
    let mut th: Vec<f64> = set.iter().map(|s| s.0).collect();
    th.sort_by(f64::total_cmp);
    th.dedup();
    th.push(f64::INFINITY);
    let pts: Vec<(usize, usize)> = th
        .iter()
        .map(|&t| {
            let fa = set.iter().filter(|s| !s.1 && s.0 >= t).count();
            let fr = set.iter().filter(|s| s.1 && s.0 < t).count();
            (fa, fr)
        })
        .collect();
    let (ntf, nnf) = (nt as i128, nn as i128);
    let mut best: Option<(i128, i128)> = None;
    for &(fa0, fr0) in &pts {
        for &(fa1, fr1) in &pts {
            let (x0, y0) = (fa0 as i128 * ntf, fr0 as i128 * nnf);
            let (x1, y1) = (fa1 as i128 * ntf, fr1 as i128 * nnf);
            if x0 < y0 || x1 > y1 {
                continue;
            }
            let d = (x0 - y0) - (x1 - y1);
            let (num, den) = if d == 0 { (x0, ntf * nnf) } else { (x0 * y1 - x1 * y0, ntf * nnf * d) };
            if best.is_none_or(|(bn, bd)| num * bd < bn * den) {
                best = Some((num, den));
            }
        }
    }
    let (n, d) = best.unwrap();
    let e = n as f64 / d as f64;
    let dcf = pts
        .iter()
        .map(|&(fa, fr)| {
            let pfr = fr as f64 / nt as f64;
            let pfa = fa as f64 / nn as f64;
            (p_tar * pfr + (1.0 - p_tar) * pfa) / p_tar.min(1.0 - p_tar)
        })
        .fold(f64::INFINITY, f64::min);
    (e, dcf)
}

fn metric_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..100 {
        let n = if case == 0 { 2 } else { rng.random_range(2..=1000) };
        let levels = rng.random_range(2..400);
        let shift = rng.random_range(0.0..3.0);
        let mut scores: Vec<(f64, bool)> = (0..n)
            .map(|_| {
                let tar = rng.random_bool(0.5);
                let s = rng.random_range(0..levels) as f64 / levels as f64 + if tar { shift / 4.0 } else { 0.0 };
                (s, tar)
            })
            .collect();
        scores[0].1 = true;
        scores[1].1 = false;
        let set = TrialScoreSet::new(scores.clone());
        for p in [0.01, 0.05] {
            let (e, d) = oracle(&scores, p);
            let got_e = eer(&set).map_err(|e| e.to_string())?.rate;
            let got_d = min_dcf(&set, &DcfConfig::new(p)).map_err(|e| e.to_string())?;
            ensure(got_e.to_bits() == e.to_bits(), || format!("case {case}: eer {got_e} vs {e}"))?;
            ensure(got_d.to_bits() == d.to_bits(), || format!("case {case} p {p}: dcf {got_d} vs {d}"))?;
        }
    }
    within(Duration::from_secs(60), t)?;
    Ok("100 random sets, eer and minDCF(0.01, 0.05) bit-identical to enumeration".into())
}

fn regulariser_monotone(bench: &mut Bench) -> Outcome {
    let t = Instant::now();
    let mut report = Vec::new();
    for seed in 0..3 {
        let mut drift = Vec::new();
        for lambda in [0.0, 1e-4, 1e-2] {
            drift.push(bench.run(seed, |c| c.reg.lambda = lambda)?.final_drift_total());
        }
        ensure(drift[0] > drift[1] && drift[1] > drift[2], || format!("seed {seed}: drift {drift:?}"))?;
        report.push(format!("{:.5e}>{:.5e}>{:.5e}", drift[0], drift[1], drift[2]));
    }
    within(Duration::from_secs(600), t)?;
    Ok(format!("drift by lambda per seed: {}", report.join(", ")))
}

fn ablation_order(bench: &mut Bench) -> Outcome {
    let t = Instant::now();
    let (m, ms) = bench.mean_eer(|c| c.backend.heads = 8)?;
    let (w, ws) = bench.mean_eer(|c| c.backend.kind = BackendKind::Wavg)?;
    within(Duration::from_secs(1800), t)?;
    let msg = format!("mean EER mhfa {m:.4} [{}] vs wavg {w:.4} [{}]", fmt_list(&ms), fmt_list(&ws));
    ensure(m <= w, || msg.clone())?;
    Ok(msg)
}

fn finetune_order(bench: &mut Bench) -> Outcome {
    let t = Instant::now();
    let (j, js) = bench.mean_eer(|c| c.llrd.xi = 1.5)?;
    let (f, fs) = bench.mean_eer(|c| c.llrd.freeze_encoder = true)?;
    within(Duration::from_secs(1800), t)?;
    let msg = format!("mean EER joint {j:.4} [{}] vs frozen {f:.4} [{}]", fmt_list(&js), fmt_list(&fs));
    ensure(j < f, || msg.clone())?;
    Ok(msg)
}

fn divergence(dir: &Path) -> Outcome {
    let data = dir.join("data");
    let data_s = data.to_str().unwrap();
    let cfg = dir.join("nan.toml");
    std::fs::write(&cfg, "[train.llrd]\nlr_encoder_base = 1e-3\nxi = 1.0\n").unwrap();
    let out = dir.join("nan");
    let (code, stdout, err) = cli(&["train", "--config", cfg.to_str().unwrap(), "--data", data_s, "--out", out.to_str().unwrap()]);
    let verdict = match code {
        5 => {
            ensure(err.contains("diverged") && err.contains("step"), || format!("diagnostic `{err}`"))?;
            "reference configuration diverged with exit 5".to_string()
        }
        0 => {
            let rec = std::fs::read_to_string(out.join("run.json")).unwrap();
            let rec: serde_json::Value = serde_json::from_str(&rec).unwrap();
            let finite = rec["epoch_loss"].as_array().unwrap().iter().all(|v| v.as_f64().is_some_and(f64::is_finite));
            ensure(finite && !stdout.contains("NaN"), || "non-finite loss recorded without aborting".into())?;
            "reference configuration converged at this scale (flagged deviation)".to_string()
        }
        c => return Err(format!("unexpected exit {c}: {err}")),
    };
    let forced = dir.join("forced.toml");
    std::fs::write(&forced, "[train.llrd]\nlr_backend = 1e200\nlr_encoder_base = 1e200\n").unwrap();
    let (code, _, err) = cli(&["train", "--config", forced.to_str().unwrap(), "--data", data_s, "--out", dir.join("forced").to_str().unwrap()]);
    ensure(code == 5, || format!("forced run exit {code}: {err}"))?;
    ensure(err.contains("epoch 1") && err.contains("step"), || format!("diagnostic `{err}`"))?;
    ensure(!dir.join("forced").join("run.json").exists(), || "diverged run wrote a record".into())?;
    Ok(format!("{verdict}; forced blow-up detected: {}", err.trim()))
}

fn determinism(dir: &Path) -> Outcome {
    let data = dir.join("data");
    let mut outs = Vec::new();
    for k in 0..2 {
        let out = dir.join(format!("det{k}"));
        let (code, _, err) = cli(&["train", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--threads", "1", "--seed", "3"]);
        ensure(code == 0, || format!("exit {code}: {err}"))?;
        outs.push(out);
    }
    for f in ["checkpoint/manifest.toml", "checkpoint/tensors.bin", "run.json", "drift.csv", "metrics.json"] {
        let a = std::fs::read(outs[0].join(f)).unwrap();
        let b = std::fs::read(outs[1].join(f)).unwrap();
        ensure(a == b, || format!("{f} differs"))?;
    }
    Ok("checkpoint, run record, drift and metrics byte-identical".into())
}

fn structural() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut checked = 0;
    for (depth, f, d, h, e) in [(4, 8, 4, 2, 6), (5, 32, 16, 8, 32), (13, 16, 8, 1, 4), (13, 16, 8, 128, 4)] {
        let count = |mode: ConstraintMode, rng: &mut ChaCha8Rng| {
            let mut store = ParamStore::new();
            let cfg = BackendConfig {
                kind: BackendKind::Mhfa,
                constraint: mode,
                heads: h,
                compressed_dim: d,
                embed_dim: e,
            };
            let b = Backend::init(&mut store, depth, f, &cfg, rng).unwrap();
            let by_ids = store.count(b.ids());
            let by_store: usize = store.iter().map(|(_, p)| p.tensor.len()).sum();
            (by_ids, by_store)
        };
        let formula = 2 * depth + 2 * f * d + d * h + h * d * e;
        let (none, none_store) = count(ConstraintMode::None, &mut rng);
        let (sw, sw_store) = count(ConstraintMode::SharedWeights, &mut rng);
        let (sl, sl_store) = count(ConstraintMode::SharedLinear, &mut rng);
        ensure(none == formula && none_store == formula, || format!("none: {none}/{none_store} vs {formula}"))?;
        ensure(sw == formula - depth && sw_store == sw, || format!("shared_weights: {sw}/{sw_store}"))?;
        ensure(sl == formula - f * d && sl_store == sl, || format!("shared_linear: {sl}/{sl_store}"))?;
        checked += 1;
    }
    Ok(format!("{checked} dimension sets, registry and formula agree"))
}

fn invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (depth, t, f) = (4, 9, 8);
    let mut worst_perm = 0.0f64;
    let mut worst_norm = 0.0f64;
    let mut worst_att = 0.0f64;
    for trial in 0..20 {
        let stack = LayerStack::new((0..depth).map(|_| Tensor::randn(&[t, f], 1.0, &mut rng)).collect()).unwrap();
        let mut perm: Vec<usize> = (0..t).collect();
        perm.shuffle(&mut rng);
        let shuffled = stack.permute_frames(&perm).unwrap();
        for kind in BackendKind::ALL {
            let cfg = BackendConfig {
                kind,
                constraint: ConstraintMode::ALL[trial % 4],
                heads: 3,
                compressed_dim: 5,
                embed_dim: 6,
            };
            let mut store = ParamStore::new();
            let b = Backend::init(&mut store, depth, f, &cfg, &mut rng).unwrap();
            for id in b.ids() {
                let shape = store.get(id).shape().to_vec();
                *store.get_mut(id) = Tensor::randn(&shape, 1.0, &mut rng);
            }
            let e = b.embed(&store, &stack).unwrap();
            worst_norm = worst_norm.max((e.norm() - 1.0).abs());
            let e2 = match &b {
                Backend::Mhfa(p) => {
                    let a = p.attention(&store, &stack).unwrap();
                    for c in 0..a.cols() {
                        let s: f64 = (0..a.rows()).map(|r| a.at(r, c)).sum();
                        worst_att = worst_att.max((s - 1.0).abs());
                    }
                    Some((mhfa_forward(&store, p, &stack).unwrap(), mhfa_forward(&store, p, &shuffled).unwrap()))
                }
                Backend::Wavg(p) => Some((wavg_forward(&store, p, &stack).unwrap(), wavg_forward(&store, p, &shuffled).unwrap())),
                Backend::TopAttn(_) => None,
            };
            if let Some((a, b)) = e2 {
                for (x, y) in a.data().iter().zip(b.data()) {
                    worst_perm = worst_perm.max((x - y).abs());
                }
            }
        }
    }
    ensure(worst_perm <= 1e-12, || format!("permutation deviation {worst_perm:e}"))?;
    ensure(worst_norm <= 1e-9, || format!("norm deviation {worst_norm:e}"))?;
    ensure(worst_att <= 1e-12, || format!("attention column deviation {worst_att:e}"))?;

    // Frozen front-end: no gradient after a full loss backward, unchanged
    // after an optimizer step.
    let enc_cfg = EncoderConfig {
        n_layers: 3,
        model_dim: 8,
        n_attn_heads: 2,
        ffn_dim: 8,
        input_dim: 6,
        max_frames: 10,
        seed: 2,
    };
    let mut store = ParamStore::new();
    let enc = EncoderParams::init(&enc_cfg, &mut store).unwrap();
    let bcfg = BackendConfig {
        heads: 2,
        compressed_dim: 4,
        embed_dim: 6,
        ..BackendConfig::default()
    };
    let b = Backend::init(&mut store, 4, 8, &bcfg, &mut rng).unwrap();
    let w = store.add("w", Tensor::randn(&[6, 3], 1.0, &mut rng), true).unwrap();
    let frontend_before = store.get(enc.frontend_id()).clone();
    let mut g = Graph::new();
    let mut rows = Vec::new();
    for _ in 0..3 {
        let x = Tensor::randn(&[7, 6], 1.0, &mut rng);
        let layers = enc.encode_graph(&mut g, &store, &x).unwrap();
        rows.push(b.forward_graph(&mut g, &store, &layers).unwrap());
    }
    let emb = g.concat_rows(&rows).unwrap();
    let wv = g.param(&store, w);
    let aam = AamConfig {
        n_classes: 3,
        ..AamConfig::default()
    };
    let loss = aam_loss(&mut g, &aam, emb, wv, &[0, 1, 2]).unwrap();
    let grads = g.backward(loss).unwrap();
    g.accumulate_param_grads(&grads, &mut store);
    let fg = store.get(enc.frontend_id()).grad().map(|g| g.iter().map(|v| v.abs()).sum::<f64>()).unwrap_or(0.0);
    ensure(fg == 0.0, || format!("front-end gradient mass {fg}"))?;
    let mut ids = b.ids();
    ids.push(w);
    let groups = build_groups(&enc, &ids, &LlrdConfig::default());
    Adam::new().step(&mut store, &groups).map_err(|e| e.to_string())?;
    ensure(store.get(enc.frontend_id()).data() == frontend_before.data(), || "front-end moved".into())?;
    Ok(format!(
        "permutation {worst_perm:.1e}, norm {worst_norm:.1e}, attention {worst_att:.1e}, front-end gradient 0"
    ))
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let (code, _, err) = cli(&["gen", "--out", dir.path().join("data").to_str().unwrap()]);
    assert_eq!(code, 0, "corpus generation failed: {err}");
    let mut bench = Bench { runs: HashMap::new() };

    let criteria: Vec<(&str, Box<dyn FnOnce(&mut Bench) -> Outcome>)> = vec![
        ("gradient suite", Box::new(|_| gradient_suite())),
        ("LLRD schedule oracle", Box::new(|_| llrd_schedule())),
        ("metric oracle equivalence", Box::new(|_| metric_oracle())),
        ("regulariser monotonicity", Box::new(regulariser_monotone)),
        ("ablation ordering", Box::new(ablation_order)),
        ("fine-tuning ordering", Box::new(finetune_order)),
        ("divergence detection", Box::new(|_| divergence(dir.path()))),
        ("determinism", Box::new(|_| determinism(dir.path()))),
        ("structural formulas", Box::new(|_| structural())),
        ("invariance suite", Box::new(|_| invariance())),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        let t = Instant::now();
        let res = f(&mut bench);
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(msg) => println!("PASS {:>2} {name}: {msg} ({secs:.1}s)", i + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {msg} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!("{} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
