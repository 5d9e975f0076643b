//! Cosine trial scoring, equal error rate and minimum detection cost.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const UNIT_TOL: f64 = 1e-6;

/// Dot product of two unit-norm embeddings.
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine_score", &[a.len()], &[b.len()]));
    }
    for (name, v) in [("left", a), ("right", b)] {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::Contract(format!("{name} embedding has norm {n}")));
        }
    }
    if a == b {
        return Ok(1.0);
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrialScoreSet {
    pub scores: Vec<(f64, bool)>,
}

impl TrialScoreSet {
    pub fn new(scores: Vec<(f64, bool)>) -> Self {
        Self { scores }
    }

    pub fn n_target(&self) -> usize {
        self.scores.iter().filter(|s| s.1).count()
    }

    pub fn n_nontarget(&self) -> usize {
        self.scores.len() - self.n_target()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DcfConfig {
    pub p_tar: f64,
    pub c_fa: f64,
    pub c_fr: f64,
}

impl DcfConfig {
    pub fn new(p_tar: f64) -> Self {
        Self {
            p_tar,
            c_fa: 1.0,
            c_fr: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_tar > 0.0 && self.p_tar < 1.0) {
            return Err(Error::Config(format!("p_tar {} outside (0, 1)", self.p_tar)));
        }
        if !(self.c_fa > 0.0 && self.c_fr > 0.0) {
            return Err(Error::Config("detection costs must be positive".into()));
        }
        Ok(())
    }

    /// Normalised cost of `false_rejects` of `n_target` targets and
    /// `false_accepts` of `n_nontarget` non-targets.
    pub fn cost(&self, false_rejects: usize, n_target: usize, false_accepts: usize, n_nontarget: usize) -> f64 {
        let p_fr = false_rejects as f64 / n_target as f64;
        let p_fa = false_accepts as f64 / n_nontarget as f64;
        let c_det = self.c_fr * self.p_tar * p_fr + self.c_fa * (1.0 - self.p_tar) * p_fa;
        c_det / (self.c_fr * self.p_tar).min(self.c_fa * (1.0 - self.p_tar))
    }
}

/// One operating point: the threshold and the error counts it produces when
/// scores at or above the threshold are accepted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub false_accepts: usize,
    pub false_rejects: usize,
}

fn check(set: &TrialScoreSet) -> Result<(usize, usize)> {
    let nt = set.n_target();
    let nn = set.n_nontarget();
    if nt == 0 || nn == 0 {
        return Err(Error::MetricUndefined(format!(
            "need targets and non-targets, got {nt} and {nn}"
        )));
    }
    if let Some((s, _)) = set.scores.iter().find(|s| !s.0.is_finite()) {
        return Err(Error::MetricUndefined(format!("non-finite score {s}")));
    }
    Ok((nt, nn))
}

/// Operating points at −∞, every midpoint between distinct sorted scores,
/// and +∞, in increasing threshold order.
pub fn operating_points(set: &TrialScoreSet) -> Result<Vec<OperatingPoint>> {
    let (_, nn) = check(set)?;
    let mut sorted = set.scores.clone();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = Vec::with_capacity(sorted.len() + 1);
    let (mut fa, mut fr) = (nn, 0);
    out.push(OperatingPoint {
        threshold: f64::NEG_INFINITY,
        false_accepts: fa,
        false_rejects: fr,
    });
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            if sorted[i].1 {
                fr += 1;
            } else {
                fa -= 1;
            }
            i += 1;
        }
        let threshold = if i < sorted.len() {
            v + (sorted[i].0 - v) / 2.0
        } else {
            f64::INFINITY
        };
        out.push(OperatingPoint {
            threshold,
            false_accepts: fa,
            false_rejects: fr,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eer {
    pub rate: f64,
    /// Threshold of the lower-threshold operating point bounding the
    /// crossing.
    pub threshold: f64,
}

fn gcd(mut a: i128, mut b: i128) -> i128 {
    a = a.abs();
    b = b.abs();
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Exact rational `num / den` rounded once to `f64`.
pub(crate) fn ratio(num: i128, den: i128) -> f64 {
    let g = gcd(num, den).max(1);
    let (mut n, mut d) = (num / g, den / g);
    if d < 0 {
        n = -n;
        d = -d;
    }
    n as f64 / d as f64
}

/// Crossing of the segment between scaled points `p` and `q` (coordinates
/// `(fa·N_tar, fr·N_non)`) with the diagonal, as a numerator/denominator
/// pair over `scale = N_tar·N_non`.
pub(crate) fn diagonal_crossing(p: (i128, i128), q: (i128, i128), scale: i128) -> (i128, i128) {
    let (x0, y0) = p;
    let (x1, y1) = q;
    let d = (x0 - y0) - (x1 - y1);
    if d == 0 {
        // Both on the diagonal.
        return (x0, scale);
    }
    (x0 * y1 - x1 * y0, scale * d)
}

/// Equal error rate: where the convex hull of the operating points meets
/// the line P_fa = P_fr. Between hull vertices the curve is interpolated
/// linearly. Evaluated in integer arithmetic and rounded once.
pub fn eer(set: &TrialScoreSet) -> Result<Eer> {
    let (nt, nn) = check(set)?;
    let ops = operating_points(set)?;
    let scale = (nt * nn) as i128;
    let pt = |o: &OperatingPoint| ((o.false_accepts * nt) as i128, (o.false_rejects * nn) as i128);

    // Lower-left hull; points arrive with x decreasing and y increasing.
    let mut hull: Vec<usize> = Vec::new();
    for i in 0..ops.len() {
        let c = pt(&ops[i]);
        while hull.len() >= 2 {
            let a = pt(&ops[hull[hull.len() - 2]]);
            let b = pt(&ops[hull[hull.len() - 1]]);
            let cross = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
            // A non-negative cross product leaves b on or above the chord a–c.
            if cross >= 0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(i);
    }

    for w in 0..hull.len() {
        let p = pt(&ops[hull[w]]);
        if p.0 == p.1 {
            return Ok(Eer {
                rate: ratio(p.0, scale),
                threshold: ops[hull[w]].threshold,
            });
        }
        if p.0 < p.1 {
            let prev = hull[w - 1];
            let (num, den) = diagonal_crossing(pt(&ops[prev]), p, scale);
            return Ok(Eer {
                rate: ratio(num, den),
                threshold: ops[prev].threshold,
            });
        }
    }
    unreachable!("the +∞ operating point lies above the diagonal")
}

/// Minimum normalised detection cost over all operating points.
pub fn min_dcf(set: &TrialScoreSet, cfg: &DcfConfig) -> Result<f64> {
    cfg.validate()?;
    let (nt, nn) = check(set)?;
    Ok(operating_points(set)?
        .iter()
        .map(|o| cfg.cost(o.false_rejects, nt, o.false_accepts, nn))
        .fold(f64::INFINITY, f64::min))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub eer: f64,
    pub dcf1: f64,
    pub dcf5: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

impl MetricsReport {
    pub fn compute(set: &TrialScoreSet) -> Result<Self> {
        Ok(Self {
            eer: eer(set)?.rate,
            dcf1: min_dcf(set, &DcfConfig::new(0.01))?,
            dcf5: min_dcf(set, &DcfConfig::new(0.05))?,
            n_target: set.n_target(),
            n_nontarget: set.n_nontarget(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serialises") + "\n"
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    }
}

/// Writes `label score` lines.
pub fn write_scores(path: &Path, set: &TrialScoreSet) -> Result<()> {
    let mut out = Vec::new();
    for (s, t) in &set.scores {
        writeln!(out, "{} {}", u8::from(*t), s).expect("writing to memory");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<TrialScoreSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut scores = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Format {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 2 {
            return Err(bad(format!("expected `label score`, got {} fields", f.len())));
        }
        let label = match f[0] {
            "1" => true,
            "0" => false,
            other => return Err(bad(format!("label `{other}` is not 0 or 1"))),
        };
        let score: f64 = f[1].parse().map_err(|_| bad(format!("score `{}` is not a number", f[1])))?;
        scores.push((score, label));
    }
    Ok(TrialScoreSet { scores })
}
