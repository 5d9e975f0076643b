//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Options for [`grad_check_store`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub eps: f64,
    /// Doubles one analytic gradient entry (flattened across all checked
    /// parameters) before comparison. Used to self-test the checker.
    pub corrupt_entry: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            corrupt_entry: None,
        }
    }
}

fn eval_loss(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::Shape(format!("gradient check needs a scalar, got {:?}", t.shape())));
    }
    let l = t.data()[0];
    if !l.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {l}")));
    }
    Ok(l)
}

/// Gradients smaller than this fraction of the largest one are below what a
/// central difference can resolve in `f64`; they are compared against that
/// level instead of their own magnitude.
const RESOLUTION: f64 = 1e-6;

/// Maximum over the entries of `ids` of
/// `|analytic − numeric| / (|numeric| + 1e-12 + 1e-6·max|numeric|)`, where
/// `numeric` is the central difference with step `opts.eps`.
pub fn grad_check_store<F>(store: &ParamStore, ids: &[ParamId], opts: GradCheck, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&opts.eps) {
        return Err(Error::Config(format!("finite-difference step {} outside [1e-7, 1e-3]", opts.eps)));
    }
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    eval_loss(&g, out)?;
    let grads = g.backward(out)?;
    let mut scratch = store.clone();
    scratch.zero_grads();
    g.accumulate_param_grads(&grads, &mut scratch);

    let mut analytic: Vec<f64> = Vec::new();
    for &id in ids {
        let n = store.get(id).len();
        match scratch.get(id).grad() {
            Some(gr) => analytic.extend_from_slice(gr),
            None => analytic.extend(std::iter::repeat_n(0.0, n)),
        }
    }
    if let Some(k) = opts.corrupt_entry {
        if let Some(v) = analytic.get_mut(k) {
            *v *= 2.0;
        }
    }

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = store.clone();
    for &id in ids {
        for j in 0..store.get(id).len() {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + opts.eps;
            let mut gp = Graph::new();
            let vp = f(&mut gp, &work)?;
            let lp = eval_loss(&gp, vp)?;
            work.get_mut(id).data_mut()[j] = orig - opts.eps;
            let mut gm = Graph::new();
            let vm = f(&mut gm, &work)?;
            let lm = eval_loss(&gm, vm)?;
            work.get_mut(id).data_mut()[j] = orig;
            numeric.push((lp - lm) / (2.0 * opts.eps));
        }
    }
    let largest = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-12 + RESOLUTION * largest;
    let worst = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / (n.abs() + floor))
        .fold(0.0f64, f64::max);
    Ok(worst)
}

/// Gradient check of `f` with respect to every entry of `params`.
pub fn grad_check<F>(params: &[Tensor], opts: GradCheck, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = params
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("p{i}"), t.detached(), true))
        .collect::<Result<_>>()?;
    grad_check_store(&store, &ids, opts, |g, s| {
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
        f(g, &vars)
    })
}

/// [`grad_check`] with step `eps` and no fault injection.
pub fn finite_difference<F>(params: &[Tensor], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check(
        params,
        GradCheck {
            eps,
            corrupt_entry: None,
        },
        f,
    )
}
