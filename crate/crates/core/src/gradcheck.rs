//! Central-difference audit of the analytic gradients.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub probes: Vec<Probe>,
    /// Draws discarded because `p ± h` fell on different ReLU branches.
    pub kinked: usize,
}

impl GradCheck {
    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn rel_error(a: f64, n: f64) -> f64 {
    let diff = (a - n).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / a.abs().max(n.abs()).max(1e-8)
}

fn eval<F>(loss_fn: &F, store: &ParamStore) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let l = loss_fn(&mut g)?;
    let (r, c) = g.shape(l);
    if (r, c) != (1, 1) {
        return Err(Error::NonScalarLoss { rows: r, cols: c });
    }
    Ok((g.scalar(l), g.branch_signature()))
}

/// Compares analytic gradients of `loss_fn` with `(f(p+h) − f(p−h)) / 2h` at
/// `n_probes` scalars. A probe picks a canonical tensor uniformly, then an
/// entry of it uniformly, so small tensors are audited as often as the
/// embedding tables. The central difference is not a derivative estimate when
/// a ReLU changes sign inside `[p − h, p + h]`; such draws are counted in
/// `kinked` and replaced, up to `4 · n_probes` draws in total.
pub fn finite_diff_check<F>(loss_fn: F, params: &ParamStore, h: f64, n_probes: usize, rng: &mut Rng) -> Result<GradCheck>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidConfig("finite-difference step must be positive".into()));
    }
    let grads = {
        let mut g = Graph::new(params);
        let l = loss_fn(&mut g)?;
        g.backward(l)?.into_params()
    };
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let mut work = params.clone();
    let mut probes = Vec::with_capacity(n_probes);
    let mut max_rel_error: f64 = 0.0;
    let mut kinked = 0;
    if names.is_empty() {
        return Ok(GradCheck {
            max_rel_error,
            probes,
            kinked,
        });
    }
    let mut draws = 0;
    while probes.len() < n_probes && draws < 4 * n_probes {
        draws += 1;
        let name = &names[rng.below(names.len())];
        let len = params.value(name)?.len();
        let index = rng.below(len);
        let p0 = params.value(name)?.data()[index];
        work.value_mut(name)?.data_mut()[index] = p0 + h;
        let (up, sig_up) = eval(&loss_fn, &work)?;
        work.value_mut(name)?.data_mut()[index] = p0 - h;
        let (down, sig_down) = eval(&loss_fn, &work)?;
        work.value_mut(name)?.data_mut()[index] = p0;
        if sig_up != sig_down {
            kinked += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(name).map_or(0.0, |g| g.data()[index]);
        let rel = rel_error(analytic, numeric);
        max_rel_error = max_rel_error.max(rel);
        probes.push(Probe {
            name: name.clone(),
            index,
            analytic,
            numeric,
            rel_error: rel,
        });
    }
    Ok(GradCheck {
        max_rel_error,
        probes,
        kinked,
    })
}
