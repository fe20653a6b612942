//! Central finite-difference check of analytic gradients.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::rng::Rng;
use rand::seq::index;

/// Which trainable entries to probe.
#[derive(Clone, Copy, Debug)]
pub enum Sampling {
    /// `n` entries drawn uniformly over all trainable scalars.
    Total(usize),
    /// Up to `n` distinct entries from every trainable parameter.
    PerParameter(usize),
}

#[derive(Clone, Debug)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn eval_loss<F>(store: &ParamStore, loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(store, &mut g)?;
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(v)
}

/// Compare the tape gradient of `loss_fn` against
/// `(L(θ+h) − L(θ−h)) / 2h` on sampled trainable entries. Frozen
/// parameters are never probed. Parameter values are restored exactly.
pub fn finite_diff_grad_check<F>(
    store: &mut ParamStore,
    mut loss_fn: F,
    step: f64,
    sampling: Sampling,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    if store.trainable_count() == 0 {
        return Err(Error::Empty("no trainable parameters to check"));
    }

    store.zero_grads();
    let mut g = Graph::new();
    let loss = loss_fn(store, &mut g)?;
    if !g.value(loss).item().is_finite() {
        return Err(Error::NonFinite);
    }
    g.backward(loss)?;
    g.accumulate_param_grads(store);

    let entries: Vec<(ParamId, usize)> = match sampling {
        Sampling::Total(n) => (0..n).filter_map(|_| store.sample_entry(rng)).collect(),
        Sampling::PerParameter(n) => {
            let trainable: Vec<(ParamId, usize)> = store
                .iter()
                .filter(|(_, p)| !p.frozen)
                .map(|(id, p)| (id, p.value.numel()))
                .collect();
            trainable
                .into_iter()
                .flat_map(|(id, numel)| {
                    index::sample(rng, numel, n.min(numel))
                        .into_iter()
                        .map(move |k| (id, k))
                        .collect::<Vec<_>>()
                })
                .collect()
        }
    };

    let mut probes = Vec::with_capacity(entries.len());
    for (id, k) in entries {
        let analytic = store.get(id).grad.data()[k];
        let original = store.get(id).value.data()[k];
        store.get_mut(id).value.data_mut()[k] = original + step;
        let plus = eval_loss(store, &mut loss_fn);
        store.get_mut(id).value.data_mut()[k] = original - step;
        let minus = eval_loss(store, &mut loss_fn);
        store.get_mut(id).value.data_mut()[k] = original;
        let numeric = (plus? - minus?) / (2.0 * step);
        probes.push(Probe {
            param: store.get(id).name.clone(),
            index: k,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        probes,
    })
}
