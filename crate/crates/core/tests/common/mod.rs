#![allow(dead_code)]

use odtq_core::grad::{Gradients, ParamId, ParamStore};
use rand::seq::IndexedRandom;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

/// Below this magnitude a relative error is meaningless; such coordinates
/// are held to an absolute bound instead.
pub const TINY: f64 = 1e-6;
pub const ABS_TOL: f64 = 1e-9;

#[derive(Debug, Default, Clone, Copy)]
pub struct FdReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_abs_tiny: f64,
}

impl FdReport {
    pub fn ok(&self) -> bool {
        self.worst_rel < REL_TOL && self.worst_abs_tiny < ABS_TOL
    }

    pub fn merge(&mut self, o: FdReport) {
        self.checked += o.checked;
        self.worst_rel = self.worst_rel.max(o.worst_rel);
        self.worst_abs_tiny = self.worst_abs_tiny.max(o.worst_abs_tiny);
    }
}

pub fn compare(analytic: f64, numeric: f64, rep: &mut FdReport) {
    rep.checked += 1;
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale >= TINY {
        rep.worst_rel = rep.worst_rel.max(diff / scale);
    } else {
        rep.worst_abs_tiny = rep.worst_abs_tiny.max(diff);
    }
}

/// Central differences of `loss` against the analytic gradient from `grads`
/// on up to `max_coords` parameter coordinates (all of them if fewer).
pub fn check_params<R: Rng>(
    store: &ParamStore,
    loss: impl Fn(&ParamStore) -> f64,
    grads: &Gradients,
    max_coords: usize,
    rng: &mut R,
) -> FdReport {
    let mut coords: Vec<(ParamId, usize)> = Vec::new();
    for id in store.ids() {
        for j in 0..store.value(id).len() {
            coords.push((id, j));
        }
    }
    // bias the sample towards coordinates that actually carry gradient
    let (live, dead): (Vec<_>, Vec<_>) = coords.into_iter().partition(|&(id, j)| {
        grads.param(id).is_some_and(|g| g[j].abs() > 0.0)
    });
    let mut picked: Vec<(ParamId, usize)> = live.choose_multiple(rng, max_coords).copied().collect();
    picked.extend(dead.choose_multiple(rng, (max_coords / 4).max(1)).copied());

    let mut rep = FdReport::default();
    let mut work = store.clone();
    for (id, j) in picked {
        let x = store.value(id)[j];
        work.value_mut(id)[j] = x + FD_STEP;
        let up = loss(&work);
        work.value_mut(id)[j] = x - FD_STEP;
        let down = loss(&work);
        work.value_mut(id)[j] = x;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let analytic = grads.param(id).map_or(0.0, |g| g[j]);
        compare(analytic, numeric, &mut rep);
    }
    rep
}

pub fn verdict(name: &str, pass: bool, detail: String) {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}
