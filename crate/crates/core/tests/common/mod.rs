#![allow(dead_code)]

use std::sync::Arc;

use af_core::numcore::{Binding, Graph, ParamId, ParamStore, Var};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
/// Central differences at `FD_STEP` carry ~1e-11 rounding noise on O(1)
/// losses, so magnitudes below this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// Every permutation of `0..k` (Heap's algorithm).
pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..k).collect();
    let mut out = vec![perm.clone()];
    let mut c = vec![0; k];
    let mut i = 0;
    while i < k {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            out.push(perm.clone());
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    out
}

/// Best number of matches over all relabelings of the predictions.
pub fn brute_force_matches(y_true: &[usize], y_pred: &[usize], k: usize) -> usize {
    permutations(k)
        .iter()
        .map(|p| y_true.iter().zip(y_pred).filter(|&(&t, &q)| p[q] == t).count())
        .max()
        .unwrap_or(0)
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub checked: usize,
    pub within: usize,
    pub worst: f64,
    /// (tensor, coordinate, analytic, numeric) for coordinates outside tolerance.
    pub misses: Vec<(ParamId, usize, f64, f64)>,
}

impl GradReport {
    pub fn fraction_within(&self) -> f64 {
        self.within as f64 / self.checked.max(1) as f64
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Picks up to `per_tensor` coordinates from every tensor.
pub fn sample_coordinates<R: Rng>(store: &ParamStore, per_tensor: usize, rng: &mut R) -> Vec<(ParamId, usize)> {
    let mut coords = Vec::new();
    for id in store.ids() {
        let len = store.get(id).len();
        if len <= per_tensor {
            coords.extend((0..len).map(|k| (id, k)));
        } else {
            let picks = rand::seq::index::sample(rng, len, per_tensor);
            let mut picks: Vec<usize> = picks.into_iter().collect();
            picks.sort_unstable();
            coords.extend(picks.into_iter().map(|k| (id, k)));
        }
    }
    coords
}

/// Compares tape gradients of several scalar roots against central
/// differences on the given coordinates. Values detached with
/// `stop_gradient` are replayed unchanged on perturbed evaluations.
pub fn gradcheck<F>(store: &ParamStore, coords: &[(ParamId, usize)], build: F, tol: f64) -> Vec<GradReport>
where
    F: Fn(&mut Graph, &Binding) -> Vec<Var>,
{
    let mut g = Graph::new();
    let b = store.bind(&mut g, |_| true);
    let roots = build(&mut g, &b);
    let analytic: Vec<Vec<f64>> = roots
        .iter()
        .map(|&root| {
            let grads = g.backward(root).expect("backward");
            coords.iter().map(|&(id, k)| b.gradient(&grads, &g, id).data()[k]).collect()
        })
        .collect();
    let replay = Arc::new(g.detached_values().to_vec());

    let eval = |s: &ParamStore| -> Vec<f64> {
        let mut g = Graph::with_detached_replay(replay.clone());
        let b = s.bind(&mut g, |_| true);
        build(&mut g, &b).into_iter().map(|v| g.value(v).item()).collect()
    };

    let mut reports = vec![GradReport::default(); roots.len()];
    let mut work = store.clone();
    for (c, &(id, k)) in coords.iter().enumerate() {
        let orig = store.get(id).data()[k];
        work.get_mut(id).data_mut()[k] = orig + FD_STEP;
        let up = eval(&work);
        work.get_mut(id).data_mut()[k] = orig - FD_STEP;
        let down = eval(&work);
        work.get_mut(id).data_mut()[k] = orig;
        for (r, report) in reports.iter_mut().enumerate() {
            let numeric = (up[r] - down[r]) / (2.0 * FD_STEP);
            let rel = relative_error(analytic[r][c], numeric);
            report.checked += 1;
            if rel < tol {
                report.within += 1;
            } else {
                report.misses.push((id, k, analytic[r][c], numeric));
            }
            report.worst = report.worst.max(rel);
        }
    }
    reports
}
