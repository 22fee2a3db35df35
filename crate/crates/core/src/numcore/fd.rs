//! Central finite differences for unit tests.

use std::sync::Arc;

use crate::error::Result;
use crate::numcore::{Binding, Graph, ParamStore, Var};

pub(crate) const STEP: f64 = 1e-5;

/// Largest relative error between the tape gradient and central differences
/// over every scalar of every tensor in `store`.
pub(crate) fn max_relative_error<F>(store: &ParamStore, f: F) -> f64
where
    F: Fn(&mut Graph, &Binding) -> Result<Var>,
{
    let mut g = Graph::new();
    let b = store.bind(&mut g, |_| true);
    let root = f(&mut g, &b).unwrap();
    let grads = g.backward(root).unwrap();
    let replay = Arc::new(g.detached_values().to_vec());

    let eval = |s: &ParamStore| {
        let mut g = Graph::with_detached_replay(replay.clone());
        let b = s.bind(&mut g, |_| true);
        let root = f(&mut g, &b).unwrap();
        g.value(root).item()
    };

    let mut worst: f64 = 0.0;
    let mut work = store.clone();
    for id in store.ids() {
        let analytic = b.gradient(&grads, &g, id);
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + STEP;
            let up = eval(&work);
            work.get_mut(id).data_mut()[k] = orig - STEP;
            let down = eval(&work);
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    worst
}
