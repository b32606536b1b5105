//! Finite-difference gradient checking against the tape's analytic gradients.

use crate::autograd::{Graph, Var};
use crate::error::{ensure, Result};
use crate::nn::params::ParamStore;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

/// Compare analytic and central-difference gradients for up to
/// `per_param` evenly spaced entries of every trainable parameter selected
/// by `filter`. The relative error uses `max(|a|, |n|, floor)` as the
/// denominator so entries with near-zero gradient are judged absolutely.
pub fn check_gradients(
    store: &mut ParamStore,
    filter: impl Fn(&str) -> bool,
    per_param: usize,
    eps: f64,
    floor: f64,
    mut loss: impl FnMut(&mut Graph, &ParamStore) -> Result<Var>,
) -> Result<GradCheckReport> {
    ensure!(eps > 0.0 && per_param > 0, "bad gradient-check settings");
    let mut g = Graph::new();
    let l = loss(&mut g, store)?;
    let grads = g.backward(l);
    let analytic: std::collections::HashMap<_, _> = grads.params().map(|(id, m)| (id, m.clone())).collect();
    let targets: Vec<_> = store
        .entries()
        .filter(|(_, e)| e.trainable && filter(&e.name))
        .map(|(id, e)| (id, e.name.clone(), e.value.len()))
        .collect();
    ensure!(!targets.is_empty(), "no parameters selected for the gradient check");

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(&mut g, store)?;
        Ok(g.scalar(l))
    };
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for (id, name, len) in targets {
        let stride = (len / per_param).max(1);
        for flat in (0..len).step_by(stride).take(per_param) {
            let orig = store.value(id).as_slice().expect("contiguous")[flat];
            store.value_mut(id).as_slice_mut().expect("contiguous")[flat] = orig + eps;
            let up = eval(store)?;
            store.value_mut(id).as_slice_mut().expect("contiguous")[flat] = orig - eps;
            let down = eval(store)?;
            store.value_mut(id).as_slice_mut().expect("contiguous")[flat] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(&id).map_or(0.0, |m| m.as_slice().expect("contiguous")[flat]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), flat));
            }
        }
    }
    Ok(report)
}
