//! Central finite-difference checks of analytic gradients.

use super::array::Array;
use super::params::ParamStore;
use super::tape::{Tape, Var};

/// Worst relative error observed by a check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

/// Relative error with an absolute floor so near-zero gradients compare sanely.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares gradients of a scalar function of several inputs against central
/// differences at every input coordinate.
pub fn check_inputs<F>(inputs: &[Array], h: f64, f: F) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.input(a.clone())).collect();
    let out = f(&tape, &vars);
    let grads = tape.backward(out);
    let analytic: Vec<Array> = vars
        .iter()
        .zip(inputs)
        .map(|(v, a)| grads.wrt(*v).cloned().unwrap_or_else(|| Array::zeros(a.shape())))
        .collect();

    let eval = |xs: &[Array]| -> f64 {
        let t = Tape::inference();
        let vs: Vec<Var> = xs.iter().map(|a| t.constant(a.clone())).collect();
        f(&t, &vs).item()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for j in 0..xs[i].len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + h;
            let fp = eval(&xs);
            xs[i].data_mut()[j] = orig - h;
            let fm = eval(&xs);
            xs[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[i].data()[j];
            let e = rel_error(a, numeric, 1e-6);
            report.checked += 1;
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = format!("input {i}[{j}]: analytic {a:e}, numeric {numeric:e}");
            }
        }
    }
    report
}

/// Compares parameter gradients of a scalar function against central
/// differences. `select(name, index)` picks which scalars to check.
pub fn check_params<F, S>(store: &ParamStore, h: f64, floor: f64, select: S, f: F) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Var<'t>,
    S: Fn(&str, usize) -> bool,
{
    let tape = Tape::new();
    let out = f(&tape, store);
    let grads = tape.backward(out).into_params();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut probe = store.clone();
    let ids: Vec<_> = store.ids().filter(|&id| store.trainable(id)).collect();
    for id in ids {
        let name = store.name(id).to_string();
        for j in 0..store.value(id).len() {
            if !select(&name, j) {
                continue;
            }
            let orig = store.value(id).data()[j];
            let mut eval = |v: f64| {
                probe.value_mut(id).data_mut()[j] = v;
                let t = Tape::inference();
                f(&t, &probe).item()
            };
            let numeric = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
            probe.value_mut(id).data_mut()[j] = orig;
            let a = grads.get(&id).map_or(0.0, |g| g.data()[j]);
            let e = rel_error(a, numeric, floor);
            report.checked += 1;
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = format!("{name}[{j}]: analytic {a:e}, numeric {numeric:e}");
            }
        }
    }
    report
}
