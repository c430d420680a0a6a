//! Central finite-difference checks of parameter adjoints.

use rand::seq::index::sample;
use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Smallest gradient scale used as a denominator.
pub const SCALE_FLOOR: f64 = 1e-3;

/// Worst-case agreement between analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest per-parameter relative error.
    pub max_rel_error: f64,
    /// Name of the parameter that attained it.
    pub worst: String,
    /// Number of scalar entries compared.
    pub checked: usize,
}

/// Compares the adjoint of every trainable entry of `store` with the central
/// difference `(f(x + h) - f(x - h)) / 2h` of the scalar built by `build`.
///
/// The error of one parameter is the max-abs difference over its entries
/// divided by the max-abs numeric gradient of that parameter, floored at
/// [`SCALE_FLOOR`] so that parameters whose true gradient vanishes (such as a
/// key bias under softmax shift invariance) are judged absolutely instead of
/// against roundoff.
pub fn check_params<E>(
    store: &ParamStore,
    h: f64,
    build: impl Fn(&mut Graph, &Bound) -> Result<Var, E>,
) -> Result<GradCheck, E> {
    check_entries(store, h, |n| (0..n).collect(), build)
}

/// As [`check_params`], but compares at most `per_param` randomly chosen
/// entries of each trainable parameter. Every parameter is still visited.
pub fn check_params_sampled<E, R: Rng + ?Sized>(
    store: &ParamStore,
    h: f64,
    per_param: usize,
    rng: &mut R,
    build: impl Fn(&mut Graph, &Bound) -> Result<Var, E>,
) -> Result<GradCheck, E> {
    let picks: Vec<Vec<usize>> = store
        .iter()
        .map(|p| {
            let n = p.value.numel();
            let mut idx = sample(rng, n, per_param.min(n)).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();
    let mut next = picks.into_iter();
    check_entries(store, h, move |_| next.next().unwrap_or_default(), build)
}

fn check_entries<E>(
    store: &ParamStore,
    h: f64,
    mut entries: impl FnMut(usize) -> Vec<usize>,
    build: impl Fn(&mut Graph, &Bound) -> Result<Var, E>,
) -> Result<GradCheck, E> {
    let eval = |s: &ParamStore| -> Result<f64, E> {
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let out = build(&mut g, &p)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let out = build(&mut g, &p)?;
    g.backward(out).expect("scalar root");
    let analytic = p.gradients(&g);

    let mut work = store.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for id in store.ids() {
        let param = store.param(id);
        let picked = entries(param.value.numel());
        if !param.trainable {
            continue;
        }
        let mut err = 0.0f64;
        let mut scale = 0.0f64;
        for i in picked {
            let x = param.value.data()[i];
            work.get_mut(id).data_mut()[i] = x + h;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = x - h;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = x;
            let numeric = (plus - minus) / (2.0 * h);
            err = err.max((analytic.get(id)[i] - numeric).abs());
            scale = scale.max(numeric.abs());
            report.checked += 1;
        }
        let rel = err / scale.max(SCALE_FLOOR);
        if rel > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = rel.max(report.max_rel_error);
            report.worst = param.name.clone();
        }
    }
    Ok(report)
}
