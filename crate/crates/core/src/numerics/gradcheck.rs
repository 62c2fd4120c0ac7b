//! Central-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::graph::{Graph, Var};
use super::param::ParamStore;
use crate::error::Result;

/// Worst disagreement observed for one parameter tensor.
#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub numel: usize,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
    /// Coordinates whose relative error exceeded [`EXCUSE_ABOVE`] while the
    /// absolute disagreement stayed under the rounding noise of the
    /// difference quotient. They are not counted in `max_rel_error`.
    pub below_noise: usize,
    /// Largest relative error among the excused coordinates.
    pub worst_excused: f64,
}

/// Relative error below which a coordinate is never excused.
pub const EXCUSE_ABOVE: f64 = 1e-6;

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

/// `|a - n| / (|a| + |n| + 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-8)
}

/// Checks every coordinate of every parameter.
pub fn grad_check<F>(store: &ParamStore<f64>, f: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    grad_check_sampled(store, f, eps, usize::MAX, 0)
}

/// Checks up to `per_param` randomly chosen coordinates of each parameter
/// (all of them when the tensor is smaller).
pub fn grad_check_sampled<F>(
    store: &ParamStore<f64>,
    f: F,
    eps: f64,
    per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let (grads, loss) = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        let value = g.value(loss).data()[0];
        (g.backward(loss)?, value)
    };
    // Rounding in the two loss evaluations moves the quotient by a few
    // ulp(loss) / eps, so a zero or tiny gradient reads back as noise of
    // that size.
    let noise = 16.0 * f64::EPSILON * loss.abs().max(1.0) / eps;
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference(s);
        let loss = f(&mut g)?;
        Ok(g.value(loss).data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for id in store.ids() {
        let p = store.get(id);
        let numel = p.value.numel();
        let coords: Vec<usize> = if numel <= per_param {
            (0..numel).collect()
        } else {
            let mut c = sample(&mut rng, numel, per_param).into_vec();
            c.sort_unstable();
            c
        };
        let analytic = grads.get(id);
        let mut check = ParamCheck {
            name: p.name.clone(),
            checked: coords.len(),
            numel,
            max_rel_error: 0.0,
            max_abs_grad: 0.0,
            below_noise: 0,
            worst_excused: 0.0,
        };
        for &i in &coords {
            let orig = p.value.data()[i];
            work.get_mut(id).value.data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.map_or(0.0, |g| g.data()[i]);
            let err = relative_error(a, numeric);
            if err > EXCUSE_ABOVE && (a - numeric).abs() < noise {
                check.below_noise += 1;
                check.worst_excused = check.worst_excused.max(err);
            } else {
                check.max_rel_error = check.max_rel_error.max(err);
            }
            check.max_abs_grad = check.max_abs_grad.max(a.abs());
        }
        report.params.push(check);
    }
    Ok(report)
}
