//! Central finite-difference checks against reverse-mode gradients.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Central differences of an O(10) loss at h = 1e-5 carry roundoff around
/// 1e-10; derivatives that are structurally zero (e.g. key biases under
/// softmax) would otherwise show a large "relative" error.
const ABS_FLOOR: f64 = 1e-6;

/// Relative error between an analytic and a numeric derivative, with an
/// absolute floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), false);
    let y = f(&mut g, xv)?;
    Ok(g.value(y).item())
}

/// Compares the autodiff gradient of the scalar function `f` at `x`
/// against `(f(x + h) - f(x - h)) / 2h`, coordinate by coordinate, and
/// returns the worst relative error.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, Var) -> Result<Var>,
{
    assert!(h > 0.0, "step must be positive");
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let y = f(&mut g, xv)?;
    g.backward(y)?;
    let analytic = g
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let numeric = (eval_scalar(&f, &xp)? - eval_scalar(&f, &xm)?) / (2.0 * h);
        worst = worst.max(relative_error(*a, numeric));
    }
    Ok(worst)
}

/// Worst relative error for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
}

/// Finite-difference check of every coordinate of the selected
/// parameters of a loss built by `build`. When `training_seed` is set the
/// graph runs in training mode with the same dropout masks on every
/// evaluation.
pub fn check_param_gradients<F>(
    store: &ParamStore,
    ids: &[ParamId],
    h: f64,
    training_seed: Option<u64>,
    build: F,
) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    fn graph_for(s: &ParamStore, training_seed: Option<u64>) -> Graph<'_> {
        let g = Graph::with_params(s);
        match training_seed {
            Some(seed) => g.training(seed),
            None => g,
        }
    }
    let loss_at = |s: &ParamStore| -> Result<f64> {
        let mut g = graph_for(s, training_seed);
        let y = build(&mut g)?;
        Ok(g.value(y).item())
    };

    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    {
        let mut g = graph_for(store, training_seed);
        let y = build(&mut g)?;
        g.backward(y)?;
        analytic_store.accumulate_grads(&g);
    }

    let mut out = Vec::with_capacity(ids.len());
    let mut probe = store.clone();
    for &id in ids {
        let analytic = analytic_store.get(id).grad.clone();
        let mut worst = 0.0f64;
        for (i, a) in analytic.iter().enumerate() {
            let orig = probe.get(id).value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + h;
            let fp = loss_at(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig - h;
            let fm = loss_at(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig;
            worst = worst.max(relative_error(*a, (fp - fm) / (2.0 * h)));
        }
        out.push(ParamCheck {
            name: store.get(id).name.clone(),
            max_rel_error: worst,
            coords: analytic.len(),
        });
    }
    Ok(out)
}
