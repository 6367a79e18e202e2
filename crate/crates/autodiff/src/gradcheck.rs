//! Central finite-difference checks of analytic gradients.
//!
//! Only forward values are used to form the numerical estimate, so the check
//! is independent of every backward implementation it audits.

use rand::seq::index::sample;
use rand::Rng;

use crate::{Graph, ParameterStore, Result, Tensor, Var};

/// Worst relative discrepancy found, `|analytic − numeric| / max(|analytic|, floor)`.
#[derive(Debug, Clone, Copy)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates left out by the smoothness screen.
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct CheckConfig {
    pub step: f64,
    pub floor: f64,
    /// Coordinates sampled per tensor; `None` checks all of them.
    pub per_tensor: Option<usize>,
    /// Skip coordinates whose estimates at `step` and `step / 2` disagree by
    /// more than this relative amount: a kink lies inside the stencil.
    pub smoothness: Option<f64>,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-8,
            per_tensor: None,
            smoothness: None,
        }
    }
}

fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(floor)
}

/// Central difference of `eval` around coordinate value `orig`, or `None`
/// when the smoothness screen rejects the coordinate.
fn estimate(
    orig: f64,
    cfg: &CheckConfig,
    mut eval: impl FnMut(f64) -> Result<f64>,
) -> Result<Option<f64>> {
    let mut central = |h: f64| -> Result<f64> { Ok((eval(orig + h)? - eval(orig - h)?) / (2.0 * h)) };
    let numeric = central(cfg.step)?;
    if let Some(tol) = cfg.smoothness {
        let half = central(cfg.step / 2.0)?;
        if rel_error(half, numeric, cfg.floor) > tol {
            return Ok(None);
        }
    }
    Ok(Some(numeric))
}

fn coords(len: usize, cfg: &CheckConfig, rng: &mut impl Rng) -> Vec<usize> {
    match cfg.per_tensor {
        Some(k) if k < len => {
            let mut v = sample(rng, len, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}

/// Checks the gradient of `build(graph, inputs)` (a scalar) w.r.t. each input.
pub fn check_inputs<F>(
    inputs: &[Tensor],
    build: F,
    cfg: CheckConfig,
    rng: &mut impl Rng,
) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut store = ParameterStore::new();
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss, &mut store)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut report = CheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut work = inputs.to_vec();
    for (ti, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[ti].shape()));
        for i in coords(inputs[ti].len(), &cfg, rng) {
            let orig = work[ti].data()[i];
            let numeric = estimate(orig, &cfg, |x| {
                work[ti].data_mut()[i] = x;
                eval(&work)
            })?;
            work[ti].data_mut()[i] = orig;
            let Some(numeric) = numeric else {
                report.skipped += 1;
                continue;
            };
            report.max_rel_error =
                report
                    .max_rel_error
                    .max(rel_error(analytic.data()[i], numeric, cfg.floor));
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Checks the gradient of `build(graph, store)` w.r.t. the named parameters.
pub fn check_params<F>(
    store: &ParameterStore,
    names: &[&str],
    build: F,
    cfg: CheckConfig,
    rng: &mut impl Rng,
) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grads();
    let mut g = Graph::new();
    let loss = build(&mut g, &work)?;
    g.backward(loss, &mut work)?;
    let analytic: Vec<Vec<f64>> = names
        .iter()
        .map(|n| work.grad(n).map(|g| g.to_vec()))
        .collect::<Result<_>>()?;

    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = build(&mut g, s)?;
        Ok(g.value(loss).item())
    };

    let mut report = CheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (ni, name) in names.iter().enumerate() {
        let len = work.value(name)?.len();
        for i in coords(len, &cfg, rng) {
            let orig = work.value(name)?.data()[i];
            let numeric = estimate(orig, &cfg, |x| {
                work.value_mut(name)?.data_mut()[i] = x;
                eval(&work)
            })?;
            work.value_mut(name)?.data_mut()[i] = orig;
            let Some(numeric) = numeric else {
                report.skipped += 1;
                continue;
            };
            report.max_rel_error =
                report
                    .max_rel_error
                    .max(rel_error(analytic[ni][i], numeric, cfg.floor));
            report.checked += 1;
        }
    }
    Ok(report)
}

/// A fixed random linear head `Σ cᵢ·yᵢ` turning any tensor into a scalar
/// whose gradient w.r.t. `y` is dense.
pub fn random_head(g: &mut Graph, y: Var, seed_weights: &[f64]) -> Result<Var> {
    let n = g.value(y).len();
    let shape = g.value(y).shape().to_vec();
    let c: Vec<f64> = (0..n)
        .map(|i| seed_weights[i % seed_weights.len()])
        .collect();
    let c = g.constant(Tensor::new(shape, c)?);
    let prod = g.mul(y, c)?;
    Ok(g.sum(prod))
}
