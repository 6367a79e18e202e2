//! Parameter initialization and small layer stacks shared by the modules.

use deepicp_autodiff::{BatchNormMode, Graph, ParameterStore, Tensor, Var};
use rand::Rng;

use crate::Result;

pub(crate) fn init_linear(
    store: &mut ParameterStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    store.insert_glorot(
        &format!("{prefix}.w"),
        &[fan_in, fan_out],
        fan_in,
        fan_out,
        rng,
    )?;
    store.insert_filled(&format!("{prefix}.b"), &[fan_out], 0.0)?;
    Ok(())
}

/// Linear layers `{prefix}.l0 .. l{n-1}` following `widths` from `fan_in`.
pub(crate) fn init_mlp(
    store: &mut ParameterStore,
    prefix: &str,
    fan_in: usize,
    widths: &[usize],
    rng: &mut impl Rng,
) -> Result<usize> {
    let mut width = fan_in;
    for (i, &w) in widths.iter().enumerate() {
        init_linear(store, &format!("{prefix}.l{i}"), width, w, rng)?;
        width = w;
    }
    Ok(width)
}

pub(crate) fn init_batch_norm(
    store: &mut ParameterStore,
    prefix: &str,
    channels: usize,
) -> Result<()> {
    store.insert_filled(&format!("{prefix}.gamma"), &[channels], 1.0)?;
    store.insert_filled(&format!("{prefix}.beta"), &[channels], 0.0)?;
    store.insert_running_stats(prefix, channels)?;
    Ok(())
}

pub(crate) fn linear(g: &mut Graph, store: &ParameterStore, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    Ok(g.fully_connected(x, w, b)?)
}

/// `(w, b)` handles for `layers` layers of an MLP, for the fused grouped op.
pub(crate) fn mlp_params(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    layers: usize,
) -> Result<Vec<(Var, Var)>> {
    (0..layers)
        .map(|i| {
            let w = g.param(store, &format!("{prefix}.l{i}.w"))?;
            let b = g.param(store, &format!("{prefix}.l{i}.b"))?;
            Ok((w, b))
        })
        .collect()
}

/// Linear + ReLU per layer.
pub(crate) fn relu_mlp(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    layers: usize,
    x: Var,
) -> Result<Var> {
    let mut h = x;
    for i in 0..layers {
        h = linear(g, store, &format!("{prefix}.l{i}"), h)?;
        h = g.relu(h);
    }
    Ok(h)
}

/// Batch norm whose running statistics live in `store` under `prefix`.
pub(crate) fn batch_norm(
    g: &mut Graph,
    store: &mut ParameterStore,
    prefix: &str,
    x: Var,
    train: bool,
) -> Result<Var> {
    let gamma = g.param(store, &format!("{prefix}.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.beta"))?;
    let mut stats = store.running_stats(prefix)?;
    let out = if train {
        let y = g.batch_norm(x, gamma, beta, BatchNormMode::Train(&mut stats))?;
        store.set_running_stats(prefix, &stats)?;
        y
    } else {
        g.batch_norm(x, gamma, beta, BatchNormMode::Infer(&stats))?
    };
    Ok(out)
}

/// Inverted dropout: surviving entries are scaled by `1 / keep`.
pub(crate) fn dropout(g: &mut Graph, x: Var, keep: f64, rng: &mut impl Rng) -> Result<Var> {
    if keep >= 1.0 {
        return Ok(x);
    }
    let shape = g.value(x).shape().to_vec();
    let n = g.value(x).len();
    let mask: Vec<f64> = (0..n)
        .map(|_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    let m = g.constant(Tensor::new(shape, mask)?);
    Ok(g.mul(x, m)?)
}

pub(crate) fn positions_tensor(points: &[nalgebra::Vector3<f64>]) -> Tensor {
    let data = points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    Tensor::new(vec![points.len(), 3], data).expect("shape matches data")
}
