//! Fused shared-MLP + max-pool over gathered point groups.
//!
//! Row `k` of group `g` is `[(p − c) / divisor, rest(p)]` where `p` is the
//! first `rel` columns of `point_in[groups[g][k]]`, `c` is `center_in[g]` and
//! `rest(p)` the remaining point columns. Every row passes through the same
//! stack of ReLU layers and the group output is the per-channel maximum.
//! The first-layer contribution of the non-relative columns is evaluated once
//! per point (`A = rest·W₁[rel..]`); the relative part is formed exactly per
//! row so the output only depends on coordinate differences. Repeated
//! indices within a group (duplication padding) are evaluated once. Backward
//! recomputes only the rows that won at least one channel of the max-pool,
//! since every other row receives zero gradient.

use super::{matmul_acc, matmul_grad_a, matmul_grad_b};

pub(crate) struct Layer<'a> {
    pub w: &'a [f64],
    pub b: &'a [f64],
    pub fan_in: usize,
    pub fan_out: usize,
}

pub(crate) struct LayerGrad {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Raw coordinates feeding the relative columns.
pub(crate) struct Frame<'a> {
    /// `point_in` values, `[P, width]`.
    pub points: &'a [f64],
    pub width: usize,
    /// `center_in` values, `[G, rel]`.
    pub centers: &'a [f64],
    pub rel: usize,
    pub divisor: f64,
}

impl Frame<'_> {
    fn local(&self, p: usize, g: usize, out: &mut [f64]) {
        for j in 0..self.rel {
            out[j] =
                (self.points[p * self.width + j] - self.centers[g * self.rel + j]) / self.divisor;
        }
    }
}

/// Per-group scratch: relative coordinates of each row and post-ReLU
/// outputs of every layer.
struct Scratch {
    local: Vec<f64>,
    acts: Vec<Vec<f64>>,
}

impl Scratch {
    fn new(layers: &[Layer<'_>], rel: usize, rows: usize) -> Self {
        Self {
            local: vec![0.0; rows * rel],
            acts: layers.iter().map(|l| vec![0.0; rows * l.fan_out]).collect(),
        }
    }
}

/// Fills `scratch` for group `g`. `rows` is `None` for an empty group, which
/// is evaluated as a single all-zero input row.
fn run_group(
    a: &[f64],
    frame: &Frame<'_>,
    g: usize,
    rows: Option<&[usize]>,
    layers: &[Layer<'_>],
    scratch: &mut Scratch,
) -> usize {
    let h1 = layers[0].fan_out;
    let rel = frame.rel;
    let k = rows.map_or(1, |r| r.len());
    {
        let act = &mut scratch.acts[0][..k * h1];
        match rows {
            Some(rows) => {
                for (r, &p) in rows.iter().enumerate() {
                    let local = &mut scratch.local[r * rel..(r + 1) * rel];
                    frame.local(p, g, local);
                    let out = &mut act[r * h1..(r + 1) * h1];
                    let src = &a[p * h1..(p + 1) * h1];
                    for c in 0..h1 {
                        out[c] = src[c] + layers[0].b[c];
                    }
                    for (j, &lj) in local.iter().enumerate() {
                        let wrow = &layers[0].w[j * h1..(j + 1) * h1];
                        for c in 0..h1 {
                            out[c] += lj * wrow[c];
                        }
                    }
                    for v in out.iter_mut() {
                        *v = v.max(0.0);
                    }
                }
            }
            None => {
                scratch.local[..rel].fill(0.0);
                for c in 0..h1 {
                    act[c] = layers[0].b[c].max(0.0);
                }
            }
        }
    }
    for l in 1..layers.len() {
        let (prev, next) = scratch.acts.split_at_mut(l);
        let input = &prev[l - 1][..k * layers[l].fan_in];
        let out = &mut next[0][..k * layers[l].fan_out];
        for r in 0..k {
            out[r * layers[l].fan_out..(r + 1) * layers[l].fan_out].copy_from_slice(layers[l].b);
        }
        matmul_acc(
            input,
            layers[l].w,
            out,
            k,
            layers[l].fan_in,
            layers[l].fan_out,
        );
        for v in out.iter_mut() {
            *v = v.max(0.0);
        }
    }
    k
}

/// Returns `(output [G, h_L], argmax [G, h_L])` where argmax holds the row
/// within the group that attained each channel maximum (first on ties).
pub(crate) fn forward(
    a: &[f64],
    frame: &Frame<'_>,
    groups: &[Vec<usize>],
    layers: &[Layer<'_>],
    max_rows: usize,
) -> (Vec<f64>, Vec<u32>) {
    let hl = layers.last().unwrap().fan_out;
    let mut out = vec![0.0; groups.len() * hl];
    let mut argmax = vec![0u32; groups.len() * hl];
    let mut scratch = Scratch::new(layers, frame.rel, max_rows.max(1));
    let mut positions = Vec::with_capacity(max_rows);
    let mut points = Vec::with_capacity(max_rows);
    for (g, rows) in groups.iter().enumerate() {
        first_occurrences(rows, &mut positions);
        points.clear();
        points.extend(positions.iter().map(|&r| rows[r as usize]));
        let rows = (!rows.is_empty()).then_some(points.as_slice());
        let k = run_group(a, frame, g, rows, layers, &mut scratch);
        let last = &scratch.acts[layers.len() - 1];
        let o = &mut out[g * hl..(g + 1) * hl];
        let am = &mut argmax[g * hl..(g + 1) * hl];
        o.copy_from_slice(&last[..hl]);
        am.fill(0);
        for r in 1..k {
            for c in 0..hl {
                let v = last[r * hl + c];
                if v > o[c] {
                    o[c] = v;
                    am[c] = positions[r];
                }
            }
        }
    }
    (out, argmax)
}

/// Positions of the first occurrence of each distinct index, ascending.
fn first_occurrences(rows: &[usize], out: &mut Vec<u32>) {
    out.clear();
    for (r, p) in rows.iter().enumerate() {
        if !rows[..r].contains(p) {
            out.push(r as u32);
        }
    }
}

pub(crate) struct Backward {
    /// Gradient w.r.t. `A` (per point, `[P, h1]`).
    pub da: Vec<f64>,
    /// Gradient w.r.t. the relative columns of `point_in`, `[P, rel]`.
    pub d_points: Vec<f64>,
    /// Gradient w.r.t. `center_in`, `[G, rel]`.
    pub d_centers: Vec<f64>,
    /// Gradient w.r.t. the first `rel` rows of `W₁`.
    pub dw_rel: Vec<f64>,
    pub layers: Vec<LayerGrad>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    a: &[f64],
    frame: &Frame<'_>,
    groups: &[Vec<usize>],
    layers: &[Layer<'_>],
    argmax: &[u32],
    dout: &[f64],
    max_rows: usize,
) -> Backward {
    let h1 = layers[0].fan_out;
    let hl = layers.last().unwrap().fan_out;
    let rel = frame.rel;
    let n_layers = layers.len();
    let mut grads: Vec<LayerGrad> = layers
        .iter()
        .map(|l| LayerGrad {
            w: vec![0.0; l.fan_in * l.fan_out],
            b: vec![0.0; l.fan_out],
        })
        .collect();
    let mut da = vec![0.0; a.len()];
    let mut d_points = vec![0.0; frame.points.len() / frame.width * rel];
    let mut d_centers = vec![0.0; groups.len() * rel];
    let mut dw_rel = vec![0.0; rel * h1];
    let rows_cap = max_rows.max(1);
    let mut scratch = Scratch::new(layers, rel, rows_cap);
    let widest = layers
        .iter()
        .map(|l| l.fan_out.max(l.fan_in))
        .max()
        .unwrap();
    let mut d_cur = vec![0.0; rows_cap * widest];
    let mut d_prev = vec![0.0; rows_cap * widest];

    let mut winners: Vec<u32> = Vec::with_capacity(hl);
    let mut points = Vec::with_capacity(hl);
    for (g, rows) in groups.iter().enumerate() {
        let dg = &dout[g * hl..(g + 1) * hl];
        if dg.iter().all(|v| *v == 0.0) {
            continue;
        }
        let am = &argmax[g * hl..(g + 1) * hl];
        winners.clear();
        winners.extend_from_slice(am);
        winners.sort_unstable();
        winners.dedup();
        points.clear();
        points.extend(
            winners
                .iter()
                .map(|&r| rows.get(r as usize).copied().unwrap_or(0)),
        );
        let rows_opt = (!rows.is_empty()).then_some(points.as_slice());
        let k = run_group(a, frame, g, rows_opt, layers, &mut scratch);

        let d = &mut d_cur[..k * hl];
        d.fill(0.0);
        for c in 0..hl {
            let local = winners.binary_search(&am[c]).expect("winner recorded");
            d[local * hl + c] += dg[c];
        }
        for l in (0..n_layers).rev() {
            let fo = layers[l].fan_out;
            let fi = layers[l].fan_in;
            let act = &scratch.acts[l][..k * fo];
            let dz = &mut d_cur[..k * fo];
            for (dv, av) in dz.iter_mut().zip(act) {
                if *av <= 0.0 {
                    *dv = 0.0;
                }
            }
            for r in 0..k {
                for c in 0..fo {
                    grads[l].b[c] += dz[r * fo + c];
                }
            }
            if l > 0 {
                let input = &scratch.acts[l - 1][..k * fi];
                matmul_grad_b(input, dz, &mut grads[l].w, k, fi, fo);
                let dp = &mut d_prev[..k * fi];
                dp.fill(0.0);
                matmul_grad_a(dz, layers[l].w, dp, k, fi, fo);
                std::mem::swap(&mut d_cur, &mut d_prev);
            } else if let Some(rows) = rows_opt {
                let local = &scratch.local[..k * rel];
                matmul_grad_b(local, dz, &mut dw_rel, k, rel, h1);
                let mut dlocal = vec![0.0; k * rel];
                matmul_grad_a(dz, &layers[0].w[..rel * h1], &mut dlocal, k, rel, h1);
                for (r, &p) in rows.iter().enumerate() {
                    let dzr = &dz[r * h1..(r + 1) * h1];
                    for c in 0..h1 {
                        da[p * h1 + c] += dzr[c];
                    }
                    for j in 0..rel {
                        let v = dlocal[r * rel + j] / frame.divisor;
                        d_points[p * rel + j] += v;
                        d_centers[g * rel + j] -= v;
                    }
                }
            }
        }
    }
    Backward {
        da,
        d_points,
        d_centers,
        dw_rel,
        layers: grads,
    }
}
