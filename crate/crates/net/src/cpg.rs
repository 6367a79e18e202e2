//! Corresponding point generation: a lattice of candidate locations around
//! each transformed keypoint, a convolutional cost volume over descriptor
//! differences, and the probability-weighted candidate average.

use std::io::Write;

use deepicp_autodiff::{Graph, ParameterStore, Tensor, Var};
use deepicp_core::{RigidTransform, Vector3};
use rand::Rng;

use crate::layers::positions_tensor;
use crate::{NetError, Result};

/// Half-extent `r` and spacing `s` of the candidate lattice per axis,
/// meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridConfig {
    pub r_xy: f64,
    pub s_xy: f64,
    pub r_z: f64,
    pub s_z: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            r_xy: 2.0,
            s_xy: 0.4,
            r_z: 2.0,
            s_z: 0.25,
        }
    }
}

/// Full 3D lattice or the single vertical column through the center.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKind {
    Volume,
    Column,
}

fn steps(r: f64, s: f64) -> Result<usize> {
    if !(r > 0.0) || !(s > 0.0) {
        return Err(NetError::Config(format!(
            "grid radius {r} and spacing {s} must be positive"
        )));
    }
    let q = 2.0 * r / s;
    let n = q.round();
    if (q - n).abs() > 1e-9 * q.max(1.0) {
        return Err(NetError::Config(format!("2r/s = {q} is not an integer")));
    }
    Ok(n as usize)
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        steps(self.r_xy, self.s_xy)?;
        steps(self.r_z, self.s_z)?;
        Ok(())
    }

    /// `2r/s + 1` per axis; a column has extent 1 in x and y.
    pub fn extents(&self, kind: GridKind) -> Result<[usize; 3]> {
        let nxy = steps(self.r_xy, self.s_xy)? + 1;
        let nz = steps(self.r_z, self.s_z)? + 1;
        Ok(match kind {
            GridKind::Volume => [nxy, nxy, nz],
            GridKind::Column => [1, 1, nz],
        })
    }

    pub fn count(&self, kind: GridKind) -> Result<usize> {
        Ok(self.extents(kind)?.iter().product())
    }

    /// Candidate offsets from the grid center with z varying fastest:
    /// index `(a·ny + b)·nz + c`.
    pub fn offsets(&self, kind: GridKind) -> Result<Vec<Vector3<f64>>> {
        let [nx, ny, nz] = self.extents(kind)?;
        let half = |n: usize| (n / 2) as f64;
        let mut out = Vec::with_capacity(nx * ny * nz);
        for a in 0..nx {
            for b in 0..ny {
                for c in 0..nz {
                    out.push(Vector3::new(
                        (a as f64 - half(nx)) * self.s_xy,
                        (b as f64 - half(ny)) * self.s_xy,
                        (c as f64 - half(nz)) * self.s_z,
                    ));
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGrid {
    pub center: Vector3<f64>,
    pub extents: [usize; 3],
    /// Candidate minus center, lattice order.
    pub offsets: Vec<Vector3<f64>>,
    /// `center + offset` per candidate.
    pub candidates: Vec<Vector3<f64>>,
}

impl CandidateGrid {
    /// Axis-aligned bounds `(min, max)` of the candidates.
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for c in &self.candidates {
            lo = lo.inf(c);
            hi = hi.sup(c);
        }
        (lo, hi)
    }
}

/// Lattice centered on `transform(keypoint)`.
pub fn make_grid(
    keypoint: &Vector3<f64>,
    transform: &RigidTransform,
    config: &GridConfig,
    kind: GridKind,
) -> Result<CandidateGrid> {
    let center = transform.apply_point(keypoint);
    let offsets = config.offsets(kind)?;
    Ok(CandidateGrid {
        center,
        extents: config.extents(kind)?,
        candidates: offsets.iter().map(|o| center + o).collect(),
        offsets,
    })
}

/// `y = Σ wⱼ y′ⱼ / Σ wⱼ`, evaluated as `x′ + Σ wⱼ oⱼ / Σ wⱼ` with mirrored
/// offsets summed pairwise, so symmetric weights cancel exactly.
pub fn generate_point(grid: &CandidateGrid, probs: &[f64]) -> Result<Vector3<f64>> {
    if probs.len() != grid.candidates.len() {
        return Err(NetError::InvalidArgument(format!(
            "{} probabilities for {} candidates",
            probs.len(),
            grid.candidates.len()
        )));
    }
    let total: f64 = probs.iter().sum();
    if !(total > 0.0) {
        return Err(NetError::InvalidArgument(
            "probabilities sum to zero".into(),
        ));
    }
    let o = &grid.offsets;
    let c = o.len();
    let mut acc = Vector3::zeros();
    for j in 0..c / 2 {
        let m = c - 1 - j;
        acc += o[j] * probs[j] + o[m] * probs[m];
    }
    if c % 2 == 1 {
        acc += o[c / 2] * probs[c / 2];
    }
    Ok(grid.center + acc / total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpgConfig {
    pub grid: GridConfig,
    /// Output channels of the three convolution stages; the last must be 1.
    pub channels: Vec<usize>,
}

impl Default for CpgConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig::default(),
            channels: vec![16, 4, 1],
        }
    }
}

impl CpgConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.channels.last() != Some(&1) || self.channels.contains(&0) {
            return Err(NetError::Config(format!(
                "convolution channels {:?} must end in 1",
                self.channels
            )));
        }
        Ok(())
    }
}

pub(crate) fn init_cpg(
    store: &mut ParameterStore,
    prefix: &str,
    config: &CpgConfig,
    kind: GridKind,
    in_channels: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    config.validate()?;
    let mut cin = in_channels;
    let taps = match kind {
        GridKind::Volume => 27,
        GridKind::Column => 3,
    };
    for (i, &cout) in config.channels.iter().enumerate() {
        let shape: Vec<usize> = match kind {
            GridKind::Volume => vec![3, 3, 3, cin, cout],
            GridKind::Column => vec![3, cin, cout],
        };
        store.insert_glorot(
            &format!("{prefix}.c{i}.k"),
            &shape,
            taps * cin,
            taps * cout,
            rng,
        )?;
        store.insert_filled(&format!("{prefix}.c{i}.b"), &[cout], 0.0)?;
        cin = cout;
    }
    Ok(())
}

/// Convolution stack over a lattice-shaped volume `[N, C, ch]` (flattened
/// in lattice order), ReLU between stages. Returns logits `[N, C]`.
pub fn regularize(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    config: &CpgConfig,
    kind: GridKind,
    volume: Var,
) -> Result<Var> {
    let [nx, ny, nz] = config.grid.extents(kind)?;
    let c = nx * ny * nz;
    let v = g.value(volume);
    let ch = v.last_dim();
    if !v.len().is_multiple_of(c * ch.max(1)) {
        return Err(NetError::InvalidArgument(format!(
            "volume {:?} does not fit {c} candidates",
            v.shape()
        )));
    }
    let n = v.len() / (c * ch);
    let mut h = match kind {
        GridKind::Volume => g.reshape(volume, &[n, nx, ny, nz, ch])?,
        GridKind::Column => g.reshape(volume, &[n, nz, ch])?,
    };
    let stages = config.channels.len();
    for i in 0..stages {
        let k = g.param(store, &format!("{prefix}.c{i}.k"))?;
        let b = g.param(store, &format!("{prefix}.c{i}.b"))?;
        h = match kind {
            GridKind::Volume => g.conv3d(h, k, b)?,
            GridKind::Column => g.conv1d(h, k, b)?,
        };
        if i + 1 < stages {
            h = g.relu(h);
        }
    }
    Ok(g.reshape(h, &[n, c])?)
}

/// Logits `[N, C]` from source descriptors `[N, ch]` and candidate
/// descriptors `[N·C, ch]`: the per-channel difference `source − candidate`
/// arranged on the lattice and passed through [`regularize`].
pub fn cost_volume(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    config: &CpgConfig,
    kind: GridKind,
    source: Var,
    candidates: Var,
) -> Result<Var> {
    let c = config.grid.count(kind)?;
    let n = g.value(source).leading();
    if g.value(candidates).leading() != n * c {
        return Err(NetError::InvalidArgument(format!(
            "{} candidate rows for {n} keypoints of {c} candidates",
            g.value(candidates).leading()
        )));
    }
    let neg = g.scale(candidates, -1.0);
    let diff = g.add_broadcast(neg, source)?;
    regularize(g, store, prefix, config, kind, diff)
}

/// Differentiable batch form of [`generate_point`] for softmax rows:
/// `y = x′ + probs · offsets`, `probs: [N, C]`, `centers: [N, 3]`.
pub fn generate_points(
    g: &mut Graph,
    probs: Var,
    centers: Var,
    offsets: &[Vector3<f64>],
) -> Result<Var> {
    let off = g.constant(positions_tensor(offsets));
    let shift = g.matmul(probs, off)?;
    Ok(g.add(centers, shift)?)
}

/// Diagnostic dump of one keypoint's probability volume: `DPRB`, extents as
/// three little-endian u32, the grid center as three f64, then the
/// probabilities as f32 in lattice order.
pub fn write_probability_volume(
    out: &mut impl Write,
    extents: [usize; 3],
    center: &Vector3<f64>,
    probs: &[f64],
) -> std::io::Result<()> {
    out.write_all(b"DPRB")?;
    for e in extents {
        out.write_all(&(e as u32).to_le_bytes())?;
    }
    for v in center.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    for p in probs {
        out.write_all(&(*p as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Softmax rows `[N, C]` as a tensor, checked against the probability
/// invariants.
pub fn check_probabilities(probs: &Tensor) -> Result<()> {
    for r in 0..probs.leading() {
        let row = probs.row(r);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|p| !(*p >= 0.0)) {
            return Err(NetError::InvalidArgument(format!(
                "row {r} is not a distribution (sum {sum})"
            )));
        }
    }
    Ok(())
}
