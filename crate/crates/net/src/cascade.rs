//! Inference: front stage, optional back-stage refinement, optional
//! bidirectional fusion.

use std::time::{Duration, Instant};

use deepicp_autodiff::Graph;
use deepicp_core::{KabschSolution, RigidTransform};

use crate::kabsch::{weighted_kabsch, CorrespondenceSet};
use crate::model::{DeepIcp, PreparedCloud, Stage, StageOutput};
use crate::{Mode, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CascadeOptions {
    /// Run the back stage after the front stage.
    pub cascade: bool,
    /// Also register target to source and solve once over both pair sets.
    pub bidirectional: bool,
}

impl Default for CascadeOptions {
    fn default() -> Self {
        Self {
            cascade: true,
            bidirectional: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    pub transform: RigidTransform,
    pub correspondences: CorrespondenceSet,
    /// Keypoints under the stage prior.
    pub centers: Vec<deepicp_core::Vector3<f64>>,
    pub keypoint_indices: Vec<usize>,
    /// Softmax rows `[N·C]`, keypoint-major.
    pub probabilities: Vec<f64>,
    pub empty_windows: usize,
    pub elapsed: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionReport {
    pub front: StageReport,
    pub back: Option<StageReport>,
}

impl DirectionReport {
    pub fn last(&self) -> &StageReport {
        self.back.as_ref().unwrap_or(&self.front)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    pub correspondences: CorrespondenceSet,
    pub forward: DirectionReport,
    pub reverse: Option<DirectionReport>,
}

fn report(g: &Graph, stage: Stage, out: &StageOutput, started: Instant) -> Result<StageReport> {
    Ok(StageReport {
        stage,
        transform: out.transform(g)?,
        correspondences: out.correspondences(g)?,
        centers: out.centers.clone(),
        keypoint_indices: out.keypoints.indices.clone(),
        probabilities: g.value(out.probs).data().to_vec(),
        empty_windows: out.empty_windows,
        elapsed: started.elapsed(),
    })
}

/// Both stages in one direction, extractor run once per cloud.
pub fn run_direction(
    model: &mut DeepIcp,
    source: &PreparedCloud,
    target: &PreparedCloud,
    prior: &RigidTransform,
    cascade: bool,
) -> Result<DirectionReport> {
    let mut g = Graph::new();
    let started = Instant::now();
    let fs = model.features(&mut g, source, &mut Mode::Infer)?;
    let ft = model.features(&mut g, target, &mut Mode::Infer)?;
    let front_out = model.stage(&mut g, Stage::Front, source, fs, target, ft, prior, false)?;
    let front = report(&g, Stage::Front, &front_out, started)?;
    let back = if cascade {
        let started = Instant::now();
        let out = model.stage(
            &mut g,
            Stage::Back,
            source,
            fs,
            target,
            ft,
            &front.transform,
            false,
        )?;
        Some(report(&g, Stage::Back, &out, started)?)
    } else {
        None
    };
    Ok(DirectionReport { front, back })
}

/// Pools forward pairs with reverse-direction pairs flipped into the forward
/// frame (their generated points become sources, their keypoints targets)
/// and solves once.
pub fn fuse_bidirectional(
    forward: &CorrespondenceSet,
    reverse: &CorrespondenceSet,
) -> Result<(CorrespondenceSet, KabschSolution)> {
    let flipped = CorrespondenceSet::new(
        reverse.target.clone(),
        reverse.source.clone(),
        reverse.weights.clone(),
    )?;
    let pooled = forward.pooled(&flipped)?;
    let solution = weighted_kabsch(&pooled)?;
    Ok((pooled, solution))
}

/// Registers `source` to `target` starting from `prior`.
pub fn cascade_infer(
    model: &mut DeepIcp,
    source: &PreparedCloud,
    target: &PreparedCloud,
    prior: &RigidTransform,
    options: CascadeOptions,
) -> Result<RegistrationResult> {
    let forward = run_direction(model, source, target, prior, options.cascade)?;
    if !options.bidirectional {
        let last = forward.last();
        return Ok(RegistrationResult {
            transform: last.transform,
            correspondences: last.correspondences.clone(),
            forward,
            reverse: None,
        });
    }
    let reverse = run_direction(model, target, source, &prior.inverse(), options.cascade)?;
    let (pooled, solution) = fuse_bidirectional(
        &forward.last().correspondences,
        &reverse.last().correspondences,
    )?;
    Ok(RegistrationResult {
        transform: solution.transform,
        correspondences: pooled,
        forward,
        reverse: Some(reverse),
    })
}
