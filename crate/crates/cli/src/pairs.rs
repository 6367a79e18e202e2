//! Registration pairs from a pose sequence.

use deepicp_core::RigidTransform;

/// A source/target frame pair. `ground_truth` maps source coordinates into
/// the target frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairSpec {
    pub source: usize,
    pub target: usize,
    pub prior: RigidTransform,
    pub ground_truth: RigidTransform,
}

/// Relative transform taking points of frame `source` into frame `target`.
pub fn relative(poses: &[RigidTransform], source: usize, target: usize) -> RigidTransform {
    poses[target].inverse().compose(&poses[source])
}

/// Sources at every `frame_interval`-th frame; each pairs with every other
/// frame whose position lies within `max_distance`. The prior equals the
/// ground truth; callers perturb it.
pub fn enumerate_pairs(poses: &[RigidTransform], frame_interval: usize, max_distance: f64) -> Vec<PairSpec> {
    let mut pairs = Vec::new();
    for source in (0..poses.len()).step_by(frame_interval.max(1)) {
        let origin = poses[source].translation();
        for (target, pose) in poses.iter().enumerate() {
            if target != source && (pose.translation() - origin).norm() <= max_distance && max_distance > 0.0 {
                let ground_truth = relative(poses, source, target);
                pairs.push(PairSpec {
                    source,
                    target,
                    prior: ground_truth,
                    ground_truth,
                });
            }
        }
    }
    pairs
}
