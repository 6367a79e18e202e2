use deepicp_core::{weighted_kabsch, PointCloud, RigidTransform, SpatialIndex, Vector3};

use crate::{BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpConfig {
    pub max_iter: usize,
    /// Stop once the update moves the translation plus rotation angle
    /// (radians) by less than this.
    pub tolerance: f64,
    pub max_pair_dist: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tolerance: 1e-6,
            max_pair_dist: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpOutcome {
    pub transform: RigidTransform,
    pub iterations: usize,
    pub converged: bool,
    /// Truncated objective `mean_i min(‖y_i − T x_i‖², c²)` evaluated at the
    /// start of every iteration and once more at the final transform.
    pub objective: Vec<f64>,
}

/// Classic point-to-point ICP: nearest-neighbor pairing under the current
/// estimate, pairs farther than `max_pair_dist` rejected, unweighted Kabsch.
///
/// Rejected points contribute the constant `max_pair_dist²` to the logged
/// objective, which makes it non-increasing: re-pairing can only shorten
/// distances, and the Kabsch step can only shorten the inlier sum.
pub fn icp_point2point(
    source: &PointCloud,
    target: &PointCloud,
    prior: &RigidTransform,
    config: &IcpConfig,
) -> Result<IcpOutcome> {
    if !(config.max_pair_dist > 0.0) || !(config.tolerance >= 0.0) || config.max_iter == 0 {
        return Err(BenchError::Config(format!("{config:?}")));
    }
    source.ensure_non_empty()?;
    let index = SpatialIndex::build(target)?;
    let src: Vec<Vector3<f64>> = source.positions().collect();
    let cap_sq = config.max_pair_dist * config.max_pair_dist;

    let mut current = *prior;
    let mut objective = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iter {
        let (pairs_src, pairs_dst, value) = pair_up(&src, &index, &current, cap_sq);
        objective.push(value);
        if pairs_src.len() < 3 {
            return Err(BenchError::NoOverlap {
                max_pair_dist: config.max_pair_dist,
                iteration: iterations,
            });
        }
        let ones = vec![1.0; pairs_src.len()];
        let next = weighted_kabsch(&pairs_src, &pairs_dst, &ones)?.transform.compose(&current);
        iterations += 1;
        let delta = next.compose(&current.inverse());
        let angle = deepicp_core::angular_error(delta.rotation(), &deepicp_core::Matrix3::identity()).to_radians();
        current = next;
        if delta.translation().norm() + angle < config.tolerance {
            converged = true;
            break;
        }
    }
    objective.push(pair_up(&src, &index, &current, cap_sq).2);
    Ok(IcpOutcome {
        transform: current,
        iterations,
        converged,
        objective,
    })
}

/// Returns (transformed source points, matched target points, truncated
/// objective).
fn pair_up(
    src: &[Vector3<f64>],
    index: &SpatialIndex,
    current: &RigidTransform,
    cap_sq: f64,
) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>, f64) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut total = 0.0;
    for p in src {
        let q = current.apply_point(p);
        match index.nearest(&q) {
            Some((j, d2)) if d2 <= cap_sq => {
                xs.push(q);
                ys.push(index.position(j));
                total += d2;
            }
            _ => total += cap_sq,
        }
    }
    (xs, ys, total / src.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{synth_scene, SceneConfig};
    use deepicp_core::{Point, RegistrationError};

    fn static_scene() -> PointCloud {
        let cfg = SceneConfig {
            dynamic_clusters: 0,
            jitter: 0.0,
            ..SceneConfig::default()
        };
        synth_scene(&cfg).unwrap().source
    }

    #[test]
    fn identical_clouds_converge_immediately() {
        let cloud = static_scene();
        let out = icp_point2point(&cloud, &cloud, &RigidTransform::identity(), &IcpConfig::default()).unwrap();
        let err = RegistrationError::between(&out.transform, &RigidTransform::identity());
        assert!(err.angular < 1e-9 && err.translational < 1e-9, "{err:?}");
        assert_eq!(out.iterations, 1);
        assert!(out.converged);
    }

    #[test]
    fn recovers_small_motion() {
        let cloud = static_scene();
        let truth = RigidTransform::from_roll_pitch_yaw(
            Vector3::new(0.2, -0.15, 0.1),
            0.5f64.to_radians(),
            -0.5f64.to_radians(),
            2f64.to_radians(),
        );
        let moved = truth.apply(&cloud);
        let out = icp_point2point(&cloud, &moved, &RigidTransform::identity(), &IcpConfig::default()).unwrap();
        let err = RegistrationError::between(&out.transform, &truth);
        assert!(err.translational <= 1e-3 && err.angular <= 0.01, "{err:?}");
        assert!(out.objective.windows(2).all(|w| w[1] <= w[0] + 1e-15), "{:?}", out.objective);
    }

    #[test]
    fn disjoint_clouds_report_no_overlap() {
        let a = PointCloud::new((0..20).map(|i| Point::new(i as f64 * 0.1, 0.0, (i % 3) as f64, 0.5)).collect()).unwrap();
        let b = a.translated(&Vector3::new(100.0, 0.0, 0.0));
        let cfg = IcpConfig {
            max_pair_dist: 1.0,
            ..IcpConfig::default()
        };
        let err = icp_point2point(&a, &b, &RigidTransform::identity(), &cfg).unwrap_err();
        assert!(matches!(err, BenchError::NoOverlap { .. }));
    }
}
