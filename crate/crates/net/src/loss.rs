//! Training objectives: mean L1 residual of generated points, mean L1
//! residual of the solved pose applied to the keypoints, and their blend.

use deepicp_autodiff::{Graph, Var};
use deepicp_core::{RigidTransform, Vector3};

use crate::kabsch::{apply_pose, PoseVars};
use crate::layers::positions_tensor;
use crate::{NetError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.6 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(NetError::Config(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// `(1/N) Σ ‖ȳᵢ − yᵢ‖₁`.
pub fn mean_l1(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(NetError::InvalidArgument(format!(
            "{} vs {} points",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(p, q)| (p - q).abs().sum())
        .sum::<f64>()
        / a.len() as f64)
}

/// Residuals of the generated points `y: [N, 3]` against ground-truth
/// targets.
pub fn loss1(g: &mut Graph, y: Var, truth: &[Vector3<f64>]) -> Result<Var> {
    let n = g.value(y).leading();
    if n != truth.len() || n == 0 {
        return Err(NetError::InvalidArgument(format!(
            "{n} generated points, {} targets",
            truth.len()
        )));
    }
    let t = g.constant(positions_tensor(truth));
    let d = g.sub(t, y)?;
    let a = g.abs(d);
    let s = g.sum(a);
    Ok(g.scale(s, 1.0 / n as f64))
}

/// Residuals of `R xᵢ + T` from the graph pose against ground-truth targets.
pub fn loss2(
    g: &mut Graph,
    pose: &PoseVars,
    keypoints: &[Vector3<f64>],
    truth: &[Vector3<f64>],
) -> Result<Var> {
    if keypoints.len() != truth.len() || keypoints.is_empty() {
        return Err(NetError::InvalidArgument(format!(
            "{} keypoints, {} targets",
            keypoints.len(),
            truth.len()
        )));
    }
    let moved = apply_pose(g, pose, keypoints)?;
    loss1(g, moved, truth)
}

/// `α·l1 + (1 − α)·l2`.
pub fn combined_loss(g: &mut Graph, l1: Var, l2: Var, config: &LossConfig) -> Result<Var> {
    config.validate()?;
    let a = g.scale(l1, config.alpha);
    let b = g.scale(l2, 1.0 - config.alpha);
    Ok(g.add(a, b)?)
}

/// Ground-truth correspondences `R̄ xᵢ + T̄`.
pub fn ground_truth_targets(
    truth: &RigidTransform,
    keypoints: &[Vector3<f64>],
) -> Vec<Vector3<f64>> {
    keypoints.iter().map(|p| truth.apply_point(p)).collect()
}

#[cfg(test)]
mod tests {
    use deepicp_autodiff::gradcheck::{check_params, CheckConfig};
    use deepicp_autodiff::{ParameterStore, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::kabsch::kabsch_graph;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(-2.0..2.0)))
            .collect()
    }

    fn eval_loss1(y: &[Vector3<f64>], truth: &[Vector3<f64>]) -> f64 {
        let mut g = Graph::new();
        let yv = g.constant(positions_tensor(y));
        let l = loss1(&mut g, yv, truth).unwrap();
        g.value(l).item()
    }

    #[test]
    fn exact_points_cost_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_points(&mut rng, 7);
        assert_eq!(eval_loss1(&p, &p), 0.0);
    }

    #[test]
    fn single_residual_is_its_l1_norm() {
        let y = [Vector3::new(0.1, -0.2, 0.3)];
        assert!((eval_loss1(&y, &[Vector3::zeros()]) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn loss1_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = random_points(&mut rng, 20);
        let t = random_points(&mut rng, 20);
        let mut direct = 0.0;
        for (a, b) in y.iter().zip(&t) {
            direct += (a.x - b.x).abs() + (a.y - b.y).abs() + (a.z - b.z).abs();
        }
        assert!((eval_loss1(&y, &t) - direct / 20.0).abs() < 1e-12);
        assert!((mean_l1(&y, &t).unwrap() - direct / 20.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_sizes_are_rejected() {
        let mut g = Graph::new();
        let y = g.constant(positions_tensor(&[Vector3::zeros(); 2]));
        assert!(loss1(&mut g, y, &[Vector3::zeros(); 3]).is_err());
        assert!(mean_l1(&[Vector3::zeros()], &[]).is_err());
        assert!(LossConfig { alpha: 1.5 }.validate().is_err());
    }

    fn eval_loss2(
        keypoints: &[Vector3<f64>],
        generated: &[Vector3<f64>],
        truth: &RigidTransform,
    ) -> (f64, RigidTransform) {
        let mut g = Graph::new();
        let x = g.constant(positions_tensor(keypoints));
        let y = g.constant(positions_tensor(generated));
        let n = keypoints.len();
        let w = g.constant(Tensor::new(vec![n], vec![1.0 / n as f64; n]).unwrap());
        let pose = kabsch_graph(&mut g, x, y, w).unwrap();
        let targets = ground_truth_targets(truth, keypoints);
        let l = loss2(&mut g, &pose, keypoints, &targets).unwrap();
        let (r, t) = pose.values(&g);
        (g.value(l).item(), RigidTransform::new_orthonormalized(r, t).unwrap().0)
    }

    #[test]
    fn consistent_correspondences_give_zero_loss2() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = RigidTransform::from_roll_pitch_yaw(Vector3::new(3.0, -1.0, 0.2), 0.02, -0.01, 0.4);
        let x = random_points(&mut rng, 16);
        let y = ground_truth_targets(&truth, &x);
        assert!(eval_loss2(&x, &y, &truth).0 <= 1e-9);
    }

    #[test]
    fn loss2_matches_residuals_of_the_solved_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth = RigidTransform::from_roll_pitch_yaw(Vector3::new(1.0, 2.0, 0.0), 0.0, 0.0, 0.3);
        let x = random_points(&mut rng, 10);
        let y: Vec<Vector3<f64>> = ground_truth_targets(&truth, &x)
            .into_iter()
            .map(|p| p + Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)))
            .collect();
        let (l, solved) = eval_loss2(&x, &y, &truth);
        let moved: Vec<Vector3<f64>> = x.iter().map(|p| solved.apply_point(p)).collect();
        let want = mean_l1(&moved, &ground_truth_targets(&truth, &x)).unwrap();
        assert!((l - want).abs() < 1e-9);
        assert!(l > 0.0);
    }

    #[test]
    fn loss2_gradient_wrt_generated_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth = RigidTransform::from_roll_pitch_yaw(Vector3::new(0.5, 0.0, 0.1), 0.01, 0.02, -0.2);
        let x = random_points(&mut rng, 10);
        let targets = ground_truth_targets(&truth, &x);
        let y: Vec<Vector3<f64>> = targets
            .iter()
            .map(|p| p + Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)))
            .collect();
        let mut store = ParameterStore::new();
        store.insert("y", positions_tensor(&y), true).unwrap();
        let report = check_params(
            &store,
            &["y"],
            |g, s| {
                let xv = g.constant(positions_tensor(&x));
                let yv = g.param(s, "y")?;
                let w = g.constant(Tensor::new(vec![10], vec![0.1; 10])?);
                let pose = kabsch_graph(g, xv, yv, w).unwrap();
                Ok(loss2(g, &pose, &x, &targets).unwrap())
            },
            CheckConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-3, "{report:?}");
    }

    #[test]
    fn combined_loss_is_the_affine_blend() {
        let blend = |alpha: f64, a: f64, b: f64| {
            let mut g = Graph::new();
            let l1 = g.constant(Tensor::scalar(a));
            let l2 = g.constant(Tensor::scalar(b));
            let l = combined_loss(&mut g, l1, l2, &LossConfig { alpha }).unwrap();
            g.value(l).item()
        };
        assert_eq!(blend(1.0, 0.37, 5.0), 0.37);
        assert_eq!(blend(0.0, 0.37, 5.0), 5.0);
        assert!((blend(0.6, 1.0, 2.0) - 1.4).abs() < 1e-15);
    }
}
