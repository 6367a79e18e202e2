use nalgebra::{Matrix3, Vector3};

use crate::{GeomError, Result, RigidTransform};

/// Outcome of a weighted least-squares rigid fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KabschSolution {
    pub transform: RigidTransform,
    /// The unconstrained optimum was a reflection and the smallest singular
    /// direction was flipped.
    pub reflection_corrected: bool,
    /// The cross-covariance has rank below two (collinear or coincident
    /// points), so the rotation about the degenerate axis is arbitrary.
    pub rank_deficient: bool,
}

/// Minimizes `Σ wᵢ ‖yᵢ − (R xᵢ + t)‖²` over rigid motions.
///
/// Weights need not be normalized but must be non-negative with a positive
/// sum.
pub fn weighted_kabsch(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    weights: &[f64],
) -> Result<KabschSolution> {
    let n = source.len();
    if target.len() != n || weights.len() != n {
        return Err(GeomError::InvalidArgument(format!(
            "{} source points, {} target points, {} weights",
            n,
            target.len(),
            weights.len()
        )));
    }
    if n < 3 {
        return Err(GeomError::InvalidArgument(format!("{n} correspondences, need at least 3")));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(GeomError::InvalidArgument("weights must be finite and non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(GeomError::InvalidArgument("weights sum to zero".into()));
    }

    let mut x_bar = Vector3::zeros();
    let mut y_bar = Vector3::zeros();
    for ((x, y), w) in source.iter().zip(target).zip(weights) {
        x_bar += x * (w / total);
        y_bar += y * (w / total);
    }
    let mut h = Matrix3::zeros();
    for ((x, y), w) in source.iter().zip(target).zip(weights) {
        h += (x - x_bar) * (y - y_bar).transpose() * (w / total);
    }

    let (u, s, v) = sorted_svd(&h)?;
    let d = (v * u.transpose()).determinant();
    let sign = if d < 0.0 { -1.0 } else { 1.0 };
    let rotation = refine(
        v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign)) * u.transpose(),
        &h,
    );
    let translation = y_bar - rotation * x_bar;
    let (transform, _) = RigidTransform::new_orthonormalized(rotation, translation)?;
    Ok(KabschSolution {
        transform,
        reflection_corrected: sign < 0.0,
        rank_deficient: s[1] <= 1e-12 * s[0].max(f64::MIN_POSITIVE),
    })
}

/// One Newton step towards the stationary rotation: `Rᵀ Hᵀ` must be
/// symmetric at the optimum. Skipped when the correction is ill-posed.
fn refine(rotation: Matrix3<f64>, h: &Matrix3<f64>) -> Matrix3<f64> {
    let s = rotation.transpose() * h.transpose();
    let skew = Vector3::new(s[(2, 1)] - s[(1, 2)], s[(0, 2)] - s[(2, 0)], s[(1, 0)] - s[(0, 1)]) * 0.5;
    let sym = (s + s.transpose()) * 0.5;
    let a = Matrix3::identity() * sym.trace() - sym;
    let scale = sym.norm().max(f64::MIN_POSITIVE);
    match a.try_inverse() {
        Some(inv) if a.determinant().abs() > 1e-6 * scale.powi(3) => {
            let w = inv * skew * 2.0;
            let step = nalgebra::Rotation3::new(w);
            rotation * step.matrix()
        }
        _ => rotation,
    }
}

/// `M = U diag(s) Vᵀ` with singular values in descending order.
pub(crate) fn sorted_svd(m: &Matrix3<f64>) -> Result<(Matrix3<f64>, Vector3<f64>, Matrix3<f64>)> {
    let svd = m.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(GeomError::InvalidArgument("SVD did not converge".into())),
    };
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let v = v_t.transpose();
    let mut su = Matrix3::zeros();
    let mut sv = Matrix3::zeros();
    let mut ss = Vector3::zeros();
    for (dst, &src) in order.iter().enumerate() {
        su.set_column(dst, &u.column(src));
        sv.set_column(dst, &v.column(src));
        ss[dst] = svd.singular_values[src];
    }
    Ok((su, ss, sv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::RegistrationError;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(-3.0..3.0)))
            .collect()
    }

    #[test]
    fn identical_sets_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_points(&mut rng, 10);
        let sol = weighted_kabsch(&pts, &pts, &[1.0; 10]).unwrap();
        let err = RegistrationError::between(&sol.transform, &RigidTransform::identity());
        assert!(err.angular < 1e-9 && err.translational < 1e-12);
        assert!(!sol.reflection_corrected);
    }

    #[test]
    fn recovers_known_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let n = rng.gen_range(3..=64);
            let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let truth = RigidTransform::from_axis_angle(
                axis,
                rng.gen_range(-3.1..3.1),
                Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)),
            );
            let x = random_points(&mut rng, n);
            let y: Vec<_> = x.iter().map(|p| truth.apply_point(p)).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..5.0)).collect();
            let sol = weighted_kabsch(&x, &y, &w).unwrap();
            let err = RegistrationError::between(&sol.transform, &truth);
            assert!(err.angular <= 1e-7 && err.translational <= 1e-9, "{err:?}");
        }
    }

    #[test]
    fn negligible_outlier_barely_moves_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = RigidTransform::from_roll_pitch_yaw(Vector3::new(1.0, -2.0, 0.5), 0.1, -0.2, 0.7);
        let mut x = random_points(&mut rng, 12);
        let mut y: Vec<_> = x.iter().map(|p| truth.apply_point(p)).collect();
        let exact = weighted_kabsch(&x, &y, &[1.0; 12]).unwrap().transform;
        x.push(Vector3::new(0.0, 0.0, 0.0));
        y.push(Vector3::new(100.0, -80.0, 40.0));
        let mut w = vec![1.0; 12];
        w.push(1e-9);
        let perturbed = weighted_kabsch(&x, &y, &w).unwrap().transform;
        let err = RegistrationError::between(&perturbed, &exact);
        assert!(err.angular < 1e-6 && err.translational < 1e-6, "{err:?}");
    }

    #[test]
    fn planar_reflection_is_corrected() {
        // A mirrored point set: the best orthogonal map is a reflection.
        let x = vec![
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(1.0, 1.0, 1.0),
        ];
        let y: Vec<_> = x.iter().map(|p| Vector3::new(p.x, p.y, -p.z)).collect();
        let sol = weighted_kabsch(&x, &y, &[1.0; 4]).unwrap();
        assert!(sol.reflection_corrected);
        assert!((sol.transform.rotation().determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_input_is_flagged() {
        let x: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let sol = weighted_kabsch(&x, &x, &[1.0; 5]).unwrap();
        assert!(sol.rank_deficient);
    }

    #[test]
    fn rejects_bad_input() {
        let x = vec![Vector3::zeros(); 2];
        assert!(weighted_kabsch(&x, &x, &[1.0; 2]).is_err());
        let x = vec![Vector3::zeros(); 3];
        assert!(weighted_kabsch(&x, &x, &[0.0; 3]).is_err());
        assert!(weighted_kabsch(&x, &x, &[1.0, -1.0, 1.0]).is_err());
    }
}
