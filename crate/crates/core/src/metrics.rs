use nalgebra::{Matrix3, Vector3};

/// Angular (degrees) and translational (meters) error of an estimate
/// against ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistrationError {
    pub angular: f64,
    pub translational: f64,
}

impl RegistrationError {
    pub fn between(estimate: &crate::RigidTransform, truth: &crate::RigidTransform) -> Self {
        Self {
            angular: angular_error(estimate.rotation(), truth.rotation()),
            translational: translational_error(estimate.translation(), truth.translation()),
        }
    }
}

/// Chordal angle `2·asin(‖R − R̄‖_F / √8)` in degrees. The ratio is clamped to
/// `[0, 1]` so rounding cannot push it outside the domain of `asin`.
pub fn angular_error(r: &Matrix3<f64>, r_bar: &Matrix3<f64>) -> f64 {
    let chord = (r - r_bar).norm();
    let ratio = (chord / 8f64.sqrt()).clamp(0.0, 1.0);
    (2.0 * ratio.asin()).to_degrees()
}

pub fn translational_error(t: &Vector3<f64>, t_bar: &Vector3<f64>) -> f64 {
    (t - t_bar).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::RigidTransform;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
        let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        *RigidTransform::from_axis_angle(axis, rng.gen_range(0.0..std::f64::consts::PI), Vector3::zeros()).rotation()
    }

    #[test]
    fn identical_rotations_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = random_rotation(&mut rng);
        assert_eq!(angular_error(&r, &r), 0.0);
    }

    #[test]
    fn single_axis_angle_recovered() {
        for deg in [1.0f64, 10.0, 45.0, 90.0, 135.0, 180.0] {
            let r = RigidTransform::from_axis_angle(Vector3::z(), deg.to_radians(), Vector3::zeros());
            let err = angular_error(r.rotation(), &Matrix3::identity());
            assert!((err - deg).abs() < 1e-9, "{deg}: {err}");
        }
    }

    #[test]
    fn matches_trace_formula_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let a = random_rotation(&mut rng);
            let b = random_rotation(&mut rng);
            let cos = (((a * b.transpose()).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
            let oracle = cos.acos().to_degrees();
            let got = angular_error(&a, &b);
            assert!((got - oracle).abs() < 1e-6, "{got} vs {oracle}");
            assert_eq!(got, angular_error(&b, &a));
        }
    }

    #[test]
    fn translation_norm() {
        assert_eq!(translational_error(&Vector3::new(1.0, 2.0, 3.0), &Vector3::new(1.0, 2.0, 3.0)), 0.0);
        assert_eq!(translational_error(&Vector3::new(1.0, 0.0, 0.0), &Vector3::zeros()), 1.0);
        let a = Vector3::new(0.3, -1.2, 4.0);
        let b = Vector3::new(-2.0, 0.5, 1.0);
        let oracle = ((0.3f64 + 2.0).powi(2) + (-1.2f64 - 0.5).powi(2) + 3.0f64.powi(2)).sqrt();
        assert!((translational_error(&a, &b) - oracle).abs() < 1e-15);
    }
}
