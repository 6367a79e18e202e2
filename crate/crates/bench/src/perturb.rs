use deepicp_core::{RigidTransform, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{BenchError, Result};

/// Per-axis uniform noise ranges: translation in meters, rotation in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbConfig {
    pub translation_range: f64,
    pub rotation_range_deg: f64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            translation_range: 1.0,
            rotation_range_deg: 1.0,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.translation_range >= 0.0) || !(self.rotation_range_deg >= 0.0) {
            return Err(BenchError::Config(format!("negative perturbation range in {self:?}")));
        }
        Ok(())
    }
}

/// Draws offsets `tx, ty, tz ~ U[0, translation_range]` and
/// `roll, pitch, yaw ~ U[0, rotation_range]`, in that order, and applies them
/// to the ground truth: the noise rotation left-multiplies the ground-truth
/// rotation and the offset adds to its translation, so the translational
/// error of the prior is exactly the offset norm.
pub fn perturb(truth: &RigidTransform, config: &PerturbConfig, rng: &mut impl Rng) -> Result<RigidTransform> {
    config.validate()?;
    let mut draw = |range: f64| if range > 0.0 { rng.gen_range(0.0..=range) } else { 0.0 };
    let offset = Vector3::new(
        draw(config.translation_range),
        draw(config.translation_range),
        draw(config.translation_range),
    );
    let r = config.rotation_range_deg;
    let (roll, pitch, yaw) = (draw(r).to_radians(), draw(r).to_radians(), draw(r).to_radians());
    let noise = RigidTransform::from_roll_pitch_yaw(Vector3::zeros(), roll, pitch, yaw);
    Ok(RigidTransform::new_orthonormalized(
        noise.rotation() * truth.rotation(),
        truth.translation() + offset,
    )?
    .0)
}

pub fn perturb_seeded(truth: &RigidTransform, config: &PerturbConfig, seed: u64) -> Result<RigidTransform> {
    perturb(truth, config, &mut ChaCha8Rng::seed_from_u64(seed))
}
