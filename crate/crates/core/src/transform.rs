use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};

use crate::{GeomError, Point, PointCloud, Result};

const ROTATION_TOLERANCE: f64 = 1e-9;

/// Rigid motion `p -> R p + t` mapping source coordinates into the target frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Checks `RᵀR = I` and `det R = +1` to within 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let residual = rotation_residual(&rotation);
        if !translation.iter().all(|v| v.is_finite()) || !(residual <= ROTATION_TOLERANCE) {
            return Err(GeomError::InvalidRotation { residual });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Projects `rotation` onto SO(3) before constructing. Returns the
    /// transform and the pre-projection residual so callers can flag drift.
    pub fn new_orthonormalized(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<(Self, f64)> {
        let residual = rotation_residual(&rotation);
        let projected = project_to_rotation(&rotation)?;
        Ok((Self::new(projected, translation)?, residual))
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Roll about x, then pitch about y, then yaw about z (angles in radians):
    /// `R = Rz(yaw) Ry(pitch) Rx(roll)`.
    pub fn from_roll_pitch_yaw(translation: Vector3<f64>, roll: f64, pitch: f64, yaw: f64) -> Self {
        let rotation = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw)
            * Rotation3::from_axis_angle(&Vector3::y_axis(), pitch)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), roll);
        Self {
            rotation: *rotation.matrix(),
            translation,
        }
    }

    /// Rotation of `angle` radians about a (not necessarily unit) axis.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rotation = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        Self {
            rotation: *rotation.matrix(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `(roll, pitch, yaw)` in radians, inverse of [`Self::from_roll_pitch_yaw`].
    pub fn roll_pitch_yaw(&self) -> (f64, f64, f64) {
        Rotation3::from_matrix_unchecked(self.rotation).euler_angles()
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Transforms every point; intensities are carried over unchanged.
    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud::from_points_unchecked(
            cloud
                .iter()
                .map(|p| Point::from_position(self.apply_point(&p.position), p.intensity))
                .collect(),
        )
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major 3×4 `[R | t]`, the layout of odometry pose files.
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }
}

/// max(‖RᵀR − I‖_max, |det R − 1|)
pub(crate) fn rotation_residual(r: &Matrix3<f64>) -> f64 {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = (r.determinant() - 1.0).abs();
    let res = ortho.max(det);
    if res.is_finite() {
        res
    } else {
        f64::INFINITY
    }
}

fn project_to_rotation(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let (u, _, v) = crate::kabsch::sorted_svd(m).map_err(|_| GeomError::InvalidRotation {
        residual: f64::INFINITY,
    })?;
    let d = (u * v.transpose()).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    Ok(u * fix * v.transpose())
}
