//! Pose files: one line per frame, twelve numbers forming the row-major
//! 3×4 matrix `[R | t]`.

use std::path::Path;

use deepicp_core::{Matrix3, RigidTransform, Vector3};

use crate::{CliError, Result};

/// Rotations further than this from orthonormal are re-projected.
pub const DRIFT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseRecord {
    pub transform: RigidTransform,
    /// The stored rotation drifted beyond [`DRIFT_TOLERANCE`] and was
    /// re-orthonormalized.
    pub reorthonormalized: bool,
}

/// Parses one pose line; `line_no` is 1-based and only used in messages.
pub fn parse_pose_line(line: &str, line_no: usize, path: &Path) -> Result<PoseRecord> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 12 {
        return Err(CliError::malformed(
            path,
            format!("line {line_no}: expected 12 fields, found {}", fields.len()),
        ));
    }
    let mut v = [0.0; 12];
    for (k, f) in fields.iter().enumerate() {
        v[k] = f
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| CliError::malformed(path, format!("line {line_no}: field {} `{f}` is not a number", k + 1)))?;
    }
    let rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
    let translation = Vector3::new(v[3], v[7], v[11]);
    // Printed poses carry rounding well above the exact-rotation tolerance;
    // that is projected silently, real drift is flagged.
    let (projected, residual) = RigidTransform::new_orthonormalized(rotation, translation)
        .map_err(|e| CliError::malformed(path, format!("line {line_no}: {e}")))?;
    let transform = RigidTransform::new(rotation, translation).unwrap_or(projected);
    Ok(PoseRecord {
        transform,
        reorthonormalized: residual > DRIFT_TOLERANCE,
    })
}

/// Parses a whole pose file. Blank lines are not allowed between poses.
pub fn parse_poses(text: &str, path: &Path) -> Result<Vec<PoseRecord>> {
    let lines: Vec<&str> = text.trim_end().lines().collect();
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| parse_pose_line(l, i + 1, path))
        .collect()
}

pub fn read_poses(path: &Path) -> Result<Vec<PoseRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_poses(&text, path)
}

/// Twelve numbers, shortest round-trip formatting.
pub fn format_pose(t: &RigidTransform) -> String {
    t.to_row_major_3x4()
        .iter()
        .map(|v| format!("{v}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn write_poses(poses: &[RigidTransform], path: &Path) -> Result<()> {
    let mut text = String::new();
    for p in poses {
        text.push_str(&format_pose(p));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Six numbers `tx ty tz roll pitch yaw` (meters, degrees), roll applied
/// first.
pub fn parse_six_dof(text: &str) -> Result<RigidTransform> {
    let values: Vec<f64> = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| CliError::Usage(format!("`{s}` is not a number"))))
        .collect::<Result<_>>()?;
    if values.len() != 6 || values.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Usage(format!(
            "expected six finite numbers `tx ty tz roll pitch yaw`, got `{text}`"
        )));
    }
    Ok(RigidTransform::from_roll_pitch_yaw(
        Vector3::new(values[0], values[1], values[2]),
        values[3].to_radians(),
        values[4].to_radians(),
        values[5].to_radians(),
    ))
}
