//! Velodyne-style frame binaries: little-endian f32 quadruples
//! `(x, y, z, intensity)`.

use std::path::Path;

use deepicp_core::{Point, PointCloud};

use crate::{CliError, Result};

const RECORD: usize = 16;

/// Decodes a frame. Intensities are clamped to `[0, 1]`.
pub fn parse_frame(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    if bytes.is_empty() {
        return Err(CliError::malformed(path, "empty frame"));
    }
    if !bytes.len().is_multiple_of(RECORD) {
        let whole = bytes.len() / RECORD * RECORD;
        return Err(CliError::malformed(
            path,
            format!(
                "truncated record at byte offset {whole}: length {} is not a multiple of {RECORD}",
                bytes.len()
            ),
        ));
    }
    let mut points = Vec::with_capacity(bytes.len() / RECORD);
    for (i, rec) in bytes.chunks_exact(RECORD).enumerate() {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap()) as f64;
        let (x, y, z, intensity) = (f(0), f(1), f(2), f(3));
        if ![x, y, z, intensity].iter().all(|v| v.is_finite()) {
            return Err(CliError::malformed(
                path,
                format!("non-finite value in record {i} at byte offset {}", i * RECORD),
            ));
        }
        points.push(Point::new(x, y, z, intensity.clamp(0.0, 1.0)));
    }
    Ok(PointCloud::new(points)?)
}

pub fn read_frame_bin(path: &Path) -> Result<PointCloud> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    parse_frame(&bytes, path)
}

/// Encodes a cloud; coordinates are rounded to f32.
pub fn encode_frame(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * RECORD);
    for p in cloud.iter() {
        for v in [p.position.x, p.position.y, p.position.z, p.intensity] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_frame_bin(cloud: &PointCloud, path: &Path) -> Result<()> {
    std::fs::write(path, encode_frame(cloud)).map_err(|e| CliError::io(path, e))
}
