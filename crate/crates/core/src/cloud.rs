use nalgebra::Vector3;

use crate::{GeomError, Result};

/// A LiDAR return: position in meters plus reflectance in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub position: Vector3<f64>,
    pub intensity: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Self {
            position: Vector3::new(x, y, z),
            intensity,
        }
    }

    pub fn from_position(position: Vector3<f64>, intensity: f64) -> Self {
        Self {
            position,
            intensity,
        }
    }
}

/// An unordered set of points. Point order is kept stable so that indices
/// can address per-point data (features, weights) held elsewhere.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    /// Validates finiteness and intensity range. An empty cloud is a valid
    /// value; operations that need points reject it themselves.
    pub fn new(points: Vec<Point>) -> Result<Self> {
        for (index, p) in points.iter().enumerate() {
            if !p.position.iter().all(|c| c.is_finite()) || !p.intensity.is_finite() {
                return Err(GeomError::NonFinite { index });
            }
            if !(0.0..=1.0).contains(&p.intensity) {
                return Err(GeomError::Intensity {
                    index,
                    value: p.intensity,
                });
            }
        }
        Ok(Self { points })
    }

    pub fn from_positions(positions: impl IntoIterator<Item = Vector3<f64>>) -> Result<Self> {
        Self::new(
            positions
                .into_iter()
                .map(|p| Point::from_position(p, 0.0))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn point(&self, index: usize) -> &Point {
        &self.points[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Point> {
        self.points.iter()
    }

    pub fn positions(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        self.points.iter().map(|p| p.position)
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn ensure_non_empty(&self) -> Result<()> {
        if self.points.is_empty() {
            Err(GeomError::EmptyCloud)
        } else {
            Ok(())
        }
    }

    /// Cloud with every point shifted by `offset`.
    pub fn translated(&self, offset: &Vector3<f64>) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| Point::from_position(p.position + offset, p.intensity))
                .collect(),
        }
    }

    /// Subset by index, in the order given.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
        }
    }

    /// Concatenation of two clouds.
    pub fn merged(&self, other: &PointCloud) -> Self {
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        Self { points }
    }

    pub(crate) fn from_points_unchecked(points: Vec<Point>) -> Self {
        Self { points }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_nan_and_bad_intensity() {
        let nan = PointCloud::new(vec![Point::new(0.0, f64::NAN, 0.0, 0.1)]);
        assert_eq!(nan, Err(GeomError::NonFinite { index: 0 }));
        let bright = PointCloud::new(vec![Point::new(0.0, 0.0, 0.0, 0.0), Point::new(0.0, 0.0, 0.0, 1.5)]);
        assert!(matches!(bright, Err(GeomError::Intensity { index: 1, .. })));
    }

    #[test]
    fn empty_is_value_but_not_usable() {
        let c = PointCloud::new(vec![]).unwrap();
        assert_eq!(c.ensure_non_empty(), Err(GeomError::EmptyCloud));
    }
}
