use nalgebra::Point3;

use crate::error::{Error, Result};

/// Per-point binary labels: `true` marks a point as anomalous.
pub type LabelVector = Vec<bool>;

/// An unordered set of 3D points, stored in a fixed order so that ids,
/// labels and scores can refer back to it.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3<f64>>,
    labels: Option<LabelVector>,
    diameter: f64,
}

impl PointCloud {
    /// Builds a cloud, validating that it is non-empty, every coordinate is
    /// finite, and (for two or more points) not all points coincide.
    pub fn new(points: Vec<Point3<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        for (index, p) in points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(Error::NonFiniteCoordinate { index });
            }
        }
        let diameter = bbox_diagonal(&points);
        if points.len() >= 2 && diameter == 0.0 {
            return Err(Error::ZeroExtent);
        }
        Ok(Self {
            points,
            labels: None,
            diameter,
        })
    }

    /// As [`PointCloud::new`], attaching per-point ground-truth labels.
    pub fn with_labels(points: Vec<Point3<f64>>, labels: LabelVector) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::LengthMismatch {
                left: points.len(),
                right: labels.len(),
            });
        }
        let mut cloud = Self::new(points)?;
        cloud.labels = Some(labels);
        Ok(cloud)
    }

    /// Convenience constructor from coordinate triples.
    pub fn from_coords(coords: &[[f64; 3]]) -> Result<Self> {
        Self::new(
            coords
                .iter()
                .map(|c| Point3::new(c[0], c[1], c[2]))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn point(&self, i: usize) -> Point3<f64> {
        self.points[i]
    }

    /// Ground-truth labels, when the cloud carries them.
    pub fn labels(&self) -> Option<&LabelVector> {
        self.labels.as_ref()
    }

    pub fn set_labels(&mut self, labels: LabelVector) -> Result<()> {
        if labels.len() != self.points.len() {
            return Err(Error::LengthMismatch {
                left: self.points.len(),
                right: labels.len(),
            });
        }
        self.labels = Some(labels);
        Ok(())
    }

    /// Diagonal of the axis-aligned bounding box. Used as the length scale
    /// for data-dependent defaults (penalty smoothing, zero-row cutoffs,
    /// distance-weight floors).
    pub fn diameter(&self) -> f64 {
        self.diameter
    }
}

fn bbox_diagonal(points: &[Point3<f64>]) -> f64 {
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            min[a] = min[a].min(p[a]);
            max[a] = max[a].max(p[a]);
        }
    }
    let mut sq = 0.0;
    for a in 0..3 {
        let d = max[a] - min[a];
        sq += d * d;
    }
    sq.sqrt()
}
