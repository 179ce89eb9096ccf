use nalgebra::{Matrix3, Vector3};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

const ORTHONORMALITY_TOL: f64 = 1e-9;

/// Applies the proper rigid motion `p -> R p + t` to every point, preserving
/// order and any attached labels.
pub fn rigid_transform(
    cloud: &PointCloud,
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
) -> Result<PointCloud> {
    validate_rotation(rotation)?;
    let points = cloud
        .points()
        .iter()
        .map(|p| rotation * p + translation)
        .collect();
    match cloud.labels() {
        Some(labels) => PointCloud::with_labels(points, labels.clone()),
        None => PointCloud::new(points),
    }
}

/// Checks `R^T R = I` within 1e-9 and `det R = +1`.
pub fn validate_rotation(rotation: &Matrix3<f64>) -> Result<()> {
    let gram = rotation.transpose() * rotation;
    let deviation = (gram - Matrix3::identity()).abs().max();
    if deviation > ORTHONORMALITY_TOL || (rotation.determinant() - 1.0).abs() > ORTHONORMALITY_TOL
    {
        return Err(Error::InvalidRotation);
    }
    Ok(())
}
