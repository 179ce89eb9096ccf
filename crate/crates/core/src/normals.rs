//! Surface normal estimation by neighborhood PCA, plus the scalar
//! point-to-local-plane residual used as the emission statistic of the
//! latent-variable detector.

use nalgebra::{Matrix3, Point3, Vector3};
use rayon::prelude::*;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::index::{Neighbor, NeighborhoodIndex};

/// Ratio of the middle to the largest covariance eigenvalue below which a
/// neighborhood is treated as collinear.
const DEGENERACY_RATIO: f64 = 1e-12;

/// Deterministic sign rule for estimated normals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OrientationRule {
    /// Flip each normal so that `n . v >= 0` for the fixed direction `v`.
    Viewpoint(Vector3<f64>),
    /// Flip each normal so it points away from a fixed interior point.
    OutwardFrom(Point3<f64>),
}

impl Default for OrientationRule {
    fn default() -> Self {
        OrientationRule::Viewpoint(Vector3::z())
    }
}

/// One unit normal per point, with the ids of points whose neighborhoods
/// were too degenerate for PCA (those got the orientation fallback vector).
#[derive(Debug, Clone)]
pub struct UnitNormalField {
    normals: Vec<Vector3<f64>>,
    degenerate: Vec<usize>,
}

impl UnitNormalField {
    pub fn normal(&self, i: usize) -> Vector3<f64> {
        self.normals[i]
    }

    pub fn normals(&self) -> &[Vector3<f64>] {
        &self.normals
    }

    pub fn len(&self) -> usize {
        self.normals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normals.is_empty()
    }

    /// Ids of points that received the fallback normal, ascending.
    pub fn degenerate_ids(&self) -> &[usize] {
        &self.degenerate
    }

    /// Builds a field from externally supplied unit vectors (testing and
    /// synthetic-truth paths).
    pub fn from_vectors(normals: Vec<Vector3<f64>>) -> Self {
        Self {
            normals,
            degenerate: Vec::new(),
        }
    }
}

/// Estimates one unit normal per point as the smallest-eigenvalue direction
/// of the neighborhood covariance (the point itself included), oriented by
/// `rule`.
pub fn estimate_normals(
    cloud: &PointCloud,
    index: &NeighborhoodIndex,
    rule: OrientationRule,
) -> Result<UnitNormalField> {
    let neighborhoods = gather_neighborhoods(cloud, index, 3)?;
    let results: Vec<(Vector3<f64>, bool)> = neighborhoods
        .par_iter()
        .enumerate()
        .map(|(i, neigh)| {
            let p = cloud.point(i);
            let fallback = fallback_direction(rule, p);
            match pca_normal(cloud, neigh, Some(p)) {
                Some(raw) => (orient(raw, rule, p), false),
                None => (fallback, true),
            }
        })
        .collect();

    let mut normals = Vec::with_capacity(results.len());
    let mut degenerate = Vec::new();
    for (i, (n, flag)) in results.into_iter().enumerate() {
        normals.push(n);
        if flag {
            degenerate.push(i);
        }
    }
    Ok(UnitNormalField {
        normals,
        degenerate,
    })
}

/// Absolute distance from point `i` to the total-least-squares plane of its
/// neighbors (the point itself excluded from both the centroid and the PCA).
/// Falls back to the supplied normal direction when the neighbors alone are
/// degenerate.
pub fn local_plane_residual(
    cloud: &PointCloud,
    index: &NeighborhoodIndex,
    normals: &UnitNormalField,
    i: usize,
) -> Result<f64> {
    let neigh = index.neighbors(i)?;
    if neigh.len() < 3 {
        return Err(Error::TooFewNeighbors {
            ids: vec![i],
            count: 1,
            required: 3,
        });
    }
    Ok(residual_for(cloud, normals, i, &neigh))
}

/// Residuals for every point; the batched form of [`local_plane_residual`].
pub fn plane_residuals(
    cloud: &PointCloud,
    index: &NeighborhoodIndex,
    normals: &UnitNormalField,
) -> Result<Vec<f64>> {
    let neighborhoods = gather_neighborhoods(cloud, index, 3)?;
    Ok(neighborhoods
        .par_iter()
        .enumerate()
        .map(|(i, neigh)| residual_for(cloud, normals, i, neigh))
        .collect())
}

fn residual_for(
    cloud: &PointCloud,
    normals: &UnitNormalField,
    i: usize,
    neigh: &[Neighbor],
) -> f64 {
    let centroid = neighborhood_centroid(cloud, neigh);
    let direction = match pca_normal_of_neighbors(cloud, neigh, centroid) {
        Some(n) => n,
        None => normals.normal(i),
    };
    direction.dot(&(cloud.point(i) - centroid)).abs()
}

fn gather_neighborhoods(
    cloud: &PointCloud,
    index: &NeighborhoodIndex,
    required: usize,
) -> Result<Vec<Vec<Neighbor>>> {
    let lists: Vec<Result<Vec<Neighbor>>> = (0..cloud.len())
        .into_par_iter()
        .map(|i| index.neighbors(i))
        .collect();
    let mut out = Vec::with_capacity(lists.len());
    let mut short = Vec::new();
    for (i, list) in lists.into_iter().enumerate() {
        let list = list?;
        if list.len() < required {
            short.push(i);
        }
        out.push(list);
    }
    if !short.is_empty() {
        let count = short.len();
        short.truncate(8);
        return Err(Error::TooFewNeighbors {
            ids: short,
            count,
            required,
        });
    }
    Ok(out)
}

fn neighborhood_centroid(cloud: &PointCloud, neigh: &[Neighbor]) -> Point3<f64> {
    let mut sum = Vector3::zeros();
    for n in neigh {
        sum += cloud.point(n.id).coords;
    }
    Point3::from(sum / neigh.len() as f64)
}

/// Smallest-eigenvalue direction of the covariance of `neigh` (optionally
/// including one extra point). `None` when the neighborhood is collinear or
/// collapsed.
fn pca_normal(
    cloud: &PointCloud,
    neigh: &[Neighbor],
    include: Option<Point3<f64>>,
) -> Option<Vector3<f64>> {
    let count = neigh.len() + include.is_some() as usize;
    let mut sum = Vector3::zeros();
    for n in neigh {
        sum += cloud.point(n.id).coords;
    }
    if let Some(p) = include {
        sum += p.coords;
    }
    let centroid = sum / count as f64;

    let mut cov = Matrix3::zeros();
    for n in neigh {
        let d = cloud.point(n.id).coords - centroid;
        cov += d * d.transpose();
    }
    if let Some(p) = include {
        let d = p.coords - centroid;
        cov += d * d.transpose();
    }
    smallest_eigenvector(&cov)
}

fn pca_normal_of_neighbors(
    cloud: &PointCloud,
    neigh: &[Neighbor],
    centroid: Point3<f64>,
) -> Option<Vector3<f64>> {
    let mut cov = Matrix3::zeros();
    for n in neigh {
        let d = cloud.point(n.id) - centroid;
        cov += d * d.transpose();
    }
    smallest_eigenvector(&cov)
}

fn smallest_eigenvector(cov: &Matrix3<f64>) -> Option<Vector3<f64>> {
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let [small, mid, big] = order;
    let largest = eig.eigenvalues[big];
    if largest <= 0.0 || eig.eigenvalues[mid] <= DEGENERACY_RATIO * largest {
        return None;
    }
    Some(eig.eigenvectors.column(small).normalize())
}

fn fallback_direction(rule: OrientationRule, p: Point3<f64>) -> Vector3<f64> {
    match rule {
        OrientationRule::Viewpoint(v) => v.normalize(),
        OrientationRule::OutwardFrom(center) => {
            let d = p - center;
            if d.norm() > 0.0 {
                d.normalize()
            } else {
                Vector3::z()
            }
        }
    }
}

fn orient(mut n: Vector3<f64>, rule: OrientationRule, p: Point3<f64>) -> Vector3<f64> {
    let reference = match rule {
        OrientationRule::Viewpoint(v) => v,
        OrientationRule::OutwardFrom(center) => p - center,
    };
    let dot = n.dot(&reference);
    if dot < 0.0 {
        n = -n;
    } else if dot == 0.0 {
        // Canonical sign when the hemisphere rule is ambiguous: first
        // nonzero component positive.
        for a in 0..3 {
            if n[a] != 0.0 {
                if n[a] < 0.0 {
                    n = -n;
                }
                break;
            }
        }
    }
    n
}
