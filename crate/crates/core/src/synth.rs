//! Deterministic synthetic surfaces with implanted defects and exact
//! ground-truth labels, for tests and benchmarks at desk scale.
//!
//! A spec fully determines the output: the same `(spec, seed)` always
//! produces byte-identical clouds.

use nalgebra::{Point3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cloud::{LabelVector, PointCloud};
use crate::error::{Error, Result};

/// Base surface sampled on an n-by-n grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SurfaceKind {
    /// The plane z = 0.
    Plane,
    /// Upper cap of the sphere of this radius centered at the origin; the
    /// grid extent must fit strictly inside the radius.
    SphereCap { radius: f64 },
    /// The quadratic patch z = a x^2 + b y^2.
    QuadraticPatch { a: f64, b: f64 },
}

/// One Gaussian bump or dent: a displacement of signed `height` along the
/// surface normal with spatial envelope exp(-d^2 / (2 width^2)), where `d`
/// is the 3D distance to the defect center on the base surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DefectSpec {
    /// Grid-plane coordinates of the defect center (same units as spacing;
    /// the grid is centered on the origin).
    pub center_u: f64,
    pub center_v: f64,
    /// Signed peak displacement: positive bumps, negative dents.
    pub height: f64,
    /// Envelope width (standard deviation of the Gaussian profile).
    pub width: f64,
}

/// Full description of a synthetic sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub surface: SurfaceKind,
    /// Grid side; the cloud has n*n points.
    pub n: usize,
    pub spacing: f64,
    /// Standard deviation of Gaussian measurement noise applied along the
    /// surface normal.
    pub noise_sigma: f64,
    pub defects: Vec<DefectSpec>,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidParameter("grid side must be >= 2".into()));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::InvalidParameter("spacing must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidParameter(
                "noise sigma must be non-negative".into(),
            ));
        }
        let half_extent = self.half_extent();
        if let SurfaceKind::SphereCap { radius } = self.surface {
            let corner = half_extent * std::f64::consts::SQRT_2;
            if !(radius > corner) {
                return Err(Error::InvalidParameter(format!(
                    "sphere cap radius {radius} must exceed the grid corner distance {corner:.6}"
                )));
            }
        }
        for (i, d) in self.defects.iter().enumerate() {
            if !(d.width > 0.0) || d.height == 0.0 || !d.height.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "defect {i}: width must be positive and height nonzero"
                )));
            }
            if d.center_u.abs() > half_extent || d.center_v.abs() > half_extent {
                return Err(Error::InvalidParameter(format!(
                    "defect {i}: center ({}, {}) lies outside the half-extent {half_extent}",
                    d.center_u, d.center_v
                )));
            }
        }
        Ok(())
    }

    /// Half side length of the sampled grid.
    pub fn half_extent(&self) -> f64 {
        0.5 * (self.n - 1) as f64 * self.spacing
    }

    /// Grid-plane coordinates of point `(ix, iy)`, centered on the origin.
    fn uv(&self, ix: usize, iy: usize) -> (f64, f64) {
        let offset = 0.5 * (self.n - 1) as f64;
        (
            (ix as f64 - offset) * self.spacing,
            (iy as f64 - offset) * self.spacing,
        )
    }

    /// Base surface point and its exact unit normal at grid node (ix, iy).
    fn base(&self, ix: usize, iy: usize) -> (Point3<f64>, Vector3<f64>) {
        let (u, v) = self.uv(ix, iy);
        match self.surface {
            SurfaceKind::Plane => (Point3::new(u, v, 0.0), Vector3::z()),
            SurfaceKind::SphereCap { radius } => {
                let z = (radius * radius - u * u - v * v).sqrt();
                let p = Point3::new(u, v, z);
                (p, p.coords / radius)
            }
            SurfaceKind::QuadraticPatch { a, b } => {
                let p = Point3::new(u, v, a * u * u + b * v * v);
                let n = Vector3::new(-2.0 * a * u, -2.0 * b * v, 1.0).normalize();
                (p, n)
            }
        }
    }

    /// Sum of signed defect displacements at a base surface point.
    fn displacement_at(&self, p: Point3<f64>) -> f64 {
        let mut total = 0.0;
        for d in &self.defects {
            let center = self.center_of(d);
            let dist2 = (p - center).norm_squared();
            total += d.height * (-dist2 / (2.0 * d.width * d.width)).exp();
        }
        total
    }

    fn center_of(&self, d: &DefectSpec) -> Point3<f64> {
        let spec_at = SynthSpec {
            defects: Vec::new(),
            ..self.clone()
        };
        // Reuse the surface equations at an off-grid parameter location.
        match spec_at.surface {
            SurfaceKind::Plane => Point3::new(d.center_u, d.center_v, 0.0),
            SurfaceKind::SphereCap { radius } => {
                let z =
                    (radius * radius - d.center_u * d.center_u - d.center_v * d.center_v).sqrt();
                Point3::new(d.center_u, d.center_v, z)
            }
            SurfaceKind::QuadraticPatch { a, b } => Point3::new(
                d.center_u,
                d.center_v,
                a * d.center_u * d.center_u + b * d.center_v * d.center_v,
            ),
        }
    }

    /// Displacement magnitude above which a point is labeled anomalous:
    /// the larger of three noise sigmas and 5% of the tallest defect.
    pub fn label_threshold(&self) -> f64 {
        let max_height = self
            .defects
            .iter()
            .map(|d| d.height.abs())
            .fold(0.0, f64::max);
        (3.0 * self.noise_sigma).max(0.05 * max_height)
    }
}

/// Samples the base surface with normal-direction Gaussian noise. No
/// defects are applied here; see [`implant_defects`].
pub fn gen_surface(spec: &SynthSpec) -> Result<PointCloud> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut points = Vec::with_capacity(spec.n * spec.n);
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::InvalidParameter(format!("noise sigma: {e}")))?;
        for iy in 0..spec.n {
            for ix in 0..spec.n {
                let (p, normal) = spec.base(ix, iy);
                points.push(p + noise.sample(&mut rng) * normal);
            }
        }
    } else {
        for iy in 0..spec.n {
            for ix in 0..spec.n {
                points.push(spec.base(ix, iy).0);
            }
        }
    }
    PointCloud::new(points)
}

/// Displaces each point along its base-surface normal by the summed defect
/// envelopes and returns the displaced cloud plus exact labels. A point is
/// anomalous iff its total imposed displacement magnitude exceeds
/// [`SynthSpec::label_threshold`].
pub fn implant_defects(cloud: &PointCloud, spec: &SynthSpec) -> Result<(PointCloud, LabelVector)> {
    spec.validate()?;
    if cloud.len() != spec.n * spec.n {
        return Err(Error::LengthMismatch {
            left: cloud.len(),
            right: spec.n * spec.n,
        });
    }
    let threshold = spec.label_threshold();
    let mut points = Vec::with_capacity(cloud.len());
    let mut labels = Vec::with_capacity(cloud.len());
    for iy in 0..spec.n {
        for ix in 0..spec.n {
            let id = iy * spec.n + ix;
            let (base, normal) = spec.base(ix, iy);
            let disp = spec.displacement_at(base);
            points.push(cloud.point(id) + disp * normal);
            labels.push(disp.abs() > threshold);
        }
    }
    let cloud = PointCloud::with_labels(points, labels.clone())?;
    Ok((cloud, labels))
}

/// Generates a full labeled sample: base surface, noise, then defects.
pub fn generate(spec: &SynthSpec) -> Result<(PointCloud, LabelVector)> {
    let base = gen_surface(spec)?;
    implant_defects(&base, spec)
}

/// Draws a deterministic defect list for a spec: centers in the central
/// 60% of the grid, heights `0.4..0.7` of the extent-relative scale with
/// random sign, widths `1.3..1.7` spacings. Defect draws use a dedicated
/// RNG stream so they are independent of the noise draws.
pub fn random_defects(spec: &SynthSpec, count: usize) -> Vec<DefectSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_def3_c75a_11ed);
    let reach = 0.6 * spec.half_extent();
    (0..count)
        .map(|_| {
            let height_mag = spec.spacing * rng.random_range(0.4..0.7);
            let sign = if rng.random_range(0..2) == 0 { 1.0 } else { -1.0 };
            DefectSpec {
                center_u: rng.random_range(-reach..reach),
                center_v: rng.random_range(-reach..reach),
                height: sign * height_mag,
                width: spec.spacing * rng.random_range(1.3..1.7),
            }
        })
        .collect()
}
