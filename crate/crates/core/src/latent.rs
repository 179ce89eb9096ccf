//! Latent-variable anomaly inference.
//!
//! Each point carries a hidden binary type (reference surface vs anomaly).
//! Two observables feed the model: the point's local-plane residual `r_i`,
//! and per-edge smoothness `d_ij = ||K_i - K_j||_F^2` between the
//! structure-aware tensors of neighboring points. The joint factorizes as
//!
//! ```text
//! p(r, d, C) = prod_i p(r_i | c_i) p(c_i) prod_{j in N_i} p(d_ij | c_i, c_j)
//! ```
//!
//! with half-normal residual emissions (scale `sigma0` for reference
//! points, `sigma1 > sigma0` for anomalies), exponential edge emissions
//! (rate `beta_s` when both endpoints are reference, `beta_d` otherwise),
//! and a Bernoulli prior `pi`. The posterior over types is approximated by
//! a fully factorized distribution `q(C) = prod_i q(c_i)` fitted by
//! mean-field variational EM: coordinate-ascent sweeps on the per-point
//! probabilities `gamma_i` alternate with closed-form M-step updates, and
//! the evidence bound never decreases.
//!
//! The distribution families are a modeling choice of this library: both
//! observables are non-negative, and the half-normal/exponential pair
//! yields closed-form M-steps.

use nalgebra::Matrix3;
use rayon::prelude::*;

use crate::cloud::LabelVector;
use crate::error::{Error, Result};
use crate::index::NeighborhoodIndex;
use crate::normals::UnitNormalField;

/// Symmetric positive-semidefinite 3x3 tensor normalized to unit trace,
/// summarizing the normal directions around a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructureTensor(Matrix3<f64>);

impl StructureTensor {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Wraps a matrix, enforcing symmetry and unit trace.
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let asym = (m - m.transpose()).abs().max();
        if asym > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "structure tensor must be symmetric (asymmetry {asym:.3e})"
            )));
        }
        let trace = m.trace();
        if !(trace > 0.0) {
            return Err(Error::InvalidParameter(
                "structure tensor must have positive trace".into(),
            ));
        }
        Ok(Self(m / trace))
    }
}

/// Weighted sum of neighbor normal outer products (the point itself
/// included), Gaussian-weighted by distance and normalized to unit trace.
pub fn structure_tensor(
    normals: &UnitNormalField,
    index: &NeighborhoodIndex,
    i: usize,
) -> Result<StructureTensor> {
    let neigh = index.neighbors(i)?;
    if neigh.is_empty() {
        return Err(Error::TooFewNeighbors {
            ids: vec![i],
            count: 1,
            required: 1,
        });
    }
    let sigma = neigh.iter().map(|n| n.dist).sum::<f64>() / neigh.len() as f64;
    let weight_of = |dist: f64| {
        if sigma > 0.0 {
            (-dist * dist / (sigma * sigma)).exp()
        } else {
            1.0
        }
    };
    let mut m = Matrix3::zeros();
    let mut total = 0.0;
    let own = normals.normal(i);
    m += own * own.transpose();
    total += 1.0;
    for n in &neigh {
        let w = weight_of(n.dist);
        let nj = normals.normal(n.id);
        m += w * (nj * nj.transpose());
        total += w;
    }
    m /= total;
    // Unit normals make trace(m) = sum of weights = 1 already; renormalize
    // to absorb rounding.
    Ok(StructureTensor(m / m.trace()))
}

/// Squared Frobenius distance between two structure tensors; lies in
/// `[0, 2]` for unit-trace PSD inputs.
pub fn pair_smoothness(a: &StructureTensor, b: &StructureTensor) -> f64 {
    (a.0 - b.0).norm_squared()
}

/// Directed neighborhood graph with per-edge smoothness values.
#[derive(Debug, Clone)]
pub struct SmoothnessGraph {
    /// `edges[i]` lists `(j, d_ij)` for each neighbor `j` of `i`.
    edges: Vec<Vec<(u32, f64)>>,
    edge_count: usize,
}

impl SmoothnessGraph {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn neighbors(&self, i: usize) -> &[(u32, f64)] {
        &self.edges[i]
    }

    /// Builds a graph from explicit adjacency (testing and toy models).
    pub fn from_edges(edges: Vec<Vec<(u32, f64)>>) -> Result<Self> {
        let n = edges.len();
        for row in &edges {
            for &(j, d) in row {
                if j as usize >= n {
                    return Err(Error::IndexOutOfRange {
                        index: j as usize,
                        len: n,
                    });
                }
                if !(d >= 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "edge smoothness must be non-negative, got {d}"
                    )));
                }
            }
        }
        let edge_count = edges.iter().map(Vec::len).sum();
        Ok(Self { edges, edge_count })
    }

    /// For each point, every edge it participates in (either direction) as
    /// `(other endpoint, d)`. Used by the mean-field updates.
    fn incident_lists(&self) -> Vec<Vec<(u32, f64)>> {
        let mut incident: Vec<Vec<(u32, f64)>> = self.edges.clone();
        for (i, row) in self.edges.iter().enumerate() {
            for &(j, d) in row {
                incident[j as usize].push((i as u32, d));
            }
        }
        incident
    }
}

/// Computes structure tensors for all points and the smoothness graph over
/// the index's neighbor lists.
pub fn build_smoothness_graph(
    normals: &UnitNormalField,
    index: &NeighborhoodIndex,
) -> Result<SmoothnessGraph> {
    let n = index.len();
    let tensors: Vec<StructureTensor> = (0..n)
        .into_par_iter()
        .map(|i| structure_tensor(normals, index, i))
        .collect::<Result<_>>()?;
    let edges: Vec<Vec<(u32, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            index.neighbors(i).map(|neigh| {
                neigh
                    .iter()
                    .map(|nb| {
                        (
                            nb.id as u32,
                            pair_smoothness(&tensors[i], &tensors[nb.id]),
                        )
                    })
                    .collect()
            })
        })
        .collect::<Result<_>>()?;
    SmoothnessGraph::from_edges(edges)
}

/// Model parameters. Invariants: all positive, `sigma1 > sigma0`,
/// `beta_s > beta_d`, `pi` strictly inside (0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LviParams {
    /// Half-normal residual scale for reference points.
    pub sigma0: f64,
    /// Half-normal residual scale for anomalies.
    pub sigma1: f64,
    /// Exponential rate of edge smoothness when both endpoints are
    /// reference points.
    pub beta_s: f64,
    /// Exponential rate otherwise.
    pub beta_d: f64,
    /// Prior anomaly probability.
    pub pi: f64,
}

impl LviParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0 > 0.0 && self.sigma1 > self.sigma0) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < sigma0 < sigma1, got {} and {}",
                self.sigma0, self.sigma1
            )));
        }
        if !(self.beta_d > 0.0 && self.beta_s > self.beta_d) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < beta_d < beta_s, got {} and {}",
                self.beta_d, self.beta_s
            )));
        }
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "pi must lie strictly inside (0, 1), got {}",
                self.pi
            )));
        }
        Ok(())
    }

    /// Scale-aware deterministic initialization: `sigma0` from the median
    /// residual, `sigma1 = 5 sigma0`, `beta_s` from the mean edge
    /// smoothness, `beta_d = beta_s / 5`, `pi = 0.05`.
    pub fn init_from_data(residuals: &[f64], graph: &SmoothnessGraph, scale: f64) -> Self {
        let floor = (1e-12 * scale).max(f64::MIN_POSITIVE);
        let mut buf: Vec<f64> = residuals.to_vec();
        buf.sort_by(f64::total_cmp);
        let median = if buf.is_empty() {
            0.0
        } else if buf.len() % 2 == 1 {
            buf[buf.len() / 2]
        } else {
            0.5 * (buf[buf.len() / 2 - 1] + buf[buf.len() / 2])
        };
        let sigma0 = median.max(floor);
        let mean_d = if graph.edge_count() > 0 {
            graph
                .edges
                .iter()
                .flat_map(|row| row.iter().map(|&(_, d)| d))
                .sum::<f64>()
                / graph.edge_count() as f64
        } else {
            0.0
        };
        let beta_s = if mean_d > 0.0 {
            (1.0 / mean_d).min(BETA_CAP)
        } else {
            BETA_CAP
        };
        Self {
            sigma0,
            sigma1: 5.0 * sigma0,
            beta_s,
            beta_d: beta_s / 5.0,
            pi: 0.05,
        }
    }
}

const BETA_CAP: f64 = 1e12;

/// EM controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LviConfig {
    pub max_em_iters: usize,
    /// Relative evidence-bound change that terminates EM.
    pub bound_rel_tol: f64,
    /// Sweep cap for each E-step.
    pub max_e_sweeps: usize,
    /// E-step stops when no gamma moved more than this in a sweep.
    pub e_tol: f64,
    /// Update the prior in the M-step (off by default: anomalies are
    /// assumed sparse and the prior acts as regularization).
    pub update_pi: bool,
    /// Length scale for the sigma collapse floor (typically the cloud
    /// diameter).
    pub scale: f64,
}

impl Default for LviConfig {
    fn default() -> Self {
        Self {
            max_em_iters: 100,
            bound_rel_tol: 1e-8,
            max_e_sweeps: 200,
            e_tol: 1e-5,
            update_pi: false,
            scale: 1.0,
        }
    }
}

/// Degenerate-run flags raised during EM.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LviDiagnostics {
    /// An M-step drove a sigma below the collapse floor.
    pub sigma_floored: bool,
    /// The M-step ordering projection fired (components tried to swap).
    pub ordering_projected: bool,
    /// All posteriors saturated to one side.
    pub saturated: bool,
}

/// Factorized posterior: `gamma_i = q(c_i = 1)`, plus the evidence-bound
/// trace (one entry per EM iteration) and diagnostics.
#[derive(Debug, Clone)]
pub struct VariationalPosterior {
    pub gamma: Vec<f64>,
    pub bound_trace: Vec<f64>,
    pub diagnostics: LviDiagnostics,
}

fn ln_half_normal(r: f64, sigma: f64) -> f64 {
    // ln sqrt(2/pi) - ln sigma - r^2 / (2 sigma^2)
    0.5 * (2.0 / std::f64::consts::PI).ln() - sigma.ln() - r * r / (2.0 * sigma * sigma)
}

fn ln_exponential(d: f64, beta: f64) -> f64 {
    beta.ln() - beta * d
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One mean-field E-step: coordinate-ascent sweeps over the per-point
/// posteriors in ascending point order, until no update moves any gamma by
/// more than `cfg.e_tol` (or the sweep cap is hit). Returns the number of
/// sweeps run.
pub fn e_step(
    residuals: &[f64],
    graph: &SmoothnessGraph,
    params: &LviParams,
    gamma: &mut [f64],
    cfg: &LviConfig,
) -> usize {
    let incident = graph.incident_lists();
    e_step_with_incident(residuals, &incident, params, gamma, cfg)
}

fn e_step_with_incident(
    residuals: &[f64],
    incident: &[Vec<(u32, f64)>],
    params: &LviParams,
    gamma: &mut [f64],
    cfg: &LviConfig,
) -> usize {
    let prior_logit = (params.pi / (1.0 - params.pi)).ln();
    let ln_beta_ratio = (params.beta_d / params.beta_s).ln();
    let beta_diff = params.beta_s - params.beta_d;
    for sweep in 1..=cfg.max_e_sweeps {
        let mut max_delta: f64 = 0.0;
        for i in 0..gamma.len() {
            let emission = ln_half_normal(residuals[i], params.sigma1)
                - ln_half_normal(residuals[i], params.sigma0);
            // For each incident edge, flipping c_i to 1 switches the edge
            // from the smooth to the rough regime only when the other
            // endpoint is a reference point.
            let pairwise: f64 = incident[i]
                .iter()
                .map(|&(j, d)| (1.0 - gamma[j as usize]) * (ln_beta_ratio + beta_diff * d))
                .sum();
            let next = sigmoid(emission + prior_logit + pairwise);
            max_delta = max_delta.max((next - gamma[i]).abs());
            gamma[i] = next;
        }
        if max_delta < cfg.e_tol {
            return sweep;
        }
    }
    cfg.max_e_sweeps
}

fn m_step(
    residuals: &[f64],
    graph: &SmoothnessGraph,
    gamma: &[f64],
    params: &mut LviParams,
    cfg: &LviConfig,
    diag: &mut LviDiagnostics,
) {
    let floor = (1e-12 * cfg.scale).max(f64::MIN_POSITIVE);

    let mut w0 = 0.0;
    let mut w1 = 0.0;
    let mut s0 = 0.0;
    let mut s1 = 0.0;
    for (i, &r) in residuals.iter().enumerate() {
        let g = gamma[i];
        w0 += 1.0 - g;
        w1 += g;
        s0 += (1.0 - g) * r * r;
        s1 += g * r * r;
    }
    if w0 > 0.0 {
        params.sigma0 = (s0 / w0).sqrt();
    }
    if w1 > 0.0 {
        params.sigma1 = (s1 / w1).sqrt();
    }
    for sigma in [&mut params.sigma0, &mut params.sigma1] {
        if *sigma < floor {
            *sigma = floor;
            diag.sigma_floored = true;
        }
    }
    if params.sigma1 <= params.sigma0 {
        params.sigma1 = params.sigma0 * (1.0 + 1e-6);
        diag.ordering_projected = true;
    }

    let mut smooth_w = 0.0;
    let mut smooth_wd = 0.0;
    let mut rough_w = 0.0;
    let mut rough_wd = 0.0;
    for (i, row) in graph.edges.iter().enumerate() {
        for &(j, d) in row {
            let s = (1.0 - gamma[i]) * (1.0 - gamma[j as usize]);
            smooth_w += s;
            smooth_wd += s * d;
            rough_w += 1.0 - s;
            rough_wd += (1.0 - s) * d;
        }
    }
    if smooth_w > 0.0 {
        params.beta_s = (smooth_w / smooth_wd.max(f64::MIN_POSITIVE)).min(BETA_CAP);
    }
    if rough_w > 0.0 {
        params.beta_d = (rough_w / rough_wd.max(f64::MIN_POSITIVE)).min(BETA_CAP);
    }
    if params.beta_s <= params.beta_d {
        params.beta_s = params.beta_d * (1.0 + 1e-6);
        diag.ordering_projected = true;
    }

    if cfg.update_pi {
        let mean: f64 = gamma.iter().sum::<f64>() / gamma.len() as f64;
        params.pi = mean.clamp(1e-9, 1.0 - 1e-9);
    }
}

/// The variational lower bound `E_q[log p(r, d, C)] + H(q)`; exact for the
/// factorized posterior.
pub fn evidence_bound(
    residuals: &[f64],
    graph: &SmoothnessGraph,
    params: &LviParams,
    gamma: &[f64],
) -> f64 {
    let ln_pi = params.pi.ln();
    let ln_1mpi = (1.0 - params.pi).ln();
    let mut bound = 0.0;
    for (i, &r) in residuals.iter().enumerate() {
        let g = gamma[i];
        bound += (1.0 - g) * (ln_half_normal(r, params.sigma0) + ln_1mpi)
            + g * (ln_half_normal(r, params.sigma1) + ln_pi);
        bound += entropy(g);
    }
    for (i, row) in graph.edges.iter().enumerate() {
        for &(j, d) in row {
            let s = (1.0 - gamma[i]) * (1.0 - gamma[j as usize]);
            bound += s * ln_exponential(d, params.beta_s)
                + (1.0 - s) * ln_exponential(d, params.beta_d);
        }
    }
    bound
}

fn entropy(g: f64) -> f64 {
    let mut h = 0.0;
    if g > 0.0 {
        h -= g * g.ln();
    }
    if g < 1.0 {
        h -= (1.0 - g) * (1.0 - g).ln();
    }
    h
}

/// Runs mean-field variational EM from the given initial parameters.
/// Returns the fitted posterior (with its non-decreasing bound trace) and
/// the final parameters.
pub fn mean_field_em(
    residuals: &[f64],
    graph: &SmoothnessGraph,
    init: &LviParams,
    cfg: &LviConfig,
) -> Result<(VariationalPosterior, LviParams)> {
    if residuals.len() != graph.len() {
        return Err(Error::LengthMismatch {
            left: residuals.len(),
            right: graph.len(),
        });
    }
    if let Some(&bad) = residuals.iter().find(|r| !(**r >= 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "residuals must be non-negative and finite, got {bad}"
        )));
    }
    init.validate()?;

    let incident = graph.incident_lists();
    let mut params = *init;
    let mut gamma = vec![params.pi; residuals.len()];
    let mut diag = LviDiagnostics::default();
    let mut trace = Vec::new();

    for _ in 0..cfg.max_em_iters {
        e_step_with_incident(residuals, &incident, &params, &mut gamma, cfg);
        m_step(residuals, graph, &gamma, &mut params, cfg, &mut diag);
        let bound = evidence_bound(residuals, graph, &params, &gamma);
        let done = trace
            .last()
            .is_some_and(|&prev: &f64| (bound - prev).abs() <= cfg.bound_rel_tol * (1.0 + prev.abs()));
        trace.push(bound);
        if done {
            break;
        }
    }
    // Leave the posterior at a coordinate-ascent fixed point of the final
    // parameters (the loop ends on an M-step).
    e_step_with_incident(residuals, &incident, &params, &mut gamma, cfg);
    trace.push(evidence_bound(residuals, graph, &params, &gamma));

    let saturated_hi = gamma.iter().all(|&g| g > 1.0 - 1e-9);
    let saturated_lo = gamma.iter().all(|&g| g < 1e-9);
    diag.saturated = saturated_hi || saturated_lo;

    Ok((
        VariationalPosterior {
            gamma,
            bound_trace: trace,
            diagnostics: diag,
        },
        params,
    ))
}

/// Maximum-a-posteriori labels: anomalous iff `gamma > 0.5` (ties are
/// reference points).
pub fn map_labels(post: &VariationalPosterior) -> LabelVector {
    post.gamma.iter().map(|&g| g > 0.5).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::PointCloud;
    use crate::index::{build_index, NeighborhoodConfig};
    use crate::normals::{estimate_normals, OrientationRule};
    use approx::assert_relative_eq;
    use nalgebra::{Rotation3, Unit, Vector3};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Exp, Normal};

    #[test]
    fn identical_normals_give_rank_one_tensor_and_zero_smoothness() {
        let mut coords = Vec::new();
        for y in 0..5 {
            for x in 0..5 {
                coords.push([x as f64, y as f64, 0.0]);
            }
        }
        let cloud = PointCloud::from_coords(&coords).unwrap();
        let index = build_index(&cloud, NeighborhoodConfig::knn(4)).unwrap();
        let normals =
            UnitNormalField::from_vectors(vec![Vector3::z(); cloud.len()]);
        let k0 = structure_tensor(&normals, &index, 0).unwrap();
        let expected = Matrix3::from_diagonal(&Vector3::new(0.0, 0.0, 1.0));
        assert!((k0.matrix() - expected).abs().max() < 1e-12);
        let k1 = structure_tensor(&normals, &index, 12).unwrap();
        assert!(pair_smoothness(&k0, &k1) < 1e-24);
    }

    #[test]
    fn crease_smoothness_exceeds_in_face_smoothness() {
        // Two flat faces meeting along x = 0: normals z on one side, x on
        // the other.
        let mut coords = Vec::new();
        let mut normals = Vec::new();
        for y in 0..6 {
            for x in -3..3i32 {
                coords.push([x as f64, y as f64, 0.0]);
                normals.push(if x < 0 { Vector3::z() } else { Vector3::x() });
            }
        }
        let cloud = PointCloud::from_coords(&coords).unwrap();
        let index = build_index(&cloud, NeighborhoodConfig::knn(4)).unwrap();
        let field = UnitNormalField::from_vectors(normals);
        let graph = build_smoothness_graph(&field, &index).unwrap();
        let mut crease = Vec::new();
        let mut within = Vec::new();
        for i in 0..cloud.len() {
            let xi = (i % 6) as i32 - 3;
            for &(j, d) in graph.neighbors(i) {
                let xj = (j as usize % 6) as i32 - 3;
                if (xi < 0) != (xj < 0) {
                    crease.push(d);
                } else {
                    within.push(d);
                }
            }
        }
        let min_crease = crease.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_within = within.iter().cloned().fold(0.0, f64::max);
        assert!(min_crease > max_within);
    }

    #[test]
    fn smoothness_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let coords: Vec<[f64; 3]> = (0..150)
            .map(|_| {
                let x: f64 = rng.random_range(-1.0..1.0);
                let y: f64 = rng.random_range(-1.0..1.0);
                [x, y, 0.25 * x * x - 0.15 * y * y]
            })
            .collect();
        let cloud = PointCloud::from_coords(&coords).unwrap();
        let index = build_index(&cloud, NeighborhoodConfig::knn(8)).unwrap();
        let normals = estimate_normals(&cloud, &index, OrientationRule::default()).unwrap();
        let graph = build_smoothness_graph(&normals, &index).unwrap();

        let rot = Rotation3::from_axis_angle(
            &Unit::new_normalize(Vector3::new(1.0, -0.4, 0.8)),
            1.1,
        );
        let moved = crate::transform::rigid_transform(
            &cloud,
            rot.matrix(),
            &Vector3::new(4.0, -2.0, 7.0),
        )
        .unwrap();
        let moved_index = build_index(&moved, NeighborhoodConfig::knn(8)).unwrap();
        // Transform the normals covariantly rather than re-orienting
        // against a fixed viewpoint.
        let moved_normals = UnitNormalField::from_vectors(
            normals.normals().iter().map(|n| rot * n).collect(),
        );
        let moved_graph = build_smoothness_graph(&moved_normals, &moved_index).unwrap();
        for i in 0..cloud.len() {
            for (&(j, d), &(j2, d2)) in graph
                .neighbors(i)
                .iter()
                .zip(moved_graph.neighbors(i))
            {
                assert_eq!(j, j2);
                assert!((d - d2).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pair_smoothness_closed_forms() {
        let a = StructureTensor::new(Matrix3::from_diagonal(&Vector3::new(0.0, 0.0, 1.0)))
            .unwrap();
        let b = StructureTensor::new(Matrix3::from_diagonal(&Vector3::new(1.0, 0.0, 0.0)))
            .unwrap();
        assert_eq!(pair_smoothness(&a, &a), 0.0);
        assert_relative_eq!(pair_smoothness(&a, &b), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn pair_smoothness_matches_elementwise_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let mut random_psd = || {
                let v1 = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
                .normalize();
                let v2 = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
                .normalize();
                let m = 0.7 * (v1 * v1.transpose()) + 0.3 * (v2 * v2.transpose());
                StructureTensor::new(m).unwrap()
            };
            let a = random_psd();
            let b = random_psd();
            let mut expected = 0.0;
            for r in 0..3 {
                for c in 0..3 {
                    let diff = a.matrix()[(r, c)] - b.matrix()[(r, c)];
                    expected += diff * diff;
                }
            }
            assert_relative_eq!(pair_smoothness(&a, &b), expected, epsilon = 1e-12);
        }
    }

    fn chain_graph(n: usize, d: f64) -> SmoothnessGraph {
        let edges = (0..n)
            .map(|i| {
                if i + 1 < n {
                    vec![(i as u32 + 1, d)]
                } else {
                    Vec::new()
                }
            })
            .collect();
        SmoothnessGraph::from_edges(edges).unwrap()
    }

    #[test]
    fn zero_residuals_with_neutral_edges_stay_reference() {
        let n = 20;
        let residuals = vec![0.0; n];
        let graph = chain_graph(n, 0.3);
        // beta_s == beta_d makes edges uninformative; validate() forbids
        // exact equality, so run the E-step directly with a hair of
        // separation.
        let params = LviParams {
            sigma0: 0.01,
            sigma1: 0.1,
            beta_s: 1.0 + 1e-12,
            beta_d: 1.0,
            pi: 0.05,
        };
        let mut gamma = vec![params.pi; n];
        e_step(&residuals, &graph, &params, &mut gamma, &LviConfig::default());
        assert!(gamma.iter().all(|&g| g < 0.5));
    }

    /// Exact pointwise Bayes rule when edges carry no information.
    fn bayes_labels(residuals: &[f64], params: &LviParams) -> Vec<bool> {
        residuals
            .iter()
            .map(|&r| {
                let log_odds = ln_half_normal(r, params.sigma1)
                    - ln_half_normal(r, params.sigma0)
                    + (params.pi / (1.0 - params.pi)).ln();
                log_odds > 0.0
            })
            .collect()
    }

    #[test]
    fn e_step_with_known_params_matches_the_bayes_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 2000;
        let params = LviParams {
            sigma0: 0.01,
            sigma1: 0.1,
            beta_s: 1.0 + 1e-12,
            beta_d: 1.0,
            pi: 0.05,
        };
        let n0 = Normal::new(0.0, params.sigma0).unwrap();
        let n1 = Normal::new(0.0, params.sigma1).unwrap();
        let residuals: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random_range(0.0..1.0) < 0.05 {
                    n1.sample(&mut rng).abs()
                } else {
                    n0.sample(&mut rng).abs()
                }
            })
            .collect();
        let graph = chain_graph(n, 0.5);
        let mut gamma = vec![params.pi; n];
        e_step(&residuals, &graph, &params, &mut gamma, &LviConfig::default());
        let map: Vec<bool> = gamma.iter().map(|&g| g > 0.5).collect();
        assert_eq!(map, bayes_labels(&residuals, &params));
    }

    /// Synthetic draw from the full generative model on a chain graph.
    fn draw_model(
        n: usize,
        truth_params: &LviParams,
        seed: u64,
    ) -> (Vec<f64>, SmoothnessGraph, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<bool> = (0..n)
            .map(|_| rng.random_range(0.0..1.0) < truth_params.pi)
            .collect();
        let n0 = Normal::new(0.0, truth_params.sigma0).unwrap();
        let n1 = Normal::new(0.0, truth_params.sigma1).unwrap();
        let residuals: Vec<f64> = labels
            .iter()
            .map(|&c| {
                if c {
                    n1.sample(&mut rng).abs()
                } else {
                    n0.sample(&mut rng).abs()
                }
            })
            .collect();
        let exp_s = Exp::new(truth_params.beta_s).unwrap();
        let exp_d = Exp::new(truth_params.beta_d).unwrap();
        let edges = (0..n)
            .map(|i| {
                if i + 1 < n {
                    let d = if !labels[i] && !labels[i + 1] {
                        exp_s.sample(&mut rng)
                    } else {
                        exp_d.sample(&mut rng)
                    };
                    vec![(i as u32 + 1, d)]
                } else {
                    Vec::new()
                }
            })
            .collect();
        (
            residuals,
            SmoothnessGraph::from_edges(edges).unwrap(),
            labels,
        )
    }

    #[test]
    fn full_em_recovers_a_well_separated_mixture() {
        let truth = LviParams {
            sigma0: 0.01,
            sigma1: 0.15,
            beta_s: 40.0,
            beta_d: 8.0,
            pi: 0.05,
        };
        let (residuals, graph, labels) = draw_model(3000, &truth, 12345);
        // Perturbed init, far from truth.
        let init = LviParams {
            sigma0: 0.03,
            sigma1: 0.09,
            beta_s: 5.0,
            beta_d: 2.0,
            pi: 0.05,
        };
        let cfg = LviConfig::default();
        let (post, fitted) = mean_field_em(&residuals, &graph, &init, &cfg).unwrap();
        let pred = map_labels(&post);
        let c = crate::metrics::confusion(&pred, &labels).unwrap();
        let ba = crate::metrics::metrics(&c).balanced_accuracy;
        assert!(ba >= 0.9, "balanced accuracy {ba}");
        assert!(fitted.sigma1 > fitted.sigma0);
        // Bound trace non-decreasing.
        for w in post.bound_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8 * (1.0 + w[0].abs()));
        }
    }

    #[test]
    fn bound_trace_never_decreases_across_random_runs() {
        for seed in 0..10 {
            let truth = LviParams {
                sigma0: 0.02,
                sigma1: 0.2,
                beta_s: 30.0,
                beta_d: 5.0,
                pi: 0.08,
            };
            let (residuals, graph, _) = draw_model(400, &truth, seed);
            let init = LviParams::init_from_data(&residuals, &graph, 1.0);
            let (post, _) =
                mean_field_em(&residuals, &graph, &init, &LviConfig::default()).unwrap();
            for w in post.bound_trace.windows(2) {
                assert!(
                    w[1] >= w[0] - 1e-8 * (1.0 + w[0].abs()),
                    "seed {seed}: bound fell {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn converged_e_step_is_a_fixed_point() {
        let truth = LviParams {
            sigma0: 0.02,
            sigma1: 0.2,
            beta_s: 30.0,
            beta_d: 5.0,
            pi: 0.08,
        };
        let (residuals, graph, _) = draw_model(300, &truth, 99);
        let init = LviParams::init_from_data(&residuals, &graph, 1.0);
        let cfg = LviConfig::default();
        let (post, fitted) = mean_field_em(&residuals, &graph, &init, &cfg).unwrap();
        let mut gamma = post.gamma.clone();
        e_step(&residuals, &graph, &fitted, &mut gamma, &cfg);
        let max_delta = gamma
            .iter()
            .zip(&post.gamma)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_delta < 1e-5, "extra sweep moved gamma by {max_delta}");
    }

    #[test]
    fn entropy_vanishes_for_degenerate_posteriors() {
        assert_eq!(entropy(0.0), 0.0);
        assert_eq!(entropy(1.0), 0.0);
        let n = 6;
        let residuals = vec![0.5; n];
        let graph = chain_graph(n, 0.2);
        let params = LviParams {
            sigma0: 0.1,
            sigma1: 0.4,
            beta_s: 10.0,
            beta_d: 2.0,
            pi: 0.1,
        };
        let hard = vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let bound = evidence_bound(&residuals, &graph, &params, &hard);
        // With zero entropy the bound equals the complete-data
        // log-likelihood of that labeling.
        let labels: Vec<bool> = hard.iter().map(|&g| g > 0.5).collect();
        assert_relative_eq!(
            bound,
            complete_log_likelihood(&residuals, &graph, &params, &labels),
            epsilon = 1e-12
        );
    }

    fn complete_log_likelihood(
        residuals: &[f64],
        graph: &SmoothnessGraph,
        params: &LviParams,
        labels: &[bool],
    ) -> f64 {
        let mut ll = 0.0;
        for (i, &r) in residuals.iter().enumerate() {
            ll += if labels[i] {
                ln_half_normal(r, params.sigma1) + params.pi.ln()
            } else {
                ln_half_normal(r, params.sigma0) + (1.0 - params.pi).ln()
            };
        }
        for (i, row) in graph.edges.iter().enumerate() {
            for &(j, d) in row {
                let beta = if !labels[i] && !labels[j as usize] {
                    params.beta_s
                } else {
                    params.beta_d
                };
                ll += ln_exponential(d, beta);
            }
        }
        ll
    }

    #[test]
    fn coordinate_optimum_is_a_local_maximum_of_the_bound() {
        let truth = LviParams {
            sigma0: 0.02,
            sigma1: 0.2,
            beta_s: 30.0,
            beta_d: 5.0,
            pi: 0.08,
        };
        let (residuals, graph, _) = draw_model(60, &truth, 5);
        let init = LviParams::init_from_data(&residuals, &graph, 1.0);
        let (post, fitted) =
            mean_field_em(&residuals, &graph, &init, &LviConfig::default()).unwrap();
        let base = evidence_bound(&residuals, &graph, &fitted, &post.gamma);
        for i in (0..post.gamma.len()).step_by(7) {
            for delta in [-0.05, 0.05] {
                let perturbed_value = (post.gamma[i] + delta).clamp(1e-12, 1.0 - 1e-12);
                if (perturbed_value - post.gamma[i]).abs() < 1e-9 {
                    continue;
                }
                let mut perturbed = post.gamma.clone();
                perturbed[i] = perturbed_value;
                let b = evidence_bound(&residuals, &graph, &fitted, &perturbed);
                assert!(
                    b <= base + 1e-9,
                    "moving gamma[{i}] by {delta} raised the bound: {base} -> {b}"
                );
            }
        }
    }

    /// Brute-force log-evidence by enumerating all 2^n labelings.
    fn enumerated_log_evidence(
        residuals: &[f64],
        graph: &SmoothnessGraph,
        params: &LviParams,
    ) -> f64 {
        let n = residuals.len();
        assert!(n <= 20);
        let mut terms = Vec::with_capacity(1 << n);
        for mask in 0u32..(1 << n) {
            let labels: Vec<bool> = (0..n).map(|i| mask & (1 << i) != 0).collect();
            terms.push(complete_log_likelihood(residuals, graph, params, &labels));
        }
        let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
    }

    #[test]
    fn bound_never_exceeds_enumerated_log_evidence() {
        for seed in [1, 2, 3, 4] {
            let truth = LviParams {
                sigma0: 0.05,
                sigma1: 0.3,
                beta_s: 12.0,
                beta_d: 3.0,
                pi: 0.15,
            };
            let n = 10;
            let (residuals, graph, _) = draw_model(n, &truth, seed);
            let init = LviParams::init_from_data(&residuals, &graph, 1.0);
            let (post, fitted) =
                mean_field_em(&residuals, &graph, &init, &LviConfig::default()).unwrap();
            let bound = post.bound_trace.last().copied().unwrap();
            let evidence = enumerated_log_evidence(&residuals, &graph, &fitted);
            assert!(
                bound <= evidence + 1e-9,
                "seed {seed}: bound {bound} exceeds evidence {evidence}"
            );
        }
    }

    #[test]
    fn map_label_rules() {
        let post = VariationalPosterior {
            gamma: vec![0.9, 0.1, 0.5, 0.500001],
            bound_trace: vec![],
            diagnostics: LviDiagnostics::default(),
        };
        assert_eq!(map_labels(&post), vec![true, false, false, true]);
    }

    #[test]
    fn labels_are_permutation_equivariant() {
        let truth = LviParams {
            sigma0: 0.02,
            sigma1: 0.25,
            beta_s: 25.0,
            beta_d: 4.0,
            pi: 0.1,
        };
        let (residuals, graph, _) = draw_model(200, &truth, 44);
        let init = LviParams::init_from_data(&residuals, &graph, 1.0);
        let (post, _) =
            mean_field_em(&residuals, &graph, &init, &LviConfig::default()).unwrap();
        let labels = map_labels(&post);

        // Reverse the point order (a permutation with easy bookkeeping).
        let n = residuals.len();
        let rev_residuals: Vec<f64> = residuals.iter().rev().copied().collect();
        let rev_edges: Vec<Vec<(u32, f64)>> = {
            let mut e = vec![Vec::new(); n];
            for (i, row) in (0..n).map(|i| (i, graph.neighbors(i))) {
                for &(j, d) in row {
                    e[n - 1 - i].push(((n - 1 - j as usize) as u32, d));
                }
            }
            e
        };
        let rev_graph = SmoothnessGraph::from_edges(rev_edges).unwrap();
        let (rev_post, _) =
            mean_field_em(&rev_residuals, &rev_graph, &init, &LviConfig::default()).unwrap();
        let rev_labels = map_labels(&rev_post);
        let undone: Vec<bool> = rev_labels.iter().rev().copied().collect();
        assert_eq!(labels, undone);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let graph = chain_graph(3, 0.1);
        let bad_order = LviParams {
            sigma0: 0.2,
            sigma1: 0.1,
            beta_s: 2.0,
            beta_d: 1.0,
            pi: 0.05,
        };
        assert!(mean_field_em(&[0.1, 0.1, 0.1], &graph, &bad_order, &LviConfig::default())
            .is_err());
        let ok = LviParams {
            sigma0: 0.1,
            sigma1: 0.2,
            beta_s: 2.0,
            beta_d: 1.0,
            pi: 0.05,
        };
        assert!(
            mean_field_em(&[0.1, -0.2, 0.1], &graph, &ok, &LviConfig::default()).is_err()
        );
        assert!(mean_field_em(&[0.1, 0.1], &graph, &ok, &LviConfig::default()).is_err());
    }
}
