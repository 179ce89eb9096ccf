//! Sparse decomposition of a point cloud into a smooth reference surface
//! and a row-sparse anomaly component.
//!
//! The cloud `Y` (as an N-by-3 matrix) is modeled as reference plus
//! anomalies plus noise. A graph smoothness operator `H` subtracts from
//! each point a convex combination of its neighbors, so `H X` is close to
//! zero on smooth surfaces. Anomalies are recovered by minimizing
//!
//! ```text
//! J(A) = ||H (Y - A)||_F^2 + lambda * sum_i log(sqrt(||a_i||^2 + eps) + ||a_i||)
//! ```
//!
//! with a majorize-minimize outer loop (the concave log penalty is
//! linearized at the current row norms, giving per-row weights
//! `rho_i = lambda / sqrt(||a_i||^2 + eps)`) and an inner proximal-gradient
//! loop (per-row group soft-thresholding with step `1/L`). Nonzero rows of
//! the minimizer mark anomalous points.

use nalgebra::Vector3;

use crate::cloud::{LabelVector, PointCloud};
use crate::error::{Error, Result};
use crate::index::NeighborhoodIndex;

/// Relative accuracy of the power-iteration estimate of the spectral norm.
const POWER_TOL: f64 = 1e-4;
/// Safety factor on the Lipschitz constant so the estimate never
/// undershoots the true value and breaks descent.
const LIPSCHITZ_MARGIN: f64 = 1.0 + 1e-3;

/// Sparse row-stochastic smoothness operator: `(H x)_i = x_i - sum_j w_ij x_j`
/// with convex weights over each point's neighbors, so every row sums to
/// zero and constant inputs are annihilated.
#[derive(Debug, Clone)]
pub struct SmoothnessOperator {
    rows: Vec<Vec<(u32, f64)>>,
}

impl SmoothnessOperator {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Neighbor ids and convex weights of row `i`.
    pub fn row(&self, i: usize) -> &[(u32, f64)] {
        &self.rows[i]
    }

    /// Signed sum of row `i` including the unit diagonal.
    pub fn row_sum(&self, i: usize) -> f64 {
        1.0 - self.rows[i].iter().map(|(_, w)| w).sum::<f64>()
    }

    pub fn apply(&self, x: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let mut out = x[i];
                for &(j, w) in row {
                    out -= w * x[j as usize];
                }
                out
            })
            .collect()
    }

    pub fn apply_transpose(&self, m: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        let mut out = vec![Vector3::zeros(); m.len()];
        for (i, row) in self.rows.iter().enumerate() {
            out[i] += m[i];
            for &(j, w) in row {
                out[j as usize] -= w * m[i];
            }
        }
        out
    }

    /// `H^T H x`, the gradient kernel of the quadratic loss.
    pub fn gram_apply(&self, x: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        self.apply_transpose(&self.apply(x))
    }

    fn apply_scalar(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let mut out = x[i];
                for &(j, w) in row {
                    out -= w * x[j as usize];
                }
                out
            })
            .collect()
    }

    fn apply_transpose_scalar(&self, m: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; m.len()];
        for (i, row) in self.rows.iter().enumerate() {
            out[i] += m[i];
            for &(j, w) in row {
                out[j as usize] -= w * m[i];
            }
        }
        out
    }

    /// Largest eigenvalue of `H^T H` (the squared spectral norm of `H`),
    /// estimated by deterministic power iteration to [`POWER_TOL`]
    /// relative accuracy.
    pub fn spectral_norm_sq(&self) -> f64 {
        let n = self.rows.len();
        // Constants lie in the null space of H, so seed with a vector far
        // from constant. sin(i+1) is deterministic and generic.
        let mut v: Vec<f64> = (0..n).map(|i| ((i + 1) as f64).sin()).collect();
        normalize(&mut v);
        let mut lambda = 0.0;
        for _ in 0..500 {
            let mut w = self.apply_transpose_scalar(&self.apply_scalar(&v));
            let next = norm(&w);
            if next == 0.0 {
                return 0.0;
            }
            normalize(&mut w);
            v = w;
            if (next - lambda).abs() <= POWER_TOL * next {
                return next;
            }
            lambda = next;
        }
        lambda
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        for x in v {
            *x /= n;
        }
    }
}

/// Builds the smoothness operator from each point's `k` nearest neighbors
/// with Gaussian weights `exp(-d^2 / sigma_i^2)` (`sigma_i` = mean neighbor
/// distance of `i`), normalized to a convex combination.
pub fn build_smoothness_operator(
    cloud: &PointCloud,
    index: &NeighborhoodIndex,
    k: usize,
) -> Result<SmoothnessOperator> {
    let mut rows = Vec::with_capacity(cloud.len());
    let mut short = Vec::new();
    for i in 0..cloud.len() {
        let neigh = index.knn(i, k)?;
        if neigh.len() < 3 {
            short.push(i);
            continue;
        }
        rows.push(gaussian_row(&neigh));
    }
    if !short.is_empty() {
        let count = short.len();
        short.truncate(8);
        return Err(Error::TooFewNeighbors {
            ids: short,
            count,
            required: 3,
        });
    }
    Ok(SmoothnessOperator { rows })
}

fn gaussian_row(neigh: &[crate::index::Neighbor]) -> Vec<(u32, f64)> {
    let sigma = neigh.iter().map(|n| n.dist).sum::<f64>() / neigh.len() as f64;
    let mut row: Vec<(u32, f64)> = if sigma > 0.0 {
        let s2 = sigma * sigma;
        neigh
            .iter()
            .map(|n| (n.id as u32, (-n.dist * n.dist / s2).exp()))
            .collect()
    } else {
        // All neighbors coincide with the point: fall back to uniform.
        neigh.iter().map(|n| (n.id as u32, 1.0)).collect()
    };
    let total: f64 = row.iter().map(|(_, w)| w).sum();
    for (_, w) in &mut row {
        *w /= total;
    }
    row
}

/// The row-sparsity penalty `sum_i log(sqrt(||a_i||^2 + eps) + ||a_i||)`.
/// Its marginal weight `1 / sqrt(||a_i||^2 + eps)` decreases in the row
/// norm, so large rows are shrunk less than under a plain group-l1 penalty.
pub fn group_log_penalty(rows: &[Vector3<f64>], epsilon: f64) -> f64 {
    rows.iter()
        .map(|a| {
            let n = a.norm();
            ((n * n + epsilon).sqrt() + n).ln()
        })
        .sum()
}

/// Smallest `lambda` for which the all-zero anomaly matrix satisfies the
/// first-order optimality condition: `2 sqrt(eps) * max_i ||(H^T H Y)_i||`.
pub fn lambda_max(h: &SmoothnessOperator, y: &[Vector3<f64>], epsilon: f64) -> f64 {
    let g = h.gram_apply(y);
    let max_row = g.iter().map(|r| r.norm()).fold(0.0, f64::max);
    2.0 * epsilon.sqrt() * max_row
}

/// Solver configuration. Scale-dependent defaults come from
/// [`DecompositionConfig::for_scale`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecompositionConfig {
    /// Sparsity weight; must be non-negative.
    pub lambda: f64,
    /// Penalty smoothing; must be positive.
    pub epsilon: f64,
    /// Majorize-minimize (outer) iteration cap.
    pub max_outer: usize,
    /// Proximal-gradient (inner) iteration cap per outer step.
    pub max_inner: usize,
    /// Relative objective-change tolerance for both loops.
    pub rel_tol: f64,
    /// Row norms at or below this count as zero rows.
    pub zero_row_cutoff: f64,
}

impl DecompositionConfig {
    /// Defaults tied to the cloud diameter: `eps = (1e-4 * diameter)^2`,
    /// `delta = 1e-6 * diameter`. `lambda` starts unset (NaN) and is
    /// normally filled with a fraction of [`lambda_max`].
    pub fn for_scale(diameter: f64) -> Self {
        Self {
            lambda: f64::NAN,
            epsilon: (1e-4 * diameter).powi(2),
            max_outer: 30,
            max_inner: 200,
            rel_tol: 1e-6,
            zero_row_cutoff: 1e-6 * diameter,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::InvalidParameter("rel_tol must be positive".into()));
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::InvalidParameter(
                "iteration caps must be at least 1".into(),
            ));
        }
        if !(self.zero_row_cutoff >= 0.0) {
            return Err(Error::InvalidParameter(
                "zero-row cutoff must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Output of [`solve_decomposition`].
#[derive(Debug, Clone)]
pub struct DecompositionResult {
    /// Anomaly rows `a_i`.
    pub anomaly: Vec<Vector3<f64>>,
    /// Reference estimate `Y - A`.
    pub reference: Vec<Vector3<f64>>,
    /// Smoothness residual `H (Y - A)` of the reference estimate.
    pub fit_residual: Vec<Vector3<f64>>,
    /// `||a_i||` per row.
    pub row_norms: Vec<f64>,
    /// Objective value per outer iteration, starting at the initial
    /// all-zero iterate; non-increasing.
    pub objective_trace: Vec<f64>,
}

/// Minimizes the penalized objective over anomaly matrices, starting from
/// `A = 0`. Deterministic for a fixed config; the objective trace never
/// increases.
pub fn solve_decomposition(
    y: &[Vector3<f64>],
    h: &SmoothnessOperator,
    cfg: &DecompositionConfig,
) -> Result<DecompositionResult> {
    cfg.validate()?;
    if y.len() != h.len() {
        return Err(Error::LengthMismatch {
            left: y.len(),
            right: h.len(),
        });
    }
    let n = y.len();
    let lipschitz = (2.0 * h.spectral_norm_sq() * LIPSCHITZ_MARGIN).max(f64::MIN_POSITIVE);
    let step = 1.0 / lipschitz;

    let mut anomaly = vec![Vector3::zeros(); n];
    let objective = |a: &[Vector3<f64>]| -> f64 {
        let diff: Vec<Vector3<f64>> = y.iter().zip(a).map(|(yi, ai)| yi - ai).collect();
        let loss: f64 = h.apply(&diff).iter().map(|r| r.norm_squared()).sum();
        loss + cfg.lambda * group_log_penalty(a, cfg.epsilon)
    };

    let mut j_prev = objective(&anomaly);
    let mut trace = vec![j_prev];

    for outer in 0..cfg.max_outer {
        // Majorize: linearize the concave log at the current row norms.
        let rho: Vec<f64> = anomaly
            .iter()
            .map(|a| cfg.lambda / (a.norm_squared() + cfg.epsilon).sqrt())
            .collect();

        let majorized = |a: &[Vector3<f64>]| -> f64 {
            let diff: Vec<Vector3<f64>> = y.iter().zip(a).map(|(yi, ai)| yi - ai).collect();
            let loss: f64 = h.apply(&diff).iter().map(|r| r.norm_squared()).sum();
            loss + a
                .iter()
                .zip(&rho)
                .map(|(ai, ri)| ri * ai.norm())
                .sum::<f64>()
        };

        // Minimize the majorizer by proximal gradient with group
        // soft-thresholding.
        let mut m_prev = majorized(&anomaly);
        for _ in 0..cfg.max_inner {
            let diff: Vec<Vector3<f64>> =
                y.iter().zip(&anomaly).map(|(yi, ai)| yi - ai).collect();
            let grad = h.gram_apply(&diff); // gradient of loss in A is -2 * this
            for i in 0..n {
                let z = anomaly[i] + 2.0 * step * grad[i];
                let zn = z.norm();
                let threshold = rho[i] * step;
                anomaly[i] = if zn > threshold {
                    z * (1.0 - threshold / zn)
                } else {
                    Vector3::zeros()
                };
            }
            let m_next = majorized(&anomaly);
            if (m_prev - m_next).abs() <= cfg.rel_tol * (1.0 + m_prev.abs()) {
                break;
            }
            m_prev = m_next;
        }

        let j = objective(&anomaly);
        if !j.is_finite() {
            return Err(Error::NonFiniteObjective(outer));
        }
        trace.push(j);
        if (j_prev - j).abs() <= cfg.rel_tol * (1.0 + j_prev.abs()) {
            break;
        }
        j_prev = j;
    }

    let reference: Vec<Vector3<f64>> = y.iter().zip(&anomaly).map(|(yi, ai)| yi - ai).collect();
    let fit_residual = h.apply(&reference);
    let row_norms = anomaly.iter().map(|a| a.norm()).collect();
    Ok(DecompositionResult {
        anomaly,
        reference,
        fit_residual,
        row_norms,
        objective_trace: trace,
    })
}

/// Labels a point anomalous iff its anomaly row norm exceeds `delta`.
pub fn labels_from_rows(result: &DecompositionResult, delta: f64) -> LabelVector {
    result.row_norms.iter().map(|&n| n > delta).collect()
}

/// Bisects on `lambda` to the most sensitive value whose anomaly fraction
/// stays at or below `ceiling`. Returns the chosen lambda and its solution.
pub fn bisect_lambda(
    y: &[Vector3<f64>],
    h: &SmoothnessOperator,
    cfg: &DecompositionConfig,
    ceiling: f64,
    rounds: usize,
) -> Result<(f64, DecompositionResult)> {
    if !(0.0..=1.0).contains(&ceiling) {
        return Err(Error::InvalidParameter(format!(
            "anomaly-fraction ceiling must lie in [0, 1], got {ceiling}"
        )));
    }
    let lam_max = lambda_max(h, y, cfg.epsilon);
    let fraction = |r: &DecompositionResult| {
        labels_from_rows(r, cfg.zero_row_cutoff)
            .iter()
            .filter(|&&l| l)
            .count() as f64
            / y.len() as f64
    };

    let mut lo = 1e-4 * lam_max;
    let solve_at = |lambda: f64| {
        let mut c = *cfg;
        c.lambda = lambda;
        solve_decomposition(y, h, &c)
    };
    let low_result = solve_at(lo)?;
    if fraction(&low_result) <= ceiling {
        return Ok((lo, low_result));
    }
    let mut hi = 1.01 * lam_max;
    let mut best = (hi, solve_at(hi)?);
    for _ in 0..rounds {
        let mid = 0.5 * (lo + hi);
        let result = solve_at(mid)?;
        if fraction(&result) <= ceiling {
            hi = mid;
            best = (mid, result);
        } else {
            lo = mid;
        }
    }
    Ok(best)
}
