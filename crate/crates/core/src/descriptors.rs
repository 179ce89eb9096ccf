//! Local-geometry descriptors: Darboux-frame pair features, simplified and
//! fast point feature histograms (SPFH/FPFH), and an untrained anomaly
//! scorer over the resulting descriptor set.
//!
//! The scoring rule (L1 deviation from the coordinate-wise median
//! descriptor, thresholded at median + 3 scaled MADs) is this library's own
//! choice of how to turn descriptors into anomaly decisions; the histograms
//! themselves follow the standard FPFH construction.

use std::f64::consts::PI;

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;

use crate::cloud::{LabelVector, PointCloud};
use crate::error::{Error, Result};
use crate::index::NeighborhoodIndex;
use crate::normals::UnitNormalField;

/// Cross products with norm below this are treated as degenerate frames.
const FRAME_TOL: f64 = 1e-9;

/// The three Darboux-frame features of an oriented point pair.
///
/// `alpha` and `phi` are cosines in `[-1, 1]`; `theta` is an angle in
/// `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairFeatures {
    pub alpha: f64,
    pub phi: f64,
    pub theta: f64,
}

/// Computes the pair features between two oriented points.
///
/// The source of the frame is the point whose normal makes the smaller
/// angle with the connecting line; on ties the first argument wins, so
/// callers should pass the lower-id point first. Returns `None` when the
/// points coincide or the connecting direction is parallel to the source
/// normal (degenerate frame).
pub fn pair_features(
    p_i: Point3<f64>,
    n_i: Vector3<f64>,
    p_j: Point3<f64>,
    n_j: Vector3<f64>,
) -> Option<PairFeatures> {
    let diff = p_j - p_i;
    let len = diff.norm();
    if len == 0.0 {
        return None;
    }
    let dir = diff / len;

    // Larger |cos| means a smaller angle with the (undirected) line.
    let (u, n_t, d) = if n_i.dot(&dir).abs() >= n_j.dot(&dir).abs() {
        (n_i, n_j, dir)
    } else {
        (n_j, n_i, -dir)
    };

    let v_raw = d.cross(&u);
    let v_len = v_raw.norm();
    if v_len <= FRAME_TOL {
        return None;
    }
    let v = v_raw / v_len;
    let w = u.cross(&v);

    Some(PairFeatures {
        alpha: v.dot(&n_t).clamp(-1.0, 1.0),
        phi: u.dot(&d).clamp(-1.0, 1.0),
        theta: w.dot(&n_t).atan2(u.dot(&n_t)),
    })
}

/// Histogram layout and neighborhood parameters for SPFH/FPFH.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescriptorConfig {
    /// Bins per feature; the descriptor length is `3 * bins`.
    pub bins: usize,
    /// Neighbor count for both the SPFH pairs and the FPFH aggregation.
    pub k: usize,
    /// Lower clamp for the FPFH distance weights, as a fraction of the
    /// cloud diameter.
    pub weight_floor_factor: f64,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        Self {
            bins: 11,
            k: 16,
            weight_floor_factor: 1e-12,
        }
    }
}

impl DescriptorConfig {
    fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::InvalidParameter(format!(
                "descriptor bins must be >= 2, got {}",
                self.bins
            )));
        }
        if self.k < 2 {
            return Err(Error::InvalidParameter(format!(
                "descriptor k must be >= 2, got {}",
                self.k
            )));
        }
        if !(self.weight_floor_factor > 0.0) {
            return Err(Error::InvalidParameter(
                "descriptor weight floor must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A simplified point feature histogram: three concatenated per-feature
/// blocks, each L1-normalized (or all-zero when the point had no valid
/// pairs).
#[derive(Debug, Clone, PartialEq)]
pub struct Spfh {
    pub values: Vec<f64>,
    pub valid_pairs: usize,
    pub skipped_pairs: usize,
}

impl Spfh {
    pub fn is_flagged(&self) -> bool {
        self.valid_pairs == 0
    }
}

/// Per-point FPFH descriptors plus (once scored) scalar anomaly scores.
#[derive(Debug, Clone)]
pub struct DescriptorSet {
    bins: usize,
    histograms: Vec<Vec<f64>>,
    flagged: Vec<bool>,
    scores: Vec<f64>,
}

impl DescriptorSet {
    /// Assembles a set from precomputed histograms (each of length
    /// `3 * bins`); rows marked flagged are treated as invalid descriptors.
    pub fn from_histograms(
        bins: usize,
        histograms: Vec<Vec<f64>>,
        flagged: Vec<bool>,
    ) -> Result<Self> {
        if histograms.len() != flagged.len() {
            return Err(Error::LengthMismatch {
                left: histograms.len(),
                right: flagged.len(),
            });
        }
        if let Some(row) = histograms.iter().find(|h| h.len() != 3 * bins) {
            return Err(Error::InvalidParameter(format!(
                "histogram length {} does not match 3 x {bins} bins",
                row.len()
            )));
        }
        Ok(Self {
            bins,
            histograms,
            flagged,
            scores: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.histograms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.histograms.is_empty()
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn histogram(&self, i: usize) -> &[f64] {
        &self.histograms[i]
    }

    /// `true` when point `i` had no valid pairs and carries an all-zero
    /// histogram.
    pub fn is_flagged(&self, i: usize) -> bool {
        self.flagged[i]
    }

    /// Anomaly scores; empty until [`descriptor_scores`] has run.
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }
}

fn bin_of(value: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let t = (value - lo) / (hi - lo);
    ((t * bins as f64) as usize).min(bins - 1)
}

fn accumulate(hist: &mut [f64], f: &PairFeatures, bins: usize) {
    hist[bin_of(f.alpha, -1.0, 1.0, bins)] += 1.0;
    hist[bins + bin_of(f.phi, -1.0, 1.0, bins)] += 1.0;
    hist[2 * bins + bin_of(f.theta, -PI, PI, bins)] += 1.0;
}

fn normalize_blocks(hist: &mut [f64], bins: usize) {
    for b in 0..3 {
        let block = &mut hist[b * bins..(b + 1) * bins];
        let sum: f64 = block.iter().sum();
        if sum > 0.0 {
            for v in block {
                *v /= sum;
            }
        }
    }
}

/// SPFH of point `i`: pair features between `i` and each of its neighbors
/// (not between neighbors), binned uniformly per feature and L1-normalized
/// per block.
pub fn spfh(
    cloud: &PointCloud,
    normals: &UnitNormalField,
    index: &NeighborhoodIndex,
    i: usize,
    cfg: &DescriptorConfig,
) -> Result<Spfh> {
    cfg.validate()?;
    let neighbors = index.knn(i, cfg.k)?;
    Ok(spfh_from_neighbors(
        cloud,
        normals,
        i,
        neighbors.iter().map(|n| n.id),
        cfg,
    ))
}

fn spfh_from_neighbors(
    cloud: &PointCloud,
    normals: &UnitNormalField,
    i: usize,
    neighbors: impl Iterator<Item = usize>,
    cfg: &DescriptorConfig,
) -> Spfh {
    let mut values = vec![0.0; 3 * cfg.bins];
    let mut valid = 0usize;
    let mut skipped = 0usize;
    for j in neighbors {
        // Pass the lower id first so frame ties resolve to the lower index.
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        match pair_features(
            cloud.point(a),
            normals.normal(a),
            cloud.point(b),
            normals.normal(b),
        ) {
            Some(f) => {
                accumulate(&mut values, &f, cfg.bins);
                valid += 1;
            }
            None => skipped += 1,
        }
    }
    normalize_blocks(&mut values, cfg.bins);
    Spfh {
        values,
        valid_pairs: valid,
        skipped_pairs: skipped,
    }
}

/// FPFH descriptors for every point: each point's SPFH plus the
/// distance-weighted mean of its neighbors' SPFHs, re-normalized per
/// feature block. Points whose own SPFH had no valid pairs stay flagged
/// with an all-zero histogram.
pub fn fpfh(
    cloud: &PointCloud,
    normals: &UnitNormalField,
    index: &NeighborhoodIndex,
    cfg: &DescriptorConfig,
) -> Result<DescriptorSet> {
    cfg.validate()?;
    if normals.len() != cloud.len() {
        return Err(Error::LengthMismatch {
            left: cloud.len(),
            right: normals.len(),
        });
    }
    let neighbor_lists: Vec<_> = (0..cloud.len())
        .into_par_iter()
        .map(|i| index.knn(i, cfg.k))
        .collect::<Result<_>>()?;

    let spfhs: Vec<Spfh> = neighbor_lists
        .par_iter()
        .enumerate()
        .map(|(i, neigh)| {
            spfh_from_neighbors(cloud, normals, i, neigh.iter().map(|n| n.id), cfg)
        })
        .collect();

    let floor = cfg.weight_floor_factor * cloud.diameter();
    let histograms: Vec<Vec<f64>> = neighbor_lists
        .par_iter()
        .enumerate()
        .map(|(i, neigh)| {
            if spfhs[i].is_flagged() {
                return vec![0.0; 3 * cfg.bins];
            }
            let mut out = spfhs[i].values.clone();
            if !neigh.is_empty() {
                let scale = 1.0 / neigh.len() as f64;
                for n in neigh {
                    let weight = scale / n.dist.max(floor);
                    for (o, s) in out.iter_mut().zip(&spfhs[n.id].values) {
                        *o += weight * s;
                    }
                }
            }
            normalize_blocks(&mut out, cfg.bins);
            out
        })
        .collect();

    let flagged = spfhs.iter().map(|s| s.is_flagged()).collect();
    Ok(DescriptorSet {
        bins: cfg.bins,
        histograms,
        flagged,
        scores: Vec::new(),
    })
}

/// Fills per-point anomaly scores: the L1 distance from each descriptor to
/// the coordinate-wise median descriptor of the unflagged points. Flagged
/// points receive the maximum finite score (conservatively anomalous).
pub fn descriptor_scores(mut set: DescriptorSet) -> DescriptorSet {
    let n = set.len();
    let dim = 3 * set.bins;
    let valid_ids: Vec<usize> = (0..n).filter(|&i| !set.flagged[i]).collect();

    let mut scores = vec![0.0; n];
    if !valid_ids.is_empty() {
        let mut median = vec![0.0; dim];
        let mut column = Vec::with_capacity(valid_ids.len());
        for d in 0..dim {
            column.clear();
            column.extend(valid_ids.iter().map(|&i| set.histograms[i][d]));
            median[d] = median_of(&mut column);
        }
        let mut max_score = 0.0f64;
        for &i in &valid_ids {
            let s: f64 = set.histograms[i]
                .iter()
                .zip(&median)
                .map(|(a, b)| (a - b).abs())
                .sum();
            scores[i] = s;
            max_score = max_score.max(s);
        }
        for i in 0..n {
            if set.flagged[i] {
                scores[i] = max_score;
            }
        }
    }
    set.scores = scores;
    set
}

/// Rule mapping scalar anomaly scores to binary labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdRule {
    /// Anomalous iff `score > median + factor * 1.4826 * MAD`.
    RobustMad { factor: f64 },
    /// Anomalous iff `score > quantile(scores, q)`, `q` in [0, 1].
    Quantile { q: f64 },
    /// Anomalous iff `score > value`.
    Fixed { value: f64 },
}

impl Default for ThresholdRule {
    fn default() -> Self {
        ThresholdRule::RobustMad { factor: 3.0 }
    }
}

/// Applies a [`ThresholdRule`] to scores. The robust rule requires at least
/// 8 points; constant scores label everything normal under both data-driven
/// rules.
pub fn threshold_scores(scores: &[f64], rule: ThresholdRule) -> Result<LabelVector> {
    let threshold = match rule {
        ThresholdRule::RobustMad { factor } => {
            if scores.len() < 8 {
                return Err(Error::InvalidParameter(format!(
                    "robust threshold needs at least 8 points, got {}",
                    scores.len()
                )));
            }
            if !(factor >= 0.0) {
                return Err(Error::InvalidParameter(
                    "MAD factor must be non-negative".into(),
                ));
            }
            let mut buf: Vec<f64> = scores.to_vec();
            let med = median_of(&mut buf);
            buf.clear();
            buf.extend(scores.iter().map(|s| (s - med).abs()));
            let mad = median_of(&mut buf);
            med + factor * 1.4826 * mad
        }
        ThresholdRule::Quantile { q } => {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::InvalidParameter(format!(
                    "quantile must lie in [0, 1], got {q}"
                )));
            }
            if scores.is_empty() {
                return Err(Error::InvalidParameter("no scores to threshold".into()));
            }
            let mut buf: Vec<f64> = scores.to_vec();
            buf.sort_by(f64::total_cmp);
            let pos = (q * (buf.len() - 1) as f64).round() as usize;
            buf[pos]
        }
        ThresholdRule::Fixed { value } => value,
    };
    Ok(scores.iter().map(|&s| s > threshold).collect())
}

fn median_of(buf: &mut Vec<f64>) -> f64 {
    buf.sort_by(f64::total_cmp);
    let n = buf.len();
    if n % 2 == 1 {
        buf[n / 2]
    } else {
        0.5 * (buf[n / 2 - 1] + buf[n / 2])
    }
}
