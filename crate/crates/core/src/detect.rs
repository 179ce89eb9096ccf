//! End-to-end detectors: each takes a raw cloud and produces per-point
//! scores and binary labels, timing its phases along the way.

use std::time::Instant;

use nalgebra::Vector3;

use crate::cloud::{LabelVector, PointCloud};
use crate::decomposition::{
    bisect_lambda, build_smoothness_operator, labels_from_rows, lambda_max, solve_decomposition,
    DecompositionConfig,
};
use crate::descriptors::{descriptor_scores, fpfh, threshold_scores, DescriptorConfig, ThresholdRule};
use crate::error::Result;
use crate::index::{build_index, NeighborhoodConfig};
use crate::latent::{
    build_smoothness_graph, map_labels, mean_field_em, LviConfig, LviParams,
};
use crate::normals::{estimate_normals, plane_residuals, OrientationRule};

/// How the decomposition detector picks its sparsity weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaRule {
    /// `lambda = fraction * lambda_max(H, Y, eps)`.
    FractionOfMax(f64),
    /// A fixed value.
    Explicit(f64),
    /// Bisection to the most sensitive lambda whose anomaly fraction stays
    /// at or below the ceiling.
    TargetFraction { ceiling: f64, rounds: usize },
}

/// Descriptor-deviation detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpfhDetector {
    pub k: usize,
    pub bins: usize,
    pub rule: ThresholdRule,
    pub viewpoint: Vector3<f64>,
}

impl Default for FpfhDetector {
    fn default() -> Self {
        Self {
            k: 16,
            bins: 11,
            rule: ThresholdRule::default(),
            viewpoint: Vector3::z(),
        }
    }
}

/// Sparse-decomposition detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgradeDetector {
    pub graph_k: usize,
    pub lambda: LambdaRule,
    /// Penalty smoothing; `None` derives `(1e-4 * diameter)^2`.
    pub epsilon: Option<f64>,
    /// Zero-row cutoff; `None` derives `1e-6 * diameter`.
    pub delta: Option<f64>,
    pub max_outer: usize,
    pub max_inner: usize,
    pub rel_tol: f64,
}

impl Default for SgradeDetector {
    fn default() -> Self {
        Self {
            graph_k: 10,
            lambda: LambdaRule::FractionOfMax(0.1),
            epsilon: None,
            delta: None,
            max_outer: 30,
            max_inner: 200,
            rel_tol: 1e-6,
        }
    }
}

/// Latent-variable detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LviDetector {
    pub k: usize,
    pub pi: f64,
    /// Optional overrides of the data-driven initialization.
    pub sigma0: Option<f64>,
    pub sigma1: Option<f64>,
    pub beta_s: Option<f64>,
    pub beta_d: Option<f64>,
    pub update_pi: bool,
    pub max_em_iters: usize,
    pub viewpoint: Vector3<f64>,
}

impl Default for LviDetector {
    fn default() -> Self {
        Self {
            k: 10,
            pi: 0.05,
            sigma0: None,
            sigma1: None,
            beta_s: None,
            beta_d: None,
            update_pi: false,
            max_em_iters: 100,
            viewpoint: Vector3::z(),
        }
    }
}

/// One of the three detectors with its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DetectorConfig {
    Fpfh(FpfhDetector),
    Sgrade(SgradeDetector),
    Lvi(LviDetector),
}

impl DetectorConfig {
    pub fn method_name(&self) -> &'static str {
        match self {
            DetectorConfig::Fpfh(_) => "fpfh",
            DetectorConfig::Sgrade(_) => "sgrade",
            DetectorConfig::Lvi(_) => "lvi",
        }
    }
}

/// Detector output: labels, the scores they were cut from, per-phase
/// timings, and an optional iteration trace (solver objective or evidence
/// bound) for convergence dumps.
#[derive(Debug, Clone)]
pub struct Detection {
    pub labels: LabelVector,
    pub scores: Vec<f64>,
    pub timings: Vec<(String, f64)>,
    /// `(column name, values per iteration)`.
    pub trace: Option<(&'static str, Vec<f64>)>,
}

/// Runs the configured detector on a cloud.
pub fn run_detector(cloud: &PointCloud, config: &DetectorConfig) -> Result<Detection> {
    match config {
        DetectorConfig::Fpfh(c) => run_fpfh(cloud, c),
        DetectorConfig::Sgrade(c) => run_sgrade(cloud, c),
        DetectorConfig::Lvi(c) => run_lvi(cloud, c),
    }
}

struct PhaseClock {
    timings: Vec<(String, f64)>,
    last: Instant,
}

impl PhaseClock {
    fn start() -> Self {
        Self {
            timings: Vec::new(),
            last: Instant::now(),
        }
    }

    fn lap(&mut self, name: &str) {
        let now = Instant::now();
        self.timings
            .push((name.to_string(), (now - self.last).as_secs_f64()));
        self.last = now;
    }
}

fn run_fpfh(cloud: &PointCloud, c: &FpfhDetector) -> Result<Detection> {
    let mut clock = PhaseClock::start();
    let index = build_index(cloud, NeighborhoodConfig::knn(c.k))?;
    clock.lap("index");
    let normals = estimate_normals(cloud, &index, OrientationRule::Viewpoint(c.viewpoint))?;
    clock.lap("normals");
    let cfg = DescriptorConfig {
        bins: c.bins,
        k: c.k,
        ..Default::default()
    };
    let set = descriptor_scores(fpfh(cloud, &normals, &index, &cfg)?);
    clock.lap("descriptors");
    let scores = set.scores().to_vec();
    let labels = threshold_scores(&scores, c.rule)?;
    clock.lap("threshold");
    Ok(Detection {
        labels,
        scores,
        timings: clock.timings,
        trace: None,
    })
}

fn run_sgrade(cloud: &PointCloud, c: &SgradeDetector) -> Result<Detection> {
    let mut clock = PhaseClock::start();
    let index = build_index(cloud, NeighborhoodConfig::knn(c.graph_k))?;
    let h = build_smoothness_operator(cloud, &index, c.graph_k)?;
    clock.lap("graph");

    let y: Vec<Vector3<f64>> = cloud.points().iter().map(|p| p.coords).collect();
    let mut cfg = DecompositionConfig::for_scale(cloud.diameter());
    if let Some(eps) = c.epsilon {
        cfg.epsilon = eps;
    }
    if let Some(delta) = c.delta {
        cfg.zero_row_cutoff = delta;
    }
    cfg.max_outer = c.max_outer;
    cfg.max_inner = c.max_inner;
    cfg.rel_tol = c.rel_tol;

    let result = match c.lambda {
        LambdaRule::Explicit(lambda) => {
            cfg.lambda = lambda;
            solve_decomposition(&y, &h, &cfg)?
        }
        LambdaRule::FractionOfMax(fraction) => {
            cfg.lambda = fraction * lambda_max(&h, &y, cfg.epsilon);
            solve_decomposition(&y, &h, &cfg)?
        }
        LambdaRule::TargetFraction { ceiling, rounds } => {
            let (_, result) = bisect_lambda(&y, &h, &cfg, ceiling, rounds)?;
            result
        }
    };
    clock.lap("solve");
    let labels = labels_from_rows(&result, cfg.zero_row_cutoff);
    clock.lap("threshold");
    Ok(Detection {
        labels,
        scores: result.row_norms.clone(),
        timings: clock.timings,
        trace: Some(("objective", result.objective_trace)),
    })
}

fn run_lvi(cloud: &PointCloud, c: &LviDetector) -> Result<Detection> {
    let mut clock = PhaseClock::start();
    let index = build_index(cloud, NeighborhoodConfig::knn(c.k))?;
    let normals = estimate_normals(cloud, &index, OrientationRule::Viewpoint(c.viewpoint))?;
    clock.lap("normals");
    let residuals = plane_residuals(cloud, &index, &normals)?;
    let graph = build_smoothness_graph(&normals, &index)?;
    clock.lap("graph");

    let mut init = LviParams::init_from_data(&residuals, &graph, cloud.diameter());
    init.pi = c.pi;
    if let Some(v) = c.sigma0 {
        init.sigma0 = v;
    }
    if let Some(v) = c.sigma1 {
        init.sigma1 = v;
    }
    if let Some(v) = c.beta_s {
        init.beta_s = v;
    }
    if let Some(v) = c.beta_d {
        init.beta_d = v;
    }
    let cfg = LviConfig {
        max_em_iters: c.max_em_iters,
        update_pi: c.update_pi,
        scale: cloud.diameter(),
        ..Default::default()
    };
    let (post, _) = mean_field_em(&residuals, &graph, &init, &cfg)?;
    clock.lap("em");
    let labels = map_labels(&post);
    clock.lap("threshold");
    Ok(Detection {
        labels,
        scores: post.gamma.clone(),
        timings: clock.timings,
        trace: Some(("bound", post.bound_trace)),
    })
}
