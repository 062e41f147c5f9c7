//! Problem builders: 1D line fitting, 2D grid denoising (with coarse-to-fine
//! multiscale), a 2D robot/landmark simulation, random test graphs and the
//! named presets used by the interactive session.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GbpError, Result};
use crate::factor_graph::{FactorGraph, GraphConfig, VarId};
use crate::factors::{range_bearing_h, wrap_angle, FactorParams};
use crate::gaussian::{GaussianCanonical, GaussianMoments};
use crate::schedules::{solve_traced, SchedulePolicy, Scheduler, SolveSummary};

fn check_sigma(name: &str, s: f64) -> Result<()> {
    if s > 0.0 && s.is_finite() {
        Ok(())
    } else {
        Err(GbpError::InvalidSpec(format!("{name} must be positive, got {s}")))
    }
}

fn check_t(t: Option<f64>) -> Result<()> {
    match t {
        Some(t) => check_sigma("huber_t", t),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------- line fit

/// Scalar nodes `y0..y{n-1}` at `x = 0, 1, …, n−1`, smoothness between
/// neighbours, and one data factor per measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineFitSpec {
    pub n_vars: usize,
    pub data_points: Vec<(f64, f64)>,
    pub smooth_sigma: f64,
    pub data_sigma: f64,
    /// Huber threshold on data factors.
    pub huber_t: Option<f64>,
    /// Huber threshold on smoothness factors.
    #[serde(default)]
    pub smooth_huber_t: Option<f64>,
}

impl LineFitSpec {
    /// Same problem without data point `k`.
    pub fn without_point(&self, k: usize) -> Self {
        let mut out = self.clone();
        out.data_points.remove(k);
        out
    }

    /// Huber on both data and smoothness factors (or neither).
    pub fn with_loss(mut self, huber_t: Option<f64>) -> Self {
        self.huber_t = huber_t;
        self.smooth_huber_t = huber_t;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n_vars < 2 {
            return Err(GbpError::InvalidSpec("line fit needs at least 2 nodes".into()));
        }
        check_sigma("smooth_sigma", self.smooth_sigma)?;
        check_sigma("data_sigma", self.data_sigma)?;
        check_t(self.huber_t)?;
        check_t(self.smooth_huber_t)?;
        let span = (self.n_vars - 1) as f64;
        for (x, y) in &self.data_points {
            if !(0.0..=span).contains(x) || !y.is_finite() {
                return Err(GbpError::InvalidSpec(format!("data point ({x}, {y}) outside [0, {span}]")));
            }
        }
        Ok(())
    }
}

const LINEFIT_NODES: usize = 16;

fn noisy_points(seed: u64, n_nodes: usize, f: impl Fn(f64) -> f64, noise: f64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise).expect("valid sigma");
    (0..2 * n_nodes - 1)
        .map(|k| {
            let x = 0.5 * k as f64;
            (x, f(x) + normal.sample(&mut rng))
        })
        .collect()
}

/// Index of the gross outlier in [`linefit_outlier_preset`].
pub const OUTLIER_INDEX: usize = 13;

/// Smooth curve sampled at every half node, with one gross outlier.
pub fn linefit_outlier_preset() -> LineFitSpec {
    let mut data_points = noisy_points(7, LINEFIT_NODES, |x| 1.0 + 0.3 * x + 0.5 * (0.8 * x).sin(), 0.05);
    data_points[OUTLIER_INDEX].1 += 6.0;
    LineFitSpec {
        n_vars: LINEFIT_NODES,
        data_points,
        smooth_sigma: 0.3,
        data_sigma: 0.1,
        huber_t: None,
        smooth_huber_t: None,
    }
}

/// Node pair straddling the discontinuity in [`linefit_step_preset`].
pub const STEP_AT: usize = 7;

/// Piecewise-constant signal with a single step between nodes 7 and 8.
pub fn linefit_step_preset() -> LineFitSpec {
    let data_points = noisy_points(11, LINEFIT_NODES, |x| if x < STEP_AT as f64 + 0.75 { 0.0 } else { 3.0 }, 0.05);
    LineFitSpec {
        n_vars: LINEFIT_NODES,
        data_points,
        smooth_sigma: 0.05,
        data_sigma: 0.1,
        huber_t: None,
        smooth_huber_t: None,
    }
}

pub fn build_line_fit(spec: &LineFitSpec) -> Result<FactorGraph> {
    spec.validate()?;
    let mut g = FactorGraph::new();
    let ids: Vec<VarId> = (0..spec.n_vars)
        .map(|i| g.add_variable(format!("y{i}"), 1, None, None))
        .collect::<Result<_>>()?;
    for i in 0..spec.n_vars - 1 {
        g.add_factor_params(
            format!("s{i}"),
            &[ids[i], ids[i + 1]],
            FactorParams::Smooth1d {
                sigma: spec.smooth_sigma,
                huber_t: spec.smooth_huber_t,
            },
        )?;
    }
    for (k, (x, y)) in spec.data_points.iter().enumerate() {
        let i = (x.floor() as usize).min(spec.n_vars - 1);
        let alpha = x - i as f64;
        if alpha == 0.0 {
            g.add_factor_params(
                format!("d{k}"),
                &[ids[i]],
                FactorParams::Offset1d {
                    d: *y,
                    sigma: spec.data_sigma,
                    huber_t: spec.huber_t,
                },
            )?;
        } else {
            g.add_factor_params(
                format!("d{k}"),
                &[ids[i], ids[i + 1]],
                FactorParams::CustomLinear {
                    j: vec![vec![1.0 - alpha, alpha]],
                    d: vec![*y],
                    sigma_n: vec![vec![spec.data_sigma * spec.data_sigma]],
                    huber_t: spec.huber_t,
                },
            )?;
        }
    }
    g.config.damping = g.default_damping();
    Ok(g)
}

// ---------------------------------------------------------------- grids

/// A scalar image grid with one data factor per pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    /// Row-major observed intensities.
    pub observed: Vec<f64>,
    pub data_sigma: f64,
    pub smooth_sigma: f64,
    pub huber_t: Option<f64>,
    #[serde(default)]
    pub smooth_huber_t: Option<f64>,
    /// Total number of multiscale levels (1 = flat).
    pub levels: usize,
}

impl GridSpec {
    pub fn new(width: usize, height: usize, observed: Vec<f64>, data_sigma: f64, smooth_sigma: f64) -> Self {
        Self {
            width,
            height,
            observed,
            data_sigma,
            smooth_sigma,
            huber_t: None,
            smooth_huber_t: None,
            levels: 1,
        }
    }

    pub fn with_loss(mut self, huber_t: Option<f64>) -> Self {
        self.huber_t = huber_t;
        self.smooth_huber_t = huber_t;
        self
    }

    /// The finest level as an explicit [`GridLevel`].
    pub fn level0(&self) -> GridLevel {
        GridLevel {
            width: self.width,
            height: self.height,
            observed: self.observed.clone(),
            data_sigma: vec![self.data_sigma; self.observed.len()],
            smooth_sigma: self.smooth_sigma,
            huber_t: self.huber_t,
            smooth_huber_t: self.smooth_huber_t,
        }
    }
}

/// One level of a grid pyramid; data noise may differ per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct GridLevel {
    pub width: usize,
    pub height: usize,
    pub observed: Vec<f64>,
    pub data_sigma: Vec<f64>,
    pub smooth_sigma: f64,
    pub huber_t: Option<f64>,
    pub smooth_huber_t: Option<f64>,
}

impl GridLevel {
    fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(GbpError::InvalidSpec("grid must be at least 2×2".into()));
        }
        let n = self.width * self.height;
        if self.observed.len() != n || self.data_sigma.len() != n {
            return Err(GbpError::InvalidSpec(format!(
                "grid {}×{} needs {n} observations",
                self.width, self.height
            )));
        }
        for s in &self.data_sigma {
            check_sigma("data_sigma", *s)?;
        }
        check_sigma("smooth_sigma", self.smooth_sigma)?;
        check_t(self.huber_t)?;
        check_t(self.smooth_huber_t)
    }
}

pub fn pixel_id(r: usize, c: usize) -> String {
    format!("p{r}_{c}")
}

pub fn build_grid(spec: &GridSpec) -> Result<FactorGraph> {
    if spec.levels == 0 {
        return Err(GbpError::InvalidSpec("levels must be ≥ 1".into()));
    }
    build_level(&spec.level0())
}

/// Variables `p{r}_{c}`, unary data factors `d{r}_{c}`, and smoothness
/// factors `h{r}_{c}` (to the right) and `v{r}_{c}` (below).
pub fn build_level(level: &GridLevel) -> Result<FactorGraph> {
    level.validate()?;
    let (w, h) = (level.width, level.height);
    let mut g = FactorGraph::new();
    let mut ids = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            ids.push(g.add_variable(pixel_id(r, c), 1, None, None)?);
        }
    }
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            g.add_factor_params(
                format!("d{r}_{c}"),
                &[ids[i]],
                FactorParams::Offset1d {
                    d: level.observed[i],
                    sigma: level.data_sigma[i],
                    huber_t: level.huber_t,
                },
            )?;
        }
    }
    let smooth = FactorParams::Smooth1d {
        sigma: level.smooth_sigma,
        huber_t: level.smooth_huber_t,
    };
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if c + 1 < w {
                g.add_factor_params(format!("h{r}_{c}"), &[ids[i], ids[i + 1]], smooth.clone())?;
            }
            if r + 1 < h {
                g.add_factor_params(format!("v{r}_{c}"), &[ids[i], ids[i + w]], smooth.clone())?;
            }
        }
    }
    g.config.damping = g.default_damping();
    Ok(g)
}

/// Merge 2×2 pixel blocks. Coarse data factors are the product of the
/// block's data factors (mean of observations, σ/√k); smoothness σ is kept.
/// Returns the coarse level and each fine pixel's coarse parent index.
pub fn coarsen(level: &GridLevel) -> Result<(GridLevel, Vec<usize>)> {
    level.validate().map_err(|_| GbpError::NotAGrid)?;
    let (w, h) = (level.width, level.height);
    let (cw, ch) = (w.div_ceil(2), h.div_ceil(2));
    if cw < 2 || ch < 2 {
        return Err(GbpError::NotAGrid);
    }
    let mut info = vec![0.0; cw * ch];
    let mut prec = vec![0.0; cw * ch];
    let mut parent = vec![0; w * h];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let p = (r / 2) * cw + c / 2;
            parent[i] = p;
            let lam = 1.0 / (level.data_sigma[i] * level.data_sigma[i]);
            prec[p] += lam;
            info[p] += lam * level.observed[i];
        }
    }
    let coarse = GridLevel {
        width: cw,
        height: ch,
        observed: info.iter().zip(&prec).map(|(e, l)| e / l).collect(),
        data_sigma: prec.iter().map(|l| 1.0 / l.sqrt()).collect(),
        smooth_sigma: level.smooth_sigma,
        huber_t: level.huber_t,
        smooth_huber_t: level.smooth_huber_t,
    };
    Ok((coarse, parent))
}

/// Warm-start a fine grid from a solved coarse grid: each fine node takes
/// its parent's mean as its initial estimate, and every smoothness message
/// is seeded at the sender's parent mean with the matching coarse message's
/// precision.
pub fn prolong(fine: &mut FactorGraph, fine_level: &GridLevel, coarse: &FactorGraph, parent: &[usize]) -> Result<()> {
    let cw = fine_level.width.div_ceil(2);
    let coarse_means = coarse.current_estimates();
    let coarse_ids: Vec<VarId> = coarse.variable_ids().collect();
    let mean_of = |p: usize| -> f64 { coarse_means[coarse_ids[p].0].as_ref().map_or(0.0, |m| m[0]) };
    let fine_ids: Vec<VarId> = fine.variable_ids().collect();
    for (i, v) in fine_ids.iter().enumerate() {
        fine.set_init(*v, Some(DVector::from_element(1, mean_of(parent[i]))))?;
    }
    let fids: Vec<_> = fine.factor_ids().collect();
    for f in fids {
        let node = fine.factor(f).expect("live");
        if node.neighbors().len() != 2 {
            continue;
        }
        let (a, b) = (node.neighbors()[0], node.neighbors()[1]);
        let ia = fine_ids.iter().position(|v| *v == a).expect("grid");
        let ib = fine_ids.iter().position(|v| *v == b).expect("grid");
        let (pa, pb) = (parent[ia], parent[ib]);
        // precision from the coarse message along the same direction, if the
        // edge crosses blocks; otherwise from any coarse message into the parent
        let lam = |from: usize, to: usize| -> f64 {
            let cf = coarse_edge(coarse, cw, from, to);
            match cf {
                Some((f, slot)) => coarse.factor(f).expect("live").message_to(slot).precision[(0, 0)],
                None => 0.0,
            }
        };
        let (lab, lba) = if pa != pb { (lam(pa, pb), lam(pb, pa)) } else { (0.0, 0.0) };
        // message into b carries a's side, message into a carries b's side
        fine.seed_message(f, 1, GaussianCanonical::new(
            DVector::from_element(1, lab * mean_of(pa)),
            DMatrix::from_element(1, 1, lab),
        )?)?;
        fine.seed_message(f, 0, GaussianCanonical::new(
            DVector::from_element(1, lba * mean_of(pb)),
            DMatrix::from_element(1, 1, lba),
        )?)?;
    }
    Ok(())
}

/// Coarse smoothness factor joining coarse pixels `from` and `to`, with the slot of `to`.
fn coarse_edge(coarse: &FactorGraph, cw: usize, from: usize, to: usize) -> Option<(crate::factor_graph::FactorId, usize)> {
    let (lo, hi) = (from.min(to), from.max(to));
    let (r, c) = (lo / cw, lo % cw);
    let name = if hi == lo + 1 {
        format!("h{r}_{c}")
    } else if hi == lo + cw {
        format!("v{r}_{c}")
    } else {
        return None;
    };
    let f = coarse.factor_id(&name).ok()?;
    Some((f, if to == lo { 0 } else { 1 }))
}

const COARSE_TOL_FACTOR: f64 = 1e-2;

/// Iteration counts of a coarse-to-fine solve.
#[derive(Debug, Clone)]
pub struct MultiscaleReport {
    /// Rounds spent at each level, coarsest first.
    pub level_rounds: Vec<usize>,
    /// The solved finest graph.
    pub graph: FactorGraph,
    pub fine: SolveSummary,
}

impl MultiscaleReport {
    pub fn fine_rounds(&self) -> usize {
        *self.level_rounds.last().expect("at least one level")
    }
}

/// Solve coarsest level first, prolong, solve the next, once per level.
/// Level traces record total energy.
/// `spec.levels == 1` is a flat solve. Every level runs synchronous rounds.
pub fn solve_multiscale(spec: &GridSpec, config: &GraphConfig, max_rounds: usize, tol: f64) -> Result<MultiscaleReport> {
    if spec.levels == 0 {
        return Err(GbpError::InvalidSpec("levels must be ≥ 1".into()));
    }
    let mut pyramid = vec![(spec.level0(), Vec::new())];
    for _ in 1..spec.levels {
        let (coarse, parent) = coarsen(&pyramid.last().expect("nonempty").0)?;
        pyramid.push((coarse, parent));
    }
    let mut level_rounds = Vec::new();
    let mut previous: Option<FactorGraph> = None;
    let mut last = None;
    for idx in (0..pyramid.len()).rev() {
        let level = &pyramid[idx].0;
        let mut g = build_level(level)?;
        g.config = config.clone();
        if let Some(coarse) = &previous {
            prolong(&mut g, level, coarse, &pyramid[idx + 1].1)?;
        }
        // coarse levels are cheap; solving them tightly keeps their
        // low-frequency error out of the finer level
        let level_tol = if idx == 0 { tol } else { tol * COARSE_TOL_FACTOR };
        let mut s = Scheduler::new(SchedulePolicy::synchronous())?;
        let summary = solve_traced(&mut g, &mut s, max_rounds, level_tol)?;
        level_rounds.push(summary.rounds);
        last = Some(summary);
        previous = Some(g);
    }
    Ok(MultiscaleReport {
        level_rounds,
        graph: previous.expect("solved"),
        fine: last.expect("solved"),
    })
}

/// Smooth diagonal ramp in `[0, 1]`.
pub fn ramp_image(width: usize, height: usize) -> Vec<f64> {
    let denom = (width + height - 2).max(1) as f64;
    (0..height)
        .flat_map(|r| (0..width).map(move |c| (r + c) as f64 / denom))
        .collect()
}

/// Vertical step (0.2 left, 0.8 right).
pub fn step_image(width: usize, height: usize) -> Vec<f64> {
    (0..height)
        .flat_map(|_| (0..width).map(move |c| if c < width / 2 { 0.2 } else { 0.8 }))
        .collect()
}

/// Replace a `fraction` of pixels with 0 or 1.
pub fn salt_and_pepper(image: &[f64], fraction: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    image
        .iter()
        .map(|v| {
            if rng.random::<f64>() < fraction {
                if rng.random::<bool>() { 1.0 } else { 0.0 }
            } else {
                *v
            }
        })
        .collect()
}

/// Row-major mean estimates of a grid built by [`build_level`].
pub fn grid_means(g: &FactorGraph) -> Vec<f64> {
    let est = g.current_estimates();
    g.variable_ids()
        .map(|v| est[v.0].as_ref().map_or(f64::NAN, |m| m[0]))
        .collect()
}

/// Largest `|x[r][c+1] − x[r][c]|` across the vertical midline.
pub fn cross_edge_gradient(x: &[f64], width: usize, height: usize) -> f64 {
    let c = width / 2 - 1;
    (0..height)
        .map(|r| (x[r * width + c + 1] - x[r * width + c]).abs())
        .fold(0.0, f64::max)
}

pub fn mean_squared_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

// ---------------------------------------------------------------- pose sim

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSimSpec {
    pub waypoints: Vec<[f64; 2]>,
    pub landmarks: Vec<[f64; 2]>,
    pub odometry_sigma: f64,
    pub sigma_r: f64,
    pub sigma_b: f64,
    pub radius: f64,
    pub prior_sigma: f64,
    pub seed: u64,
}

impl PoseSimSpec {
    /// 20 poses around a circle of radius 5 with 5 landmarks.
    pub fn preset(seed: u64) -> Self {
        let waypoints = (0..20)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / 20.0;
                [5.0 * a.cos(), 5.0 * a.sin()]
            })
            .collect();
        Self {
            waypoints,
            landmarks: vec![[0.0, 0.0], [7.5, 0.5], [-7.0, -1.0], [1.0, 7.0], [-0.5, -7.5]],
            odometry_sigma: 0.1,
            sigma_r: 0.1,
            sigma_b: 0.03,
            radius: 6.0,
            prior_sigma: 0.01,
            seed,
        }
    }

    pub fn noiseless(mut self) -> Self {
        self.odometry_sigma = 0.0;
        self.sigma_r = 0.0;
        self.sigma_b = 0.0;
        self
    }
}

/// A simulated problem: graph plus ground truth.
#[derive(Debug, Clone)]
pub struct PoseSim {
    pub graph: FactorGraph,
    /// `(id, position)` for every pose and every observed landmark.
    pub ground_truth: Vec<(String, [f64; 2])>,
    /// Landmarks never within sensing radius (left out of the graph).
    pub unseen: Vec<String>,
}

impl PoseSim {
    /// Root-mean-square position error of an assignment against ground truth.
    pub fn rmse(&self, x: &crate::factor_graph::Assignment) -> Result<f64> {
        let mut total = 0.0;
        for (id, p) in &self.ground_truth {
            let v = self.graph.var_id(id)?;
            let est = x
                .get(v.0)
                .and_then(Option::as_ref)
                .ok_or_else(|| GbpError::MissingAssignment(id.clone()))?;
            total += (est[0] - p[0]).powi(2) + (est[1] - p[1]).powi(2);
        }
        Ok((total / self.ground_truth.len() as f64).sqrt())
    }
}

/// Noise sigmas of zero give exact measurements. The configured
/// sigmas still define the factor covariances, falling back to small
/// defaults when zero.
pub fn simulate_poses(spec: &PoseSimSpec) -> Result<PoseSim> {
    if spec.waypoints.is_empty() {
        return Err(GbpError::InvalidSpec("need at least one waypoint".into()));
    }
    check_sigma("radius", spec.radius)?;
    check_sigma("prior_sigma", spec.prior_sigma)?;
    for s in [spec.odometry_sigma, spec.sigma_r, spec.sigma_b] {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(GbpError::InvalidSpec(format!("noise sigma must be ≥ 0, got {s}")));
        }
    }
    let model_sigma = |s: f64, fallback: f64| if s > 0.0 { s } else { fallback };
    let (s_odo, s_r, s_b) = (
        model_sigma(spec.odometry_sigma, 0.1),
        model_sigma(spec.sigma_r, 0.1),
        model_sigma(spec.sigma_b, 0.03),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut noise = |s: f64| -> f64 {
        if s > 0.0 {
            Normal::new(0.0, s).expect("valid").sample(&mut rng)
        } else {
            0.0
        }
    };

    // measurements
    let n = spec.waypoints.len();
    let mut odometry = Vec::new();
    for i in 1..n {
        let (a, b) = (spec.waypoints[i - 1], spec.waypoints[i]);
        odometry.push([b[0] - a[0] + noise(spec.odometry_sigma), b[1] - a[1] + noise(spec.odometry_sigma)]);
    }
    let mut observations = Vec::new();
    for (i, r) in spec.waypoints.iter().enumerate() {
        for (j, l) in spec.landmarks.iter().enumerate() {
            let dist = (l[0] - r[0]).hypot(l[1] - r[1]);
            if dist <= spec.radius {
                let [range, bearing] = range_bearing_h(*r, *l)?;
                observations.push((i, j, range + noise(spec.sigma_r), wrap_angle(bearing + noise(spec.sigma_b))));
            }
        }
    }

    // initial estimates: dead reckoning, landmarks from first sighting
    let mut poses = vec![spec.waypoints[0]];
    for d in &odometry {
        let p = poses.last().expect("nonempty");
        poses.push([p[0] + d[0], p[1] + d[1]]);
    }
    let mut landmark_init: Vec<Option<[f64; 2]>> = vec![None; spec.landmarks.len()];
    for (i, j, range, bearing) in &observations {
        if landmark_init[*j].is_none() {
            let p = poses[*i];
            landmark_init[*j] = Some([p[0] + range * bearing.cos(), p[1] + range * bearing.sin()]);
        }
    }

    let mut g = FactorGraph::new();
    let mut ground_truth = Vec::new();
    let mut pose_ids = Vec::new();
    for (i, p) in poses.iter().enumerate() {
        let prior = (i == 0).then(|| {
            let lam = 1.0 / (spec.prior_sigma * spec.prior_sigma);
            GaussianCanonical::new(
                DVector::from_vec(vec![lam * spec.waypoints[0][0], lam * spec.waypoints[0][1]]),
                DMatrix::identity(2, 2) * lam,
            )
            .expect("valid")
        });
        pose_ids.push(g.add_variable(format!("x{i}"), 2, prior, Some(DVector::from_row_slice(p)))?);
        ground_truth.push((format!("x{i}"), spec.waypoints[i]));
    }
    let mut unseen = Vec::new();
    let mut landmark_ids = Vec::new();
    for (j, init) in landmark_init.iter().enumerate() {
        match init {
            Some(p) => {
                landmark_ids.push(Some(g.add_variable(format!("l{j}"), 2, None, Some(DVector::from_row_slice(p)))?));
                ground_truth.push((format!("l{j}"), spec.landmarks[j]));
            }
            None => {
                landmark_ids.push(None);
                unseen.push(format!("l{j}"));
            }
        }
    }
    for (i, d) in odometry.iter().enumerate() {
        g.add_factor_params(
            format!("o{}", i + 1),
            &[pose_ids[i], pose_ids[i + 1]],
            FactorParams::RelPos2d { dx: d[0], dy: d[1], sigma: s_odo },
        )?;
    }
    for (i, j, range, bearing) in observations {
        g.add_factor_params(
            format!("m{i}_{j}"),
            &[pose_ids[i], landmark_ids[j].expect("seen")],
            FactorParams::RangeBearing {
                range,
                bearing,
                sigma_r: s_r,
                sigma_b: s_b,
                huber_t: None,
            },
        )?;
    }
    g.config.damping = g.default_damping();
    Ok(PoseSim {
        graph: g,
        ground_truth,
        unseen,
    })
}

// ---------------------------------------------------------------- random graphs

fn random_spd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let mut m = &a * a.transpose() + DMatrix::identity(n, n) * floor;
    crate::gaussian::symmetrize(&mut m);
    m
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn random_linear_factor(rng: &mut ChaCha8Rng, m: usize, cols: usize, jscale: f64, noise_floor: f64) -> FactorParams {
    let j = DMatrix::from_fn(m, cols, |_, _| rng.random_range(-jscale..jscale));
    let sigma = random_spd(rng, m, noise_floor);
    FactorParams::CustomLinear {
        j: crate::factors::matrix_to_rows(&j),
        d: random_vec(rng, m, 2.0),
        sigma_n: crate::factors::matrix_to_rows(&sigma),
        huber_t: None,
    }
}

/// Random tree: 2..=`max_vars` variables of dimension 1..=`max_dim`, each
/// with a random SPD prior, joined by random binary linear factors, plus a
/// few random unary factors.
pub fn random_tree(seed: u64, max_vars: usize, max_dim: usize) -> FactorGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=max_vars.max(2));
    let mut g = FactorGraph::new();
    let mut ids = Vec::new();
    for i in 0..n {
        let d = rng.random_range(1..=max_dim.max(1));
        let lam = random_spd(&mut rng, d, 0.5);
        let eta = DVector::from_vec(random_vec(&mut rng, d, 1.0));
        let prior = GaussianCanonical::new(eta, lam).expect("spd");
        ids.push((g.add_variable(format!("x{i}"), d, Some(prior), None).expect("fresh"), d));
    }
    for i in 1..n {
        let p = rng.random_range(0..i);
        let m = rng.random_range(1..=max_dim.max(1));
        let params = random_linear_factor(&mut rng, m, ids[p].1 + ids[i].1, 1.0, 0.5);
        g.add_factor_params(format!("f{i}"), &[ids[p].0, ids[i].0], params).expect("valid");
    }
    for i in 0..n {
        if rng.random_bool(0.3) {
            let m = rng.random_range(1..=ids[i].1);
            let params = random_linear_factor(&mut rng, m, ids[i].1, 1.0, 0.5);
            g.add_factor_params(format!("u{i}"), &[ids[i].0], params).expect("valid");
        }
    }
    g.config.damping = 1.0;
    g
}

/// Random loopy graph: a random spanning tree plus extra edges, scalar or 2D
/// variables, and priors strong enough that synchronous GBP converges.
pub fn random_loopy(seed: u64, n_vars: usize, extra_edges: usize) -> FactorGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_vars.max(3);
    let dims: Vec<usize> = (0..n).map(|_| rng.random_range(1..=2)).collect();
    let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (rng.random_range(0..i), i)).collect();
    let mut guard = 0;
    while edges.len() < n - 1 + extra_edges && guard < 1000 {
        guard += 1;
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        let e = (a.min(b), a.max(b));
        if a != b && !edges.contains(&e) {
            edges.push(e);
        }
    }
    let mut degree = vec![0usize; n];
    for (a, b) in &edges {
        degree[*a] += 1;
        degree[*b] += 1;
    }
    let mut g = FactorGraph::new();
    let ids: Vec<VarId> = (0..n)
        .map(|i| {
            let lam = random_spd(&mut rng, dims[i], 1.0 + 2.0 * degree[i] as f64);
            let eta = DVector::from_vec(random_vec(&mut rng, dims[i], 2.0));
            let prior = GaussianCanonical::new(eta, lam).expect("spd");
            g.add_variable(format!("x{i}"), dims[i], Some(prior), None).expect("fresh")
        })
        .collect();
    for (k, (a, b)) in edges.iter().enumerate() {
        let m = rng.random_range(1..=2);
        let params = random_linear_factor(&mut rng, m, dims[*a] + dims[*b], 0.7, 1.0);
        g.add_factor_params(format!("f{k}"), &[ids[*a], ids[*b]], params).expect("valid");
    }
    g.config.damping = g.default_damping();
    g
}

// ---------------------------------------------------------------- presets

pub const PRESETS: [&str; 6] = ["chain", "loop", "grid", "linefit_outlier", "linefit_step", "pose_sim"];

fn prior2(mean: [f64; 2], sigma: f64) -> GaussianCanonical {
    GaussianMoments::new(DVector::from_row_slice(&mean), DMatrix::identity(2, 2) * sigma * sigma)
        .expect("valid")
        .to_canonical()
        .expect("spd")
}

/// Build a named preset graph.
pub fn preset(name: &str) -> Result<FactorGraph> {
    match name {
        "chain" => {
            let mut g = FactorGraph::new();
            let prior = GaussianCanonical::new(DVector::from_element(1, 0.0), DMatrix::from_element(1, 1, 1.0))?;
            let mut prev = g.add_variable("x0", 1, Some(prior), None)?;
            for i in 1..5 {
                let v = g.add_variable(format!("x{i}"), 1, None, None)?;
                g.add_factor_params(
                    format!("f{i}"),
                    &[prev, v],
                    FactorParams::CustomLinear {
                        j: vec![vec![-1.0, 1.0]],
                        d: vec![1.0],
                        sigma_n: vec![vec![0.25]],
                        huber_t: None,
                    },
                )?;
                prev = v;
            }
            Ok(g)
        }
        "loop" => {
            // square loop of 2D positions, anchored at the first corner
            let corners = [[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0]];
            let mut g = FactorGraph::new();
            let ids: Vec<VarId> = corners
                .iter()
                .enumerate()
                .map(|(i, _)| {
                    let prior = (i == 0).then(|| prior2(corners[0], 0.05));
                    g.add_variable(format!("x{i}"), 2, prior, None)
                })
                .collect::<Result<_>>()?;
            for i in 0..4 {
                let (a, b) = (i, (i + 1) % 4);
                g.add_factor_params(
                    format!("o{i}"),
                    &[ids[a], ids[b]],
                    FactorParams::RelPos2d {
                        dx: corners[b][0] - corners[a][0] + 0.1 * (i as f64 - 1.5),
                        dy: corners[b][1] - corners[a][1],
                        sigma: 0.2,
                    },
                )?;
            }
            g.config.damping = g.default_damping();
            Ok(g)
        }
        "grid" => build_grid(&GridSpec::new(5, 5, salt_and_pepper(&ramp_image(5, 5), 0.1, 3), 0.3, 0.2)),
        "linefit_outlier" => build_line_fit(&linefit_outlier_preset()),
        "linefit_step" => build_line_fit(&linefit_step_preset()),
        "pose_sim" => Ok(simulate_poses(&PoseSimSpec::preset(1))?.graph),
        other => Err(GbpError::InvalidSpec(format!("unknown preset `{other}`"))),
    }
}
