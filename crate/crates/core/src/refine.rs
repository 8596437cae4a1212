//! Confidence-weighted piecewise-planar refinement of inverse depth maps.
//!
//! Minimizes over the inverse depth `d` and a per-pixel plane orientation
//! field `u`
//!
//! ```text
//! E(d, u) = sum_i c_i |d_i - dbar_i|  +  lambda * g(d, u)
//! g(d, u) = sum_{i -> j} w_ij |d_j - d_i - u_i . (j - i)|
//!         + mu * sum_{i -> j} w_ij |u_j - u_i|_1
//! ```
//!
//! where `i -> j` runs over the directed 4-neighborhood edges (every
//! adjacent pair appears once in each direction) and
//! `w_ij = exp(-beta |I_i - I_j|)` comes from a guide image.

use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Camera;
use crate::image::RgbImage;
use crate::map::{DepthMap, GridMap, NormalMap};

/// Neighbor offsets; direction `k ^ 1` is the opposite of `k`.
const DIRS: [(isize, isize); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];

const SIGMA_PLANARITY: f64 = 1.0 / 3.0;
const SIGMA_SMOOTHNESS: f64 = 1.0 / 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefineError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite input at pixel ({0}, {1})")]
    NonFiniteInput(usize, usize),
    #[error("input map has no valid pixel")]
    NoValidPixels,
    #[error("invalid refinement config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub lambda: f64,
    pub mu: f64,
    pub beta: f64,
    pub iterations: usize,
    /// Stop once the relative objective change between iterations falls
    /// below this value.
    pub tolerance: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            mu: 0.5,
            beta: 10.0,
            iterations: 400,
            tolerance: 1e-6,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !nonneg(self.lambda) {
            return Err(RefineError::BadConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !nonneg(self.mu) || !nonneg(self.beta) || !nonneg(self.tolerance) {
            return Err(RefineError::BadConfig("mu, beta and tolerance must be >= 0".into()));
        }
        if self.iterations == 0 {
            return Err(RefineError::BadConfig("iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// Inverse depth `d` and plane orientation `u` (inverse depth change per
/// pixel along x and y).
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementState {
    pub d: GridMap<f64>,
    pub u: GridMap<Vector2<f64>>,
}

impl RefinementState {
    pub fn width(&self) -> usize {
        self.d.width()
    }

    pub fn height(&self) -> usize {
        self.d.height()
    }

    /// Depth map `1 / d`.
    pub fn depth(&self) -> DepthMap {
        inverse_to_depth(&self.d)
    }
}

/// Solver statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineStats {
    pub initial_objective: f64,
    pub final_objective: f64,
    /// Primal-dual iterations run.
    pub iterations: usize,
    /// Iteration whose iterate was returned; 0 is the initial state.
    pub best_iteration: usize,
}

/// `d = 1 / z`; invalid or non-positive depths give `d = 0`, invalid.
pub fn invert_depth(z: &DepthMap) -> GridMap<f64> {
    let values = z
        .values()
        .iter()
        .zip(z.mask())
        .map(|(&v, &ok)| if ok && v > 0.0 { 1.0 / v } else { 0.0 })
        .collect::<Vec<_>>();
    let valid = values.iter().map(|&v| v > 0.0 && v.is_finite()).collect();
    GridMap::from_parts(z.width(), z.height(), values, valid)
}

/// `z = 1 / d`, the inverse of [`invert_depth`].
pub fn inverse_to_depth(d: &GridMap<f64>) -> DepthMap {
    invert_depth(d)
}

/// Inverse depth at `j` of the plane `(d_i, u_i)` anchored at `i`.
pub fn planar_extrapolate(d_i: f64, u_i: &Vector2<f64>, i: (usize, usize), j: (usize, usize)) -> f64 {
    let dx = j.0 as f64 - i.0 as f64;
    let dy = j.1 as f64 - i.1 as f64;
    d_i + u_i.x * dx + u_i.y * dy
}

/// Per-edge weights of the directed 4-neighborhood, indexed by
/// `4 * pixel + direction`. Edges leaving the image have weight 0.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeWeights {
    width: usize,
    height: usize,
    weights: Vec<f64>,
}

impl EdgeWeights {
    pub fn uniform(width: usize, height: usize) -> Self {
        Self::from_fn(width, height, |_, _| 1.0)
    }

    /// `exp(-beta |I_i - I_j|)` with the Euclidean norm of the color
    /// difference.
    pub fn from_guide(image: &RgbImage, beta: f64) -> Self {
        Self::from_fn(image.width(), image.height(), |a, b| {
            let (p, q) = (image.get(a.0, a.1), image.get(b.0, b.1));
            let diff: f32 = (0..3).map(|c| (p[c] - q[c]) * (p[c] - q[c])).sum();
            (-beta * (diff as f64).sqrt()).exp()
        })
    }

    fn from_fn(width: usize, height: usize, f: impl Fn((usize, usize), (usize, usize)) -> f64) -> Self {
        let mut weights = vec![0.0; 4 * width * height];
        for y in 0..height {
            for x in 0..width {
                for (k, _) in DIRS.iter().enumerate() {
                    if let Some(j) = neighbor(width, height, x, y, k) {
                        weights[4 * (y * width + x) + k] = f((x, y), (j % width, j / width));
                    }
                }
            }
        }
        Self { width, height, weights }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, pixel: usize, direction: usize) -> f64 {
        self.weights[4 * pixel + direction]
    }
}

fn neighbor(w: usize, h: usize, x: usize, y: usize, k: usize) -> Option<usize> {
    let (dx, dy) = DIRS[k];
    let nx = x as isize + dx;
    let ny = y as isize + dy;
    (nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h).then(|| ny as usize * w + nx as usize)
}

fn check_shape(what: &str, w: usize, h: usize, expect: (usize, usize)) -> Result<(), RefineError> {
    if (w, h) != expect {
        return Err(RefineError::ShapeMismatch(format!(
            "{what} is {w}x{h}, expected {}x{}",
            expect.0, expect.1
        )));
    }
    Ok(())
}

fn g_terms(d: &[f64], u: &[Vector2<f64>], weights: &EdgeWeights) -> (f64, f64) {
    let (w, h) = (weights.width, weights.height);
    (0..h)
        .into_par_iter()
        .map(|y| {
            let (mut planar, mut smooth) = (0.0, 0.0);
            for x in 0..w {
                let i = y * w + x;
                for (k, &(dx, dy)) in DIRS.iter().enumerate() {
                    if let Some(j) = neighbor(w, h, x, y, k) {
                        let we = weights.get(i, k);
                        planar += we * (d[j] - d[i] - u[i].x * dx as f64 - u[i].y * dy as f64).abs();
                        smooth += we * ((u[j].x - u[i].x).abs() + (u[j].y - u[i].y).abs());
                    }
                }
            }
            (planar, smooth)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1))
}

/// Planarity regularizer `g(d, u)`. Validity masks are ignored.
pub fn regularizer_g(d: &GridMap<f64>, u: &GridMap<Vector2<f64>>, weights: &EdgeWeights, mu: f64) -> Result<f64, RefineError> {
    let shape = (weights.width, weights.height);
    check_shape("inverse depth", d.width(), d.height(), shape)?;
    check_shape("orientation field", u.width(), u.height(), shape)?;
    let (planar, smooth) = g_terms(d.values(), u.values(), weights);
    Ok(planar + mu * smooth)
}

fn data_term(d: &[f64], dbar: &[f64], c: &[f64]) -> f64 {
    d.iter().zip(dbar).zip(c).map(|((a, b), w)| w * (a - b).abs()).sum()
}

/// Refinement problem with inputs checked and invalid pixels filled.
struct Problem<'a> {
    width: usize,
    height: usize,
    dbar: Vec<f64>,
    c: Vec<f64>,
    weights: &'a EdgeWeights,
    lambda: f64,
    mu: f64,
    range: (f64, f64),
}

impl Problem<'_> {
    fn objective(&self, d: &[f64], u: &[Vector2<f64>]) -> f64 {
        let (planar, smooth) = g_terms(d, u, self.weights);
        data_term(d, &self.dbar, &self.c) + self.lambda * (planar + self.mu * smooth)
    }
}

/// Confidence weights with invalid confidence and invalid depth mapped to
/// 0 and negative values clamped.
fn data_weights(dbar: &GridMap<f64>, c: &GridMap<f64>) -> Vec<f64> {
    (0..dbar.len())
        .map(|i| {
            if dbar.mask()[i] && c.mask()[i] && c.values()[i].is_finite() {
                c.values()[i].max(0.0)
            } else {
                0.0
            }
        })
        .collect()
}

/// Fills invalid pixels with the value of the nearest valid pixel in
/// breadth-first order.
fn fill_invalid(d: &GridMap<f64>) -> Vec<f64> {
    let (w, h) = (d.width(), d.height());
    let mut out = d.values().to_vec();
    let mut done = d.mask().to_vec();
    let mut queue: std::collections::VecDeque<usize> = (0..d.len()).filter(|&i| done[i]).collect();
    while let Some(i) = queue.pop_front() {
        for k in 0..4 {
            if let Some(j) = neighbor(w, h, i % w, i / w, k) {
                if !done[j] {
                    done[j] = true;
                    out[j] = out[i];
                    queue.push_back(j);
                }
            }
        }
    }
    out
}

fn prepare<'a>(
    dbar: &GridMap<f64>,
    c: &GridMap<f64>,
    weights: &'a EdgeWeights,
    config: &RefineConfig,
) -> Result<Problem<'a>, RefineError> {
    config.validate()?;
    let shape = (dbar.width(), dbar.height());
    check_shape("confidence", c.width(), c.height(), shape)?;
    check_shape("edge weights", weights.width, weights.height, shape)?;
    let mut range = (f64::INFINITY, 0.0f64);
    for (x, y, &v) in dbar.iter_valid() {
        if !v.is_finite() || v <= 0.0 {
            return Err(RefineError::NonFiniteInput(x, y));
        }
        range = (range.0.min(v), range.1.max(v));
    }
    if range.1 == 0.0 {
        return Err(RefineError::NoValidPixels);
    }
    Ok(Problem {
        width: shape.0,
        height: shape.1,
        dbar: fill_invalid(dbar),
        c: data_weights(dbar, c),
        weights,
        lambda: config.lambda,
        mu: config.mu,
        range: (range.0 / 2.0, range.1 * 2.0),
    })
}

/// Refines the inverse depth `dbar` starting from `d = dbar`, `u = 0`.
/// Invalid pixels of `dbar` or `c` carry no data term; the output is valid
/// everywhere.
pub fn refine(
    dbar: &GridMap<f64>,
    c: &GridMap<f64>,
    guide: Option<&RgbImage>,
    config: &RefineConfig,
) -> Result<RefinementState, RefineError> {
    let weights = match guide {
        Some(img) => EdgeWeights::from_guide(img, config.beta),
        None => EdgeWeights::uniform(dbar.width(), dbar.height()),
    };
    refine_with(dbar, c, &weights, None, config).map(|r| r.0)
}

/// Objective `E(d, u)` of a state. Invalid pixels of `dbar` or `c` carry no
/// data term.
pub fn objective(
    state: &RefinementState,
    dbar: &GridMap<f64>,
    c: &GridMap<f64>,
    weights: &EdgeWeights,
    config: &RefineConfig,
) -> Result<f64, RefineError> {
    let p = prepare(dbar, c, weights, config)?;
    check_shape("state", state.width(), state.height(), (p.width, p.height))?;
    Ok(p.objective(state.d.values(), state.u.values()))
}

/// Primal-dual refinement with explicit edge weights and an optional
/// initial state (default `d = dbar` with invalid pixels filled, `u = 0`).
///
/// Runs diagonally preconditioned primal-dual iterations, stopping after
/// `config.iterations` or once the relative objective change drops below
/// `config.tolerance`, and returns the iterate with the lowest objective,
/// the initial state included.
pub fn refine_with(
    dbar: &GridMap<f64>,
    c: &GridMap<f64>,
    weights: &EdgeWeights,
    init: Option<&RefinementState>,
    config: &RefineConfig,
) -> Result<(RefinementState, RefineStats), RefineError> {
    let p = prepare(dbar, c, weights, config)?;
    let (w, h) = (p.width, p.height);
    let n = w * h;

    let (mut d, mut u) = match init {
        Some(s) => {
            check_shape("initial state", s.width(), s.height(), (w, h))?;
            let d: Vec<f64> = s.d.values().iter().map(|v| v.clamp(p.range.0, p.range.1)).collect();
            if let Some(i) = s.u.values().iter().position(|v| !v.x.is_finite() || !v.y.is_finite()) {
                return Err(RefineError::NonFiniteInput(i % w, i / w));
            }
            (d, s.u.values().to_vec())
        }
        None => (p.dbar.clone(), vec![Vector2::zeros(); n]),
    };

    let initial_objective = p.objective(&d, &u);
    let mut best = (initial_objective, d.clone(), u.clone(), 0usize);
    let mut previous = initial_objective;
    let mut iterations = 0;

    // step sizes: tau = 1 / column sums of |K|, sigma = 1 / row sums
    let degrees: Vec<(f64, [f64; 2])> = (0..n)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let has = |k| neighbor(w, h, x, y, k).is_some() as u32 as f64;
            let deg = has(0) + has(1) + has(2) + has(3);
            (deg, [has(0) + has(1), has(2) + has(3)])
        })
        .collect();
    let tau_d: Vec<f64> = degrees.iter().map(|(deg, _)| if *deg > 0.0 { 1.0 / (2.0 * deg) } else { 0.0 }).collect();
    let tau_u: Vec<[f64; 2]> = degrees
        .iter()
        .map(|(deg, axis)| {
            let t = |a: f64| if a + 2.0 * deg > 0.0 { 1.0 / (a + 2.0 * deg) } else { 0.0 };
            [t(axis[0]), t(axis[1])]
        })
        .collect();

    let mut yp = vec![0.0; 4 * n];
    let mut ys = vec![[0.0; 2]; 4 * n];
    let mut d_bar = d.clone();
    let mut u_bar = u.clone();

    // dual ascent on the extrapolated primal, then the primal step
    for it in 1..=config.iterations {
        iterations = it;
        dual_step(&p, &d_bar, &u_bar, &mut yp, &mut ys);
        let (d_new, u_new) = primal_step(&p, &d, &u, &yp, &ys, &tau_d, &tau_u);
        d_bar.par_iter_mut().enumerate().for_each(|(i, v)| *v = 2.0 * d_new[i] - d[i]);
        u_bar.par_iter_mut().enumerate().for_each(|(i, v)| *v = 2.0 * u_new[i] - u[i]);
        d = d_new;
        u = u_new;

        let f = p.objective(&d, &u);
        if f < best.0 {
            best = (f, d.clone(), u.clone(), it);
        }
        let change = (previous - f).abs();
        if change == 0.0 || change <= config.tolerance * previous.abs() {
            break;
        }
        previous = f;
    }

    let (final_objective, d, u, best_iteration) = best;
    let state = RefinementState {
        d: GridMap::from_parts(w, h, d, vec![true; n]),
        u: GridMap::from_parts(w, h, u, vec![true; n]),
    };
    let stats = RefineStats {
        initial_objective,
        final_objective,
        iterations,
        best_iteration,
    };
    Ok((state, stats))
}

fn dual_step(p: &Problem<'_>, d: &[f64], u: &[Vector2<f64>], yp: &mut [f64], ys: &mut [[f64; 2]]) {
    let (w, h) = (p.width, p.height);
    yp.par_chunks_mut(4)
        .zip(ys.par_chunks_mut(4))
        .enumerate()
        .for_each(|(i, (yp_i, ys_i))| {
            let (x, y) = (i % w, i / w);
            for (k, &(dx, dy)) in DIRS.iter().enumerate() {
                let Some(j) = neighbor(w, h, x, y, k) else { continue };
                let bound = p.lambda * p.weights.get(i, k);
                let r = d[j] - d[i] - u[i].x * dx as f64 - u[i].y * dy as f64;
                yp_i[k] = (yp_i[k] + SIGMA_PLANARITY * r).clamp(-bound, bound);
                let bound = bound * p.mu;
                let s = u[j] - u[i];
                ys_i[k][0] = (ys_i[k][0] + SIGMA_SMOOTHNESS * s.x).clamp(-bound, bound);
                ys_i[k][1] = (ys_i[k][1] + SIGMA_SMOOTHNESS * s.y).clamp(-bound, bound);
            }
        });
}

fn primal_step(
    p: &Problem<'_>,
    d: &[f64],
    u: &[Vector2<f64>],
    yp: &[f64],
    ys: &[[f64; 2]],
    tau_d: &[f64],
    tau_u: &[[f64; 2]],
) -> (Vec<f64>, Vec<Vector2<f64>>) {
    let (w, h) = (p.width, p.height);
    (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % w, i / w);
            // K^T y at d_i and u_i
            let mut kd = 0.0;
            let mut ku = [0.0; 2];
            for (k, &(dx, dy)) in DIRS.iter().enumerate() {
                let Some(j) = neighbor(w, h, x, y, k) else { continue };
                let out = 4 * i + k;
                let inc = 4 * j + (k ^ 1);
                kd += yp[inc] - yp[out];
                ku[0] += -(dx as f64) * yp[out] - ys[out][0] + ys[inc][0];
                ku[1] += -(dy as f64) * yp[out] - ys[out][1] + ys[inc][1];
            }
            let v = d[i] - tau_d[i] * kd;
            let t = tau_d[i] * p.c[i];
            let shrunk = if v > p.dbar[i] + t {
                v - t
            } else if v < p.dbar[i] - t {
                v + t
            } else {
                p.dbar[i]
            };
            let d_new = shrunk.clamp(p.range.0, p.range.1);
            let u_new = Vector2::new(u[i].x - tau_u[i][0] * ku[0], u[i].y - tau_u[i][1] * ku[1]);
            (d_new, u_new)
        })
        .unzip()
}

/// Camera-frame unit normals of the local inverse-depth planes. The plane
/// `d(p) = d_i + u_i . (p - p_i)` is `a . (x, y, 1)` with
/// `a = (u_x, u_y, d_i - u_i . p_i)`, and its normal is `-K^T a`.
pub fn state_to_normals(state: &RefinementState, camera: &Camera) -> NormalMap {
    let kt: Matrix3<f64> = camera.intrinsics().transpose();
    let (w, h) = (state.width(), state.height());
    GridMap::from_fn(w, h, Vector3::zeros(), |x, y| {
        if !state.d.is_valid(x, y) {
            return None;
        }
        let d = *state.d.value(x, y);
        let u = state.u.value(x, y);
        let a = Vector3::new(u.x, u.y, d - u.x * x as f64 - u.y * y as f64);
        let n = -(kt * a);
        let len = n.norm();
        (len > 0.0 && len.is_finite()).then(|| n / len)
    })
}
