//! Bilateral weighted NCC matching cost and its multi-view aggregation.

use nalgebra::Vector2;

use super::PatchMatchConfig;
use crate::geometry::{forward_backward, PlaneHomography, PlaneHypothesis, RelativePose, MIN_POINT_DEPTH, PARALLEL_EPS};
use crate::image::View;
use crate::map::DepthMap;

/// Minimum weighted variance of either patch.
const MIN_VARIANCE: f64 = 1e-10;

/// Photometric cost `1 - NCC` in `[0, 2]`, or `Invalid`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MatchCost {
    Valid(f64),
    Invalid,
}

impl MatchCost {
    pub fn value(self) -> Option<f64> {
        match self {
            MatchCost::Valid(v) => Some(v),
            MatchCost::Invalid => None,
        }
    }

    pub fn is_valid(self) -> bool {
        matches!(self, MatchCost::Valid(_))
    }
}

/// Reference window around one pixel with precomputed bilateral weights.
///
/// Only window pixels inside the reference image are stored; `total` keeps
/// the full window size for the out-of-bounds rule.
#[derive(Debug, Clone)]
pub struct RefPatch {
    center: Vector2<f64>,
    pixels: Vec<Vector2<f64>>,
    gray: Vec<f32>,
    weights: Vec<f32>,
    total: usize,
}

impl RefPatch {
    pub fn new(view: &View, x: usize, y: usize, config: &PatchMatchConfig) -> Self {
        let r = config.patch_radius as i64;
        let side = (2 * r + 1) as usize;
        let mut patch = Self {
            center: Vector2::new(x as f64, y as f64),
            pixels: Vec::with_capacity(side * side),
            gray: Vec::with_capacity(side * side),
            weights: Vec::with_capacity(side * side),
            total: side * side,
        };
        let center_color = view.image.get(x, y);
        let inv_color = (1.0 / (2.0 * config.sigma_color * config.sigma_color)) as f32;
        let inv_spatial = (1.0 / (2.0 * config.sigma_spatial * config.sigma_spatial)) as f32;
        let (w, h) = (view.width() as i64, view.height() as i64);
        for dy in -r..=r {
            let py = y as i64 + dy;
            if py < 0 || py >= h {
                continue;
            }
            for dx in -r..=r {
                let px = x as i64 + dx;
                if px < 0 || px >= w {
                    continue;
                }
                let (ux, uy) = (px as usize, py as usize);
                let c = view.image.get(ux, uy);
                let dc2: f32 = (0..3).map(|k| (c[k] - center_color[k]).powi(2)).sum();
                let ds2 = (dx * dx + dy * dy) as f32;
                patch.pixels.push(Vector2::new(px as f64, py as f64));
                patch.gray.push(view.gray()[uy * view.width() + ux]);
                patch.weights.push((-dc2 * inv_color - ds2 * inv_spatial).exp());
            }
        }
        patch
    }

    pub fn center(&self) -> &Vector2<f64> {
        &self.center
    }

    /// Weighted NCC cost against a source image through a homography.
    pub fn cost(&self, src: &View, homography: &PlaneHomography) -> MatchCost {
        let (w, h) = (src.width(), src.height());
        if w < 2 || h < 2 {
            return MatchCost::Invalid;
        }
        let gray = src.gray();
        let max_x = (w - 1) as f64;
        let max_y = (h - 1) as f64;
        let m = homography.matrix();
        let a = homography.ray_coefficients();
        let offset = homography.offset();
        let mut outside = self.total - self.pixels.len();
        let (mut sw, mut sr, mut ss, mut srr, mut sss, mut srs) = (0.0f64, 0.0, 0.0, 0.0, 0.0, 0.0);
        for ((p, &r), &wt) in self.pixels.iter().zip(&self.gray).zip(&self.weights) {
            let (x, y) = (p.x, p.y);
            // the reference ray must meet the plane in front of the camera
            let denom = a.x * x + a.y * y + a.z;
            let qz = m[(2, 0)] * x + m[(2, 1)] * y + m[(2, 2)];
            if !(offset * denom > 0.0) || denom.abs() < PARALLEL_EPS || !(qz > MIN_POINT_DEPTH) {
                outside += 1;
                continue;
            }
            let inv = 1.0 / qz;
            let u = (m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)]) * inv;
            let v = (m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)]) * inv;
            if !(u >= 0.0 && v >= 0.0 && u <= max_x && v <= max_y) {
                outside += 1;
                continue;
            }
            // truncation is floor for non-negative coordinates
            let x0 = (u as i32 as usize).min(w - 2);
            let y0 = (v as i32 as usize).min(h - 2);
            let fx = u - x0 as f64;
            let fy = v - y0 as f64;
            let i = y0 * w + x0;
            let (p00, p01) = (gray[i] as f64, gray[i + 1] as f64);
            let (p10, p11) = (gray[i + w] as f64, gray[i + w + 1] as f64);
            let top = p00 + (p01 - p00) * fx;
            let bottom = p10 + (p11 - p10) * fx;
            let s = top + (bottom - top) * fy;
            let (r, wt) = (r as f64, wt as f64);
            let wr = wt * r;
            let ws = wt * s;
            sw += wt;
            sr += wr;
            ss += ws;
            srr += wr * r;
            sss += ws * s;
            srs += wr * s;
        }
        if 2 * outside > self.total || sw <= 0.0 {
            return MatchCost::Invalid;
        }
        let mr = sr / sw;
        let ms = ss / sw;
        let var_r = srr / sw - mr * mr;
        let var_s = sss / sw - ms * ms;
        if var_r < MIN_VARIANCE || var_s < MIN_VARIANCE {
            return MatchCost::Invalid;
        }
        let ncc = ((srs / sw - mr * ms) / (var_r * var_s).sqrt()).clamp(-1.0, 1.0);
        MatchCost::Valid((1.0 - ncc).clamp(0.0, 2.0))
    }
}

/// Bilateral weighted NCC between the reference window at `center` and its
/// plane-induced warp into `src`.
pub fn bilateral_ncc_cost(
    reference: &View,
    src: &View,
    center: (usize, usize),
    hyp: &PlaneHypothesis,
    config: &PatchMatchConfig,
) -> MatchCost {
    let patch = RefPatch::new(reference, center.0, center.1, config);
    let pose = RelativePose::between(&reference.camera, &src.camera);
    let offset = hyp.plane_offset(&reference.camera, patch.center());
    match PlaneHomography::new(&reference.camera, &src.camera, &pose, &hyp.normal, offset) {
        Some(h) => patch.cost(src, &h),
        None => MatchCost::Invalid,
    }
}

/// One source view as seen from a fixed reference.
#[derive(Debug, Clone)]
pub struct SourceContext<'a> {
    pub view: &'a View,
    pub pose: RelativePose,
    /// Source depth map at the current scale, enabling the geometric term.
    pub prior: Option<&'a DepthMap>,
}

/// Evaluates the aggregated multi-view cost for hypotheses of one reference.
#[derive(Debug, Clone)]
pub struct CostEvaluator<'a> {
    pub reference: &'a View,
    pub sources: Vec<SourceContext<'a>>,
    pub config: &'a PatchMatchConfig,
}

impl<'a> CostEvaluator<'a> {
    /// `priors`, when given, holds one depth map per source (same order).
    pub fn new(
        reference: &'a View,
        sources: &[&'a View],
        priors: Option<&'a [DepthMap]>,
        config: &'a PatchMatchConfig,
    ) -> Self {
        let sources = sources
            .iter()
            .enumerate()
            .map(|(i, v)| SourceContext {
                view: v,
                pose: RelativePose::between(&reference.camera, &v.camera),
                prior: priors.map(|p| &p[i]),
            })
            .collect();
        Self {
            reference,
            sources,
            config,
        }
    }

    /// Same reference and sources without the geometric term.
    pub fn photometric(&self) -> Self {
        Self {
            reference: self.reference,
            sources: self
                .sources
                .iter()
                .map(|s| SourceContext { prior: None, ..s.clone() })
                .collect(),
            config: self.config,
        }
    }

    pub fn has_geometric_term(&self) -> bool {
        self.sources.iter().any(|s| s.prior.is_some())
    }

    /// Per-source cost: photometric plus the capped geometric term when a
    /// prior is available. `None` when the photometric cost is invalid.
    pub fn per_source(&self, patch: &RefPatch, hyp: &PlaneHypothesis) -> Vec<Option<f64>> {
        let ref_cam = &self.reference.camera;
        let offset = hyp.plane_offset(ref_cam, patch.center());
        self.sources
            .iter()
            .map(|s| {
                let h = PlaneHomography::new(ref_cam, &s.view.camera, &s.pose, &hyp.normal, offset)?;
                let photo = patch.cost(s.view, &h).value()?;
                let geom = match s.prior {
                    Some(prior) => self.config.geom_weight * self.reprojection_error(s, prior, patch.center(), hyp.depth),
                    None => 0.0,
                };
                Some(photo + geom)
            })
            .collect()
    }

    fn reprojection_error(&self, s: &SourceContext<'_>, prior: &DepthMap, pixel: &Vector2<f64>, depth: f64) -> f64 {
        let cap = self.config.geom_cap;
        forward_backward(&self.reference.camera, &s.view.camera, &s.pose, pixel, depth, |x, y| {
            prior.get(x, y).copied()
        })
        .map_or(cap, |r| r.error.min(cap))
    }

    /// Mean of the `k_select` lowest valid per-source costs; `+inf` when no
    /// source gives a valid cost.
    pub fn evaluate(&self, patch: &RefPatch, hyp: &PlaneHypothesis) -> f64 {
        aggregate_best_k(self.per_source(patch, hyp), self.config.k_select)
    }
}

/// Mean of the `k` smallest present values, `+inf` if none.
pub fn aggregate_best_k(costs: Vec<Option<f64>>, k: usize) -> f64 {
    let mut valid: Vec<f64> = costs.into_iter().flatten().collect();
    if valid.is_empty() {
        return f64::INFINITY;
    }
    valid.sort_by(|a, b| a.total_cmp(b));
    let n = k.min(valid.len()).max(1);
    valid[..n].iter().sum::<f64>() / n as f64
}

/// Aggregated cost of `hyp` at `center` over all sources.
///
/// `geometric` optionally supplies one prior depth map per source.
pub fn multi_view_cost(
    reference: &View,
    sources: &[&View],
    center: (usize, usize),
    hyp: &PlaneHypothesis,
    config: &PatchMatchConfig,
    geometric: Option<&[DepthMap]>,
) -> f64 {
    let eval = CostEvaluator::new(reference, sources, geometric, config);
    let patch = RefPatch::new(reference, center.0, center.1, config);
    eval.evaluate(&patch, hyp)
}
