use serde::{Deserialize, Serialize};

use super::PatchMatchError;

/// Parameters of the PatchMatch depth/normal estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchMatchConfig {
    /// Red-black iterations per level (one iteration = red + black sweep).
    pub iterations: usize,
    /// Half width of the matching window (5 gives an 11x11 window).
    pub patch_radius: usize,
    /// Number of best-ranked propagated samples kept per pixel, and number of
    /// best source views averaged by the multi-view cost.
    pub k_select: usize,
    /// Total candidates evaluated per pixel update (propagated + perturbed).
    pub k_update: usize,
    /// Pyramid levels; 1 disables the coarse-to-fine scheme.
    pub levels: usize,
    /// Resampling factor between consecutive pyramid levels.
    pub downsample: f64,
    /// Bilateral color sigma, colors in `[0, 1]`.
    pub sigma_color: f64,
    /// Bilateral spatial sigma in pixels.
    pub sigma_spatial: f64,
    /// Weight of the capped forward-backward reprojection error.
    pub geom_weight: f64,
    /// Cap on the reprojection error in pixels.
    pub geom_cap: f64,
    /// Depth search interval `[min, max]` in scene units.
    pub depth_range: (f64, f64),
}

impl Default for PatchMatchConfig {
    fn default() -> Self {
        Self {
            iterations: 8,
            patch_radius: 5,
            k_select: 8,
            k_update: 16,
            levels: 3,
            downsample: 0.5,
            sigma_color: 0.1,
            sigma_spatial: 2.5,
            geom_weight: 0.2,
            geom_cap: 3.0,
            depth_range: (0.5, 10.0),
        }
    }
}

impl PatchMatchConfig {
    pub fn with_depth_range(mut self, min: f64, max: f64) -> Self {
        self.depth_range = (min, max);
        self
    }

    pub fn validate(&self) -> Result<(), PatchMatchError> {
        let bad = |msg: String| Err(PatchMatchError::BadConfig(msg));
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.k_select == 0 || self.k_update < self.k_select {
            return bad(format!(
                "need 1 <= k_select <= k_update (got {} and {})",
                self.k_select, self.k_update
            ));
        }
        if self.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        if !(self.downsample > 0.0 && self.downsample < 1.0) {
            return bad(format!("downsample factor {} not in (0, 1)", self.downsample));
        }
        if !(self.sigma_color > 0.0 && self.sigma_spatial > 0.0) {
            return bad("bilateral sigmas must be positive".into());
        }
        if !(self.geom_weight >= 0.0 && self.geom_cap >= 0.0) {
            return bad("geometric weight and cap must be non-negative".into());
        }
        check_depth_range(self.depth_range)
    }
}

pub(crate) fn check_depth_range((min, max): (f64, f64)) -> Result<(), PatchMatchError> {
    if !(min > 0.0 && min <= max && max.is_finite()) {
        return Err(PatchMatchError::BadRange(min, max));
    }
    Ok(())
}
