//! PatchMatch depth and normal estimation.

mod config;
mod cost;
mod multiscale;
mod perturb;
mod propagation;
mod sampling;

use thiserror::Error;

pub use config::PatchMatchConfig;
pub use cost::{aggregate_best_k, bilateral_ncc_cost, multi_view_cost, CostEvaluator, MatchCost, RefPatch, SourceContext};
pub use multiscale::{estimate_all_multiscale, estimate_depth, estimate_depth_multiscale, upsample_hypotheses};
pub use perturb::{face_camera, perturb, perturbation_scale, random_hypothesis, random_normal};
pub use propagation::{initialize_random, run_iteration, run_patchmatch, PatchMatchState};
pub use sampling::{checkerboard_samples, Color, CHECKERBOARD_OFFSETS, SAMPLES_PER_DIRECTION};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PatchMatchError {
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("invalid depth range [{0}, {1}]")]
    BadRange(f64, f64),
    #[error("need at least 2 views, got {0}")]
    InsufficientViews(usize),
    #[error("invalid source list for view {0}")]
    BadSources(usize),
}
