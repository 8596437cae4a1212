//! Coarse-to-fine estimation with geometric consistency and detail
//! restoration.

use nalgebra::Vector2;
use rayon::prelude::*;

use super::cost::{CostEvaluator, RefPatch};
use super::perturb::face_camera;
use super::propagation::{derive_seed, initialize_random, run_patchmatch, PatchMatchState};
use super::{PatchMatchConfig, PatchMatchError};
use crate::geometry::{Camera, PlaneHypothesis};
use crate::image::View;
use crate::map::{DepthMap, DepthNormalMap};

const PASS_COARSE: u64 = 0;
const PASS_PHOTOMETRIC: u64 = 1;
const PASS_GEOMETRIC: u64 = 2;

fn check_sources(n_views: usize, sources: &[Vec<usize>]) -> Result<(), PatchMatchError> {
    if n_views < 2 || sources.len() != n_views {
        return Err(PatchMatchError::InsufficientViews(n_views));
    }
    for (i, s) in sources.iter().enumerate() {
        if s.is_empty() || s.iter().any(|&j| j == i || j >= n_views) {
            return Err(PatchMatchError::BadSources(i));
        }
    }
    Ok(())
}

fn photometric_state(views: &[View], reference: usize, sources: &[usize], config: &PatchMatchConfig, seed: u64) -> Result<PatchMatchState, PatchMatchError> {
    let srcs: Vec<&View> = sources.iter().map(|&j| &views[j]).collect();
    let eval = CostEvaluator::new(&views[reference], &srcs, None, config);
    let init = initialize_random(&views[reference].camera, config.depth_range, seed)?;
    let mut state = PatchMatchState::new(init, &eval, seed);
    run_patchmatch(&mut state, &eval);
    Ok(state)
}

/// Single-scale photometric PatchMatch for one reference view against the
/// listed sources, starting from a random initialization.
pub fn estimate_depth(
    views: &[View],
    reference: usize,
    sources: &[usize],
    config: &PatchMatchConfig,
    seed: u64,
) -> Result<PatchMatchState, PatchMatchError> {
    config.validate()?;
    if views.len() < 2 {
        return Err(PatchMatchError::InsufficientViews(views.len()));
    }
    if reference >= views.len() || sources.is_empty() || sources.iter().any(|&j| j == reference || j >= views.len()) {
        return Err(PatchMatchError::BadSources(reference));
    }
    photometric_state(views, reference, sources, config, derive_seed(seed, &[reference as u64, 0, PASS_COARSE]))
}

/// Transfers the hypotheses of a coarse map to the finer camera. Each fine
/// pixel takes the plane of its nearest coarse pixel, re-intersected with its
/// own viewing ray.
pub fn upsample_hypotheses(coarse: &DepthNormalMap, coarse_cam: &Camera, fine_cam: &Camera) -> DepthNormalMap {
    let (w, h) = (fine_cam.width, fine_cam.height);
    let k = coarse_cam.intrinsics();
    let (cw, ch) = (coarse.width(), coarse.height());
    let mut values = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let ray = fine_cam.ray(&Vector2::new(x as f64, y as f64));
            let q = k * (ray / ray.z);
            let cx = (q.x.round().max(0.0) as usize).min(cw - 1);
            let cy = (q.y.round().max(0.0) as usize).min(ch - 1);
            let hyp = *coarse.value(cx, cy);
            let coarse_ray = coarse_cam.ray(&Vector2::new(cx as f64, cy as f64));
            let offset = hyp.normal.dot(&(coarse_ray * hyp.depth));
            let denom = hyp.normal.dot(&ray);
            let depth = offset / denom;
            let transferred = PlaneHypothesis::new(depth, hyp.normal);
            let out = if depth.is_finite() && depth > 0.0 && transferred.is_valid_for(&ray) {
                transferred
            } else {
                PlaneHypothesis::new(hyp.depth, face_camera(hyp.normal, &ray))
            };
            values.push(out);
            valid.push(coarse.is_valid(cx, cy));
        }
    }
    DepthNormalMap::from_parts(w, h, values, valid)
}

/// Per pixel, keeps the photometric-pass hypothesis where its photometric
/// cost is strictly lower than that of the coarse-to-fine hypothesis.
fn restore_details(
    photometric: &PatchMatchState,
    guided: &PatchMatchState,
    eval: &CostEvaluator<'_>,
) -> DepthNormalMap {
    let w = guided.map().width();
    let choices: Vec<(PlaneHypothesis, bool)> = (0..guided.map().len())
        .into_par_iter()
        .map(|i| {
            let g = guided.map().values()[i];
            let patch = RefPatch::new(eval.reference, i % w, i / w, eval.config);
            let g_cost = eval.evaluate(&patch, &g);
            let p_cost = photometric.costs()[i];
            if p_cost < g_cost {
                (photometric.map().values()[i], photometric.map().mask()[i])
            } else {
                (g, guided.map().mask()[i])
            }
        })
        .collect();
    let (values, valid) = choices.into_iter().unzip();
    DepthNormalMap::from_parts(w, guided.map().height(), values, valid)
}

/// Joint coarse-to-fine estimation for every view. `sources[i]` lists the
/// source views of view `i`.
///
/// The coarsest level runs photometric PatchMatch from random hypotheses.
/// Each finer level runs two passes per view: a photometric pass from random
/// hypotheses and a pass initialized from the upsampled coarser result whose
/// cost includes the geometric consistency term against the upsampled maps
/// of the source views. The output keeps, per pixel, whichever of the two
/// final hypotheses has the lower photometric cost.
pub fn estimate_all_multiscale(
    views: &[View],
    sources: &[Vec<usize>],
    config: &PatchMatchConfig,
    seed: u64,
) -> Result<Vec<DepthNormalMap>, PatchMatchError> {
    config.validate()?;
    check_sources(views.len(), sources)?;

    // pyramid[0] is the coarsest level
    let mut pyramid: Vec<Vec<View>> = vec![views.to_vec()];
    for _ in 1..config.levels {
        let next: Vec<View> = pyramid.last().unwrap().par_iter().map(|v| v.downsampled(config.downsample)).collect();
        pyramid.push(next);
    }
    pyramid.reverse();

    let coarse = &pyramid[0];
    let mut maps: Vec<DepthNormalMap> = (0..views.len())
        .into_par_iter()
        .map(|i| {
            let s = derive_seed(seed, &[i as u64, 0, PASS_COARSE]);
            photometric_state(coarse, i, &sources[i], config, s).map(PatchMatchState::into_map)
        })
        .collect::<Result<_, _>>()?;
    log::debug!("level 0 ({}x{}) done", coarse[0].width(), coarse[0].height());

    for level in 1..pyramid.len() {
        let fine = &pyramid[level];
        let below = &pyramid[level - 1];
        let upsampled: Vec<DepthNormalMap> = maps
            .iter()
            .enumerate()
            .map(|(i, m)| upsample_hypotheses(m, &below[i].camera, &fine[i].camera))
            .collect();
        let priors: Vec<DepthMap> = upsampled.iter().map(|m| m.depth_map()).collect();
        maps = (0..views.len())
            .into_par_iter()
            .map(|i| {
                let srcs: Vec<&View> = sources[i].iter().map(|&j| &fine[j]).collect();
                let src_priors: Vec<DepthMap> = sources[i].iter().map(|&j| priors[j].clone()).collect();

                let photo_seed = derive_seed(seed, &[i as u64, level as u64, PASS_PHOTOMETRIC]);
                let photometric = photometric_state(fine, i, &sources[i], config, photo_seed)?;

                let geo_eval = CostEvaluator::new(&fine[i], &srcs, Some(&src_priors), config);
                let geo_seed = derive_seed(seed, &[i as u64, level as u64, PASS_GEOMETRIC]);
                let mut guided = PatchMatchState::from_prior(upsampled[i].clone(), &geo_eval, geo_seed);
                run_patchmatch(&mut guided, &geo_eval);

                Ok(restore_details(&photometric, &guided, &geo_eval.photometric()))
            })
            .collect::<Result<_, PatchMatchError>>()?;
        log::debug!("level {level} ({}x{}) done", fine[0].width(), fine[0].height());
    }
    Ok(maps)
}

/// Coarse-to-fine estimate for view `reference`, using every other view as
/// a source.
pub fn estimate_depth_multiscale(
    views: &[View],
    reference: usize,
    config: &PatchMatchConfig,
    seed: u64,
) -> Result<DepthNormalMap, PatchMatchError> {
    if views.len() < 2 {
        return Err(PatchMatchError::InsufficientViews(views.len()));
    }
    if reference >= views.len() {
        return Err(PatchMatchError::BadSources(reference));
    }
    let sources: Vec<Vec<usize>> = (0..views.len())
        .map(|i| (0..views.len()).filter(|&j| j != i).collect())
        .collect();
    Ok(estimate_all_multiscale(views, &sources, config, seed)?.swap_remove(reference))
}
