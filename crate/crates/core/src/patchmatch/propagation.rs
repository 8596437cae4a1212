//! Red-black checkerboard propagation.

use nalgebra::Vector2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::check_depth_range;
use super::cost::{CostEvaluator, RefPatch};
use super::perturb::{perturb, random_hypothesis};
use super::sampling::{checkerboard_samples, Color};
use super::{PatchMatchConfig, PatchMatchError};
use crate::geometry::{plane_induced_depth, Camera, PlaneHypothesis};
use crate::map::DepthNormalMap;

/// SplitMix64 finalizer, used to derive independent per-pixel streams.
pub(crate) fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed), |acc, p| mix(acc ^ mix(*p)))
}

fn pixel_rng(seed: u64, tag: u64, idx: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[tag, idx as u64]))
}

/// Random depth (uniform in the range) and camera-facing normal for every
/// pixel. Deterministic for a given seed.
pub fn initialize_random(camera: &Camera, depth_range: (f64, f64), seed: u64) -> Result<DepthNormalMap, PatchMatchError> {
    check_depth_range(depth_range)?;
    let (w, h) = (camera.width, camera.height);
    let values: Vec<PlaneHypothesis> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let mut rng = pixel_rng(seed, u64::MAX, i);
            let ray = camera.ray(&Vector2::new((i % w) as f64, (i / w) as f64));
            random_hypothesis(&mut rng, depth_range, &ray)
        })
        .collect();
    Ok(DepthNormalMap::from_parts(w, h, values, vec![true; w * h]))
}

/// PatchMatch state of one reference view: hypotheses and their costs.
///
/// A pixel is valid when its cost is finite, or when its hypothesis was
/// inherited from a valid coarser level and nothing better was found.
#[derive(Debug, Clone)]
pub struct PatchMatchState {
    map: DepthNormalMap,
    costs: Vec<f64>,
    inherited: Vec<bool>,
    seed: u64,
}

impl PatchMatchState {
    /// Evaluates the cost of every hypothesis in `map`. Validity flags of
    /// `map` are ignored.
    pub fn new(map: DepthNormalMap, eval: &CostEvaluator<'_>, seed: u64) -> Self {
        let n = map.len();
        Self::with_inherited(map, vec![false; n], eval, seed)
    }

    /// Like [`PatchMatchState::new`], but pixels valid in `map` stay valid
    /// even without a finite cost at this scale.
    pub fn from_prior(map: DepthNormalMap, eval: &CostEvaluator<'_>, seed: u64) -> Self {
        let inherited = map.mask().to_vec();
        Self::with_inherited(map, inherited, eval, seed)
    }

    fn with_inherited(mut map: DepthNormalMap, inherited: Vec<bool>, eval: &CostEvaluator<'_>, seed: u64) -> Self {
        let w = map.width();
        let costs: Vec<f64> = map
            .values()
            .par_iter()
            .enumerate()
            .map(|(i, hyp)| {
                let patch = RefPatch::new(eval.reference, i % w, i / w, eval.config);
                eval.evaluate(&patch, hyp)
            })
            .collect();
        for (i, v) in map.mask_mut().iter_mut().enumerate() {
            *v = costs[i].is_finite() || inherited[i];
        }
        Self {
            map,
            costs,
            inherited,
            seed,
        }
    }

    pub fn map(&self) -> &DepthNormalMap {
        &self.map
    }

    pub fn into_map(self) -> DepthNormalMap {
        self.map
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Replaces pixel `i` with `hyp` at cost `cost`.
    pub(crate) fn assign(&mut self, i: usize, hyp: PlaneHypothesis, cost: f64) {
        self.map.values_mut()[i] = hyp;
        self.costs[i] = cost;
        self.map.mask_mut()[i] = cost.is_finite() || self.inherited[i];
    }
}

/// Candidate hypotheses for one pixel: the best propagated samples by stored
/// cost followed by the perturbation set, at most `k_update` in total.
fn candidates(
    state: &PatchMatchState,
    cam: &Camera,
    x: usize,
    y: usize,
    iteration: usize,
    config: &PatchMatchConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<PlaneHypothesis> {
    let (w, h) = (state.map.width(), state.map.height());
    let dst = Vector2::new(x as f64, y as f64);
    let ray = cam.ray(&dst);
    let mut propagated: Vec<(f64, PlaneHypothesis)> = checkerboard_samples(x, y, w, h)
        .into_iter()
        .filter_map(|(sx, sy)| {
            let i = sy * w + sx;
            let hyp = state.map.values()[i];
            let src = Vector2::new(sx as f64, sy as f64);
            let depth = plane_induced_depth(cam, &src, &hyp, &dst)?;
            let cand = PlaneHypothesis::new(depth, hyp.normal);
            cand.is_valid_for(&ray).then_some((state.costs[i], cand))
        })
        .collect();
    // stable sort keeps pattern order among equal costs
    propagated.sort_by(|a, b| a.0.total_cmp(&b.0));
    propagated.truncate(config.k_select);

    let current = state.map.values()[y * w + x];
    let mut out: Vec<PlaneHypothesis> = propagated.into_iter().map(|(_, h)| h).collect();
    out.extend(perturb(&current, iteration, config.depth_range, &ray, rng));
    out.truncate(config.k_update);
    out
}

/// Updates every pixel of `color` from a frozen snapshot of the state.
///
/// A pixel takes the lowest-cost candidate only if it is strictly cheaper
/// than its current hypothesis, so stored costs never increase. Each pixel
/// draws from its own random stream, making the result independent of the
/// thread count and of the order in which pixels are visited.
pub fn run_iteration(state: &mut PatchMatchState, eval: &CostEvaluator<'_>, color: Color, iteration: usize) {
    let config = eval.config;
    let cam = &eval.reference.camera;
    let (w, h) = (state.map.width(), state.map.height());
    let tag = (iteration as u64) << 1 | (color == Color::Black) as u64;
    let snapshot = &*state;
    let updates: Vec<(usize, PlaneHypothesis, f64)> = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            let start = match (color, y % 2) {
                (Color::Red, 0) | (Color::Black, 1) => 0,
                _ => 1,
            };
            (start..w).step_by(2).filter_map(move |x| {
                let i = y * w + x;
                let mut rng = pixel_rng(snapshot.seed, tag, i);
                let cands = candidates(snapshot, cam, x, y, iteration, config, &mut rng);
                let patch = RefPatch::new(eval.reference, x, y, config);
                let mut best = (snapshot.costs[i], None);
                for c in cands {
                    let cost = eval.evaluate(&patch, &c);
                    if cost < best.0 {
                        best = (cost, Some(c));
                    }
                }
                best.1.map(|hyp| (i, hyp, best.0))
            })
        })
        .collect();
    for (i, hyp, cost) in updates {
        state.assign(i, hyp, cost);
    }
}

/// Runs `config.iterations` red-black sweeps.
pub fn run_patchmatch(state: &mut PatchMatchState, eval: &CostEvaluator<'_>) {
    for it in 0..eval.config.iterations {
        run_iteration(state, eval, Color::Red, it);
        run_iteration(state, eval, Color::Black, it);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::View;
    use crate::synthetic::SyntheticScene;

    #[test]
    fn degenerate_range_gives_constant_depth() {
        let cam = Camera::identity_pose(50.0, 50.0, 16.0, 12.0, 32, 24);
        let m = initialize_random(&cam, (1.0, 1.0), 5).unwrap();
        assert!(m.values().iter().all(|h| h.depth == 1.0));
        assert!(matches!(initialize_random(&cam, (0.0, 1.0), 5), Err(PatchMatchError::BadRange(..))));
        assert!(initialize_random(&cam, (2.0, 1.0), 5).is_err());
    }

    #[test]
    fn initialization_is_deterministic() {
        let cam = Camera::identity_pose(50.0, 50.0, 16.0, 12.0, 32, 24);
        let a = initialize_random(&cam, (1.0, 4.0), 9).unwrap();
        let b = initialize_random(&cam, (1.0, 4.0), 9).unwrap();
        assert_eq!(a, b);
        let c = initialize_random(&cam, (1.0, 4.0), 10).unwrap();
        assert_ne!(a, c);
        for (i, hyp) in a.values().iter().enumerate() {
            let ray = cam.ray(&Vector2::new((i % 32) as f64, (i / 32) as f64));
            assert!(hyp.is_valid_for(&ray));
        }
    }

    #[test]
    fn initialization_mean_depth() {
        let cam = Camera::identity_pose(300.0, 300.0, 200.0, 125.0, 400, 250);
        let m = initialize_random(&cam, (2.0, 6.0), 1).unwrap();
        assert_eq!(m.len(), 100_000);
        let mean = m.values().iter().map(|h| h.depth).sum::<f64>() / m.len() as f64;
        assert!((mean - 4.0).abs() / 4.0 < 0.01, "{mean}");
    }

    fn small_scene() -> (SyntheticScene, Vec<View>, PatchMatchConfig) {
        let scene = SyntheticScene::slanted_two_view(96, 72, 21);
        let views = scene.render_views();
        let config = PatchMatchConfig::default().with_depth_range(scene.depth_range.0, scene.depth_range.1);
        (scene, views, config)
    }

    #[test]
    fn costs_never_increase() {
        let (_, views, config) = small_scene();
        let eval = CostEvaluator::new(&views[0], &[&views[1]], None, &config);
        let init = initialize_random(&views[0].camera, config.depth_range, 3).unwrap();
        let mut state = PatchMatchState::new(init, &eval, 3);
        for it in 0..3 {
            for color in [Color::Red, Color::Black] {
                let before = state.costs().to_vec();
                run_iteration(&mut state, &eval, color, it);
                for (a, b) in before.iter().zip(state.costs()) {
                    assert!(b <= a);
                }
            }
        }
    }

    #[test]
    fn optimal_state_is_a_fixed_point() {
        let (scene, views, config) = small_scene();
        let eval = CostEvaluator::new(&views[0], &[&views[1]], None, &config);
        // ground truth already has near-zero cost; mark every pixel as
        // unbeatable to check that nothing moves
        let gt = scene.depth_normal_map(0);
        let mut state = PatchMatchState::new(gt.clone(), &eval, 1);
        for c in state.costs.iter_mut() {
            *c = -1.0;
        }
        run_iteration(&mut state, &eval, Color::Red, 0);
        run_iteration(&mut state, &eval, Color::Black, 0);
        assert_eq!(state.map().values(), gt.values());
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let (_, views, config) = small_scene();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let eval = CostEvaluator::new(&views[0], &[&views[1]], None, &config);
                let init = initialize_random(&views[0].camera, config.depth_range, 42).unwrap();
                let mut state = PatchMatchState::new(init, &eval, 42);
                run_iteration(&mut state, &eval, Color::Red, 0);
                run_iteration(&mut state, &eval, Color::Black, 0);
                state
            })
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.map(), b.map());
        assert_eq!(a.costs(), b.costs());
    }

    #[test]
    fn converges_on_small_plane() {
        let scene = SyntheticScene::slanted_two_view(160, 120, 21);
        let views = scene.render_views();
        let config = PatchMatchConfig::default().with_depth_range(scene.depth_range.0, scene.depth_range.1);
        let eval = CostEvaluator::new(&views[0], &[&views[1]], None, &config);
        let init = initialize_random(&views[0].camera, config.depth_range, 5).unwrap();
        let mut state = PatchMatchState::new(init, &eval, 5);
        run_patchmatch(&mut state, &eval);
        let gt = scene.depth_map(0);
        let good = state
            .map()
            .values()
            .iter()
            .zip(gt.values())
            .filter(|(h, g)| ((h.depth - **g) / **g).abs() < 0.01)
            .count();
        let frac = good as f64 / gt.len() as f64;
        assert!(frac > 0.85, "only {frac} within 1%");
        for (i, hyp) in state.map().values().iter().enumerate() {
            if state.map().mask()[i] {
                let ray = views[0].camera.ray(&Vector2::new((i % 160) as f64, (i / 160) as f64));
                assert!(hyp.is_valid_for(&ray));
                assert!((0.0..=2.0).contains(&state.costs()[i]));
            }
        }
    }
}
