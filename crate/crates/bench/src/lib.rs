//! Shared fixtures for the benchmarks.

use mvs_core::synthetic::SyntheticScene;
use mvs_core::{PatchMatchConfig, View};

/// Rendered two-view slanted-plane scene with a matching configuration.
pub fn plane_views(width: usize, height: usize) -> (SyntheticScene, Vec<View>, PatchMatchConfig) {
    let scene = SyntheticScene::slanted_two_view(width, height, 7);
    let views = scene.render_views();
    let config = PatchMatchConfig::default().with_depth_range(scene.depth_range.0, scene.depth_range.1);
    (scene, views, config)
}
