use mvs_core::confidence::{read_confidence, write_confidence, ConfidenceMap};
use mvs_core::fusion::{fuse, FusionConfig};
use mvs_core::io::{depth_from_pfm, depth_to_pfm, normals_to_pfm, read_ply, Pfm};
use mvs_core::pipeline::{
    counter_stage, filter_stage, fuse_stage, load_scene, refine_stage, resolve_confidence, select_sources,
    write_synthetic_workspace, MapSet, PipelineConfig, Variant, Workspace,
};
use mvs_core::synthetic::SyntheticScene;
use mvs_core::GridMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Synthetic workspace whose raw depth and normal maps are the ground truth
/// with a square hole punched into the first view.
fn holed_workspace(dir: &std::path::Path) -> (Workspace, mvs_core::pipeline::SceneBundle, SyntheticScene, PipelineConfig) {
    write_synthetic_workspace(dir, 128, 96, 7, 0.5).unwrap();
    let ws = Workspace::new(dir);
    let config = PipelineConfig::for_variant(Variant::Refined);
    let bundle = load_scene(&ws, config.downsample).unwrap();
    let scene = SyntheticScene::converging_pair(64, 48, 7);
    for (i, view) in bundle.views.iter().enumerate() {
        let mut depth = scene.depth_map(i);
        if i == 0 {
            for y in 20..28 {
                for x in 28..36 {
                    depth.invalidate(x, y);
                }
            }
        }
        depth_to_pfm(&depth).write(&ws.depth(MapSet::Raw, &view.name)).unwrap();
        normals_to_pfm(&scene.normal_map(i)).write(&ws.normal(MapSet::Raw, &view.name)).unwrap();
    }
    (ws, bundle, scene, config)
}

#[test]
fn refined_stages_inpaint_a_hole() {
    let dir = tempfile::tempdir().unwrap();
    let (ws, bundle, scene, config) = holed_workspace(dir.path());
    counter_stage(&ws, &bundle, &config, MapSet::Raw, false).unwrap();
    refine_stage(&ws, &bundle, &config, false).unwrap();
    counter_stage(&ws, &bundle, &config, MapSet::Refined, false).unwrap();
    filter_stage(&ws, &bundle, &config, MapSet::Refined, false).unwrap();
    fuse_stage(&ws, &bundle, &config, MapSet::Refined, false).unwrap();

    let path = ws.depth(MapSet::Refined, "view000");
    let refined = depth_from_pfm(&Pfm::read(&path).unwrap(), &path).unwrap();
    let gt = scene.depth_map(0);
    for y in 20..28 {
        for x in 28..36 {
            let (z, g) = (*refined.value(x, y), *gt.value(x, y));
            assert!(refined.is_valid(x, y));
            assert!(((z - g) / g).abs() < 0.01, "hole pixel ({x},{y}): {z} vs {g}");
        }
    }
    let cloud = read_ply(&ws.cloud()).unwrap();
    assert!(!cloud.is_empty());
    let near = cloud.positions.iter().filter(|p| scene.distance_to_surface(p) < 2e-3).count();
    assert!(near as f64 >= 0.95 * cloud.len() as f64, "{near} of {} points near the plane", cloud.len());
}

#[test]
fn confidence_files_override_the_heuristic() {
    let dir = tempfile::tempdir().unwrap();
    let (ws, bundle, _, config) = holed_workspace(dir.path());
    counter_stage(&ws, &bundle, &config, MapSet::Raw, false).unwrap();
    let heuristic = resolve_confidence(&ws, &bundle, MapSet::Raw, 0).unwrap();
    assert!(heuristic.iter_valid().all(|(_, _, &c)| c == 0.0 || c == 1.0));

    let (w, h) = (bundle.views[0].width(), bundle.views[0].height());
    let trained: ConfidenceMap = GridMap::from_fn(w, h, 0.0, |x, _| Some(x as f64 / w as f64));
    write_confidence(&ws.conf(MapSet::Raw, "view000"), &trained).unwrap();
    assert_eq!(read_confidence(&ws.conf(MapSet::Raw, "view000")).unwrap().values(), trained.map(|&v| v as f32 as f64).values());
    let resolved = resolve_confidence(&ws, &bundle, MapSet::Raw, 0).unwrap();
    assert_eq!(resolved.values(), trained.map(|&v| v as f32 as f64).values());

    // a new confidence file invalidates the filter cache
    let fast = PipelineConfig::for_variant(Variant::Fast);
    assert!(filter_stage(&ws, &bundle, &fast, MapSet::Raw, false).unwrap().recomputed);
    assert!(!filter_stage(&ws, &bundle, &fast, MapSet::Raw, false).unwrap().recomputed);
    write_confidence(&ws.conf(MapSet::Raw, "view001"), &trained).unwrap();
    assert!(filter_stage(&ws, &bundle, &fast, MapSet::Raw, false).unwrap().recomputed);
    assert!(filter_stage(&ws, &bundle, &fast, MapSet::Raw, true).unwrap().recomputed);
}

#[test]
fn fusion_rejects_injected_outliers() {
    let scene = SyntheticScene::converging_pair(96, 72, 4);
    let views = scene.render_views();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut injected = 0;
    let depths: Vec<_> = (0..2)
        .map(|v| {
            let mut d = scene.depth_map(v);
            for z in d.values_mut() {
                if rng.random_bool(0.05) {
                    *z *= rng.random_range(0.7..1.3);
                    injected += 1;
                }
            }
            d
        })
        .collect();
    let normals: Vec<_> = (0..2).map(|v| scene.normal_map(v)).collect();
    let cloud = fuse(&views, &depths, &normals, &FusionConfig::default()).unwrap();
    let off = cloud
        .points
        .iter()
        .filter(|p| scene.distance_to_surface(&p.position) > 2e-3)
        .count();
    assert!(cloud.len() > 4000);
    assert!(off as f64 <= 0.05 * injected as f64, "{off} of {injected} outliers survived");
}

#[test]
fn ring_of_five_views_all_get_sources() {
    let scene = SyntheticScene::arc(5, 64, 48, 1.2, 3);
    let cams: Vec<_> = scene.cameras.iter().collect();
    let sources = select_sources(&cams, 3.0);
    assert_eq!(sources.len(), 5);
    for (i, s) in sources.iter().enumerate() {
        assert!(!s.is_empty(), "view {i} has no source");
        assert!(!s.contains(&i));
        // immediate neighbors on the arc see the most overlap
        if i > 0 {
            assert!(s.contains(&(i - 1)));
        }
        if i < 4 {
            assert!(s.contains(&(i + 1)));
        }
    }
}
