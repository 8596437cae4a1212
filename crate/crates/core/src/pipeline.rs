//! Workspace loading, stage orchestration and on-disk stage caching.
//!
//! Workspace layout:
//!
//! ```text
//! images/            input images
//! cameras/           cameras.txt + images.txt (+ points3D.txt), or scene.json
//! depth/ normal/     PatchMatch output, one PFM per view
//! counter/           counter maps
//! conf/              optional confidence maps; conf/refined/ for refined maps
//! label/             label maps (needs gt/depth/)
//! refined/           refined depth/, normal/ and counter/
//! filtered/          filtered depth maps fed to fusion
//! cloud.ply          fused point cloud
//! report.json        point count and metrics
//! gt/                optional ground truth: depth/<view>.pfm and cloud.ply
//! .cache/            one record per stage
//! ```
//!
//! A stage is skipped when the digest of its configuration and input files
//! matches its cache record and all of its outputs exist.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::confidence::{
    counter_pfm, export_training_sample, heuristic_confidence, read_confidence, ConfidenceMap, MANIFEST_FILE,
};
use crate::consistency::{build_counter_map, build_label_map, ConsistencyThresholds, CounterMap, LabelMap, ViewMaps};
use crate::eval::{evaluate, evaluate_confidence, ConfidenceReport, EvalReport};
use crate::fusion::{filter_by_confidence, filter_by_support, fuse, FusionConfig};
use crate::geometry::{angle_between, Camera};
use crate::image::{RgbImage, View};
use crate::io::{
    depth_from_pfm, depth_to_pfm, format_sfm_text, normals_from_pfm, normals_to_pfm, parse_scene_json,
    parse_sfm_points, parse_sfm_text, read_ply, read_text, scalar_from_pfm, write_file, write_ply, IoError, Pfm,
    PointCloud, PosedImage,
};
use crate::map::{DepthMap, GridMap, NormalMap};
use crate::patchmatch::{estimate_all_multiscale, PatchMatchConfig};
use crate::refine::{invert_depth, refine, state_to_normals, RefineConfig};
use crate::synthetic::SyntheticScene;

pub const DEFAULT_TAU_FAST: f64 = 0.5;
pub const DEFAULT_TAU_REFINED: f64 = 0.05;

/// Source selection: maximum angle between optical axes, degrees.
pub const MAX_SOURCE_ANGLE: f64 = 60.0;
/// Source selection: admissible baseline over scene depth.
pub const BASELINE_RATIO: (f64, f64) = (0.01, 2.0);

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{context}: {message}")]
    Data { context: String, message: String },
}

impl PipelineError {
    fn data(context: impl fmt::Display, message: impl fmt::Display) -> Self {
        Self::Data {
            context: context.to_string(),
            message: message.to_string(),
        }
    }

    /// 2 for configuration errors, 3 for anything wrong with the data.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Confidence filtering of the PatchMatch maps.
    Fast,
    /// Planar refinement, then filtering of the refined maps.
    Refined,
}

impl FromStr for Variant {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fast" => Ok(Self::Fast),
            "refined" => Ok(Self::Refined),
            _ => Err(PipelineError::Config(format!("unknown variant {s:?}, expected fast or refined"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fast => "fast",
            Self::Refined => "refined",
        })
    }
}

/// Which depth/normal maps a stage reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapSet {
    Raw,
    Refined,
}

impl From<Variant> for MapSet {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Fast => Self::Raw,
            Variant::Refined => Self::Refined,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub variant: Variant,
    pub seed: u64,
    /// Image resampling factor applied on load.
    pub downsample: f64,
    pub patchmatch: PatchMatchConfig,
    pub counter: ConsistencyThresholds,
    pub refine: RefineConfig,
    pub fusion: FusionConfig,
    /// Confidence threshold of the filter stage.
    pub tau: f64,
    /// Minimum counter value of the filter stage; 0 disables it.
    pub min_count: u32,
    /// Label map projection threshold, pixels.
    pub label_max_dist: f64,
    /// Evaluation tolerances, scene units.
    pub tolerances: Vec<f64>,
}

impl PipelineConfig {
    pub fn for_variant(variant: Variant) -> Self {
        let (fusion, tau) = match variant {
            Variant::Fast => (FusionConfig::default(), DEFAULT_TAU_FAST),
            Variant::Refined => (FusionConfig::refined(), DEFAULT_TAU_REFINED),
        };
        Self {
            variant,
            seed: 0,
            downsample: 0.5,
            patchmatch: PatchMatchConfig::default(),
            counter: ConsistencyThresholds::default(),
            refine: RefineConfig::default(),
            fusion,
            tau,
            min_count: 0,
            label_max_dist: 2.0,
            tolerances: vec![0.01, 0.02],
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |e: &dyn fmt::Display| PipelineError::Config(e.to_string());
        if !(self.downsample > 0.0 && self.downsample <= 1.0) {
            return Err(PipelineError::Config(format!("downsample must be in (0, 1], got {}", self.downsample)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(PipelineError::Config(format!("tau must be in [0, 1], got {}", self.tau)));
        }
        if !(self.label_max_dist > 0.0) {
            return Err(PipelineError::Config("label max distance must be positive".into()));
        }
        if self.tolerances.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(PipelineError::Config("tolerances must be positive".into()));
        }
        self.patchmatch.validate().map_err(|e| cfg(&e))?;
        self.refine.validate().map_err(|e| cfg(&e))?;
        self.fusion.validate().map_err(|e| cfg(&e))?;
        if self.variant == Variant::Refined && self.fusion.max_normal_angle > FusionConfig::refined().max_normal_angle {
            return Err(PipelineError::Config(format!(
                "the refined variant fuses with a normal angle of at most {} degrees, got {}",
                FusionConfig::refined().max_normal_angle,
                self.fusion.max_normal_angle
            )));
        }
        Ok(())
    }
}

/// Paths inside a workspace directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn images_dir(&self) -> PathBuf {
        self.root.join("images")
    }

    pub fn cameras_dir(&self) -> PathBuf {
        self.root.join("cameras")
    }

    fn pfm(&self, dir: &str, view: &str) -> PathBuf {
        self.root.join(dir).join(format!("{view}.pfm"))
    }

    pub fn depth(&self, set: MapSet, view: &str) -> PathBuf {
        match set {
            MapSet::Raw => self.pfm("depth", view),
            MapSet::Refined => self.pfm("refined/depth", view),
        }
    }

    pub fn normal(&self, set: MapSet, view: &str) -> PathBuf {
        match set {
            MapSet::Raw => self.pfm("normal", view),
            MapSet::Refined => self.pfm("refined/normal", view),
        }
    }

    pub fn counter(&self, set: MapSet, view: &str) -> PathBuf {
        match set {
            MapSet::Raw => self.pfm("counter", view),
            MapSet::Refined => self.pfm("refined/counter", view),
        }
    }

    pub fn conf(&self, set: MapSet, view: &str) -> PathBuf {
        match set {
            MapSet::Raw => self.pfm("conf", view),
            MapSet::Refined => self.pfm("conf/refined", view),
        }
    }

    pub fn label(&self, view: &str) -> PathBuf {
        self.root.join("label").join(format!("{view}.png"))
    }

    pub fn filtered(&self, view: &str) -> PathBuf {
        self.pfm("filtered", view)
    }

    pub fn gt_depth(&self, view: &str) -> PathBuf {
        self.pfm("gt/depth", view)
    }

    pub fn gt_cloud(&self) -> PathBuf {
        self.root.join("gt").join("cloud.ply")
    }

    pub fn cloud(&self) -> PathBuf {
        self.root.join("cloud.ply")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn train_dir(&self) -> PathBuf {
        self.root.join("train")
    }

    fn cache(&self, stage: &str) -> PathBuf {
        self.root.join(".cache").join(format!("{stage}.json"))
    }
}

/// Views at processing resolution with their source lists.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub views: Vec<View>,
    pub sources: Vec<Vec<usize>>,
    pub depth_range: (f64, f64),
    /// Image and camera files the views were read from.
    pub input_files: Vec<PathBuf>,
}

impl SceneBundle {
    pub fn names(&self) -> Vec<&str> {
        self.views.iter().map(|v| v.name.as_str()).collect()
    }
}

/// Depth range covering `points` in every camera, widened by a factor of 2
/// on both ends.
fn depth_range_from_points(points: &[Vector3<f64>], cameras: &[&Camera]) -> Option<(f64, f64)> {
    let mut range = (f64::INFINITY, 0.0f64);
    for cam in cameras {
        for p in points {
            let z = cam.world_to_camera(p).z;
            if z > 0.0 {
                range = (range.0.min(z), range.1.max(z));
            }
        }
    }
    (range.1 > 0.0).then(|| (range.0 / 2.0, range.1 * 2.0))
}

/// Sources of every view: other views whose optical axis is within
/// [`MAX_SOURCE_ANGLE`] and whose baseline over `scene_depth` lies in
/// [`BASELINE_RATIO`], in index order.
pub fn select_sources(cameras: &[&Camera], scene_depth: f64) -> Vec<Vec<usize>> {
    let axis = |c: &Camera| c.rotation.transpose() * Vector3::z();
    let max_angle = MAX_SOURCE_ANGLE.to_radians();
    (0..cameras.len())
        .map(|i| {
            (0..cameras.len())
                .filter(|&j| {
                    if j == i {
                        return false;
                    }
                    let ratio = (cameras[i].center() - cameras[j].center()).norm() / scene_depth;
                    angle_between(&axis(cameras[i]), &axis(cameras[j])) < max_angle
                        && (BASELINE_RATIO.0..=BASELINE_RATIO.1).contains(&ratio)
                })
                .collect()
        })
        .collect()
}

/// Reads cameras and images of a workspace and resamples the images by
/// `downsample`. Cameras come from `cameras/scene.json` if present, else
/// from `cameras/cameras.txt` and `cameras/images.txt`, with the depth range
/// derived from `cameras/points3D.txt`.
pub fn load_scene(ws: &Workspace, downsample: f64) -> Result<SceneBundle, PipelineError> {
    if !(downsample > 0.0 && downsample <= 1.0) {
        return Err(PipelineError::Config(format!("downsample must be in (0, 1], got {downsample}")));
    }
    let dir = ws.cameras_dir();
    let json = dir.join("scene.json");
    let mut input_files = Vec::new();
    let (posed, range): (Vec<PosedImage>, Option<(f64, f64)>) = if json.exists() {
        input_files.push(json.clone());
        parse_scene_json(&read_text(&json)?, &json)?
    } else {
        let (cams, imgs) = (dir.join("cameras.txt"), dir.join("images.txt"));
        let posed = parse_sfm_text(&read_text(&cams)?, &cams, &read_text(&imgs)?, &imgs)?;
        input_files.extend([cams, imgs]);
        let pts_path = dir.join("points3D.txt");
        let range = if pts_path.exists() {
            input_files.push(pts_path.clone());
            let pts = parse_sfm_points(&read_text(&pts_path)?, &pts_path)?;
            depth_range_from_points(&pts, &posed.iter().map(|p| &p.camera).collect::<Vec<_>>())
        } else {
            None
        };
        (posed, range)
    };
    if posed.len() < 2 {
        return Err(PipelineError::data(dir.display(), format!("{} posed images, need at least 2", posed.len())));
    }
    let depth_range = range.ok_or_else(|| {
        PipelineError::data(dir.display(), "no depth range: add depth_range to scene.json or a points3D.txt")
    })?;

    let views = posed
        .par_iter()
        .map(|p| {
            let path = ws.images_dir().join(&p.name);
            if !path.exists() {
                return Err(PipelineError::Io(IoError::Missing(path)));
            }
            let image = RgbImage::load(&path)?;
            if (image.width(), image.height()) != (p.camera.width, p.camera.height) {
                return Err(PipelineError::data(
                    path.display(),
                    format!(
                        "image is {}x{} but its camera is {}x{}",
                        image.width(),
                        image.height(),
                        p.camera.width,
                        p.camera.height
                    ),
                ));
            }
            let stem = Path::new(&p.name)
                .file_stem()
                .map_or_else(|| p.name.clone(), |s| s.to_string_lossy().into_owned());
            let view = View::new(stem, image, p.camera.clone());
            Ok(if downsample < 1.0 { view.downsampled(downsample) } else { view })
        })
        .collect::<Result<Vec<_>, _>>()?;
    input_files.extend(posed.iter().map(|p| ws.images_dir().join(&p.name)));

    let cams: Vec<&Camera> = views.iter().map(|v| &v.camera).collect();
    let sources = select_sources(&cams, (depth_range.0 * depth_range.1).sqrt());
    for (v, s) in views.iter().zip(&sources) {
        if s.is_empty() {
            return Err(PipelineError::data(&v.name, "no view passes the source selection"));
        }
    }
    Ok(SceneBundle {
        views,
        sources,
        depth_range,
        input_files,
    })
}

// ---------------------------------------------------------------------------
// Stage cache

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    outputs: Vec<PathBuf>,
}

/// Digest of a stage's configuration and input files.
struct StageKey(Sha256);

impl StageKey {
    fn new(stage: &str) -> Self {
        let mut h = Sha256::new();
        h.update(stage.as_bytes());
        Self(h)
    }

    fn config<T: Serialize>(mut self, value: &T) -> Self {
        self.0.update(serde_json::to_vec(value).expect("config serializes"));
        self
    }

    /// Missing files hash as absent, so creating one changes the key.
    fn files<'a>(mut self, root: &Path, files: impl IntoIterator<Item = &'a PathBuf>) -> Result<Self, PipelineError> {
        for f in files {
            let rel = f.strip_prefix(root).unwrap_or(f);
            self.0.update(rel.to_string_lossy().as_bytes());
            if f.exists() {
                let bytes = crate::io::read_file(f)?;
                self.0.update((bytes.len() as u64).to_le_bytes());
                self.0.update(&bytes);
            } else {
                self.0.update(b"\0absent");
            }
        }
        Ok(self)
    }

    fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

/// Whether a stage ran or was served from its cache.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: String,
    pub recomputed: bool,
}

fn cached_stage(
    ws: &Workspace,
    stage: &str,
    key: String,
    outputs: Vec<PathBuf>,
    force: bool,
    compute: impl FnOnce() -> Result<(), PipelineError>,
) -> Result<StageOutcome, PipelineError> {
    let record_path = ws.cache(stage);
    if !force {
        let hit = read_text(&record_path)
            .ok()
            .and_then(|t| serde_json::from_str::<CacheRecord>(&t).ok())
            .is_some_and(|r| r.key == key && r.outputs == outputs && outputs.iter().all(|p| p.exists()));
        if hit {
            log::info!("{stage}: up to date");
            return Ok(StageOutcome {
                stage: stage.to_string(),
                recomputed: false,
            });
        }
    }
    log::info!("{stage}: running");
    compute()?;
    let record = CacheRecord { key, outputs };
    write_file(&record_path, &serde_json::to_vec_pretty(&record).expect("record serializes"))?;
    Ok(StageOutcome {
        stage: stage.to_string(),
        recomputed: true,
    })
}

fn per_view(bundle: &SceneBundle, f: impl Fn(&str) -> PathBuf) -> Vec<PathBuf> {
    bundle.names().into_iter().map(f).collect()
}

fn check_shape<T>(map: &GridMap<T>, view: &View, path: &Path) -> Result<(), PipelineError> {
    if (map.width(), map.height()) != (view.width(), view.height()) {
        return Err(PipelineError::data(
            path.display(),
            format!(
                "map is {}x{} but view {} is processed at {}x{}",
                map.width(),
                map.height(),
                view.name,
                view.width(),
                view.height()
            ),
        ));
    }
    Ok(())
}

fn load_depth(path: &Path, view: &View) -> Result<DepthMap, PipelineError> {
    let map = depth_from_pfm(&Pfm::read(path)?, path)?;
    check_shape(&map, view, path)?;
    Ok(map)
}

fn load_normals(path: &Path, view: &View) -> Result<NormalMap, PipelineError> {
    let map = normals_from_pfm(&Pfm::read(path)?, path)?;
    check_shape(&map, view, path)?;
    Ok(map)
}

fn load_counter(path: &Path, view: &View) -> Result<CounterMap, PipelineError> {
    let map = scalar_from_pfm(&Pfm::read(path)?, path)?;
    check_shape(&map, view, path)?;
    Ok(map.map(|&v| v.round() as u32))
}

/// The confidence map in `conf/` if present, else `count / sources`.
pub fn resolve_confidence(
    ws: &Workspace,
    bundle: &SceneBundle,
    set: MapSet,
    index: usize,
) -> Result<ConfidenceMap, PipelineError> {
    let view = &bundle.views[index];
    let path = ws.conf(set, &view.name);
    if path.exists() {
        let c = read_confidence(&path)?;
        check_shape(&c, view, &path)?;
        return Ok(c);
    }
    log::warn!(
        "{}: no confidence map at {}, using heuristic confidence count / {} sources",
        view.name,
        path.display(),
        bundle.sources[index].len()
    );
    let counter = load_counter(&ws.counter(set, &view.name), view)?;
    Ok(heuristic_confidence(&counter, bundle.sources[index].len()))
}

// ---------------------------------------------------------------------------
// Stages

/// PatchMatch depth and normal maps for every view.
pub fn depth_stage(ws: &Workspace, bundle: &SceneBundle, config: &PipelineConfig, force: bool) -> Result<StageOutcome, PipelineError> {
    let pm = PatchMatchConfig {
        depth_range: bundle.depth_range,
        ..config.patchmatch.clone()
    };
    let key = StageKey::new("depth")
        .config(&(&pm, config.seed, config.downsample, &bundle.sources))
        .files(ws.root(), &bundle.input_files)?
        .finish();
    let mut outputs = per_view(bundle, |n| ws.depth(MapSet::Raw, n));
    outputs.extend(per_view(bundle, |n| ws.normal(MapSet::Raw, n)));
    cached_stage(ws, "depth", key, outputs, force, || {
        let maps = estimate_all_multiscale(&bundle.views, &bundle.sources, &pm, config.seed)
            .map_err(|e| PipelineError::data("depth estimation", e))?;
        for (view, map) in bundle.views.iter().zip(&maps) {
            depth_to_pfm(&map.depth_map()).write(&ws.depth(MapSet::Raw, &view.name))?;
            normals_to_pfm(&map.normal_map()).write(&ws.normal(MapSet::Raw, &view.name))?;
        }
        Ok(())
    })
}

/// Counter maps of the raw or refined depth maps.
pub fn counter_stage(
    ws: &Workspace,
    bundle: &SceneBundle,
    config: &PipelineConfig,
    set: MapSet,
    force: bool,
) -> Result<StageOutcome, PipelineError> {
    let name = match set {
        MapSet::Raw => "counter",
        MapSet::Refined => "refined-counter",
    };
    let mut inputs = per_view(bundle, |n| ws.depth(set, n));
    inputs.extend(per_view(bundle, |n| ws.normal(set, n)));
    let key = StageKey::new(name)
        .config(&(&config.counter, &bundle.sources))
        .files(ws.root(), &inputs)?
        .finish();
    cached_stage(ws, name, key, per_view(bundle, |n| ws.counter(set, n)), force, || {
        let maps = bundle
            .views
            .iter()
            .map(|v| Ok((load_depth(&ws.depth(set, &v.name), v)?, load_normals(&ws.normal(set, &v.name), v)?)))
            .collect::<Result<Vec<_>, PipelineError>>()?;
        let view_maps: Vec<ViewMaps<'_>> = bundle
            .views
            .iter()
            .zip(&maps)
            .map(|(v, (d, n))| ViewMaps::new(&v.camera, d, n))
            .collect();
        for (i, view) in bundle.views.iter().enumerate() {
            let sources: Vec<ViewMaps<'_>> = bundle.sources[i].iter().map(|&j| view_maps[j]).collect();
            let counter = build_counter_map(&view_maps[i], &sources, &config.counter)
                .map_err(|e| PipelineError::data(&view.name, e))?;
            counter_pfm(&counter).write(&ws.counter(set, &view.name))?;
        }
        Ok(())
    })
}

/// Refines every raw depth map against its confidence map, guided by the
/// view's image.
pub fn refine_stage(ws: &Workspace, bundle: &SceneBundle, config: &PipelineConfig, force: bool) -> Result<StageOutcome, PipelineError> {
    let mut inputs = per_view(bundle, |n| ws.depth(MapSet::Raw, n));
    inputs.extend(per_view(bundle, |n| ws.counter(MapSet::Raw, n)));
    inputs.extend(per_view(bundle, |n| ws.conf(MapSet::Raw, n)));
    let key = StageKey::new("refine")
        .config(&(&config.refine, &bundle.sources))
        .files(ws.root(), inputs.iter().chain(&bundle.input_files))?
        .finish();
    let mut outputs = per_view(bundle, |n| ws.depth(MapSet::Refined, n));
    outputs.extend(per_view(bundle, |n| ws.normal(MapSet::Refined, n)));
    cached_stage(ws, "refine", key, outputs, force, || {
        for (i, view) in bundle.views.iter().enumerate() {
            let depth = load_depth(&ws.depth(MapSet::Raw, &view.name), view)?;
            let c = resolve_confidence(ws, bundle, MapSet::Raw, i)?;
            let state = refine(&invert_depth(&depth), &c, Some(&view.image), &config.refine)
                .map_err(|e| PipelineError::data(&view.name, e))?;
            depth_to_pfm(&state.depth()).write(&ws.depth(MapSet::Refined, &view.name))?;
            normals_to_pfm(&state_to_normals(&state, &view.camera)).write(&ws.normal(MapSet::Refined, &view.name))?;
        }
        Ok(())
    })
}

/// Drops pixels with confidence below `tau` or fewer than `min_count`
/// verifying sources.
pub fn filter_stage(
    ws: &Workspace,
    bundle: &SceneBundle,
    config: &PipelineConfig,
    set: MapSet,
    force: bool,
) -> Result<StageOutcome, PipelineError> {
    let mut inputs = per_view(bundle, |n| ws.depth(set, n));
    inputs.extend(per_view(bundle, |n| ws.counter(set, n)));
    inputs.extend(per_view(bundle, |n| ws.conf(set, n)));
    let key = StageKey::new("filter")
        .config(&(config.tau, config.min_count, &bundle.sources))
        .files(ws.root(), &inputs)?
        .finish();
    cached_stage(ws, "filter", key, per_view(bundle, |n| ws.filtered(n)), force, || {
        for (i, view) in bundle.views.iter().enumerate() {
            let depth = load_depth(&ws.depth(set, &view.name), view)?;
            let counter = load_counter(&ws.counter(set, &view.name), view)?;
            let c = resolve_confidence(ws, bundle, set, i)?;
            let kept = filter_by_confidence(&depth, &c, config.tau)
                .and_then(|d| filter_by_support(&d, &counter, config.min_count))
                .map_err(|e| PipelineError::data(&view.name, e))?;
            log::info!("{}: kept {} of {} pixels", view.name, kept.valid_count(), depth.valid_count());
            depth_to_pfm(&kept).write(&ws.filtered(&view.name))?;
        }
        Ok(())
    })
}

/// Fuses the filtered depth maps with the normals of `set` into `cloud.ply`.
pub fn fuse_stage(
    ws: &Workspace,
    bundle: &SceneBundle,
    config: &PipelineConfig,
    set: MapSet,
    force: bool,
) -> Result<StageOutcome, PipelineError> {
    let mut inputs = per_view(bundle, |n| ws.filtered(n));
    inputs.extend(per_view(bundle, |n| ws.normal(set, n)));
    let key = StageKey::new("fuse")
        .config(&config.fusion)
        .files(ws.root(), inputs.iter().chain(&bundle.input_files))?
        .finish();
    cached_stage(ws, "fuse", key, vec![ws.cloud()], force, || {
        let mut depths = Vec::new();
        let mut normals = Vec::new();
        for view in &bundle.views {
            depths.push(load_depth(&ws.filtered(&view.name), view)?);
            normals.push(load_normals(&ws.normal(set, &view.name), view)?);
        }
        let cloud = fuse(&bundle.views, &depths, &normals, &config.fusion).map_err(|e| PipelineError::data("fusion", e))?;
        log::info!("fused {} points", cloud.len());
        cloud.write_ply(&ws.cloud())?;
        Ok(())
    })
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub points: usize,
    /// Present when `gt/cloud.ply` exists.
    pub eval: Option<Vec<EvalReport>>,
    /// Views with a label map.
    pub confidence: Vec<ConfidenceReport>,
}

/// Scores the fused cloud against `gt/cloud.ply` and the raw confidence maps
/// against the label maps, where those exist.
pub fn eval_stage(ws: &Workspace, bundle: &SceneBundle, config: &PipelineConfig, force: bool) -> Result<StageOutcome, PipelineError> {
    let mut inputs = vec![ws.cloud(), ws.gt_cloud()];
    inputs.extend(per_view(bundle, |n| ws.label(n)));
    inputs.extend(per_view(bundle, |n| ws.conf(MapSet::Raw, n)));
    inputs.extend(per_view(bundle, |n| ws.counter(MapSet::Raw, n)));
    let key = StageKey::new("eval")
        .config(&(&config.tolerances, &bundle.sources))
        .files(ws.root(), &inputs)?
        .finish();
    cached_stage(ws, "eval", key, vec![ws.report()], force, || {
        let report = build_report(ws, bundle, config)?;
        write_file(&ws.report(), &serde_json::to_vec_pretty(&report).expect("report serializes"))?;
        Ok(())
    })
}

fn build_report(ws: &Workspace, bundle: &SceneBundle, config: &PipelineConfig) -> Result<Report, PipelineError> {
    let cloud = read_ply(&ws.cloud())?;
    let eval = if ws.gt_cloud().exists() {
        let gt = read_ply(&ws.gt_cloud())?;
        let reports = evaluate(&cloud.positions, &gt.positions, &config.tolerances)
            .map_err(|e| PipelineError::data(ws.cloud().display(), e))?;
        log::info!("\n{}", crate::eval::format_table(&reports));
        Some(reports)
    } else {
        None
    };
    let mut confidence = Vec::new();
    for (i, view) in bundle.views.iter().enumerate() {
        let path = ws.label(&view.name);
        if !path.exists() {
            continue;
        }
        let labels = LabelMap::read_png(&path)?;
        let c = resolve_confidence(ws, bundle, MapSet::Raw, i)?;
        confidence.push(evaluate_confidence(&view.name, &c, &labels).map_err(|e| PipelineError::data(&view.name, e))?);
    }
    Ok(Report {
        points: cloud.len(),
        eval,
        confidence,
    })
}

/// Ground-truth depth resampled to the processing resolution by nearest
/// pixel.
fn load_gt_depth(path: &Path, view: &View) -> Result<DepthMap, PipelineError> {
    let gt = depth_from_pfm(&Pfm::read(path)?, path)?;
    if (gt.width(), gt.height()) == (view.width(), view.height()) {
        return Ok(gt);
    }
    let sx = gt.width() as f64 / view.width() as f64;
    let sy = gt.height() as f64 / view.height() as f64;
    Ok(GridMap::from_fn(view.width(), view.height(), 0.0, |x, y| {
        let gx = (((x as f64 + 0.5) * sx - 0.5).round().max(0.0) as usize).min(gt.width() - 1);
        let gy = (((y as f64 + 0.5) * sy - 0.5).round().max(0.0) as usize).min(gt.height() - 1);
        gt.get(gx, gy).copied()
    }))
}

/// Label maps of the raw depth maps against `gt/depth/`.
pub fn label_stage(ws: &Workspace, bundle: &SceneBundle, config: &PipelineConfig, force: bool) -> Result<StageOutcome, PipelineError> {
    let mut inputs = per_view(bundle, |n| ws.depth(MapSet::Raw, n));
    inputs.extend(per_view(bundle, |n| ws.gt_depth(n)));
    let key = StageKey::new("label")
        .config(&(config.label_max_dist, &bundle.sources))
        .files(ws.root(), &inputs)?
        .finish();
    cached_stage(ws, "label", key, per_view(bundle, |n| ws.label(n)), force, || {
        for (i, view) in bundle.views.iter().enumerate() {
            let depth = load_depth(&ws.depth(MapSet::Raw, &view.name), view)?;
            let gt_path = ws.gt_depth(&view.name);
            if !gt_path.exists() {
                return Err(PipelineError::Io(IoError::Missing(gt_path)));
            }
            let gt = load_gt_depth(&gt_path, view)?;
            let sources: Vec<&Camera> = bundle.sources[i].iter().map(|&j| &bundle.views[j].camera).collect();
            let labels = build_label_map(&depth, &gt, &view.camera, &sources, config.label_max_dist)
                .map_err(|e| PipelineError::data(&view.name, e))?;
            labels.write_png(&ws.label(&view.name))?;
        }
        Ok(())
    })
}

/// Writes the training inputs and labels of every view to `out_dir`.
pub fn export_stage(ws: &Workspace, bundle: &SceneBundle, out_dir: &Path, force: bool) -> Result<StageOutcome, PipelineError> {
    let mut inputs = per_view(bundle, |n| ws.normal(MapSet::Raw, n));
    inputs.extend(per_view(bundle, |n| ws.counter(MapSet::Raw, n)));
    inputs.extend(per_view(bundle, |n| ws.label(n)));
    let key = StageKey::new("export-train")
        .config(&out_dir)
        .files(ws.root(), inputs.iter().chain(&bundle.input_files))?
        .finish();
    cached_stage(ws, "export-train", key, vec![out_dir.join(MANIFEST_FILE)], force, || {
        for view in &bundle.views {
            let normals = load_normals(&ws.normal(MapSet::Raw, &view.name), view)?;
            let counter = load_counter(&ws.counter(MapSet::Raw, &view.name), view)?;
            let labels = LabelMap::read_png(&ws.label(&view.name))?;
            export_training_sample(view, &normals, &counter, &labels, out_dir).map_err(|e| PipelineError::data(&view.name, e))?;
        }
        Ok(())
    })
}

/// Stage outcomes and the resulting report of one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub stages: Vec<StageOutcome>,
    pub report: Report,
}

impl RunSummary {
    pub fn recomputed(&self) -> Vec<&str> {
        self.stages.iter().filter(|s| s.recomputed).map(|s| s.stage.as_str()).collect()
    }
}

/// Parses `report.json` of a workspace.
pub fn read_report(ws: &Workspace) -> Result<Report, PipelineError> {
    serde_json::from_str(&read_text(&ws.report())?).map_err(|e| PipelineError::data(ws.report().display(), e))
}

/// Runs every stage of the configured variant:
///
/// ```text
/// fast:    depth -> counter -> filter -> fuse -> eval
/// refined: depth -> counter -> refine -> refined-counter -> filter -> fuse -> eval
/// ```
pub fn run_pipeline(ws: &Workspace, bundle: &SceneBundle, config: &PipelineConfig, force: bool) -> Result<RunSummary, PipelineError> {
    config.validate()?;
    let mut stages = vec![
        depth_stage(ws, bundle, config, force)?,
        counter_stage(ws, bundle, config, MapSet::Raw, force)?,
    ];
    let set = MapSet::from(config.variant);
    if config.variant == Variant::Refined {
        stages.push(refine_stage(ws, bundle, config, force)?);
        stages.push(counter_stage(ws, bundle, config, MapSet::Refined, force)?);
    }
    stages.push(filter_stage(ws, bundle, config, set, force)?);
    stages.push(fuse_stage(ws, bundle, config, set, force)?);
    stages.push(eval_stage(ws, bundle, config, force)?);
    let report = read_report(ws)?;
    Ok(RunSummary {
        variant: config.variant,
        stages,
        report,
    })
}

// ---------------------------------------------------------------------------
// Synthetic workspaces

/// Writes a two-view synthetic workspace: rendered images, sparse
/// reconstruction camera files with a `points3D.txt`, ground-truth depth
/// maps at image resolution and a ground-truth cloud sampled on the pixel
/// grid of the first view at `gt_scale` times the image resolution.
pub fn write_synthetic_workspace(
    root: &Path,
    width: usize,
    height: usize,
    seed: u64,
    gt_scale: f64,
) -> Result<SyntheticScene, PipelineError> {
    if width < 16 || height < 16 || !(gt_scale > 0.0 && gt_scale <= 1.0) {
        return Err(PipelineError::Config(format!(
            "synthetic workspace needs at least 16x16 pixels and gt_scale in (0, 1], got {width}x{height}, {gt_scale}"
        )));
    }
    let ws = Workspace::new(root);
    let scene = SyntheticScene::converging_pair(width, height, seed);
    let mut posed = Vec::new();
    for (i, cam) in scene.cameras.iter().enumerate() {
        let name = format!("view{i:03}");
        scene.render(i).save_png(&ws.images_dir().join(format!("{name}.png")))?;
        depth_to_pfm(&scene.depth_map(i)).write(&ws.gt_depth(&name))?;
        posed.push(PosedImage {
            name: format!("{name}.png"),
            camera: cam.clone(),
        });
    }
    let (cams, imgs) = format_sfm_text(&posed);
    write_file(&ws.cameras_dir().join("cameras.txt"), cams.as_bytes())?;
    write_file(&ws.cameras_dir().join("images.txt"), imgs.as_bytes())?;

    // sparse points on a coarse grid of the first view
    let mut points = String::from("# POINT3D_ID X Y Z R G B ERROR TRACK[]\n");
    let step = (width / 16).max(1);
    let mut id = 1;
    for y in (0..height).step_by(step) {
        for x in (0..width).step_by(step) {
            if let Some(hit) = scene.hit(0, x as f64, y as f64) {
                let p = scene.cameras[0].unproject(&Vector2::new(x as f64, y as f64), hit.depth).expect("hit depth is positive");
                points.push_str(&format!("{id} {} {} {} 128 128 128 0\n", p.x, p.y, p.z));
                id += 1;
            }
        }
    }
    write_file(&ws.cameras_dir().join("points3D.txt"), points.as_bytes())?;

    let (gw, gh) = (((width as f64) * gt_scale).round() as usize, ((height as f64) * gt_scale).round() as usize);
    let gt_scene = SyntheticScene::converging_pair(gw, gh, seed);
    write_ply(&ws.gt_cloud(), &PointCloud::from_positions(gt_scene.ground_truth_points(0, &[1])))?;
    Ok(scene)
}
