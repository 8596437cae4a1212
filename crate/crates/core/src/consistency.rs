//! Cross-view geometric verification: counter maps and label maps.

use std::path::Path;

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{angle_between, forward_backward, Camera, RelativePose};
use crate::io::{read_gray_png, write_gray_png, IoError};
use crate::map::{DepthMap, GridMap, NormalMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConsistencyError {
    #[error("resolution mismatch: {0}")]
    ResolutionMismatch(String),
    #[error("at least one source view is required")]
    NoSources,
}

/// Thresholds deciding whether a source view verifies a reference depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsistencyThresholds {
    /// Forward-backward reprojection distance, pixels.
    pub max_reproj: f64,
    /// Relative depth difference in the source view.
    pub rel_depth_tol: f64,
    /// Angle between world-frame normals, degrees.
    pub max_normal_angle: f64,
}

impl Default for ConsistencyThresholds {
    fn default() -> Self {
        Self {
            max_reproj: 2.0,
            rel_depth_tol: 0.01,
            max_normal_angle: 30.0,
        }
    }
}

/// Depth and normal maps of one view with its camera.
#[derive(Debug, Clone, Copy)]
pub struct ViewMaps<'a> {
    pub camera: &'a Camera,
    pub depth: &'a DepthMap,
    pub normals: &'a NormalMap,
}

impl<'a> ViewMaps<'a> {
    pub fn new(camera: &'a Camera, depth: &'a DepthMap, normals: &'a NormalMap) -> Self {
        Self { camera, depth, normals }
    }

    pub(crate) fn check_shape(&self, what: &str) -> Result<(), ConsistencyError> {
        let (w, h) = (self.camera.width, self.camera.height);
        if self.depth.width() != w || self.depth.height() != h || !self.depth.same_shape(self.normals) {
            return Err(ConsistencyError::ResolutionMismatch(format!(
                "{what}: camera {w}x{h}, depth {}x{}, normals {}x{}",
                self.depth.width(),
                self.depth.height(),
                self.normals.width(),
                self.normals.height()
            )));
        }
        Ok(())
    }
}

/// Per-source verdicts for the reference pixel `(x, y)`. A source passes
/// when the forward-backward reprojection distance, the relative depth
/// difference and the normal angle are all within `thresholds`. An invalid
/// reference pixel fails every source.
pub fn check_pixel_consistency(
    reference: &ViewMaps<'_>,
    sources: &[ViewMaps<'_>],
    x: usize,
    y: usize,
    thresholds: &ConsistencyThresholds,
) -> Vec<bool> {
    let poses: Vec<RelativePose> = sources
        .iter()
        .map(|s| RelativePose::between(reference.camera, s.camera))
        .collect();
    check_with_poses(reference, sources, &poses, x, y, thresholds)
}

fn check_with_poses(
    reference: &ViewMaps<'_>,
    sources: &[ViewMaps<'_>],
    poses: &[RelativePose],
    x: usize,
    y: usize,
    t: &ConsistencyThresholds,
) -> Vec<bool> {
    sources
        .iter()
        .zip(poses)
        .map(|(s, pose)| verify_source(reference, s, pose, x, y, t).is_some())
        .collect()
}

/// The pixel of `source` verifying the reference depth at `(x, y)`, or
/// `None` if any threshold fails. `pose` maps reference to source camera
/// coordinates.
pub fn verify_source(
    reference: &ViewMaps<'_>,
    source: &ViewMaps<'_>,
    pose: &RelativePose,
    x: usize,
    y: usize,
    t: &ConsistencyThresholds,
) -> Option<(usize, usize)> {
    let z = *reference.depth.get(x, y)?;
    let n_ref = reference.normals.get(x, y)?;
    let pixel = Vector2::new(x as f64, y as f64);
    let r = forward_backward(reference.camera, source.camera, pose, &pixel, z, |u, v| source.depth.get(u, v).copied())?;
    let n_src = source.normals.get(r.source_pixel.0, r.source_pixel.1)?;
    let rel = (r.source_depth - r.projected_depth).abs() / r.projected_depth;
    let n_world = reference.camera.rotation.transpose() * n_ref;
    let angle = angle_between(&n_world, &(source.camera.rotation.transpose() * n_src));
    (r.error <= t.max_reproj && rel <= t.rel_depth_tol && angle <= t.max_normal_angle.to_radians()).then_some(r.source_pixel)
}

/// Number of verifying sources per pixel of the reference view.
pub type CounterMap = GridMap<u32>;

/// Counts, for every valid reference pixel, the sources passing
/// [`check_pixel_consistency`]. Invalid pixels hold 0 and stay invalid.
pub fn build_counter_map(
    reference: &ViewMaps<'_>,
    sources: &[ViewMaps<'_>],
    thresholds: &ConsistencyThresholds,
) -> Result<CounterMap, ConsistencyError> {
    reference.check_shape("reference")?;
    for (i, s) in sources.iter().enumerate() {
        s.check_shape(&format!("source {i}"))?;
    }
    let (w, h) = (reference.depth.width(), reference.depth.height());
    let poses: Vec<RelativePose> = sources
        .iter()
        .map(|s| RelativePose::between(reference.camera, s.camera))
        .collect();
    let counts: Vec<u32> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            check_with_poses(reference, sources, &poses, i % w, i / w, thresholds)
                .into_iter()
                .filter(|&ok| ok)
                .count() as u32
        })
        .collect();
    Ok(GridMap::from_parts(w, h, counts, reference.depth.mask().to_vec()))
}

/// Ground-truth label of one pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Outlier,
    Inlier,
    Undefined,
}

impl Label {
    /// PNG encoding: 0 outlier, 255 inlier, 128 undefined.
    pub fn to_byte(self) -> u8 {
        match self {
            Label::Outlier => 0,
            Label::Inlier => 255,
            Label::Undefined => 128,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Label::Outlier),
            255 => Some(Label::Inlier),
            128 => Some(Label::Undefined),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    labels: Vec<Label>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<Label>) -> Self {
        assert_eq!(labels.len(), width * height);
        Self { width, height, labels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> Label {
        self.labels[y * self.width + x]
    }

    /// Number of (inlier, outlier) pixels.
    pub fn class_counts(&self) -> (usize, usize) {
        let inliers = self.labels.iter().filter(|l| **l == Label::Inlier).count();
        let outliers = self.labels.iter().filter(|l| **l == Label::Outlier).count();
        (inliers, outliers)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.labels.iter().map(|l| l.to_byte()).collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Option<Self> {
        if bytes.len() != width * height {
            return None;
        }
        let labels = bytes.iter().map(|&b| Label::from_byte(b)).collect::<Option<Vec<_>>>()?;
        Some(Self::new(width, height, labels))
    }

    pub fn write_png(&self, path: &Path) -> Result<(), IoError> {
        write_gray_png(path, self.width, self.height, &self.to_bytes())
    }

    pub fn read_png(path: &Path) -> Result<Self, IoError> {
        let (w, h, bytes) = read_gray_png(path)?;
        Self::from_bytes(w, h, &bytes)
            .ok_or_else(|| IoError::Format(path.to_path_buf(), "label values must be 0, 128 or 255".into()))
    }
}

/// Labels each pixel by comparing where its estimated and ground-truth 3D
/// points project in the source views: inlier when the two projections lie
/// within `max_dist` pixels in at least one source. Undefined where either
/// depth is missing.
pub fn build_label_map(
    estimate: &DepthMap,
    ground_truth: &DepthMap,
    ref_cam: &Camera,
    src_cams: &[&Camera],
    max_dist: f64,
) -> Result<LabelMap, ConsistencyError> {
    if !estimate.same_shape(ground_truth) || estimate.width() != ref_cam.width || estimate.height() != ref_cam.height {
        return Err(ConsistencyError::ResolutionMismatch(format!(
            "estimate {}x{}, ground truth {}x{}, camera {}x{}",
            estimate.width(),
            estimate.height(),
            ground_truth.width(),
            ground_truth.height(),
            ref_cam.width,
            ref_cam.height
        )));
    }
    if src_cams.is_empty() {
        return Err(ConsistencyError::NoSources);
    }
    let w = estimate.width();
    let labels = (0..estimate.len())
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let (Some(&z_est), Some(&z_gt)) = (estimate.get(x, y), ground_truth.get(x, y)) else {
                return Label::Undefined;
            };
            let d = min_projection_distance(ref_cam, src_cams, x, y, z_est, z_gt);
            if d <= max_dist {
                Label::Inlier
            } else {
                Label::Outlier
            }
        })
        .collect();
    Ok(LabelMap::new(w, estimate.height(), labels))
}

/// Smallest distance over sources between the projections of the reference
/// pixel unprojected at `z_a` and at `z_b`; infinite when no source sees
/// both points.
pub fn min_projection_distance(ref_cam: &Camera, src_cams: &[&Camera], x: usize, y: usize, z_a: f64, z_b: f64) -> f64 {
    let pixel = Vector2::new(x as f64, y as f64);
    let (Ok(pa), Ok(pb)) = (ref_cam.unproject(&pixel, z_a), ref_cam.unproject(&pixel, z_b)) else {
        return f64::INFINITY;
    };
    src_cams
        .iter()
        .filter_map(|c| {
            let (qa, _) = c.project(&pa).ok()?;
            let (qb, _) = c.project(&pb).ok()?;
            Some((qa - qb).norm())
        })
        .fold(f64::INFINITY, f64::min)
}
