//! Outlier filtering of depth maps and multi-view fusion into a point cloud.

use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::ConfidenceMap;
use crate::consistency::{verify_source, ConsistencyThresholds, CounterMap, ViewMaps};
use crate::geometry::RelativePose;
use crate::image::View;
use crate::io::{write_ply, IoError, PointCloud};
use crate::map::{DepthMap, NormalMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{views} views but {depths} depth maps and {normals} normal maps")]
    MissingMaps { views: usize, depths: usize, normals: usize },
    #[error("threshold {0} outside [0, 1]")]
    BadThreshold(f64),
    #[error("invalid fusion config: {0}")]
    BadConfig(String),
}

/// Keeps pixels whose confidence is at least `tau`. Pixels with invalid
/// confidence count as confidence 0.
pub fn filter_by_confidence(depth: &DepthMap, c: &ConfidenceMap, tau: f64) -> Result<DepthMap, FusionError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(FusionError::BadThreshold(tau));
    }
    if !depth.same_shape(c) {
        return Err(FusionError::ShapeMismatch(format!(
            "depth {}x{}, confidence {}x{}",
            depth.width(),
            depth.height(),
            c.width(),
            c.height()
        )));
    }
    let mut out = depth.clone();
    for (i, keep) in out.mask_mut().iter_mut().enumerate() {
        let conf = if c.mask()[i] { c.values()[i] } else { 0.0 };
        if !(conf >= tau) {
            *keep = false;
        }
    }
    Ok(out)
}

/// Keeps pixels verified by at least `k` sources.
pub fn filter_by_support(depth: &DepthMap, counter: &CounterMap, k: u32) -> Result<DepthMap, FusionError> {
    if !depth.same_shape(counter) {
        return Err(FusionError::ShapeMismatch(format!(
            "depth {}x{}, counter {}x{}",
            depth.width(),
            depth.height(),
            counter.width(),
            counter.height()
        )));
    }
    let mut out = depth.clone();
    for (keep, &count) in out.mask_mut().iter_mut().zip(counter.values()) {
        if count < k {
            *keep = false;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Degrees.
    pub max_normal_angle: f64,
    /// Pixels.
    pub max_reproj: f64,
    /// Views observing a point, the reference included.
    pub min_support: usize,
    pub rel_depth_tol: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            max_normal_angle: 20.0,
            max_reproj: 1.0,
            min_support: 2,
            rel_depth_tol: 0.01,
        }
    }
}

impl FusionConfig {
    /// Densely overlapping video frames.
    pub fn dense_video() -> Self {
        Self {
            max_normal_angle: 5.0,
            min_support: 3,
            ..Self::default()
        }
    }

    /// Fusion of refined depth maps.
    pub fn refined() -> Self {
        Self {
            max_normal_angle: 5.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.max_normal_angle) || !positive(self.max_reproj) || !positive(self.rel_depth_tol) {
            return Err(FusionError::BadConfig(format!("thresholds must be positive: {self:?}")));
        }
        if self.min_support == 0 {
            return Err(FusionError::BadConfig("min_support must be >= 1".into()));
        }
        Ok(())
    }

    pub fn thresholds(&self) -> ConsistencyThresholds {
        ConsistencyThresholds {
            max_reproj: self.max_reproj,
            rel_depth_tol: self.rel_depth_tol,
            max_normal_angle: self.max_normal_angle,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedPoint {
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub color: [u8; 3],
    pub support: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FusedPointCloud {
    pub points: Vec<FusedPoint>,
}

impl FusedPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_point_cloud(&self) -> PointCloud {
        PointCloud {
            positions: self.points.iter().map(|p| p.position).collect(),
            normals: self.points.iter().map(|p| p.normal).collect(),
            colors: self.points.iter().map(|p| p.color).collect(),
        }
    }

    pub fn write_ply(&self, path: &Path) -> Result<(), IoError> {
        write_ply(path, &self.to_point_cloud())
    }
}

/// Greedy fusion.
///
/// Reference pixels are visited view by view in row-major order. An
/// unconsumed pixel collects, from every other view, the pixel its depth
/// projects to if that pixel is unconsumed and passes the reprojection,
/// relative depth and normal checks. When the pixel and its supporters
/// cover at least `min_support` views, one point is emitted at the mean of
/// their world positions, with the renormalized mean world normal and the
/// mean color, and all of them are consumed.
pub fn fuse(
    views: &[View],
    depths: &[DepthMap],
    normals: &[NormalMap],
    config: &FusionConfig,
) -> Result<FusedPointCloud, FusionError> {
    config.validate()?;
    if depths.len() != views.len() || normals.len() != views.len() {
        return Err(FusionError::MissingMaps {
            views: views.len(),
            depths: depths.len(),
            normals: normals.len(),
        });
    }
    let maps: Vec<ViewMaps<'_>> = (0..views.len())
        .map(|i| ViewMaps::new(&views[i].camera, &depths[i], &normals[i]))
        .collect();
    for (i, m) in maps.iter().enumerate() {
        m.check_shape(&views[i].name)
            .map_err(|e| FusionError::ShapeMismatch(e.to_string()))?;
    }
    let thresholds = config.thresholds();
    let mut consumed: Vec<Vec<bool>> = depths.iter().map(|d| vec![false; d.len()]).collect();
    let mut points = Vec::new();

    for r in 0..views.len() {
        let w = depths[r].width();
        let others: Vec<usize> = (0..views.len()).filter(|&s| s != r).collect();
        let poses: Vec<RelativePose> = others
            .iter()
            .map(|&s| RelativePose::between(&views[r].camera, &views[s].camera))
            .collect();
        // supporters ignoring consumption, resolved serially below
        let proposals: Vec<Vec<(usize, usize)>> = (0..depths[r].len())
            .into_par_iter()
            .map(|i| {
                if !depths[r].mask()[i] {
                    return Vec::new();
                }
                others
                    .iter()
                    .zip(&poses)
                    .filter_map(|(&s, pose)| {
                        verify_source(&maps[r], &maps[s], pose, i % w, i / w, &thresholds)
                            .map(|(x, y)| (s, y * depths[s].width() + x))
                    })
                    .collect()
            })
            .collect();

        for (i, proposal) in proposals.into_iter().enumerate() {
            if !depths[r].mask()[i] || consumed[r][i] {
                continue;
            }
            let members: Vec<(usize, usize)> = std::iter::once((r, i))
                .chain(proposal.into_iter().filter(|&(s, j)| !consumed[s][j]))
                .collect();
            if members.len() < config.min_support {
                continue;
            }
            let mut position = Vector3::zeros();
            let mut normal = Vector3::zeros();
            let mut color = [0.0f64; 3];
            for &(v, j) in &members {
                consumed[v][j] = true;
                let wv = depths[v].width();
                let cam = &views[v].camera;
                let pixel = Vector2::new((j % wv) as f64, (j / wv) as f64);
                position += cam.unproject(&pixel, depths[v].values()[j]).expect("valid depth unprojects");
                normal += cam.rotation.transpose() * normals[v].values()[j];
                let rgb = views[v].image.rgb8(j % wv, j / wv);
                for c in 0..3 {
                    color[c] += rgb[c] as f64;
                }
            }
            let n = members.len() as f64;
            let len = normal.norm();
            points.push(FusedPoint {
                position: position / n,
                normal: if len > 0.0 { normal / len } else { -views[r].camera.rotation.transpose().column(2).into_owned() },
                color: color.map(|c| (c / n).round() as u8),
                support: members.len(),
            });
        }
    }
    Ok(FusedPointCloud { points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::GridMap;

    fn depth(values: &[f64]) -> DepthMap {
        GridMap::from_parts(values.len(), 1, values.to_vec(), vec![true; values.len()])
    }

    #[test]
    fn confidence_threshold() {
        let d = depth(&[1.0, 2.0, 3.0]);
        let c = depth(&[0.04, 0.2, 0.6]);
        let out = filter_by_confidence(&d, &c, 0.05).unwrap();
        assert_eq!(out.mask(), &[false, true, true]);
        assert_eq!(filter_by_confidence(&d, &c, 0.0).unwrap(), d);
        assert!(matches!(filter_by_confidence(&d, &c, 1.1), Err(FusionError::BadThreshold(_))));
        let mut c_invalid = c.clone();
        c_invalid.invalidate(2, 0);
        assert_eq!(filter_by_confidence(&d, &c_invalid, 0.05).unwrap().mask(), &[false, true, false]);
    }

    #[test]
    fn support_threshold() {
        let d = depth(&[1.0, 2.0, 3.0]);
        let counter = GridMap::from_parts(3, 1, vec![1u32, 2, 3], vec![true; 3]);
        assert_eq!(filter_by_support(&d, &counter, 2).unwrap().mask(), &[false, true, true]);
        assert_eq!(filter_by_support(&d, &counter, 0).unwrap(), d);
        let short = GridMap::from_parts(2, 1, vec![1u32, 2], vec![true; 2]);
        assert!(matches!(filter_by_support(&d, &short, 1), Err(FusionError::ShapeMismatch(_))));
    }

    #[test]
    fn presets() {
        assert_eq!(FusionConfig::dense_video().max_normal_angle, 5.0);
        assert_eq!(FusionConfig::dense_video().min_support, 3);
        assert_eq!(FusionConfig::refined().max_normal_angle, 5.0);
        assert_eq!(FusionConfig::refined().min_support, 2);
        assert!(FusionConfig { min_support: 0, ..Default::default() }.validate().is_err());
    }
}
