//! Point cloud accuracy, completeness and F1 against a ground-truth cloud,
//! and confidence-map scores against label maps.

use std::collections::HashMap;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::{balanced_l2_loss, bce_loss, roc_auc, ConfidenceError, ConfidenceMap};
use crate::consistency::LabelMap;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("{0} point cloud is empty")]
    EmptyCloud(&'static str),
    #[error("tolerance must be positive and finite, got {0}")]
    BadTolerance(f64),
    #[error("{0} outside [0, 1]")]
    OutOfRange(f64),
}

/// Uniform grid over a point set with cells as wide as the query radius, so
/// any point within the radius lies in one of the 27 cells around the query.
pub struct GridIndex<'a> {
    points: &'a [Vector3<f64>],
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl<'a> GridIndex<'a> {
    pub fn new(points: &'a [Vector3<f64>], radius: f64) -> Result<Self, EvalError> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(EvalError::BadTolerance(radius));
        }
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, radius)).or_default().push(i);
        }
        Ok(Self { points, cell: radius, cells })
    }

    fn key(p: &Vector3<f64>, cell: f64) -> [i64; 3] {
        [(p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64]
    }

    /// Distance to the nearest indexed point if it is within the radius.
    pub fn nearest_within(&self, q: &Vector3<f64>) -> Option<f64> {
        let k = Self::key(q, self.cell);
        let mut best = f64::INFINITY;
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(ids) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        for &i in ids {
                            best = best.min((self.points[i] - q).norm());
                        }
                    }
                }
            }
        }
        (best <= self.cell).then_some(best)
    }
}

fn fraction_within(queries: &[Vector3<f64>], targets: &[Vector3<f64>], tol: f64) -> Result<f64, EvalError> {
    let index = GridIndex::new(targets, tol)?;
    let hits = queries.par_iter().filter(|q| index.nearest_within(q).is_some()).count();
    Ok(hits as f64 / queries.len() as f64)
}

/// Fraction of reconstructed points with a ground-truth point within `tol`.
pub fn accuracy(recon: &[Vector3<f64>], gt: &[Vector3<f64>], tol: f64) -> Result<f64, EvalError> {
    check_clouds(recon, gt)?;
    fraction_within(recon, gt, tol)
}

/// Fraction of ground-truth points with a reconstructed point within `tol`.
pub fn completeness(recon: &[Vector3<f64>], gt: &[Vector3<f64>], tol: f64) -> Result<f64, EvalError> {
    check_clouds(recon, gt)?;
    fraction_within(gt, recon, tol)
}

fn check_clouds(recon: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<(), EvalError> {
    if recon.is_empty() {
        return Err(EvalError::EmptyCloud("reconstructed"));
    }
    if gt.is_empty() {
        return Err(EvalError::EmptyCloud("ground-truth"));
    }
    Ok(())
}

/// Harmonic mean of accuracy and completeness; 0 when both are 0.
pub fn f1(accuracy: f64, completeness: f64) -> Result<f64, EvalError> {
    for v in [accuracy, completeness] {
        if !(0.0..=1.0).contains(&v) {
            return Err(EvalError::OutOfRange(v));
        }
    }
    let sum = accuracy + completeness;
    Ok(if sum == 0.0 { 0.0 } else { 2.0 * accuracy * completeness / sum })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tolerance: f64,
    pub accuracy: f64,
    pub completeness: f64,
    pub f1: f64,
    pub recon_points: usize,
    pub gt_points: usize,
}

/// One report per tolerance.
pub fn evaluate(recon: &[Vector3<f64>], gt: &[Vector3<f64>], tolerances: &[f64]) -> Result<Vec<EvalReport>, EvalError> {
    tolerances
        .iter()
        .map(|&tol| {
            let a = accuracy(recon, gt, tol)?;
            let c = completeness(recon, gt, tol)?;
            Ok(EvalReport {
                tolerance: tol,
                accuracy: a,
                completeness: c,
                f1: f1(a, c)?,
                recon_points: recon.len(),
                gt_points: gt.len(),
            })
        })
        .collect()
}

/// Plain-text table with one aligned row per report.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut out = format!(
        "{:>10}  {:>8}  {:>12}  {:>8}  {:>8}  {:>8}\n",
        "tolerance", "accuracy", "completeness", "f1", "recon", "gt"
    );
    for r in reports {
        out += &format!(
            "{:>10.4}  {:>8.4}  {:>12.4}  {:>8.4}  {:>8}  {:>8}\n",
            r.tolerance, r.accuracy, r.completeness, r.f1, r.recon_points, r.gt_points
        );
    }
    out
}

/// Scores of one confidence map against its label map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceReport {
    pub view: String,
    pub auc: Option<f64>,
    pub balanced_l2: f64,
    pub bce: f64,
    pub inliers: usize,
    pub outliers: usize,
}

pub fn evaluate_confidence(view: &str, c: &ConfidenceMap, labels: &LabelMap) -> Result<ConfidenceReport, ConfidenceError> {
    let auc = match roc_auc(c, labels) {
        Ok(a) => Some(a),
        Err(ConfidenceError::SingleClass) => None,
        Err(e) => return Err(e),
    };
    let (inliers, outliers) = labels.class_counts();
    Ok(ConfidenceReport {
        view: view.to_string(),
        auc,
        balanced_l2: balanced_l2_loss(c, labels)?,
        bce: bce_loss(c, labels, 1.0)?,
        inliers,
        outliers,
    })
}
