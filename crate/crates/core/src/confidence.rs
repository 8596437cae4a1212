//! Confidence maps: training losses, ROC AUC, the count-based fallback and
//! the training-data export.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::consistency::{CounterMap, Label, LabelMap};
use crate::geometry::normal_to_polar;
use crate::image::{RgbImage, View};
use crate::io::{scalar_from_pfm, scalar_to_pfm, IoError, Manifest, ManifestRecord, Pfm};
use crate::map::{GridMap, NormalMap};

/// Per-pixel probability that the depth estimate is an inlier.
pub type ConfidenceMap = GridMap<f64>;

/// Predictions are clamped to `[BCE_EPS, 1 - BCE_EPS]` before logarithms.
pub const BCE_EPS: f64 = 1e-7;

/// Negative-class weight of the weighted BCE baseline.
pub const WEIGHTED_BCE_NEGATIVE: f64 = 3.0;

#[derive(Debug, Error)]
pub enum ConfidenceError {
    #[error("shape mismatch: confidence {0}x{1}, labels {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("AUC needs both inlier and outlier pixels")]
    SingleClass,
    #[error("export failed: {0}")]
    Io(#[from] IoError),
}

fn check_shape(c: &ConfidenceMap, labels: &LabelMap) -> Result<(), ConfidenceError> {
    if c.width() != labels.width() || c.height() != labels.height() {
        return Err(ConfidenceError::ShapeMismatch(c.width(), c.height(), labels.width(), labels.height()));
    }
    Ok(())
}

/// `(confidence, is_inlier)` for every pixel with a defined label and a valid
/// confidence.
fn labeled_pairs<'a>(c: &'a ConfidenceMap, labels: &'a LabelMap) -> impl Iterator<Item = (f64, bool)> + 'a {
    c.values()
        .iter()
        .zip(c.mask())
        .zip(labels.labels())
        .filter_map(|((&v, &ok), &l)| match (ok, l) {
            (true, Label::Inlier) => Some((v, true)),
            (true, Label::Outlier) => Some((v, false)),
            _ => None,
        })
}

/// Class-balanced L2 loss
///
/// ```text
/// L = ||c+ - 1||_2 / |c+|  +  ||c-||_2 / |c-|
/// ```
///
/// where `c+` / `c-` are the predictions at inlier / outlier pixels. A class
/// without pixels contributes 0.
pub fn balanced_l2_loss(c: &ConfidenceMap, labels: &LabelMap) -> Result<f64, ConfidenceError> {
    check_shape(c, labels)?;
    let (mut sq_pos, mut n_pos, mut sq_neg, mut n_neg) = (0.0, 0usize, 0.0, 0usize);
    for (v, inlier) in labeled_pairs(c, labels) {
        if inlier {
            sq_pos += (v - 1.0) * (v - 1.0);
            n_pos += 1;
        } else {
            sq_neg += v * v;
            n_neg += 1;
        }
    }
    let term = |sq: f64, n: usize| if n == 0 { 0.0 } else { sq.sqrt() / n as f64 };
    Ok(term(sq_pos, n_pos) + term(sq_neg, n_neg))
}

/// Mean binary cross entropy with the outlier term scaled by
/// `negative_weight`; 0 when no pixel is labeled.
pub fn bce_loss(c: &ConfidenceMap, labels: &LabelMap, negative_weight: f64) -> Result<f64, ConfidenceError> {
    check_shape(c, labels)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (v, inlier) in labeled_pairs(c, labels) {
        let p = v.clamp(BCE_EPS, 1.0 - BCE_EPS);
        sum -= if inlier { p.ln() } else { negative_weight * (1.0 - p).ln() };
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Area under the ROC curve with inliers as the positive class.
pub fn roc_auc(c: &ConfidenceMap, labels: &LabelMap) -> Result<f64, ConfidenceError> {
    check_shape(c, labels)?;
    let (pos, neg): (Vec<(f64, bool)>, Vec<(f64, bool)>) = labeled_pairs(c, labels).partition(|p| p.1);
    let pos: Vec<f64> = pos.into_iter().map(|p| p.0).collect();
    let neg: Vec<f64> = neg.into_iter().map(|p| p.0).collect();
    auc_from_scores(&pos, &neg).ok_or(ConfidenceError::SingleClass)
}

/// Mann-Whitney statistic `P(pos > neg) + P(pos == neg) / 2`, computed from
/// average ranks in O(n log n). `None` if either class is empty.
pub fn auc_from_scores(pos: &[f64], neg: &[f64]) -> Option<f64> {
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&v| (v, true))
        .chain(neg.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // sum of 1-based average ranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * all[i..=j].iter().filter(|p| p.1).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Fallback confidence `count / n_sources`; 0 and invalid where the counter
/// is invalid.
pub fn heuristic_confidence(counter: &CounterMap, n_sources: usize) -> ConfidenceMap {
    let n = n_sources.max(1) as f64;
    let values = counter
        .values()
        .iter()
        .zip(counter.mask())
        .map(|(&k, &ok)| if ok { (k as f64 / n).min(1.0) } else { 0.0 })
        .collect();
    GridMap::from_parts(counter.width(), counter.height(), values, counter.mask().to_vec())
}

/// Reads a confidence PFM. Values outside `[0, 1]` or non-finite are
/// invalid.
pub fn read_confidence(path: &Path) -> Result<ConfidenceMap, IoError> {
    let mut map = scalar_from_pfm(&Pfm::read(path)?, path)?;
    for i in 0..map.len() {
        let v = map.values()[i];
        if !(0.0..=1.0).contains(&v) {
            map.mask_mut()[i] = false;
        }
    }
    Ok(map)
}

pub fn write_confidence(path: &Path, c: &ConfidenceMap) -> Result<(), IoError> {
    scalar_to_pfm(c, 0.0).write(path)
}

/// Polar encoding of a normal map as a 3-channel PFM `(theta, phi, 0)`.
/// Invalid pixels are all zero.
pub fn polar_normal_pfm(normals: &NormalMap) -> Pfm {
    let mut data = Vec::with_capacity(normals.len() * 3);
    for (n, &ok) in normals.values().iter().zip(normals.mask()) {
        match normal_to_polar(&n.normalize()) {
            Ok(p) if ok => data.extend([p.theta as f32, p.phi as f32, 0.0]),
            _ => data.extend([0.0; 3]),
        }
    }
    Pfm::new(normals.width(), normals.height(), 3, data)
}

/// Raw counts as a 1-channel PFM; invalid pixels hold 0.
pub fn counter_pfm(counter: &CounterMap) -> Pfm {
    scalar_to_pfm(&counter.map(|&k| k as f64), 0.0)
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes the network inputs and the label map of one view under `out_dir`
/// and records them in `out_dir/manifest.json`:
///
/// ```text
/// out_dir/images/<name>.png   RGB, 8 bit
/// out_dir/normal/<name>.pfm   (theta, phi, 0)
/// out_dir/counter/<name>.pfm  raw counts
/// out_dir/label/<name>.png    0 outlier, 255 inlier, 128 undefined
/// ```
pub fn export_training_sample(
    view: &View,
    normals: &NormalMap,
    counter: &CounterMap,
    labels: &LabelMap,
    out_dir: &Path,
) -> Result<ManifestRecord, ConfidenceError> {
    let (w, h) = (view.width(), view.height());
    let shapes = [
        (normals.width(), normals.height()),
        (counter.width(), counter.height()),
        (labels.width(), labels.height()),
    ];
    if let Some(&(sw, sh)) = shapes.iter().find(|s| **s != (w, h)) {
        return Err(ConfidenceError::ShapeMismatch(w, h, sw, sh));
    }
    let record = ManifestRecord {
        image: format!("images/{}.png", view.name),
        normal: format!("normal/{}.pfm", view.name),
        counter: format!("counter/{}.pfm", view.name),
        label: format!("label/{}.png", view.name),
        width: w,
        height: h,
    };
    view.image.save_png(&out_dir.join(&record.image))?;
    polar_normal_pfm(normals).write(&out_dir.join(&record.normal))?;
    counter_pfm(counter).write(&out_dir.join(&record.counter))?;
    labels.write_png(&out_dir.join(&record.label))?;

    let manifest_path = out_dir.join(MANIFEST_FILE);
    let mut manifest = if manifest_path.exists() {
        Manifest::read(&manifest_path)?
    } else {
        Manifest::default()
    };
    manifest.upsert(record.clone());
    manifest.write(&manifest_path)?;
    Ok(record)
}

/// Arrays of one exported sample, as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub image: RgbImage,
    pub normal: Pfm,
    pub counter: Pfm,
    pub labels: LabelMap,
}

pub fn load_training_sample(dir: &Path, record: &ManifestRecord) -> Result<TrainingSample, IoError> {
    let path = |p: &str| -> PathBuf { dir.join(p) };
    Ok(TrainingSample {
        image: RgbImage::load(&path(&record.image))?,
        normal: Pfm::read(&path(&record.normal))?,
        counter: Pfm::read(&path(&record.counter))?,
        labels: LabelMap::read_png(&path(&record.label))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conf(values: &[f64]) -> ConfidenceMap {
        GridMap::from_parts(values.len(), 1, values.to_vec(), vec![true; values.len()])
    }

    fn labels(l: &[u8]) -> LabelMap {
        LabelMap::new(
            l.len(),
            1,
            l.iter().map(|&b| if b == 1 { Label::Inlier } else { Label::Outlier }).collect(),
        )
    }

    #[test]
    fn l2_examples() {
        assert_eq!(balanced_l2_loss(&conf(&[1.0, 0.0]), &labels(&[1, 0])).unwrap(), 0.0);
        let l = balanced_l2_loss(&conf(&[1.0, 1.0, 1.0, 1.0]), &labels(&[1, 1, 0, 0])).unwrap();
        assert!((l - 0.5 * 2f64.sqrt()).abs() < 1e-12);
        let l = balanced_l2_loss(&conf(&[0.5, 0.5]), &labels(&[1, 0])).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn undefined_pixels_are_ignored() {
        let mut l = labels(&[1, 0, 0]);
        l = LabelMap::new(3, 1, vec![l.labels()[0], l.labels()[1], Label::Undefined]);
        let a = balanced_l2_loss(&conf(&[0.5, 0.5, 0.9]), &l).unwrap();
        assert!((a - 1.0).abs() < 1e-12);
        assert!(matches!(
            balanced_l2_loss(&conf(&[0.5]), &l),
            Err(ConfidenceError::ShapeMismatch(..))
        ));
    }

    #[test]
    fn bce_examples() {
        let perfect = bce_loss(&conf(&[1.0, 0.0]), &labels(&[1, 0]), 1.0).unwrap();
        assert!(perfect <= 2e-7);
        let half = bce_loss(&conf(&[0.5; 4]), &labels(&[1, 0, 1, 0]), 1.0).unwrap();
        assert!((half - 2f64.ln()).abs() < 1e-12);
        let weighted = bce_loss(&conf(&[0.5]), &labels(&[0]), WEIGHTED_BCE_NEGATIVE).unwrap();
        assert!((weighted - 3.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn auc_examples() {
        let l = labels(&[1, 1, 0, 0]);
        assert_eq!(roc_auc(&conf(&[0.9, 0.8, 0.2, 0.1]), &l).unwrap(), 1.0);
        assert_eq!(roc_auc(&conf(&[0.4; 4]), &l).unwrap(), 0.5);
        assert_eq!(roc_auc(&conf(&[0.1, 0.2, 0.8, 0.9]), &l).unwrap(), 0.0);
        assert!(matches!(
            roc_auc(&conf(&[0.1, 0.2]), &labels(&[1, 1])),
            Err(ConfidenceError::SingleClass)
        ));
        // one tie between classes counts half
        let a = auc_from_scores(&[0.5, 0.9], &[0.5, 0.1]).unwrap();
        assert!((a - 3.5 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn heuristic() {
        let mut counter = CounterMap::filled(4, 1, 0);
        counter.values_mut().copy_from_slice(&[5, 0, 3, 2]);
        counter.invalidate(3, 0);
        let c = heuristic_confidence(&counter, 5);
        assert_eq!(c.values(), &[1.0, 0.0, 0.6, 0.0]);
        assert!(!c.is_valid(3, 0));
    }

    #[test]
    fn confidence_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pfm");
        let c = conf(&[0.25, 0.5, 1.0]);
        write_confidence(&path, &c).unwrap();
        assert_eq!(read_confidence(&path).unwrap(), c);
    }

    #[test]
    fn export_roundtrip() {
        use crate::synthetic::SyntheticScene;
        let scene = SyntheticScene::slanted_two_view(24, 16, 4);
        let views = scene.render_views();
        let normals = scene.normal_map(0);
        let mut counter = CounterMap::filled(24, 16, 1);
        counter.set(3, 2, 4);
        counter.invalidate(0, 0);
        let mut raw = vec![Label::Inlier; 24 * 16];
        raw[5] = Label::Outlier;
        raw[6] = Label::Undefined;
        let labels = LabelMap::new(24, 16, raw);

        let dir = tempfile::tempdir().unwrap();
        let rec = export_training_sample(&views[0], &normals, &counter, &labels, dir.path()).unwrap();
        export_training_sample(&views[0], &normals, &counter, &labels, dir.path()).unwrap();
        let manifest = Manifest::read(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(manifest.records, vec![rec.clone()]);

        let sample = load_training_sample(dir.path(), &rec).unwrap();
        assert_eq!(sample.labels, labels);
        assert_eq!(sample.counter.pixel(3, 2), &[4.0]);
        assert_eq!(sample.counter.pixel(0, 0), &[0.0]);
        assert_eq!(sample.normal.channels, 3);
        let n = normals.value(7, 9);
        let p = normal_to_polar(n).unwrap();
        let got = sample.normal.pixel(7, 9);
        assert!((got[0] as f64 - p.theta).abs() < 1e-6 && (got[1] as f64 - p.phi).abs() < 1e-6);
        assert_eq!(got[2], 0.0);
        assert_eq!(sample.image.rgb8(4, 4), views[0].image.rgb8(4, 4));
    }
}
