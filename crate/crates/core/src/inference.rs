//! From per-location predictions to final oriented detections.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{decode, polygon_iou, EncodedBox, Hbb, Point2, Quad, DEGENERATE_AREA};
use crate::losses::LevelPredictions;
use crate::targets::{grid_to_image, FeatureGridSpec, TargetError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error(transparent)]
    Grid(#[from] TargetError),
    #[error("box offsets must be positive, got {0:?}")]
    NonPositiveOffset([f64; 4]),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub quad: Quad,
    /// 1-based class id.
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// Applied to the fused `class × centerness` score.
    pub score_threshold: f64,
    pub nms_iou_threshold: f64,
    pub max_detections: usize,
    pub nms: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou_threshold: 0.5,
            max_detections: 2000,
            nms: true,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<(), InferenceError> {
        for (name, v) in [
            ("score_threshold", self.score_threshold),
            ("nms_iou_threshold", self.nms_iou_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(InferenceError::InvalidConfig(format!(
                    "{name} must be in [0, 1], got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[inline]
pub fn fuse_scores(class_score: f64, centerness_score: f64) -> f64 {
    class_score * centerness_score
}

/// Decodes the oriented box predicted at grid location `(x_s, y_s)`.
///
/// `wh` is clamped into the surrounding box before decoding. Offsets that
/// collapse the box to a diagonal (`w = h = 0` or `w, h` at full extent) carry
/// no orientation and decode to the surrounding box itself.
pub fn decode_location(
    spec: &FeatureGridSpec,
    x_s: usize,
    y_s: usize,
    ltrb: &[f64; 4],
    wh: &[f64; 2],
) -> Result<Quad, InferenceError> {
    if !ltrb.iter().all(|&v| v > 0.0 && v.is_finite()) {
        return Err(InferenceError::NonPositiveOffset(*ltrb));
    }
    let p = grid_to_image(spec, x_s, y_s)?;
    let hbb = Hbb::new(p.x - ltrb[0], p.y - ltrb[1], p.x + ltrb[2], p.y + ltrb[3]);
    let quad = decode(&EncodedBox::clamped(hbb, wh[0], wh[1]));
    if quad.area() < DEGENERATE_AREA {
        return Ok(Quad::from_canonical([
            Point2::new(hbb.xmin, hbb.ymin),
            Point2::new(hbb.xmax, hbb.ymin),
            Point2::new(hbb.xmax, hbb.ymax),
            Point2::new(hbb.xmin, hbb.ymax),
        ]));
    }
    Ok(quad)
}

/// Indices of `dets` sorted by descending score, ties by input index.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy per-class suppression using exact polygon IoU.
///
/// Output is sorted by descending score (ties by input index). A detection is
/// kept when its IoU with every kept detection of the same class is at most
/// `iou_thresh`.
pub fn rotated_nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in score_order(dets) {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && polygon_iou(&k.quad, &d.quad) > iou_thresh);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

/// Score fusion, thresholding, decoding, NMS and truncation for one image.
pub fn run_inference(
    levels: &[LevelPredictions],
    config: &InferenceConfig,
) -> Result<Vec<Detection>, InferenceError> {
    config.validate()?;
    let mut dets = Vec::new();
    for level in levels {
        let spec = &level.spec;
        if level.preds.len() != spec.len() {
            return Err(InferenceError::ShapeMismatch(format!(
                "level {} has {} predictions for a {}x{} grid",
                spec.level,
                level.preds.len(),
                spec.width,
                spec.height
            )));
        }
        for (idx, p) in level.preds.iter().enumerate() {
            let (x_s, y_s) = (idx % spec.width, idx / spec.width);
            let mut quad = None;
            for (k, &cls) in p.class_scores.iter().enumerate() {
                let score = fuse_scores(cls, p.centerness);
                if score < config.score_threshold {
                    continue;
                }
                let q = match quad {
                    Some(q) => q,
                    None => *quad.insert(decode_location(spec, x_s, y_s, &p.ltrb, &p.wh)?),
                };
                dets.push(Detection {
                    quad: q,
                    class_id: k + 1,
                    score,
                });
            }
        }
    }
    let mut out = if config.nms {
        rotated_nms(&dets, config.nms_iou_threshold)
    } else {
        score_order(&dets).into_iter().map(|i| dets[i]).collect()
    };
    out.truncate(config.max_detections);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::canonicalize;
    use crate::losses::Prediction;

    fn coords(q: &Quad) -> Vec<(f64, f64)> {
        q.vertices().iter().map(|p| (p.x, p.y)).collect()
    }

    fn square(x: f64, y: f64, s: f64) -> Quad {
        canonicalize([
            Point2::new(x, y),
            Point2::new(x + s, y),
            Point2::new(x + s, y + s),
            Point2::new(x, y + s),
        ])
        .unwrap()
    }

    fn det(q: Quad, class_id: usize, score: f64) -> Detection {
        Detection {
            quad: q,
            class_id,
            score,
        }
    }

    #[test]
    fn fuse_examples() {
        assert_eq!(fuse_scores(1.0, 1.0), 1.0);
        assert!((fuse_scores(0.8, 0.5) - 0.4).abs() < 1e-15);
        assert_eq!(fuse_scores(0.7, 0.0), 0.0);
    }

    #[test]
    fn decode_location_examples() {
        let spec = FeatureGridSpec::new(4, 4, 1, 0).unwrap();
        let q = decode_location(&spec, 2, 1, &[2., 1., 2., 1.], &[0., 0.]).unwrap();
        assert_eq!(coords(&q), vec![(0., 0.), (4., 0.), (4., 2.), (0., 2.)]);
        let q = decode_location(&spec, 2, 1, &[2., 1., 2., 1.], &[0., 2.]).unwrap();
        assert_eq!(coords(&q), vec![(0., 0.), (4., 0.), (4., 2.), (0., 2.)]);

        let q = decode_location(&spec, 1, 1, &[1., 1., 1., 1.], &[1., 1.]).unwrap();
        assert_eq!(coords(&q), vec![(0., 1.), (1., 0.), (2., 1.), (1., 2.)]);

        let q = decode_location(&spec, 1, 1, &[1., 1., 1., 1.], &[7., -3.]).unwrap();
        assert_eq!(coords(&q), vec![(0., 2.), (0., 0.), (2., 0.), (2., 2.)]);

        assert!(decode_location(&spec, 1, 1, &[0., 1., 1., 1.], &[0., 0.]).is_err());
        assert!(decode_location(&spec, 9, 1, &[1., 1., 1., 1.], &[0., 0.]).is_err());
    }

    #[test]
    fn nms_examples() {
        let q = square(0., 0., 10.);
        assert_eq!(rotated_nms(&[det(q, 1, 0.3)], 0.5), vec![det(q, 1, 0.3)]);
        let kept = rotated_nms(&[det(q, 1, 0.8), det(q, 1, 0.9)], 0.5);
        assert_eq!(kept, vec![det(q, 1, 0.9)]);
        let kept = rotated_nms(&[det(q, 1, 0.8), det(q, 2, 0.9)], 0.5);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn nms_keeps_light_overlap() {
        let a = square(0., 0., 10.);
        let b = square(8., 0., 10.);
        assert_eq!(rotated_nms(&[det(a, 1, 0.9), det(b, 1, 0.8)], 0.5).len(), 2);
    }

    #[test]
    fn nms_ties_break_by_index() {
        let a = square(0., 0., 10.);
        let b = square(1., 0., 10.);
        let kept = rotated_nms(&[det(b, 1, 0.5), det(a, 1, 0.5)], 0.5);
        assert_eq!(kept, vec![det(b, 1, 0.5)]);
    }

    fn pred(cls: Vec<f64>, ctr: f64, ltrb: [f64; 4], wh: [f64; 2]) -> Prediction {
        Prediction {
            class_scores: cls,
            centerness: ctr,
            ltrb,
            wh,
        }
    }

    #[test]
    fn empty_maps_give_nothing() {
        assert!(run_inference(&[], &InferenceConfig::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn single_location_above_threshold() {
        let spec = FeatureGridSpec::new(2, 1, 8, 0).unwrap();
        let low = pred(vec![0.1], 0.2, [1., 1., 1., 1.], [0., 0.]);
        let high = pred(vec![0.9], 0.8, [4., 3., 4., 3.], [2., 1.]);
        let levels = [LevelPredictions {
            spec,
            preds: vec![low, high],
        }];
        let dets = run_inference(&levels, &InferenceConfig::default()).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].class_id, 1);
        assert!((dets[0].score - 0.72).abs() < 1e-12);
        let expected = decode_location(&spec, 1, 0, &[4., 3., 4., 3.], &[2., 1.]).unwrap();
        assert_eq!(dets[0].quad, expected);
    }

    #[test]
    fn shape_mismatch() {
        let spec = FeatureGridSpec::new(2, 2, 8, 0).unwrap();
        let levels = [LevelPredictions {
            spec,
            preds: vec![],
        }];
        assert!(matches!(
            run_inference(&levels, &InferenceConfig::default()),
            Err(InferenceError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn max_detections_truncates() {
        let spec = FeatureGridSpec::new(3, 1, 32, 0).unwrap();
        let preds = (0..3)
            .map(|i| pred(vec![0.5 + 0.1 * i as f64], 1.0, [4., 4., 4., 4.], [0., 0.]))
            .collect();
        let cfg = InferenceConfig {
            max_detections: 2,
            ..Default::default()
        };
        let dets = run_inference(&[LevelPredictions { spec, preds }], &cfg).unwrap();
        assert_eq!(dets.len(), 2);
        assert!(dets[0].score > dets[1].score);
    }
}
