//! VOC-style average precision with rotated-IoU matching.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::polygon_iou;
use crate::inference::Detection;
use crate::targets::GroundTruthObject;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("unknown class id {id} (table has {len} classes)")]
    UnknownClass { id: usize, len: usize },
    #[error("unknown class name {0:?}")]
    UnknownClassName(String),
    #[error("invalid class table: {0}")]
    InvalidTable(String),
    #[error("iou threshold must be in [0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("unknown AP mode {0:?} (expected 11point/07 or allpoint/all)")]
    UnknownMode(String),
}

/// The fifteen DOTA v1.0 categories, in their conventional order.
pub const DOTA_CLASSES: [&str; 15] = [
    "plane",
    "baseball-diamond",
    "bridge",
    "ground-track-field",
    "small-vehicle",
    "large-vehicle",
    "ship",
    "tennis-court",
    "basketball-court",
    "storage-tank",
    "soccer-ball-field",
    "roundabout",
    "harbor",
    "swimming-pool",
    "helicopter",
];

/// Class names indexed by 1-based id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTable {
    names: Vec<String>,
}

impl ClassTable {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self, EvalError> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(EvalError::InvalidTable("no classes".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.chars().any(char::is_whitespace) {
                return Err(EvalError::InvalidTable(format!("bad class name {n:?}")));
            }
            if names[..i].contains(n) {
                return Err(EvalError::InvalidTable(format!(
                    "duplicate class name {n:?}"
                )));
            }
        }
        Ok(Self { names })
    }

    pub fn dota() -> Self {
        Self::new(DOTA_CLASSES).expect("built-in table is valid")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id_of(&self, name: &str) -> Result<usize, EvalError> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| i + 1)
            .ok_or_else(|| EvalError::UnknownClassName(name.to_string()))
    }

    pub fn name_of(&self, id: usize) -> Result<&str, EvalError> {
        if id == 0 || id > self.names.len() {
            return Err(EvalError::UnknownClass {
                id,
                len: self.names.len(),
            });
        }
        Ok(&self.names[id - 1])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Ground truth for a set of images, keyed by image id.
#[derive(Debug, Clone, PartialEq)]
pub struct GtIndex {
    pub classes: ClassTable,
    pub images: BTreeMap<String, Vec<GroundTruthObject>>,
}

impl GtIndex {
    pub fn new(classes: ClassTable) -> Self {
        Self {
            classes,
            images: BTreeMap::new(),
        }
    }

    /// Non-difficult object count for `class_id`.
    pub fn num_gt(&self, class_id: usize) -> usize {
        self.images
            .values()
            .flatten()
            .filter(|o| o.class_id == class_id && !o.difficult)
            .count()
    }

    fn validate(&self) -> Result<(), EvalError> {
        for o in self.images.values().flatten() {
            self.classes.name_of(o.class_id)?;
        }
        Ok(())
    }
}

/// Detections keyed by image id.
pub type DetectionIndex = BTreeMap<String, Vec<Detection>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MatchFlag {
    TruePositive,
    FalsePositive,
    /// Best candidate was a difficult object; neither TP nor FP.
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedDetection {
    pub image: String,
    /// Position in the image's detection list.
    pub index: usize,
    pub class_id: usize,
    pub score: f64,
    pub flag: MatchFlag,
    /// IoU with the chosen object, 0 when nothing was available.
    pub iou: f64,
}

/// Detection indices of one image and class, by descending score then index.
fn score_sorted(dets: &[Detection], class_id: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].class_id == class_id)
        .collect();
    idx.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    idx
}

/// Greedy matching within one image and class.
fn match_image(
    image: &str,
    dets: &[Detection],
    gt: &[GroundTruthObject],
    class_id: usize,
    iou_thresh: f64,
) -> Vec<MatchedDetection> {
    let objects: Vec<&GroundTruthObject> = gt.iter().filter(|o| o.class_id == class_id).collect();
    let mut taken = vec![false; objects.len()];
    let mut out = Vec::new();
    for i in score_sorted(dets, class_id) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, o) in objects.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let iou = polygon_iou(&d.quad, &o.quad);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        let (flag, iou) = match best {
            Some((j, iou)) if iou >= iou_thresh => {
                if objects[j].difficult {
                    (MatchFlag::Ignored, iou)
                } else {
                    taken[j] = true;
                    (MatchFlag::TruePositive, iou)
                }
            }
            Some((_, iou)) => (MatchFlag::FalsePositive, iou),
            None => (MatchFlag::FalsePositive, 0.0),
        };
        out.push(MatchedDetection {
            image: image.to_string(),
            index: i,
            class_id,
            score: d.score,
            flag,
            iou,
        });
    }
    out
}

/// Flags every detection as TP, FP or ignored.
///
/// Within each image and class, detections are visited by descending score
/// and take the unmatched object of their class with the highest IoU; it is a
/// TP when that IoU reaches `iou_thresh`. Difficult objects are never
/// consumed, and a detection whose best candidate is difficult is ignored.
/// The result is grouped by class id, each group sorted by descending score
/// with ties broken by image id and then detection index.
pub fn match_detections(
    dets: &DetectionIndex,
    gt: &GtIndex,
    iou_thresh: f64,
) -> Result<Vec<MatchedDetection>, EvalError> {
    if !(0.0..=1.0).contains(&iou_thresh) {
        return Err(EvalError::InvalidThreshold(iou_thresh));
    }
    gt.validate()?;
    for d in dets.values().flatten() {
        gt.classes.name_of(d.class_id)?;
    }
    let jobs: Vec<(usize, &String, &Vec<Detection>)> = (1..=gt.classes.len())
        .flat_map(|c| dets.iter().map(move |(img, ds)| (c, img, ds)))
        .collect();
    let per_image: Vec<Vec<MatchedDetection>> = jobs
        .par_iter()
        .map(|&(c, img, ds)| {
            let objects = gt.images.get(img).map(Vec::as_slice).unwrap_or(&[]);
            match_image(img, ds, objects, c, iou_thresh)
        })
        .collect();
    let mut all: Vec<MatchedDetection> = per_image.into_iter().flatten().collect();
    all.sort_by(|a, b| {
        a.class_id
            .cmp(&b.class_id)
            .then(b.score.total_cmp(&a.score))
            .then_with(|| a.image.cmp(&b.image))
            .then(a.index.cmp(&b.index))
    });
    Ok(all)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrCurve {
    /// `(recall, precision)` after each non-ignored detection.
    pub points: Vec<(f64, f64)>,
    pub num_tp: usize,
    pub num_fp: usize,
    pub num_gt: usize,
}

/// Cumulative precision/recall sweep over flags already in score order.
///
/// Ignored detections are skipped. With `n_gt = 0` every recall is 0.
pub fn pr_curve(flags: &[MatchFlag], n_gt: usize) -> PrCurve {
    let mut curve = PrCurve {
        num_gt: n_gt,
        ..Default::default()
    };
    for f in flags {
        match f {
            MatchFlag::TruePositive => curve.num_tp += 1,
            MatchFlag::FalsePositive => curve.num_fp += 1,
            MatchFlag::Ignored => continue,
        }
        let recall = if n_gt == 0 {
            0.0
        } else {
            curve.num_tp as f64 / n_gt as f64
        };
        let precision = curve.num_tp as f64 / (curve.num_tp + curve.num_fp) as f64;
        curve.points.push((recall, precision));
    }
    curve
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ApMode {
    /// Mean of the best precision at recall ≥ 0, 0.1, …, 1.
    #[default]
    #[serde(rename = "11point")]
    ElevenPoint,
    /// Area under the monotone precision envelope.
    #[serde(rename = "allpoint")]
    AllPoint,
}

impl fmt::Display for ApMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ApMode::ElevenPoint => "11point",
            ApMode::AllPoint => "allpoint",
        })
    }
}

impl FromStr for ApMode {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "11point" | "11-point" | "07" => Ok(ApMode::ElevenPoint),
            "allpoint" | "all-point" | "all" => Ok(ApMode::AllPoint),
            _ => Err(EvalError::UnknownMode(s.to_string())),
        }
    }
}

pub fn average_precision(curve: &PrCurve, mode: ApMode) -> f64 {
    if curve.num_gt == 0 || curve.points.is_empty() {
        return 0.0;
    }
    match mode {
        ApMode::ElevenPoint => {
            let sum: f64 = (0..=10)
                .map(|i| {
                    let t = i as f64 / 10.0;
                    curve
                        .points
                        .iter()
                        .filter(|(r, _)| *r >= t)
                        .map(|&(_, p)| p)
                        .fold(0.0, f64::max)
                })
                .sum();
            sum / 11.0
        }
        ApMode::AllPoint => {
            let mut recall = vec![0.0];
            let mut precision = vec![0.0];
            for &(r, p) in &curve.points {
                recall.push(r);
                precision.push(p);
            }
            recall.push(1.0);
            precision.push(0.0);
            for i in (0..precision.len() - 1).rev() {
                precision[i] = precision[i].max(precision[i + 1]);
            }
            (1..recall.len())
                .filter(|&i| recall[i] != recall[i - 1])
                .map(|i| (recall[i] - recall[i - 1]) * precision[i])
                .sum()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub mode: ApMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            mode: ApMode::ElevenPoint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub name: String,
    pub ap: f64,
    pub num_gt: usize,
    pub num_det: usize,
    pub num_tp: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// Every class with ground truth or detections, by class id.
    pub per_class: Vec<ClassAp>,
    /// Mean AP over the classes that have ground truth; 0 when none do.
    pub map: f64,
    pub iou_threshold: f64,
    pub mode: ApMode,
}

pub fn evaluate(
    dets: &DetectionIndex,
    gt: &GtIndex,
    config: &EvalConfig,
) -> Result<ApReport, EvalError> {
    let matched = match_detections(dets, gt, config.iou_threshold)?;
    let mut per_class = Vec::new();
    for class_id in 1..=gt.classes.len() {
        let flags: Vec<MatchFlag> = matched
            .iter()
            .filter(|m| m.class_id == class_id)
            .map(|m| m.flag)
            .collect();
        let num_gt = gt.num_gt(class_id);
        if num_gt == 0 && flags.is_empty() {
            continue;
        }
        let curve = pr_curve(&flags, num_gt);
        per_class.push(ClassAp {
            class_id,
            name: gt.classes.name_of(class_id)?.to_string(),
            ap: average_precision(&curve, config.mode),
            num_gt,
            num_det: flags.len(),
            num_tp: curve.num_tp,
        });
    }
    let with_gt: Vec<f64> = per_class
        .iter()
        .filter(|c| c.num_gt > 0)
        .map(|c| c.ap)
        .collect();
    let map = if with_gt.is_empty() {
        0.0
    } else {
        with_gt.iter().sum::<f64>() / with_gt.len() as f64
    };
    Ok(ApReport {
        per_class,
        map,
        iou_threshold: config.iou_threshold,
        mode: config.mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{canonicalize, Point2, Quad};
    use MatchFlag::*;

    fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Quad {
        canonicalize([
            Point2::new(x0, y0),
            Point2::new(x1, y0),
            Point2::new(x1, y1),
            Point2::new(x0, y1),
        ])
        .unwrap()
    }

    fn table() -> ClassTable {
        ClassTable::new(["a", "b"]).unwrap()
    }

    fn gt_index(objs: &[(&str, Quad, usize, bool)]) -> GtIndex {
        let mut gt = GtIndex::new(table());
        for (img, q, c, d) in objs {
            gt.images
                .entry(img.to_string())
                .or_default()
                .push(GroundTruthObject::new(*q, *c, *d).unwrap());
        }
        gt
    }

    fn dets(list: &[(&str, Quad, usize, f64)]) -> DetectionIndex {
        let mut out = DetectionIndex::new();
        for (img, q, c, s) in list {
            out.entry(img.to_string()).or_default().push(Detection {
                quad: *q,
                class_id: *c,
                score: *s,
            });
        }
        out
    }

    fn flags(m: &[MatchedDetection]) -> Vec<MatchFlag> {
        m.iter().map(|d| d.flag).collect()
    }

    #[test]
    fn single_exact_match() {
        let q = rect(0., 0., 10., 10.);
        let m = match_detections(
            &dets(&[("i", q, 1, 0.9)]),
            &gt_index(&[("i", q, 1, false)]),
            0.5,
        )
        .unwrap();
        assert_eq!(flags(&m), vec![TruePositive]);
        assert_eq!(m[0].iou, 1.0);
    }

    #[test]
    fn duplicate_is_false_positive() {
        let q = rect(0., 0., 10., 10.);
        let m = match_detections(
            &dets(&[("i", q, 1, 0.8), ("i", q, 1, 0.9)]),
            &gt_index(&[("i", q, 1, false)]),
            0.5,
        )
        .unwrap();
        assert_eq!(flags(&m), vec![TruePositive, FalsePositive]);
        assert_eq!(m[0].score, 0.9);
    }

    #[test]
    fn low_overlap_is_false_positive() {
        let m = match_detections(
            &dets(&[("i", rect(0., 0., 4., 10.), 1, 0.9)]),
            &gt_index(&[("i", rect(0., 0., 10., 10.), 1, false)]),
            0.5,
        )
        .unwrap();
        assert_eq!(flags(&m), vec![FalsePositive]);
        assert!((m[0].iou - 0.4).abs() < 1e-12);
    }

    #[test]
    fn class_and_image_must_agree() {
        let q = rect(0., 0., 10., 10.);
        let gt = gt_index(&[("i", q, 1, false)]);
        let m = match_detections(&dets(&[("i", q, 2, 0.9), ("j", q, 1, 0.8)]), &gt, 0.5).unwrap();
        assert_eq!(flags(&m), vec![FalsePositive, FalsePositive]);
    }

    #[test]
    fn difficult_objects_are_ignored() {
        let q = rect(0., 0., 10., 10.);
        let gt = gt_index(&[("i", q, 1, true)]);
        let m = match_detections(&dets(&[("i", q, 1, 0.9), ("i", q, 1, 0.8)]), &gt, 0.5).unwrap();
        assert_eq!(flags(&m), vec![Ignored, Ignored]);
        assert_eq!(gt.num_gt(1), 0);
        let r = evaluate(&dets(&[("i", q, 1, 0.9)]), &gt, &EvalConfig::default()).unwrap();
        assert_eq!(r.per_class.len(), 1);
        assert_eq!(r.per_class[0].num_gt, 0);
        assert_eq!(r.map, 0.0);
    }

    #[test]
    fn greedy_takes_highest_iou() {
        let a = rect(0., 0., 10., 10.);
        let b = rect(3., 0., 13., 10.);
        let gt = gt_index(&[("i", a, 1, false), ("i", b, 1, false)]);
        let m =
            match_detections(&dets(&[("i", rect(2., 0., 12., 10.), 1, 0.9)]), &gt, 0.5).unwrap();
        assert!((m[0].iou - polygon_iou(&rect(2., 0., 12., 10.), &b)).abs() < 1e-15);
    }

    #[test]
    fn greedy_need_not_maximize_tp_count() {
        // The first detection prefers `a`, which is the only object the second
        // one could have matched.
        let a = rect(0., 0., 10., 10.);
        let b = rect(2., 0., 12., 10.);
        let gt = gt_index(&[("i", a, 1, false), ("i", b, 1, false)]);
        let d = dets(&[
            ("i", rect(0.8, 0., 10.8, 10.), 1, 0.9),
            ("i", rect(-3., 0., 7., 10.), 1, 0.8),
        ]);
        let m = match_detections(&d, &gt, 0.5).unwrap();
        assert_eq!(flags(&m), vec![TruePositive, FalsePositive]);
    }

    #[test]
    fn unknown_class_rejected() {
        let q = rect(0., 0., 10., 10.);
        let r = match_detections(&dets(&[("i", q, 3, 0.9)]), &gt_index(&[]), 0.5);
        assert_eq!(r, Err(EvalError::UnknownClass { id: 3, len: 2 }));
        assert!(match_detections(&dets(&[]), &gt_index(&[]), 1.5).is_err());
    }

    #[test]
    fn pr_examples() {
        let c = pr_curve(&[TruePositive], 1);
        assert_eq!(c.points, vec![(1.0, 1.0)]);
        let c = pr_curve(&[TruePositive, FalsePositive, TruePositive], 2);
        assert_eq!(c.points, vec![(0.5, 1.0), (0.5, 0.5), (1.0, 2.0 / 3.0)]);
        assert!(pr_curve(&[], 3).points.is_empty());
        assert_eq!(
            pr_curve(&[Ignored, TruePositive], 1).points,
            vec![(1.0, 1.0)]
        );
    }

    #[test]
    fn ap_examples() {
        let perfect = pr_curve(&[TruePositive], 1);
        assert_eq!(average_precision(&perfect, ApMode::ElevenPoint), 1.0);
        assert_eq!(average_precision(&perfect, ApMode::AllPoint), 1.0);
        let c = pr_curve(&[TruePositive, FalsePositive, TruePositive], 2);
        let eleven = (6.0 + 5.0 * (2.0 / 3.0)) / 11.0;
        assert!((average_precision(&c, ApMode::ElevenPoint) - eleven).abs() < 1e-15);
        assert!((average_precision(&c, ApMode::AllPoint) - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(
            average_precision(&PrCurve::default(), ApMode::ElevenPoint),
            0.0
        );
        assert_eq!(
            average_precision(&pr_curve(&[FalsePositive], 0), ApMode::AllPoint),
            0.0
        );
    }

    #[test]
    fn perfect_detections_score_one() {
        let objs = [
            ("x", rect(0., 0., 10., 10.), 1, false),
            ("x", rect(20., 0., 30., 8.), 2, false),
            ("y", rect(5., 5., 9., 40.), 1, false),
        ];
        let gt = gt_index(&objs);
        let d = dets(&objs.map(|(i, q, c, _)| (i, q, c, 1.0)));
        for mode in [ApMode::ElevenPoint, ApMode::AllPoint] {
            let r = evaluate(
                &d,
                &gt,
                &EvalConfig {
                    iou_threshold: 0.5,
                    mode,
                },
            )
            .unwrap();
            assert!(r.per_class.iter().all(|c| c.ap == 1.0));
            assert_eq!(r.map, 1.0);
        }
    }

    #[test]
    fn mode_names_roundtrip() {
        for m in [ApMode::ElevenPoint, ApMode::AllPoint] {
            assert_eq!(m.to_string().parse::<ApMode>().unwrap(), m);
        }
        assert!("voc".parse::<ApMode>().is_err());
    }

    #[test]
    fn class_table_lookup() {
        let t = ClassTable::dota();
        assert_eq!(t.len(), 15);
        assert_eq!(t.id_of("plane").unwrap(), 1);
        assert_eq!(t.name_of(15).unwrap(), "helicopter");
        assert!(t.name_of(0).is_err());
        assert!(ClassTable::new(["a", "a"]).is_err());
        assert!(ClassTable::new(["a b"]).is_err());
    }
}
