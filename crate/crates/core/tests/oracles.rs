mod common;

use obbkit::cli::dota::{
    parse_detections, parse_dota_annotations, write_annotations, write_detections, UnknownCategory,
};
use obbkit::evaluation::{match_detections, ClassTable, DetectionIndex, GtIndex, MatchFlag};
use obbkit::geometry::polygon_iou;
use obbkit::inference::{run_inference, Detection, InferenceConfig};
use obbkit::losses::{LevelPredictions, Prediction};
use obbkit::targets::{assign_targets, pyramid_specs, GroundTruthObject, LevelRanges};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

use common::{random_rect, rotated_rect};

/// Best assignment by exhaustive search: detections in score order, each
/// either unmatched or matched to a distinct object with IoU >= `thr`;
/// maximizes the matched-IoU sequence lexicographically (unmatched counts 0).
fn exhaustive(ious: &[Vec<f64>], thr: f64) -> Vec<f64> {
    fn go(d: usize, ious: &[Vec<f64>], thr: f64, taken: &mut Vec<bool>, cur: &mut Vec<f64>, best: &mut Vec<f64>) {
        if d == ious.len() {
            if cur.as_slice() > best.as_slice() {
                best.clone_from(cur);
            }
            return;
        }
        for g in 0..taken.len() {
            if !taken[g] && ious[d][g] >= thr {
                taken[g] = true;
                cur.push(ious[d][g]);
                go(d + 1, ious, thr, taken, cur, best);
                cur.pop();
                taken[g] = false;
            }
        }
        cur.push(0.0);
        go(d + 1, ious, thr, taken, cur, best);
        cur.pop();
    }
    let mut best = vec![-1.0; ious.len()];
    go(0, ious, thr, &mut vec![false; ious.first().map_or(0, Vec::len)], &mut Vec::new(), &mut best);
    best
}

#[test]
fn greedy_matching_equals_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let classes = ClassTable::new(["plane"]).unwrap();
    let mut total_tp = 0;
    for _ in 0..300 {
        let n_gt = rng.random_range(1..=4);
        let n_det = rng.random_range(1..=6);
        let objects: Vec<GroundTruthObject> = (0..n_gt)
            .map(|_| GroundTruthObject::new(random_rect(&mut rng, 60.0, (15.0, 40.0)), 1, false).unwrap())
            .collect();
        let dets: Vec<Detection> = (0..n_det)
            .map(|_| Detection {
                quad: random_rect(&mut rng, 60.0, (15.0, 40.0)),
                class_id: 1,
                score: rng.random_range(0.0..1.0),
            })
            .collect();
        let thr = rng.random_range(0.05..0.5);

        let mut order: Vec<usize> = (0..n_det).collect();
        order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
        let ious: Vec<Vec<f64>> = order
            .iter()
            .map(|&i| objects.iter().map(|o| polygon_iou(&dets[i].quad, &o.quad)).collect())
            .collect();
        let want = exhaustive(&ious, thr);

        let mut gt = GtIndex::new(classes.clone());
        gt.images.insert("x".into(), objects);
        let index: DetectionIndex = [("x".to_string(), dets)].into();
        let got: Vec<f64> = match_detections(&index, &gt, thr)
            .unwrap()
            .iter()
            .map(|m| if m.flag == MatchFlag::TruePositive { m.iou } else { 0.0 })
            .collect();
        assert_eq!(got, want);
        total_tp += got.iter().filter(|&&v| v > 0.0).count();
    }
    assert!(total_tp > 100, "the scenes should produce plenty of matches");
}

#[test]
fn inference_recovers_objects_from_exact_predictions() {
    let objects = [
        GroundTruthObject::new(rotated_rect(60.0, 70.0, 50.0, 20.0, 0.4), 2, false).unwrap(),
        GroundTruthObject::new(rotated_rect(170.0, 150.0, 90.0, 40.0, -0.9), 5, false).unwrap(),
    ];
    let specs = pyramid_specs(256, 256, &[8, 16, 32]).unwrap();
    let ranges = LevelRanges::new(vec![(0.0, 32.0), (32.0, 64.0), (64.0, f64::INFINITY)]).unwrap();
    let targets = assign_targets(&specs, &ranges, &objects, 1.5).unwrap();
    let classes = 6;
    let levels: Vec<LevelPredictions> = targets
        .iter()
        .map(|lt| LevelPredictions {
            spec: lt.spec,
            preds: lt
                .targets
                .iter()
                .map(|t| match &t.positive {
                    Some(p) => Prediction {
                        class_scores: (1..=classes).map(|c| if c == t.class_id { 0.95 } else { 0.01 }).collect(),
                        centerness: p.centerness,
                        ltrb: p.ltrb,
                        wh: p.wh,
                    },
                    None => Prediction {
                        class_scores: vec![0.01; classes],
                        centerness: 0.5,
                        ltrb: [4.0; 4],
                        wh: [0.0, 0.0],
                    },
                })
                .collect(),
        })
        .collect();
    let dets = run_inference(&levels, &InferenceConfig::default()).unwrap();
    assert_eq!(dets.len(), 2, "{dets:?}");
    for o in &objects {
        let d = dets.iter().find(|d| d.class_id == o.class_id).unwrap();
        assert!(polygon_iou(&d.quad, &o.quad) > 1.0 - 1e-9);
    }
    assert!(dets[0].score >= dets[1].score);

    let no_nms = InferenceConfig {
        nms: false,
        ..Default::default()
    };
    let positives: usize = targets.iter().map(|l| l.num_positive()).sum();
    assert_eq!(run_inference(&levels, &no_nms).unwrap().len(), positives);
}

#[test]
fn annotation_and_detection_files_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let classes = ClassTable::dota();
    let mut gt = GtIndex::new(classes.clone());
    let mut dets = DetectionIndex::new();
    for img in ["P0001", "P0002"] {
        let objects: Vec<GroundTruthObject> = (0..5)
            .map(|k| {
                GroundTruthObject::new(random_rect(&mut rng, 900.0, (4.0, 300.0)), k * 3 + 1, k == 2).unwrap()
            })
            .collect();
        dets.insert(
            img.to_string(),
            objects
                .iter()
                .map(|o| Detection {
                    quad: o.quad,
                    class_id: o.class_id,
                    score: rng.random_range(0.0..1.0),
                })
                .collect(),
        );
        gt.images.insert(img.to_string(), objects);
    }
    let dir = tempdir().unwrap();
    write_annotations(&dir.path().join("gt"), &gt).unwrap();
    write_detections(&dir.path().join("dets"), &dets, &classes).unwrap();
    let gt_back = parse_dota_annotations(&dir.path().join("gt"), &classes, UnknownCategory::Error).unwrap();
    assert_eq!(gt_back.images, gt.images);
    let mut dets_back = parse_detections(&dir.path().join("dets"), &classes, UnknownCategory::Error).unwrap();
    for v in dets_back.values_mut().chain(dets.values_mut()) {
        v.sort_by(|a, b| a.class_id.cmp(&b.class_id).then(b.score.total_cmp(&a.score)));
    }
    assert_eq!(dets_back, dets);
}
