use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use super::config::RunConfig;
use super::dota::{parse_detections, parse_dota_annotations, write_detections};
use super::maps::{read_predictions, read_targets, write_targets};
use super::{Cli, CliError, Command};
use crate::evaluation::{evaluate, ApReport, ClassTable, DetectionIndex, EvalConfig, GtIndex};
use crate::geometry::{
    canonicalize, decode, encode, polygon_iou, raster_iou_oracle, EncodedBox, Hbb, Point2, Quad,
};
use crate::inference::rotated_nms;
use crate::losses::{fit_demo, grad_check, total_loss, FitConfig, LevelPredictions, Prediction};
use crate::targets::{assign_targets, pyramid_specs, GroundTruthObject, LevelTargets};

/// Side of the square image used for synthetic scenes.
pub const SYNTHETIC_IMAGE_SIZE: usize = 256;

fn data(msg: impl Into<String>) -> CliError {
    CliError::Data(msg.into())
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| data(format!("{}: {e}", path.display())))
}

/// Six significant digits.
fn sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let decimals = (5 - v.abs().log10().floor() as i64).max(0) as usize;
    format!("{v:.decimals$}")
}

fn class_table(cli: &Cli) -> Result<ClassTable, CliError> {
    match &cli.classes.classes {
        None => Ok(ClassTable::dota()),
        Some(list) => ClassTable::new(list.split(',').map(str::trim))
            .map_err(|e| CliError::Usage(e.to_string())),
    }
}

fn parse_size(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Usage(format!("image size must look like 1024x768, got {s:?}"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let (w, h) = (
        w.trim().parse().map_err(|_| bad())?,
        h.trim().parse().map_err(|_| bad())?,
    );
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((w, h))
}

/// Smallest image with its origin at 0 that contains every object.
fn extent(objects: &[GroundTruthObject]) -> (usize, usize) {
    let (mut w, mut h) = (1.0f64, 1.0f64);
    for o in objects {
        let b = o.quad.hbb();
        w = w.max(b.xmax.ceil());
        h = h.max(b.ymax.ceil());
    }
    (w as usize, h as usize)
}

fn image_size(
    flag: &Option<String>,
    objects: &[GroundTruthObject],
) -> Result<(usize, usize), CliError> {
    flag.as_deref().map_or(Ok(extent(objects)), parse_size)
}

fn parse_coords(s: &str) -> Result<[f64; 8], CliError> {
    let v: Vec<f64> = s
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| CliError::Usage(format!("bad coordinate {t:?}")))
        })
        .collect::<Result<_, _>>()?;
    v.try_into()
        .map_err(|v: Vec<f64>| CliError::Usage(format!("expected 8 coordinates, got {}", v.len())))
}

fn quad(c: [f64; 8]) -> Result<Quad, CliError> {
    Quad::from_coords(c).map_err(|e| data(e.to_string()))
}

pub(super) fn dispatch(cli: &Cli, cfg: &RunConfig) -> Result<String, CliError> {
    match &cli.command {
        Command::Iou {
            quad_a,
            quad_b,
            raster_check,
            grid,
        } => iou(quad_a, quad_b, *raster_check, *grid),
        Command::Encode { file } => encode_file(file),
        Command::Decode { file } => decode_file(file),
        Command::Assign {
            gt,
            image_size,
            out,
            ..
        } => assign(cli, cfg, gt, image_size, out.as_deref()),
        Command::Loss {
            targets,
            preds,
            image,
            grad_check,
            grad_samples,
            eps,
        } => loss(
            cfg,
            targets,
            preds,
            image.as_deref(),
            grad_check.then_some((*grad_samples, *eps)),
        ),
        Command::Nms { dets, out, .. } => nms(cli, cfg, dets, out),
        Command::Eval { gt, dets, json, .. } => eval(cli, cfg, gt, dets, json.as_deref()),
        Command::FitDemo {
            gt,
            image,
            image_size,
            trace_every,
            ..
        } => fit(
            cli,
            cfg,
            gt.as_deref(),
            image.as_deref(),
            image_size,
            *trace_every,
        ),
    }
}

fn iou(a: &str, b: &str, raster: bool, grid: usize) -> Result<String, CliError> {
    let (qa, qb) = (quad(parse_coords(a)?)?, quad(parse_coords(b)?)?);
    let v = polygon_iou(&qa, &qb);
    let mut out = format!("iou {v}\n");
    if raster {
        if grid == 0 {
            return Err(CliError::Usage("--grid must be positive".into()));
        }
        let r = raster_iou_oracle(&qa, &qb, grid);
        let _ = writeln!(out, "raster {r}\ndelta {}", (v - r).abs());
    }
    Ok(out)
}

/// Content lines of a file with their 1-based numbers.
fn numbered_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn leading_numbers(line: &str) -> Vec<f64> {
    line.split_whitespace()
        .map_while(|t| t.parse::<f64>().ok())
        .collect()
}

fn encode_file(path: &Path) -> Result<String, CliError> {
    let text = read(path)?;
    let mut out = String::new();
    let (mut n, mut worst) = (0usize, 1.0f64);
    for (line, l) in numbered_lines(&text) {
        if l.starts_with("imagesource:") || l.starts_with("gsd:") {
            continue;
        }
        let v = leading_numbers(l);
        if v.len() < 8 {
            return Err(data(format!(
                "{}:{line}: expected 8 coordinates",
                path.display()
            )));
        }
        let q = quad(v[..8].try_into().expect("length checked"))
            .map_err(|e| data(format!("{}:{line}: {e}", path.display())))?;
        let e = encode(&q);
        let b = e.hbb;
        let _ = writeln!(
            out,
            "{} {} {} {} {} {}",
            b.xmin, b.ymin, b.xmax, b.ymax, e.w, e.h
        );
        worst = worst.min(polygon_iou(&decode(&e), &q));
        n += 1;
    }
    if n > 0 {
        let _ = writeln!(out, "# roundtrip {n} boxes, min iou {worst}");
    }
    Ok(out)
}

fn decode_file(path: &Path) -> Result<String, CliError> {
    let text = read(path)?;
    let mut out = String::new();
    for (line, l) in numbered_lines(&text) {
        let v = leading_numbers(l);
        let at = |msg: String| data(format!("{}:{line}: {msg}", path.display()));
        if v.len() != 6 || !v.iter().all(|x| x.is_finite()) {
            return Err(at("expected xmin ymin xmax ymax w h".into()));
        }
        let hbb = Hbb::new(v[0], v[1], v[2], v[3]);
        if hbb.width() <= 0.0 || hbb.height() <= 0.0 {
            return Err(at("box must have positive width and height".into()));
        }
        if !(0.0..=hbb.width()).contains(&v[4]) || !(0.0..=hbb.height()).contains(&v[5]) {
            return Err(at(format!(
                "w, h must lie in [0, {}] x [0, {}]",
                hbb.width(),
                hbb.height()
            )));
        }
        let _ = writeln!(
            out,
            "{}",
            decode(&EncodedBox {
                hbb,
                w: v[4],
                h: v[5]
            })
        );
    }
    Ok(out)
}

fn load_gt(cli: &Cli, path: &Path) -> Result<GtIndex, CliError> {
    Ok(parse_dota_annotations(
        path,
        &class_table(cli)?,
        cli.classes.unknown_category,
    )?)
}

fn assign_image(
    cfg: &RunConfig,
    objects: &[GroundTruthObject],
    size: (usize, usize),
) -> Result<Vec<LevelTargets>, CliError> {
    let specs = pyramid_specs(size.0, size.1, &cfg.strides)?;
    Ok(assign_targets(
        &specs,
        &cfg.ranges,
        objects,
        cfg.center_radius_mult,
    )?)
}

fn assign(
    cli: &Cli,
    cfg: &RunConfig,
    gt: &Path,
    size: &Option<String>,
    out: Option<&Path>,
) -> Result<String, CliError> {
    let gt = load_gt(cli, gt)?;
    let images: Vec<(&String, &Vec<GroundTruthObject>)> = gt.images.iter().collect();
    let dumps: Vec<String> = images
        .par_iter()
        .map(|(id, objects)| -> Result<String, CliError> {
            let levels = assign_image(cfg, objects, image_size(size, objects)?)?;
            let mut text = String::new();
            write_targets(&mut text, Some(id), &levels);
            let per_level: Vec<String> = levels
                .iter()
                .map(|l| l.num_positive().to_string())
                .collect();
            let mut covered = vec![false; objects.len()];
            for (_, p) in levels.iter().flat_map(LevelTargets::positives) {
                covered[p.object] = true;
            }
            let _ = writeln!(
                text,
                "# {id}: {} objects, positives per level [{}], {} objects without positives",
                objects.len(),
                per_level.join(", "),
                covered.iter().filter(|c| !**c).count()
            );
            Ok(text)
        })
        .collect::<Result<_, _>>()?;
    let text = dumps.concat();
    match out {
        Some(path) => {
            fs::write(path, &text).map_err(|e| data(format!("{}: {e}", path.display())))?;
            Ok(format!(
                "wrote targets for {} images to {}\n",
                images.len(),
                path.display()
            ))
        }
        None => Ok(text),
    }
}

const PARAMS_PER_CLASSLESS_LOCATION: usize = 7;

fn flatten(levels: &[LevelPredictions]) -> Vec<f64> {
    let mut v = Vec::new();
    for p in levels.iter().flat_map(|l| &l.preds) {
        v.extend(&p.class_scores);
        v.push(p.centerness);
        v.extend(p.ltrb);
        v.extend(p.wh);
    }
    v
}

fn unflatten(template: &[LevelPredictions], v: &[f64]) -> Vec<LevelPredictions> {
    let mut it = v.iter().copied();
    let mut next = || it.next().expect("length matches template");
    template
        .iter()
        .map(|l| LevelPredictions {
            spec: l.spec,
            preds: l
                .preds
                .iter()
                .map(|p| Prediction {
                    class_scores: p.class_scores.iter().map(|_| next()).collect(),
                    centerness: next(),
                    ltrb: [next(), next(), next(), next()],
                    wh: [next(), next()],
                })
                .collect(),
        })
        .collect()
}

fn loss(
    cfg: &RunConfig,
    targets: &Path,
    preds: &Path,
    image: Option<&str>,
    check: Option<(usize, f64)>,
) -> Result<String, CliError> {
    let all =
        read_targets(&read(targets)?).map_err(|e| data(format!("{}: {e}", targets.display())))?;
    let chosen = match image {
        Some(id) => all
            .into_iter()
            .find(|t| t.image.as_deref() == Some(id))
            .ok_or_else(|| data(format!("no image {id:?} in {}", targets.display())))?,
        None if all.len() == 1 => all.into_iter().next().expect("one image"),
        None => {
            return Err(data(format!(
                "{} holds {} images; choose one with --image",
                targets.display(),
                all.len()
            )))
        }
    };
    let preds =
        read_predictions(&read(preds)?).map_err(|e| data(format!("{}: {e}", preds.display())))?;
    let result = total_loss(&preds, &chosen.levels, &cfg.weights)?;
    let b = &result.breakdown;
    if !b.total.is_finite() {
        return Err(CliError::Numeric(format!(
            "loss is not finite: {}",
            b.total
        )));
    }
    let mut out = format!(
        "total {}\ncls {}\nreg {}\nori {}\nn_pos {}\nm {}\n",
        b.total, b.cls, b.reg, b.ori, b.n_pos, b.m
    );
    if let Some((samples, eps)) = check {
        let point = flatten(&preds);
        let k = samples.min(point.len());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut idx = sample(&mut rng, point.len(), k).into_vec();
        idx.sort_unstable();
        let grads_flat = |levels: &[LevelPredictions], g: &[Vec<crate::losses::PredictionGrad>]| {
            let mut v = Vec::new();
            for (l, gl) in levels.iter().zip(g) {
                for (_, pg) in l.preds.iter().zip(gl) {
                    v.extend(&pg.class_scores);
                    v.push(pg.centerness);
                    v.extend(pg.ltrb);
                    v.extend(pg.wh);
                }
            }
            v
        };
        let f = |sub: &[f64]| {
            let mut full = point.clone();
            for (&i, &x) in idx.iter().zip(sub) {
                full[i] = x;
            }
            let levels = unflatten(&preds, &full);
            match total_loss(&levels, &chosen.levels, &cfg.weights) {
                Ok(o) => {
                    let g = grads_flat(&levels, &o.grads);
                    (o.breakdown.total, idx.iter().map(|&i| g[i]).collect())
                }
                Err(_) => (f64::NAN, vec![f64::NAN; idx.len()]),
            }
        };
        let sub: Vec<f64> = idx.iter().map(|&i| point[i]).collect();
        let r = grad_check(f, &sub, eps);
        if !r.max_rel_error.is_finite() {
            return Err(CliError::Numeric(
                "finite differences left the loss domain; use a smaller --eps".into(),
            ));
        }
        let per_loc = preds
            .first()
            .and_then(|l| l.preds.first())
            .map_or(0, |p| p.class_scores.len())
            + PARAMS_PER_CLASSLESS_LOCATION;
        let _ = writeln!(
            out,
            "grad_check entries {k} max_rel_error {} worst_entry {} (location {}, field {})",
            r.max_rel_error,
            idx.get(r.worst_index).copied().unwrap_or(0),
            idx.get(r.worst_index).copied().unwrap_or(0) / per_loc.max(1),
            idx.get(r.worst_index).copied().unwrap_or(0) % per_loc.max(1)
        );
    }
    Ok(out)
}

fn load_dets(cli: &Cli, path: &Path) -> Result<DetectionIndex, CliError> {
    Ok(parse_detections(
        path,
        &class_table(cli)?,
        cli.classes.unknown_category,
    )?)
}

fn nms(cli: &Cli, cfg: &RunConfig, dets: &Path, out: &Path) -> Result<String, CliError> {
    let classes = class_table(cli)?;
    let all = load_dets(cli, dets)?;
    let thresh = cfg.inference.nms_iou_threshold;
    let kept: Vec<(String, Vec<_>)> = all
        .par_iter()
        .map(|(img, ds)| (img.clone(), rotated_nms(ds, thresh)))
        .collect();
    let before: usize = all.values().map(Vec::len).sum();
    let kept: DetectionIndex = kept.into_iter().collect();
    let after: usize = kept.values().map(Vec::len).sum();
    write_detections(out, &kept, &classes)?;
    Ok(format!(
        "kept {after} of {before} detections at iou {thresh}\n"
    ))
}

fn report_json(report: &ApReport) -> String {
    let per_class: serde_json::Map<String, serde_json::Value> = report
        .per_class
        .iter()
        .map(|c| (c.name.clone(), json!(c.ap)))
        .collect();
    let v = json!({
        "per_class": per_class,
        "map": report.map,
        "iou_threshold": report.iou_threshold,
        "mode": report.mode.to_string(),
    });
    let mut s = serde_json::to_string_pretty(&v).expect("plain values serialize");
    s.push('\n');
    s
}

fn report_table(report: &ApReport) -> String {
    let width = report
        .per_class
        .iter()
        .map(|c| c.name.len())
        .max()
        .unwrap_or(0)
        .max(5);
    let mut out = format!(
        "{:<width$}  {:>9}  {:>6}  {:>6}  {:>6}\n",
        "class", "AP", "gt", "det", "tp"
    );
    for c in &report.per_class {
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>6}  {:>6}  {:>6}",
            c.name,
            sig6(c.ap),
            c.num_gt,
            c.num_det,
            c.num_tp
        );
    }
    let _ = writeln!(out, "{:<width$}  {:>9}", "mAP", sig6(report.map));
    let _ = writeln!(
        out,
        "iou_threshold {} mode {}",
        report.iou_threshold, report.mode
    );
    out
}

fn eval(
    cli: &Cli,
    cfg: &RunConfig,
    gt: &Path,
    dets: &Path,
    json_out: Option<&Path>,
) -> Result<String, CliError> {
    let gt = load_gt(cli, gt)?;
    let dets = load_dets(cli, dets)?;
    let report = evaluate(
        &dets,
        &gt,
        &EvalConfig {
            iou_threshold: cfg.iou_threshold,
            mode: cfg.mode,
        },
    )?;
    match json_out {
        Some(p) if p == Path::new("-") => Ok(report_json(&report)),
        Some(p) => {
            fs::write(p, report_json(&report))
                .map_err(|e| data(format!("{}: {e}", p.display())))?;
            Ok(report_table(&report))
        }
        None => Ok(report_table(&report)),
    }
}

fn rotated_rect(cx: f64, cy: f64, w: f64, h: f64, angle: f64) -> Quad {
    let (s, c) = angle.sin_cos();
    let corners = [
        (-w / 2., -h / 2.),
        (w / 2., -h / 2.),
        (w / 2., h / 2.),
        (-w / 2., h / 2.),
    ];
    canonicalize(corners.map(|(x, y)| Point2::new(cx + x * c - y * s, cy + x * s + y * c)))
        .expect("a rectangle with positive sides is a valid quad")
}

/// Three random rotated rectangles inside a
/// [`SYNTHETIC_IMAGE_SIZE`]² image, classes 1 to 3.
pub fn synthetic_scene(seed: u64) -> Vec<GroundTruthObject> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = 50.0;
    let hi = SYNTHETIC_IMAGE_SIZE as f64 - 50.0;
    (0..3)
        .map(|k| {
            let q = rotated_rect(
                rng.random_range(lo..hi),
                rng.random_range(lo..hi),
                rng.random_range(20.0..90.0),
                rng.random_range(12.0..60.0),
                rng.random_range(-1.5..1.5),
            );
            GroundTruthObject::new(q, k + 1, false).expect("class ids start at 1")
        })
        .collect()
}

fn fit(
    cli: &Cli,
    cfg: &RunConfig,
    gt: Option<&Path>,
    image: Option<&str>,
    size: &Option<String>,
    trace_every: usize,
) -> Result<String, CliError> {
    let classes = class_table(cli)?;
    let (name, objects, dims) = match gt {
        None => {
            let objects = synthetic_scene(cfg.seed);
            let dims = match size {
                Some(s) => parse_size(s)?,
                None => (SYNTHETIC_IMAGE_SIZE, SYNTHETIC_IMAGE_SIZE),
            };
            (format!("synthetic-{}", cfg.seed), objects, dims)
        }
        Some(path) => {
            let gt = load_gt(cli, path)?;
            let (id, objects) = match image {
                Some(id) => gt
                    .images
                    .get_key_value(id)
                    .ok_or_else(|| data(format!("no image {id:?} in {}", path.display())))?,
                None => gt
                    .images
                    .iter()
                    .find(|(_, o)| !o.is_empty())
                    .ok_or_else(|| data(format!("no objects in {}", path.display())))?,
            };
            let dims = image_size(size, objects)?;
            (id.clone(), objects.clone(), dims)
        }
    };
    for o in &objects {
        classes.name_of(o.class_id)?;
    }
    let targets = assign_image(cfg, &objects, dims)?;
    let n_pos: usize = targets.iter().map(LevelTargets::num_positive).sum();
    if n_pos == 0 {
        return Err(data(format!(
            "{name}: no location is assigned to any object"
        )));
    }
    let fit_cfg = FitConfig {
        steps: cfg.steps,
        lr: cfg.lr,
        seed: cfg.seed,
        ..Default::default()
    };
    let result = fit_demo(&targets, classes.len(), &cfg.weights, &fit_cfg)?;

    let mut out = format!(
        "# fit-demo {name}: {} objects, image {}x{}, {n_pos} positive locations, steps {}, lr {}, seed {}\n",
        objects.len(),
        dims.0,
        dims.1,
        fit_cfg.steps,
        fit_cfg.lr,
        fit_cfg.seed
    );
    let every = trace_every.max(1);
    for (i, b) in result.trajectory.iter().enumerate() {
        if i % every == 0 || i + 1 == result.trajectory.len() {
            let _ = writeln!(
                out,
                "step {i} total {} cls {} reg {} ori {}",
                b.total, b.cls, b.reg, b.ori
            );
        }
    }
    let monotone = result
        .trajectory
        .windows(2)
        .skip(50)
        .all(|w| w[1].total <= w[0].total);
    let _ = writeln!(out, "non_increasing_after_50 {monotone}");

    let mut by_object: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for loc in &result.locations {
        let iou = polygon_iou(&loc.quad, &objects[loc.object].quad);
        by_object
            .entry(loc.object)
            .or_default()
            .push((loc.score, iou));
    }
    for (i, o) in objects.iter().enumerate() {
        let name = classes.name_of(o.class_id)?;
        match by_object.get(&i) {
            None => {
                let _ = writeln!(out, "object {i} {name} locations 0");
            }
            Some(v) => {
                let best = v
                    .iter()
                    .max_by(|a, b| a.0.total_cmp(&b.0))
                    .expect("non-empty")
                    .1;
                let worst = v.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
                let _ = writeln!(
                    out,
                    "object {i} {name} locations {} iou_top_score {best} iou_min {worst}",
                    v.len()
                );
            }
        }
    }
    Ok(out)
}
