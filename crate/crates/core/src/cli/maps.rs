//! Line-oriented text formats for target and prediction maps.
//!
//! Targets list positives only; every other location is background:
//!
//! ```text
//! image P0001
//! level 0 128 128 8
//! pos 12 40 3 10.5 7 9.5 8 4 6 0.8 0 0
//! ```
//!
//! `pos` fields are `x_s y_s class l t r b w h centerness object difficult`.
//! Predictions list every location of a level in row-major order:
//!
//! ```text
//! classes 2
//! level 0 4 4 8
//! 0 0 0.1 0.7 0.5 4 4 4 4 1 2
//! ```
//!
//! with fields `x_s y_s score_1 … score_C centerness l t r b w h`. Blank lines
//! and lines starting with `#` are ignored. Numbers are written in Rust's
//! shortest round-trip form, so writing and reading back is lossless.

use std::fmt::Write as _;

use thiserror::Error;

use crate::losses::{LevelPredictions, Prediction};
use crate::targets::{
    grid_to_image, FeatureGridSpec, LevelTargets, PositiveTarget, RegressionTarget,
};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("line {line}: {reason}")]
pub struct MapError {
    pub line: usize,
    pub reason: String,
}

fn err(line: usize, reason: impl Into<String>) -> MapError {
    MapError {
        line,
        reason: reason.into(),
    }
}

fn nums<T: std::str::FromStr>(tokens: &[&str], line: usize) -> Result<Vec<T>, MapError> {
    tokens
        .iter()
        .map(|t| {
            t.parse::<T>()
                .map_err(|_| err(line, format!("bad number {t:?}")))
        })
        .collect()
}

fn floats(tokens: &[&str], line: usize) -> Result<Vec<f64>, MapError> {
    let v: Vec<f64> = nums(tokens, line)?;
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(err(line, format!("non-finite value {bad}")));
    }
    Ok(v)
}

fn parse_level(tokens: &[&str], line: usize) -> Result<FeatureGridSpec, MapError> {
    if tokens.len() != 4 {
        return Err(err(line, "level needs: index width height stride"));
    }
    let v: Vec<usize> = nums(tokens, line)?;
    FeatureGridSpec::new(v[1], v[2], v[3], v[0]).map_err(|e| err(line, e.to_string()))
}

/// Lines that carry content, with 1-based line numbers.
fn content(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.trim();
        (!l.is_empty() && !l.starts_with('#')).then(|| (i + 1, l.split_whitespace().collect()))
    })
}

fn background_level(spec: FeatureGridSpec) -> Result<LevelTargets, MapError> {
    let mut targets = Vec::with_capacity(spec.len());
    for y in 0..spec.height {
        for x in 0..spec.width {
            let p = grid_to_image(&spec, x, y).map_err(|e| err(0, e.to_string()))?;
            targets.push(RegressionTarget::background(x, y, p));
        }
    }
    Ok(LevelTargets { spec, targets })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTargets {
    pub image: Option<String>,
    pub levels: Vec<LevelTargets>,
}

pub fn write_targets(out: &mut String, image: Option<&str>, levels: &[LevelTargets]) {
    if let Some(id) = image {
        let _ = writeln!(out, "image {id}");
    }
    for l in levels {
        let s = &l.spec;
        let _ = writeln!(
            out,
            "level {} {} {} {}",
            s.level, s.width, s.height, s.stride
        );
        for (t, p) in l.positives() {
            let _ = writeln!(
                out,
                "pos {} {} {} {} {} {} {} {} {} {} {} {}",
                t.x_s,
                t.y_s,
                t.class_id,
                p.ltrb[0],
                p.ltrb[1],
                p.ltrb[2],
                p.ltrb[3],
                p.wh[0],
                p.wh[1],
                p.centerness,
                p.object,
                u8::from(p.difficult)
            );
        }
    }
}

pub fn read_targets(text: &str) -> Result<Vec<ImageTargets>, MapError> {
    let mut images: Vec<ImageTargets> = Vec::new();
    for (line, tokens) in content(text) {
        match tokens[0] {
            "image" => {
                if tokens.len() != 2 {
                    return Err(err(line, "image needs exactly one id"));
                }
                images.push(ImageTargets {
                    image: Some(tokens[1].to_string()),
                    levels: Vec::new(),
                });
            }
            "level" => {
                let spec = parse_level(&tokens[1..], line)?;
                if images.is_empty() {
                    images.push(ImageTargets {
                        image: None,
                        levels: Vec::new(),
                    });
                }
                images
                    .last_mut()
                    .expect("just ensured")
                    .levels
                    .push(background_level(spec)?);
            }
            "pos" => {
                if tokens.len() != 13 {
                    return Err(err(
                        line,
                        format!("pos needs 12 fields, found {}", tokens.len() - 1),
                    ));
                }
                let level = images
                    .last_mut()
                    .and_then(|i| i.levels.last_mut())
                    .ok_or_else(|| err(line, "pos before any level"))?;
                let idx: Vec<usize> = nums(&tokens[1..4], line)?;
                let v = floats(&tokens[4..11], line)?;
                let object: usize = nums(&tokens[11..12], line)?[0];
                let difficult = match tokens[12] {
                    "0" => false,
                    "1" => true,
                    d => return Err(err(line, format!("difficult must be 0 or 1, got {d:?}"))),
                };
                let (x, y, class_id) = (idx[0], idx[1], idx[2]);
                if x >= level.spec.width || y >= level.spec.height {
                    return Err(err(line, format!("location ({x}, {y}) outside the grid")));
                }
                if class_id == 0 {
                    return Err(err(line, "positive locations need a class id >= 1"));
                }
                if v[..4].iter().any(|&o| o <= 0.0) {
                    return Err(err(line, "box offsets must be positive"));
                }
                let t = &mut level.targets[level.spec.index(x, y)];
                if t.is_positive() {
                    return Err(err(line, format!("location ({x}, {y}) listed twice")));
                }
                t.class_id = class_id;
                t.positive = Some(PositiveTarget {
                    ltrb: [v[0], v[1], v[2], v[3]],
                    wh: [v[4], v[5]],
                    centerness: v[6],
                    object,
                    difficult,
                });
            }
            other => return Err(err(line, format!("unknown record {other:?}"))),
        }
    }
    Ok(images)
}

pub fn write_predictions(out: &mut String, levels: &[LevelPredictions]) {
    let classes = levels
        .first()
        .and_then(|l| l.preds.first())
        .map_or(0, |p| p.class_scores.len());
    let _ = writeln!(out, "classes {classes}");
    for l in levels {
        let s = &l.spec;
        let _ = writeln!(
            out,
            "level {} {} {} {}",
            s.level, s.width, s.height, s.stride
        );
        for (i, p) in l.preds.iter().enumerate() {
            let _ = write!(out, "{} {}", i % s.width, i / s.width);
            for v in p
                .class_scores
                .iter()
                .chain([&p.centerness])
                .chain(&p.ltrb)
                .chain(&p.wh)
            {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
    }
}

pub fn read_predictions(text: &str) -> Result<Vec<LevelPredictions>, MapError> {
    let mut classes: Option<usize> = None;
    let mut levels: Vec<LevelPredictions> = Vec::new();
    let complete = |l: &LevelPredictions, line: usize| {
        if l.preds.len() == l.spec.len() {
            Ok(())
        } else {
            Err(err(
                line,
                format!(
                    "level {} has {} of {} locations",
                    l.spec.level,
                    l.preds.len(),
                    l.spec.len()
                ),
            ))
        }
    };
    let mut last_line = 0;
    for (line, tokens) in content(text) {
        last_line = line;
        match tokens[0] {
            "classes" => {
                if classes.is_some() || tokens.len() != 2 {
                    return Err(err(line, "expected a single `classes C` header"));
                }
                classes = Some(nums::<usize>(&tokens[1..], line)?[0]);
            }
            "level" => {
                if let Some(l) = levels.last() {
                    complete(l, line)?;
                }
                levels.push(LevelPredictions {
                    spec: parse_level(&tokens[1..], line)?,
                    preds: Vec::new(),
                });
            }
            _ => {
                let c = classes.ok_or_else(|| err(line, "missing `classes C` header"))?;
                let level = levels
                    .last_mut()
                    .ok_or_else(|| err(line, "prediction before any level"))?;
                if tokens.len() != 2 + c + 7 {
                    return Err(err(
                        line,
                        format!("expected {} fields, found {}", 2 + c + 7, tokens.len()),
                    ));
                }
                let xy: Vec<usize> = nums(&tokens[..2], line)?;
                let n = level.preds.len();
                let w = level.spec.width;
                if n >= level.spec.len() || xy != [n % w, n / w] {
                    return Err(err(
                        line,
                        "locations must be listed once each in row-major order",
                    ));
                }
                let v = floats(&tokens[2..], line)?;
                level.preds.push(Prediction {
                    class_scores: v[..c].to_vec(),
                    centerness: v[c],
                    ltrb: [v[c + 1], v[c + 2], v[c + 3], v[c + 4]],
                    wh: [v[c + 5], v[c + 6]],
                });
            }
        }
    }
    if let Some(l) = levels.last() {
        complete(l, last_line)?;
    }
    Ok(levels)
}
