//! DOTA text formats.
//!
//! Annotations: one file per image, one object per line,
//! `x1 y1 x2 y2 x3 y3 x4 y4 category difficult`, optionally preceded by
//! `imagesource:` and `gsd:` header lines. Results: one file per class
//! (`Task1_<class>.txt` or `<class>.txt`), lines `image_id score x1 y1 … y4`.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::evaluation::{ClassTable, DetectionIndex, GtIndex};
use crate::geometry::{canonicalize, Point2, Quad};
use crate::inference::Detection;
use crate::targets::GroundTruthObject;

#[derive(Debug, Error)]
pub enum DotaError {
    #[error("{}:{line}: {reason}", file.display())]
    Parse {
        file: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DotaError {
    fn parse(file: &Path, line: usize, reason: impl Into<String>) -> Self {
        DotaError::Parse {
            file: file.to_path_buf(),
            line,
            reason: reason.into(),
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        DotaError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// What to do with a category that is not in the class table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum UnknownCategory {
    #[default]
    Error,
    Skip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub quad: Quad,
    pub category: String,
    pub difficult: bool,
}

fn parse_quad(tokens: &[&str], file: &Path, line: usize) -> Result<Quad, DotaError> {
    let mut c = [0.0; 8];
    for (v, t) in c.iter_mut().zip(tokens) {
        *v = t
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| DotaError::parse(file, line, format!("bad coordinate {t:?}")))?;
    }
    let pts = [0, 1, 2, 3].map(|i| Point2::new(c[2 * i], c[2 * i + 1]));
    canonicalize(pts).map_err(|e| DotaError::parse(file, line, e.to_string()))
}

fn is_number(t: &str) -> bool {
    t.parse::<f64>().is_ok()
}

/// Parses one annotation line; `None` for blank and header lines.
pub fn parse_annotation_line(
    text: &str,
    file: &Path,
    line: usize,
) -> Result<Option<AnnotationRecord>, DotaError> {
    let text = text.trim();
    if text.is_empty() || text.starts_with("imagesource:") || text.starts_with("gsd:") {
        return Ok(None);
    }
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let numeric = tokens.iter().take_while(|t| is_number(t)).count();
    if numeric != 8 {
        return Err(DotaError::parse(
            file,
            line,
            format!("expected 8 coordinates before the category, found {numeric}"),
        ));
    }
    let rest = &tokens[8..];
    let (category, difficult) = match rest {
        [cat] => (*cat, false),
        [cat, "0"] => (*cat, false),
        [cat, "1"] => (*cat, true),
        [_, d] => {
            return Err(DotaError::parse(
                file,
                line,
                format!("difficult flag must be 0 or 1, got {d:?}"),
            ))
        }
        [] => return Err(DotaError::parse(file, line, "missing category")),
        _ => {
            return Err(DotaError::parse(
                file,
                line,
                format!("{} trailing fields", rest.len() - 2),
            ))
        }
    };
    Ok(Some(AnnotationRecord {
        quad: parse_quad(&tokens[..8], file, line)?,
        category: category.to_string(),
        difficult,
    }))
}

pub fn parse_annotation_file(path: &Path) -> Result<Vec<AnnotationRecord>, DotaError> {
    let text = fs::read_to_string(path).map_err(|e| DotaError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if let Some(r) = parse_annotation_line(line, path, i + 1)? {
            out.push(r);
        }
    }
    Ok(out)
}

/// `.txt` files of `dir`, sorted by name.
fn text_files(dir: &Path) -> Result<Vec<PathBuf>, DotaError> {
    let entries = fs::read_dir(dir).map_err(|e| DotaError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| DotaError::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "txt") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Reads every `.txt` file of `dir` (or the single file `dir`) as one image.
pub fn parse_dota_annotations(
    dir: &Path,
    classes: &ClassTable,
    unknown: UnknownCategory,
) -> Result<GtIndex, DotaError> {
    let files = if dir.is_file() {
        vec![dir.to_path_buf()]
    } else {
        text_files(dir)?
    };
    let mut gt = GtIndex::new(classes.clone());
    for file in files {
        let text = fs::read_to_string(&file).map_err(|e| DotaError::io(&file, e))?;
        let mut objects = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let Some(r) = parse_annotation_line(line, &file, i + 1)? else {
                continue;
            };
            let class_id = match (classes.id_of(&r.category), unknown) {
                (Ok(id), _) => id,
                (Err(_), UnknownCategory::Skip) => continue,
                (Err(e), UnknownCategory::Error) => {
                    return Err(DotaError::parse(&file, i + 1, e.to_string()))
                }
            };
            objects.push(
                GroundTruthObject::new(r.quad, class_id, r.difficult)
                    .expect("table ids start at 1"),
            );
        }
        gt.images.insert(stem(&file), objects);
    }
    Ok(gt)
}

/// Class name encoded in a result file name.
fn class_of_file(path: &Path) -> String {
    let s = stem(path);
    s.strip_prefix("Task1_").map(str::to_string).unwrap_or(s)
}

pub fn parse_detection_line(
    text: &str,
    file: &Path,
    line: usize,
    class_id: usize,
) -> Result<Option<(String, Detection)>, DotaError> {
    let text = text.trim();
    if text.is_empty() {
        return Ok(None);
    }
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() != 10 {
        return Err(DotaError::parse(
            file,
            line,
            format!(
                "expected image id, score and 8 coordinates, found {} fields",
                tokens.len()
            ),
        ));
    }
    let score = tokens[1]
        .parse::<f64>()
        .map_err(|_| DotaError::parse(file, line, format!("bad score {:?}", tokens[1])))?;
    if !(0.0..=1.0).contains(&score) {
        return Err(DotaError::parse(
            file,
            line,
            format!("score {score} outside [0, 1]"),
        ));
    }
    let quad = parse_quad(&tokens[2..], file, line)?;
    Ok(Some((
        tokens[0].to_string(),
        Detection {
            quad,
            class_id,
            score,
        },
    )))
}

/// Reads per-class result files; detections keep file order within an image.
pub fn parse_detections(
    dir: &Path,
    classes: &ClassTable,
    unknown: UnknownCategory,
) -> Result<DetectionIndex, DotaError> {
    let mut out = DetectionIndex::new();
    for file in text_files(dir)? {
        let class_id = match (classes.id_of(&class_of_file(&file)), unknown) {
            (Ok(id), _) => id,
            (Err(_), UnknownCategory::Skip) => continue,
            (Err(e), UnknownCategory::Error) => {
                return Err(DotaError::parse(&file, 0, e.to_string()))
            }
        };
        let text = fs::read_to_string(&file).map_err(|e| DotaError::io(&file, e))?;
        for (i, line) in text.lines().enumerate() {
            if let Some((image, det)) = parse_detection_line(line, &file, i + 1, class_id)? {
                out.entry(image).or_default().push(det);
            }
        }
    }
    Ok(out)
}

pub fn format_annotation(r: &AnnotationRecord) -> String {
    format!("{} {} {}", r.quad, r.category, u8::from(r.difficult))
}

pub fn format_detection(image: &str, d: &Detection) -> String {
    format!("{image} {} {}", d.score, d.quad)
}

/// One annotation file per image.
pub fn write_annotations(dir: &Path, gt: &GtIndex) -> Result<(), DotaError> {
    fs::create_dir_all(dir).map_err(|e| DotaError::io(dir, e))?;
    for (image, objects) in &gt.images {
        let mut text = String::new();
        for o in objects {
            let r = AnnotationRecord {
                quad: o.quad,
                category: gt
                    .classes
                    .name_of(o.class_id)
                    .expect("validated")
                    .to_string(),
                difficult: o.difficult,
            };
            text.push_str(&format_annotation(&r));
            text.push('\n');
        }
        let path = dir.join(format!("{image}.txt"));
        fs::write(&path, text).map_err(|e| DotaError::io(&path, e))?;
    }
    Ok(())
}

/// `Task1_<class>.txt` for every class with at least one detection.
pub fn write_detections(
    dir: &Path,
    dets: &DetectionIndex,
    classes: &ClassTable,
) -> Result<(), DotaError> {
    fs::create_dir_all(dir).map_err(|e| DotaError::io(dir, e))?;
    for (id, name) in classes.names().iter().enumerate().map(|(i, n)| (i + 1, n)) {
        let mut text = String::new();
        for (image, ds) in dets {
            for d in ds.iter().filter(|d| d.class_id == id) {
                text.push_str(&format_detection(image, d));
                text.push('\n');
            }
        }
        if text.is_empty() {
            continue;
        }
        let path = dir.join(format!("Task1_{name}.txt"));
        fs::write(&path, text).map_err(|e| DotaError::io(&path, e))?;
    }
    Ok(())
}
