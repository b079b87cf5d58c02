//! Per-pixel training targets.
//!
//! Every feature-grid location maps to an image point. A location becomes a
//! positive sample for an object when its point lies inside the object's
//! surrounding box, close enough to the box center, and the largest of its four
//! edge distances falls in the level's size range. Positives carry the
//! `[l, t, r, b]` distances, the orientation offsets `[w, h]` and centerness.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{encode, Hbb, Point2, Quad};

/// Default center-sampling radius in units of the level stride.
pub const DEFAULT_CENTER_RADIUS_MULT: f64 = 1.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TargetError {
    #[error("grid location ({x}, {y}) is outside a {width}x{height} grid")]
    OutOfGrid {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("point ({x}, {y}) is not strictly inside the box")]
    PointOutsideBox { x: f64, y: f64 },
    #[error("centerness needs positive offsets, got {0:?}")]
    NonPositiveOffset([f64; 4]),
    #[error("invalid feature grid: {0}")]
    InvalidGrid(String),
    #[error("invalid level ranges: {0}")]
    InvalidRanges(String),
    #[error("{specs} feature grids but {ranges} level ranges")]
    LevelCountMismatch { specs: usize, ranges: usize },
    #[error("class id must be >= 1, got {0}")]
    BackgroundClass(usize),
}

/// How grid indices map back onto image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GridMapping {
    /// `x = floor(s/2) + x_s * s`.
    #[default]
    Strided,
    /// `x = floor(s/2) + x_s`, the unscaled form. Kept for auditing only.
    Literal,
}

/// One pyramid level's feature grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGridSpec {
    pub width: usize,
    pub height: usize,
    pub stride: usize,
    pub level: usize,
}

impl FeatureGridSpec {
    pub fn new(
        width: usize,
        height: usize,
        stride: usize,
        level: usize,
    ) -> Result<Self, TargetError> {
        let spec = Self {
            width,
            height,
            stride,
            level,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Grid covering an image of the given size at `stride`.
    pub fn for_image(
        image_w: usize,
        image_h: usize,
        stride: usize,
        level: usize,
    ) -> Result<Self, TargetError> {
        if stride == 0 {
            return Err(TargetError::InvalidGrid("stride must be >= 1".into()));
        }
        Self::new(
            image_w.div_ceil(stride).max(1),
            image_h.div_ceil(stride).max(1),
            stride,
            level,
        )
    }

    pub fn validate(&self) -> Result<(), TargetError> {
        if self.width == 0 || self.height == 0 || self.stride == 0 {
            return Err(TargetError::InvalidGrid(format!(
                "width, height and stride must be >= 1 (got {}x{} stride {})",
                self.width, self.height, self.stride
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major index of a location.
    #[inline]
    pub fn index(&self, x_s: usize, y_s: usize) -> usize {
        y_s * self.width + x_s
    }
}

/// Image point of grid location `(x_s, y_s)`.
pub fn grid_to_image(
    spec: &FeatureGridSpec,
    x_s: usize,
    y_s: usize,
) -> Result<Point2, TargetError> {
    grid_to_image_with(spec, x_s, y_s, GridMapping::Strided)
}

pub fn grid_to_image_with(
    spec: &FeatureGridSpec,
    x_s: usize,
    y_s: usize,
    mapping: GridMapping,
) -> Result<Point2, TargetError> {
    if x_s >= spec.width || y_s >= spec.height {
        return Err(TargetError::OutOfGrid {
            x: x_s,
            y: y_s,
            width: spec.width,
            height: spec.height,
        });
    }
    let half = (spec.stride / 2) as f64;
    let step = match mapping {
        GridMapping::Strided => spec.stride as f64,
        GridMapping::Literal => 1.0,
    };
    Ok(Point2::new(
        half + x_s as f64 * step,
        half + y_s as f64 * step,
    ))
}

/// Distances `[l, t, r, b]` from `p` to the edges of `hbb`.
pub fn ltrb_targets(p: Point2, hbb: &Hbb) -> Result<[f64; 4], TargetError> {
    if !hbb.contains_strict(p) {
        return Err(TargetError::PointOutsideBox { x: p.x, y: p.y });
    }
    Ok([
        p.x - hbb.xmin,
        p.y - hbb.ymin,
        hbb.xmax - p.x,
        hbb.ymax - p.y,
    ])
}

/// `sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b))`.
pub fn centerness(ltrb: &[f64; 4]) -> Result<f64, TargetError> {
    let [l, t, r, b] = *ltrb;
    if !(l > 0.0 && t > 0.0 && r > 0.0 && b > 0.0) {
        return Err(TargetError::NonPositiveOffset(*ltrb));
    }
    Ok(((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt())
}

/// Size range per pyramid level, matched against `max(l, t, r, b)`.
///
/// A location at level `i` is eligible when `min_i < max(ltrb) <= max_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRanges(Vec<(f64, f64)>);

impl LevelRanges {
    pub fn new(ranges: Vec<(f64, f64)>) -> Result<Self, TargetError> {
        if ranges.is_empty() {
            return Err(TargetError::InvalidRanges("no levels".into()));
        }
        if ranges[0].0 != 0.0 {
            return Err(TargetError::InvalidRanges(
                "first range must start at 0".into(),
            ));
        }
        if ranges[ranges.len() - 1].1 != f64::INFINITY {
            return Err(TargetError::InvalidRanges(
                "last range must end at infinity".into(),
            ));
        }
        for (i, &(lo, hi)) in ranges.iter().enumerate() {
            if lo.is_nan() || hi.is_nan() || lo >= hi {
                return Err(TargetError::InvalidRanges(format!(
                    "range {i} is empty: ({lo}, {hi}]"
                )));
            }
            if i > 0 && ranges[i - 1].1 != lo {
                return Err(TargetError::InvalidRanges(format!(
                    "range {i} does not start where range {} ends",
                    i - 1
                )));
            }
        }
        Ok(Self(ranges))
    }

    pub fn as_slice(&self) -> &[(f64, f64)] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn accepts(&self, level: usize, extent: f64) -> bool {
        let (lo, hi) = self.0[level];
        extent > lo && extent <= hi
    }
}

impl Default for LevelRanges {
    /// `(0,64], (64,128], (128,256], (256,512], (512,inf)` for strides 8..128.
    fn default() -> Self {
        Self(vec![
            (0.0, 64.0),
            (64.0, 128.0),
            (128.0, 256.0),
            (256.0, 512.0),
            (512.0, f64::INFINITY),
        ])
    }
}

/// Default five-level pyramid strides.
pub const DEFAULT_STRIDES: [usize; 5] = [8, 16, 32, 64, 128];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub quad: Quad,
    pub class_id: usize,
    pub difficult: bool,
}

impl GroundTruthObject {
    pub fn new(quad: Quad, class_id: usize, difficult: bool) -> Result<Self, TargetError> {
        if class_id == 0 {
            return Err(TargetError::BackgroundClass(class_id));
        }
        Ok(Self {
            quad,
            class_id,
            difficult,
        })
    }
}

/// Regression values carried by a positive location.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositiveTarget {
    pub ltrb: [f64; 4],
    pub wh: [f64; 2],
    pub centerness: f64,
    /// Index into the object list the location was assigned to.
    pub object: usize,
    pub difficult: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionTarget {
    pub x_s: usize,
    pub y_s: usize,
    pub point: Point2,
    /// 0 for background.
    pub class_id: usize,
    pub positive: Option<PositiveTarget>,
}

impl RegressionTarget {
    pub fn background(x_s: usize, y_s: usize, point: Point2) -> Self {
        Self {
            x_s,
            y_s,
            point,
            class_id: 0,
            positive: None,
        }
    }

    pub fn is_positive(&self) -> bool {
        self.positive.is_some()
    }
}

/// Targets for every location of one level, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTargets {
    pub spec: FeatureGridSpec,
    pub targets: Vec<RegressionTarget>,
}

impl LevelTargets {
    pub fn positives(&self) -> impl Iterator<Item = (&RegressionTarget, &PositiveTarget)> {
        self.targets
            .iter()
            .filter_map(|t| t.positive.as_ref().map(|p| (t, p)))
    }

    pub fn num_positive(&self) -> usize {
        self.targets.iter().filter(|t| t.is_positive()).count()
    }
}

/// Assigns every location of every level to an object or to background.
///
/// `specs[i]` is matched with `ranges[i]`. When several objects claim a
/// location, the one with the smaller surrounding-box area wins; equal areas go
/// to the earlier object.
pub fn assign_targets(
    specs: &[FeatureGridSpec],
    ranges: &LevelRanges,
    objects: &[GroundTruthObject],
    center_radius_mult: f64,
) -> Result<Vec<LevelTargets>, TargetError> {
    if specs.len() != ranges.len() {
        return Err(TargetError::LevelCountMismatch {
            specs: specs.len(),
            ranges: ranges.len(),
        });
    }
    let prepared: Vec<_> = objects
        .iter()
        .map(|o| {
            let enc = encode(&o.quad);
            (enc, enc.hbb.area())
        })
        .collect();

    specs
        .iter()
        .enumerate()
        .map(|(level, spec)| {
            spec.validate()?;
            let radius = center_radius_mult * spec.stride as f64;
            let mut targets = Vec::with_capacity(spec.len());
            for y_s in 0..spec.height {
                for x_s in 0..spec.width {
                    let point = grid_to_image(spec, x_s, y_s)?;
                    let mut best: Option<(usize, [f64; 4])> = None;
                    for (k, (enc, area)) in prepared.iter().enumerate() {
                        let hbb = &enc.hbb;
                        if !hbb.contains_strict(point) {
                            continue;
                        }
                        let c = hbb.center();
                        if (point.x - c.x).abs() > radius || (point.y - c.y).abs() > radius {
                            continue;
                        }
                        let ltrb = ltrb_targets(point, hbb)?;
                        let extent = ltrb.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        if !ranges.accepts(level, extent) {
                            continue;
                        }
                        if best.is_none_or(|(b, _)| *area < prepared[b].1) {
                            best = Some((k, ltrb));
                        }
                    }
                    let target = match best {
                        None => RegressionTarget::background(x_s, y_s, point),
                        Some((k, ltrb)) => {
                            let enc = &prepared[k].0;
                            RegressionTarget {
                                x_s,
                                y_s,
                                point,
                                class_id: objects[k].class_id,
                                positive: Some(PositiveTarget {
                                    ltrb,
                                    wh: [enc.w, enc.h],
                                    centerness: centerness(&ltrb)?,
                                    object: k,
                                    difficult: objects[k].difficult,
                                }),
                            }
                        }
                    };
                    targets.push(target);
                }
            }
            Ok(LevelTargets {
                spec: *spec,
                targets,
            })
        })
        .collect()
}

/// Grids for `strides` over an image of the given size.
pub fn pyramid_specs(
    image_w: usize,
    image_h: usize,
    strides: &[usize],
) -> Result<Vec<FeatureGridSpec>, TargetError> {
    strides
        .iter()
        .enumerate()
        .map(|(i, &s)| FeatureGridSpec::for_image(image_w, image_h, s, i))
        .collect()
}
