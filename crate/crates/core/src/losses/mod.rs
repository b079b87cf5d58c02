//! Training losses with analytic gradients.
//!
//! The composite objective is
//!
//! ```text
//! L = (L_cls + λ·L_reg + ω·L_ori) / N_pos
//! L_reg = Σ_pos BCE(ĉ, c) + λ_reg·SmoothL1(R̂_b, R_b) + (1 − IoU_hbb)
//! L_ori = Σ_pos λ_ori·SmoothL1(R̂_o, R_o) + (1 − IoU_inner)
//! ```
//!
//! where `L_cls` is the focal loss over every location and class, normalized by
//! `M = max(N_pos, 1)`. Every function returns the gradient with respect to its
//! prediction arguments alongside the value.

mod fit;
mod gradcheck;

pub use fit::{fit_demo, FitConfig, FitLocation, FitResult};
pub use gradcheck::{grad_check, GradCheck};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::targets::{FeatureGridSpec, LevelTargets, RegressionTarget};

/// Smooth-L1 switch point between the quadratic and linear branches.
pub const SMOOTH_L1_DELTA: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("score {0} is outside the open interval (0, 1)")]
    NonFiniteScore(f64),
    #[error("target {0} is outside [0, 1]")]
    InvalidTarget(f64),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("box offsets must be positive, got {0:?}")]
    NonPositiveOffset([f64; 4]),
    #[error("inner box has zero area")]
    DegenerateInner,
    #[error("normalizer M must be >= 1")]
    InvalidNormalizer,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss diverged at step {step}")]
    Diverged { step: usize },
}

/// Network outputs at one location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Per-class probabilities (after the sigmoid), one per foreground class.
    pub class_scores: Vec<f64>,
    pub centerness: f64,
    pub ltrb: [f64; 4],
    pub wh: [f64; 2],
}

/// Predictions for every location of one level, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelPredictions {
    pub spec: FeatureGridSpec,
    pub preds: Vec<Prediction>,
}

/// Gradient of the total loss with respect to one [`Prediction`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictionGrad {
    pub class_scores: Vec<f64>,
    pub centerness: f64,
    pub ltrb: [f64; 4],
    pub wh: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub omega: f64,
    pub lambda_reg: f64,
    pub lambda_ori: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            omega: 1.0,
            lambda_reg: 0.2,
            lambda_ori: 0.2,
            alpha: 0.3,
            beta: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub ori: f64,
    pub n_pos: usize,
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    /// Same layout as the prediction maps.
    pub grads: Vec<Vec<PredictionGrad>>,
}

fn check_score(p: f64) -> Result<(), LossError> {
    if p.is_finite() && p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(LossError::NonFiniteScore(p))
    }
}

/// Focal bracket term for one score and its derivative.
///
/// Positive (`y == 1`): `α(1−p)^β ln p`. Otherwise: `α p^β ln(1−p)`. The sign is
/// the raw bracket value; the loss negates it.
fn focal_term(p: f64, y: f64, alpha: f64, beta: f64) -> (f64, f64) {
    if y == 1.0 {
        let q = 1.0 - p;
        let ln_p = p.ln();
        let d_pow = if beta == 0.0 {
            0.0
        } else {
            -beta * pow(q, beta - 1.0)
        };
        let q_b = pow(q, beta);
        (alpha * q_b * ln_p, alpha * (d_pow * ln_p + q_b / p))
    } else {
        let ln_q = (-p).ln_1p();
        let d_pow = if beta == 0.0 {
            0.0
        } else {
            beta * pow(p, beta - 1.0)
        };
        let p_b = pow(p, beta);
        (alpha * p_b * ln_q, alpha * (d_pow * ln_q - p_b / (1.0 - p)))
    }
}

/// `x^e`, with integer exponents taken by repeated multiplication.
fn pow(x: f64, e: f64) -> f64 {
    if e.fract() == 0.0 && e.abs() <= 64.0 {
        x.powi(e as i32)
    } else {
        x.powf(e)
    }
}

/// Focal classification loss `−(1/M) Σ term(Ŷ, Y)` with its gradient.
///
/// Both branches carry `α`; negatives are not re-weighted by `(1−Y)`.
pub fn focal_loss(
    scores: &[f64],
    targets: &[f64],
    alpha: f64,
    beta: f64,
    m: usize,
) -> Result<(f64, Vec<f64>), LossError> {
    if scores.len() != targets.len() {
        return Err(LossError::LengthMismatch(scores.len(), targets.len()));
    }
    if m == 0 {
        return Err(LossError::InvalidNormalizer);
    }
    let inv_m = 1.0 / m as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for (&p, &y) in scores.iter().zip(targets) {
        check_score(p)?;
        if !(0.0..=1.0).contains(&y) {
            return Err(LossError::InvalidTarget(y));
        }
        let (v, d) = focal_term(p, y, alpha, beta);
        loss -= v;
        grad.push(-d * inv_m);
    }
    Ok((loss * inv_m, grad))
}

/// Binary cross entropy and its derivative with respect to `pred`.
pub fn bce(pred: f64, target: f64) -> Result<(f64, f64), LossError> {
    check_score(pred)?;
    if !(0.0..=1.0).contains(&target) {
        return Err(LossError::InvalidTarget(target));
    }
    let v = -(target * pred.ln() + (1.0 - target) * (-pred).ln_1p());
    let d = -(target / pred) + (1.0 - target) / (1.0 - pred);
    Ok((v, d))
}

/// Summed smooth-L1 over `pred − target` with threshold `delta`.
pub fn smooth_l1(pred: &[f64], target: &[f64], delta: f64) -> Result<(f64, Vec<f64>), LossError> {
    if pred.len() != target.len() {
        return Err(LossError::LengthMismatch(pred.len(), target.len()));
    }
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let e = p - t;
            if e.abs() < delta {
                loss += 0.5 * e * e / delta;
                e / delta
            } else {
                loss += e.abs() - 0.5 * delta;
                e.signum()
            }
        })
        .collect();
    Ok((loss, grad))
}

/// Inner-box offsets `[|l−w|, |t−h|, |r−w|, |b−h|]`.
pub fn inner_box(ltrb: &[f64; 4], wh: &[f64; 2]) -> [f64; 4] {
    let [l, t, r, b] = *ltrb;
    let [w, h] = *wh;
    [(l - w).abs(), (t - h).abs(), (r - w).abs(), (b - h).abs()]
}

/// `1 − IoU` of two boxes sharing an anchor point, with the gradient wrapped
/// around `pred`. `None` when the union is empty.
fn shared_point_iou_loss(pred: &[f64; 4], target: &[f64; 4]) -> Option<(f64, [f64; 4])> {
    let [pl, pt, pr, pb] = *pred;
    let [tl, tt, tr, tb] = *target;
    let pred_w = pl + pr;
    let pred_h = pt + pb;
    let area_p = pred_w * pred_h;
    let area_t = (tl + tr) * (tt + tb);
    let iw = pl.min(tl) + pr.min(tr);
    let ih = pt.min(tt) + pb.min(tb);
    let inter = iw * ih;
    let union = area_p + area_t - inter;
    if union <= 0.0 {
        return None;
    }
    let iou = inter / union;

    // One-sided derivative of each min: the prediction is active when strictly smaller.
    let act = |p: f64, t: f64| if p < t { 1.0 } else { 0.0 };
    let d_inter = [
        act(pl, tl) * ih,
        act(pt, tt) * iw,
        act(pr, tr) * ih,
        act(pb, tb) * iw,
    ];
    let d_area = [pred_h, pred_w, pred_h, pred_w];
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area[k] - d_inter[k];
        let d_iou = (d_inter[k] * union - inter * d_union) / (union * union);
        grad[k] = -d_iou;
    }
    Some((1.0 - iou, grad))
}

/// `1 − IoU` of the two boxes described by `pred` and `target` offsets around a
/// common location.
pub fn iou_hbb_loss(pred: &[f64; 4], target: &[f64; 4]) -> Result<(f64, [f64; 4]), LossError> {
    for b in [pred, target] {
        if !b.iter().all(|&v| v > 0.0 && v.is_finite()) {
            return Err(LossError::NonPositiveOffset(*b));
        }
    }
    Ok(shared_point_iou_loss(pred, target).expect("positive offsets give a non-empty union"))
}

/// Gradient of [`iou_obb_loss`]: `(d/d ltrb, d/d wh)`.
pub type ObbGrad = ([f64; 4], [f64; 2]);

/// `1 − IoU` of the inner boxes of prediction and target.
///
/// The `|·|` kinks take subgradient 0. Fails with
/// [`LossError::DegenerateInner`] when both inner boxes have zero area.
pub fn iou_obb_loss(
    pred_ltrb: &[f64; 4],
    pred_wh: &[f64; 2],
    target_ltrb: &[f64; 4],
    target_wh: &[f64; 2],
) -> Result<(f64, ObbGrad), LossError> {
    let pi = inner_box(pred_ltrb, pred_wh);
    let ti = inner_box(target_ltrb, target_wh);
    let (loss, g_inner) = shared_point_iou_loss(&pi, &ti).ok_or(LossError::DegenerateInner)?;
    let sgn = |x: f64| {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    let [l, t, r, b] = *pred_ltrb;
    let [w, h] = *pred_wh;
    let s = [sgn(l - w), sgn(t - h), sgn(r - w), sgn(b - h)];
    let g_ltrb = [
        g_inner[0] * s[0],
        g_inner[1] * s[1],
        g_inner[2] * s[2],
        g_inner[3] * s[3],
    ];
    let g_wh = [
        -g_inner[0] * s[0] - g_inner[2] * s[2],
        -g_inner[1] * s[1] - g_inner[3] * s[3],
    ];
    Ok((loss, (g_ltrb, g_wh)))
}

/// Composite loss over aligned prediction and target maps.
pub fn total_loss(
    preds: &[LevelPredictions],
    targets: &[LevelTargets],
    w: &LossWeights,
) -> Result<LossOutput, LossError> {
    if preds.len() != targets.len() {
        return Err(LossError::ShapeMismatch(format!(
            "{} prediction levels vs {} target levels",
            preds.len(),
            targets.len()
        )));
    }
    let num_classes = preds
        .iter()
        .flat_map(|l| l.preds.first())
        .map(|p| p.class_scores.len())
        .next()
        .unwrap_or(0);
    for (lp, lt) in preds.iter().zip(targets) {
        if lp.spec != lt.spec
            || lp.preds.len() != lt.targets.len()
            || lp.preds.len() != lp.spec.len()
        {
            return Err(LossError::ShapeMismatch(format!(
                "level {}: {} predictions vs {} targets",
                lt.spec.level,
                lp.preds.len(),
                lt.targets.len()
            )));
        }
        for (p, t) in lp.preds.iter().zip(&lt.targets) {
            if p.class_scores.len() != num_classes {
                return Err(LossError::ShapeMismatch(format!(
                    "expected {num_classes} class scores, got {}",
                    p.class_scores.len()
                )));
            }
            if t.class_id > num_classes {
                return Err(LossError::ShapeMismatch(format!(
                    "target class {} exceeds {num_classes} classes",
                    t.class_id
                )));
            }
        }
    }

    let n_pos: usize = targets.iter().map(LevelTargets::num_positive).sum();
    let norm = Normalizers::new(n_pos);

    let mut parts = Vec::new();
    let mut grads = Vec::with_capacity(preds.len());
    for (lp, lt) in preds.iter().zip(targets) {
        let mut level_grads = Vec::with_capacity(lp.preds.len());
        for (p, t) in lp.preds.iter().zip(&lt.targets) {
            let terms = location_terms(p, t, w, &norm)?;
            parts.push([terms.cls, terms.reg, terms.ori]);
            level_grads.push(terms.grad);
        }
        grads.push(level_grads);
    }
    Ok(LossOutput {
        breakdown: sum_breakdown(&parts, w, n_pos),
        grads,
    })
}

/// Adds per-location `[cls, reg, ori]` in order and applies the weights.
pub(crate) fn sum_breakdown(parts: &[[f64; 3]], w: &LossWeights, n_pos: usize) -> LossBreakdown {
    let (mut cls, mut reg, mut ori) = (0.0, 0.0, 0.0);
    for [c, r, o] in parts {
        cls += c;
        reg += r;
        ori += o;
    }
    LossBreakdown {
        total: (cls + w.lambda * reg + w.omega * ori) * Normalizers::new(n_pos).pos,
        cls,
        reg,
        ori,
        n_pos,
        m: n_pos.max(1),
    }
}

/// `1/M` for the focal sum and `1/max(N_pos, 1)` for the whole objective.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Normalizers {
    inv_m: f64,
    pos: f64,
}

impl Normalizers {
    pub(crate) fn new(n_pos: usize) -> Self {
        let clamped = n_pos.max(1) as f64;
        Self {
            inv_m: 1.0 / clamped,
            pos: 1.0 / clamped,
        }
    }
}

/// One location's share of the objective.
pub(crate) struct LocationTerms {
    pub cls: f64,
    pub reg: f64,
    pub ori: f64,
    /// Gradient of the location's contribution to the total loss.
    pub grad: PredictionGrad,
}

impl LocationTerms {
    /// Contribution to the total loss.
    pub(crate) fn weighted(&self, w: &LossWeights, norm: &Normalizers) -> f64 {
        (self.cls + w.lambda * self.reg + w.omega * self.ori) * norm.pos
    }
}

pub(crate) fn location_terms(
    p: &Prediction,
    t: &RegressionTarget,
    w: &LossWeights,
    norm: &Normalizers,
) -> Result<LocationTerms, LossError> {
    let mut grad = PredictionGrad {
        class_scores: vec![0.0; p.class_scores.len()],
        ..Default::default()
    };
    let mut cls = 0.0;
    for (k, &score) in p.class_scores.iter().enumerate() {
        check_score(score)?;
        let y = if t.class_id == k + 1 { 1.0 } else { 0.0 };
        let (v, d) = focal_term(score, y, w.alpha, w.beta);
        cls -= v * norm.inv_m;
        grad.class_scores[k] = -d * norm.inv_m * norm.pos;
    }
    let (mut reg, mut ori) = (0.0, 0.0);
    if let Some(pos) = &t.positive {
        let (c_loss, c_grad) = bce(p.centerness, pos.centerness)?;
        let (sl_b, g_sl_b) = smooth_l1(&p.ltrb, &pos.ltrb, SMOOTH_L1_DELTA)?;
        let (iou_b, g_iou_b) = iou_hbb_loss(&p.ltrb, &pos.ltrb)?;
        reg = c_loss + w.lambda_reg * sl_b + iou_b;

        let (sl_o, g_sl_o) = smooth_l1(&p.wh, &pos.wh, SMOOTH_L1_DELTA)?;
        let (iou_o, (g_iou_o_ltrb, g_iou_o_wh)) =
            match iou_obb_loss(&p.ltrb, &p.wh, &pos.ltrb, &pos.wh) {
                Ok(v) => v,
                Err(LossError::DegenerateInner) => (1.0, ([0.0; 4], [0.0; 2])),
                Err(e) => return Err(e),
            };
        ori = w.lambda_ori * sl_o + iou_o;

        let sr = w.lambda * norm.pos;
        let so = w.omega * norm.pos;
        grad.centerness = sr * c_grad;
        for k in 0..4 {
            grad.ltrb[k] = sr * (w.lambda_reg * g_sl_b[k] + g_iou_b[k]) + so * g_iou_o_ltrb[k];
        }
        for k in 0..2 {
            grad.wh[k] = so * (w.lambda_ori * g_sl_o[k] + g_iou_o_wh[k]);
        }
    }
    Ok(LocationTerms {
        cls,
        reg,
        ori,
        grad,
    })
}
