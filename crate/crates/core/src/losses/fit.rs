//! Gradient descent on free per-location predictions.
//!
//! No network is involved: every location owns its class logits, centerness
//! logit and box parameters directly. Scores go through a sigmoid, box offsets
//! are `stride · exp(u)` and orientation offsets `stride · v`, so the optimizer
//! works on unconstrained values of order one at every pyramid level.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::smooth_l1;
use super::{
    location_terms, sum_breakdown, total_loss, LevelPredictions, LossBreakdown, LossError,
    LossWeights, Normalizers, Prediction, PredictionGrad, SMOOTH_L1_DELTA,
};
use crate::geometry::Quad;
use crate::inference::decode_location;
use crate::targets::{LevelTargets, RegressionTarget};

/// Step halvings tried before a location is left unchanged for one iteration.
const MAX_HALVINGS: usize = 30;

/// Logits are kept inside this range so probabilities stay strictly in (0, 1).
const LOGIT_LIMIT: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Half-width of the uniform perturbation added to the neutral start.
    pub init_jitter: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 0.05,
            seed: 0,
            init_jitter: 0.01,
        }
    }
}

/// Final decoded box at one positive location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitLocation {
    pub level: usize,
    pub x_s: usize,
    pub y_s: usize,
    pub object: usize,
    pub class_id: usize,
    /// Fused class × centerness score of the assigned class.
    pub score: f64,
    pub quad: Quad,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    /// Loss before every step, plus the final loss (`steps + 1` entries).
    pub trajectory: Vec<LossBreakdown>,
    pub locations: Vec<FitLocation>,
}

#[derive(Clone)]
struct Params {
    logits: Vec<f64>,
    ctr: f64,
    u: [f64; 4],
    v: [f64; 2],
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn to_prediction(p: &Params, stride: f64) -> Prediction {
    Prediction {
        class_scores: p.logits.iter().map(|&z| sigmoid(z)).collect(),
        centerness: sigmoid(p.ctr),
        ltrb: p.u.map(|u| stride * u.exp()),
        wh: p.v.map(|v| stride * v),
    }
}

/// Which parameters a trial step moves.
#[derive(Clone, Copy)]
enum Block {
    Scores,
    Offsets,
    Orientation,
    Coord(usize),
    /// All box values along the smooth-L1 gradient alone.
    Anchor,
}

fn trial_step(
    p: &Params,
    pred: &Prediction,
    g: &PredictionGrad,
    anchor: &PredictionGrad,
    stride: f64,
    step: f64,
    block: Block,
) -> Params {
    let mut trial = p.clone();
    let moves = |k: usize| match block {
        Block::Scores => false,
        Block::Offsets => k < 4,
        Block::Orientation => k >= 4,
        Block::Coord(j) => j == k,
        Block::Anchor => true,
    };
    let g = if matches!(block, Block::Anchor) {
        anchor
    } else {
        g
    };
    if matches!(block, Block::Scores) {
        for (k, z) in trial.logits.iter_mut().enumerate() {
            let s = pred.class_scores[k];
            *z = (*z - step * g.class_scores[k] * s * (1.0 - s)).clamp(-LOGIT_LIMIT, LOGIT_LIMIT);
        }
        let c = pred.centerness;
        trial.ctr =
            (trial.ctr - step * g.centerness * c * (1.0 - c)).clamp(-LOGIT_LIMIT, LOGIT_LIMIT);
    }
    for k in (0..4).filter(|&k| moves(k)) {
        trial.u[k] -= step * g.ltrb[k] * pred.ltrb[k];
    }
    for k in (0..2).filter(|&k| moves(4 + k)) {
        trial.v[k] -= step * g.wh[k] * stride;
    }
    trial
}

/// One backtracking gradient step on a single location's parameters; returns
/// the location's `[cls, reg, ori]` before the step.
///
/// The location's contribution to the total loss only depends on its own
/// parameters, so accepting a step only when that contribution does not grow
/// keeps the whole trajectory non-increasing. Scores, box offsets and
/// orientation offsets are stepped as separate blocks. The IoU terms have
/// kinks where a predicted offset meets its target; there a block direction
/// can fail for every step size, so its coordinates are then tried one by one,
/// and finally all box values together along the smooth-L1 direction, which
/// points straight at the target.
fn descend(
    p: &mut Params,
    t: &RegressionTarget,
    stride: f64,
    weights: &LossWeights,
    norm: &Normalizers,
    lr: f64,
) -> Result<[f64; 3], LossError> {
    let pred = to_prediction(p, stride);
    let terms = location_terms(&pred, t, weights, norm)?;
    let start = [terms.cls, terms.reg, terms.ori];
    if lr == 0.0 {
        return Ok(start);
    }
    let mut current = terms.weighted(weights, norm);
    let g = terms.grad;
    // Each location is an independent block of the objective, so its step is
    // taken on the location's own loss rather than its 1/N_pos share.
    let base = lr / norm.pos;
    let mut anchor = PredictionGrad::default();
    if let Some(pos) = &t.positive {
        let (_, gb) = smooth_l1(&pred.ltrb, &pos.ltrb, SMOOTH_L1_DELTA)?;
        let (_, go) = smooth_l1(&pred.wh, &pos.wh, SMOOTH_L1_DELTA)?;
        anchor.ltrb.copy_from_slice(&gb);
        anchor.wh.copy_from_slice(&go);
    }

    let mut try_block = |p: &mut Params, block: Block| -> Result<bool, LossError> {
        let mut step = base;
        for _ in 0..MAX_HALVINGS {
            let trial = trial_step(p, &pred, &g, &anchor, stride, step, block);
            let value = location_terms(&to_prediction(&trial, stride), t, weights, norm)?
                .weighted(weights, norm);
            if value <= current {
                let improved = value < current;
                *p = trial;
                current = value;
                return Ok(improved);
            }
            step *= 0.5;
        }
        Ok(false)
    };
    try_block(p, Block::Scores)?;
    if t.positive.is_none() {
        return Ok(start);
    }
    let mut moved = false;
    for (block, coords) in [(Block::Offsets, 0..4), (Block::Orientation, 4..6)] {
        if try_block(p, block)? {
            moved = true;
            continue;
        }
        for k in coords {
            moved |= try_block(p, Block::Coord(k))?;
        }
    }
    if !moved {
        try_block(p, Block::Anchor)?;
    }
    Ok(start)
}

/// Fits free predictions to `targets` by gradient descent on the total loss.
///
/// Each iteration takes one backtracking step per location (see `descend`), so
/// the recorded loss never increases. Locations are updated in parallel; they
/// do not interact, so the result does not depend on the thread count.
pub fn fit_demo(
    targets: &[LevelTargets],
    num_classes: usize,
    weights: &LossWeights,
    config: &FitConfig,
) -> Result<FitResult, LossError> {
    if targets.iter().all(|l| l.num_positive() == 0) {
        return Err(LossError::ShapeMismatch(
            "fit needs at least one positive location".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let jitter = |rng: &mut ChaCha8Rng| {
        if config.init_jitter > 0.0 {
            rng.random_range(-config.init_jitter..config.init_jitter)
        } else {
            0.0
        }
    };
    let mut params: Vec<Vec<Params>> = targets
        .iter()
        .map(|l| {
            (0..l.targets.len())
                .map(|_| Params {
                    logits: (0..num_classes).map(|_| jitter(&mut rng)).collect(),
                    ctr: jitter(&mut rng),
                    u: [(); 4].map(|_| jitter(&mut rng)),
                    v: [(); 2].map(|_| jitter(&mut rng)),
                })
                .collect()
        })
        .collect();

    let build = |params: &[Vec<Params>]| -> Vec<LevelPredictions> {
        targets
            .iter()
            .zip(params)
            .map(|(l, ps)| LevelPredictions {
                spec: l.spec,
                preds: ps
                    .iter()
                    .map(|p| to_prediction(p, l.spec.stride as f64))
                    .collect(),
            })
            .collect()
    };

    let n_pos = targets.iter().map(LevelTargets::num_positive).sum();
    let norm = Normalizers::new(n_pos);
    let mut trajectory = Vec::with_capacity(config.steps + 1);
    for step in 0..config.steps {
        let mut parts = Vec::with_capacity(params.iter().map(Vec::len).sum());
        for (ps, lt) in params.iter_mut().zip(targets) {
            let stride = lt.spec.stride as f64;
            let level: Vec<[f64; 3]> = ps
                .par_iter_mut()
                .zip(&lt.targets)
                .map(|(p, t)| descend(p, t, stride, weights, &norm, config.lr))
                .collect::<Result<_, _>>()?;
            parts.extend(level);
        }
        let b = sum_breakdown(&parts, weights, n_pos);
        if !b.total.is_finite() {
            return Err(LossError::Diverged { step });
        }
        trajectory.push(b);
    }
    let last = total_loss(&build(&params), targets, weights)?.breakdown;
    if !last.total.is_finite() {
        return Err(LossError::Diverged { step: config.steps });
    }
    trajectory.push(last);

    let preds = build(&params);
    let mut locations = Vec::new();
    for (lp, lt) in preds.iter().zip(targets) {
        for (pred, t) in lp.preds.iter().zip(&lt.targets) {
            let Some(pos) = &t.positive else { continue };
            let quad = decode_location(&lt.spec, t.x_s, t.y_s, &pred.ltrb, &pred.wh)
                .map_err(|e| LossError::ShapeMismatch(e.to_string()))?;
            locations.push(FitLocation {
                level: lt.spec.level,
                x_s: t.x_s,
                y_s: t.y_s,
                object: pos.object,
                class_id: t.class_id,
                score: pred.class_scores[t.class_id - 1] * pred.centerness,
                quad,
            });
        }
    }
    Ok(FitResult {
        trajectory,
        locations,
    })
}
