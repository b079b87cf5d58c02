//! Channel self-attention that lets the classification and regression branches
//! inform the orientation branch.
//!
//! The merged features `F` (N channels × W·H positions) are projected by three
//! bias-free 1×1 convolutions, i.e. N×N matrices acting on the channel axis.
//! `Ξ = (Wf·F)(Wg·F)ᵀ` sums over positions, `Υ[q][p] = softmax_p(Ξ[p][q])`, and
//! the output is `γ·Υ·(Wh·F) + F`.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

/// Scale applied to standard-normal draws in [`AttentionWeights::random`].
pub const INIT_SCALE: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("feature map dimensions must be positive, got {channels}x{width}x{height}")]
    EmptyShape {
        channels: usize,
        width: usize,
        height: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// `channels × (width · height)` matrix; column `y · width + x` holds position `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    values: DMatrix<f64>,
}

impl FeatureMap {
    /// `values` is row-major: all positions of channel 0, then channel 1, ...
    pub fn new(
        channels: usize,
        width: usize,
        height: usize,
        values: &[f64],
    ) -> Result<Self, AttentionError> {
        if channels == 0 || width == 0 || height == 0 {
            return Err(AttentionError::EmptyShape {
                channels,
                width,
                height,
            });
        }
        if values.len() != channels * width * height {
            return Err(AttentionError::ShapeMismatch(format!(
                "{} values for a {channels}x{width}x{height} map",
                values.len()
            )));
        }
        Self::from_matrix(
            width,
            height,
            DMatrix::from_row_slice(channels, width * height, values),
        )
    }

    pub fn from_matrix(
        width: usize,
        height: usize,
        values: DMatrix<f64>,
    ) -> Result<Self, AttentionError> {
        let channels = values.nrows();
        if channels == 0 || width == 0 || height == 0 {
            return Err(AttentionError::EmptyShape {
                channels,
                width,
                height,
            });
        }
        if values.ncols() != width * height {
            return Err(AttentionError::ShapeMismatch(format!(
                "{} columns for a {width}x{height} grid",
                values.ncols()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(AttentionError::NonFinite("feature map"));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn zeros(channels: usize, width: usize, height: usize) -> Result<Self, AttentionError> {
        Self::from_matrix(width, height, DMatrix::zeros(channels, width * height))
    }

    pub fn channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn get(&self, channel: usize, x: usize, y: usize) -> f64 {
        self.values[(channel, y * self.width + x)]
    }

    fn same_shape(&self, other: &Self) -> Result<(), AttentionError> {
        if (self.channels(), self.width, self.height)
            != (other.channels(), other.width, other.height)
        {
            return Err(AttentionError::ShapeMismatch(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.channels(),
                self.width,
                self.height,
                other.channels(),
                other.width,
                other.height
            )));
        }
        Ok(())
    }

    fn with_values(&self, values: DMatrix<f64>) -> Result<Self, AttentionError> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(AttentionError::NonFinite("attention output"));
        }
        Ok(Self {
            width: self.width,
            height: self.height,
            values,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub wf: DMatrix<f64>,
    pub wg: DMatrix<f64>,
    pub wh: DMatrix<f64>,
    pub gamma: f64,
}

impl AttentionWeights {
    pub fn new(
        wf: DMatrix<f64>,
        wg: DMatrix<f64>,
        wh: DMatrix<f64>,
        gamma: f64,
    ) -> Result<Self, AttentionError> {
        let n = wf.nrows();
        for (name, m) in [("wf", &wf), ("wg", &wg), ("wh", &wh)] {
            if m.shape() != (n, n) {
                return Err(AttentionError::ShapeMismatch(format!(
                    "{name} is {}x{}, expected {n}x{n}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if !m.iter().all(|v| v.is_finite()) {
                return Err(AttentionError::NonFinite(name));
            }
        }
        if !gamma.is_finite() {
            return Err(AttentionError::NonFinite("gamma"));
        }
        Ok(Self { wf, wg, wh, gamma })
    }

    /// Identity projections with `γ = 1`.
    pub fn identity(channels: usize) -> Self {
        let eye = DMatrix::identity(channels, channels);
        Self {
            wf: eye.clone(),
            wg: eye.clone(),
            wh: eye,
            gamma: 1.0,
        }
    }

    /// Seeded standard-normal draws scaled by [`INIT_SCALE`], `γ = 1`.
    pub fn random(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || {
            DMatrix::from_fn(channels, channels, |_, _| {
                INIT_SCALE
                    * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            })
        };
        let (wf, wg, wh) = (draw(), draw(), draw());
        Self {
            wf,
            wg,
            wh,
            gamma: 1.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.wf.nrows()
    }

    fn check(&self, f: &FeatureMap) -> Result<(), AttentionError> {
        if self.channels() != f.channels() {
            return Err(AttentionError::ShapeMismatch(format!(
                "weights for {} channels applied to {} channels",
                self.channels(),
                f.channels()
            )));
        }
        Ok(())
    }
}

/// `N × N` table whose row `q` is a probability distribution over channels `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    upsilon: DMatrix<f64>,
}

impl AttentionMap {
    /// Normalizes each column of `xi`, so `Υ[q][p] = exp(Ξ[p][q]) / Σ_p exp(Ξ[p][q])`.
    ///
    /// The column maximum is subtracted before exponentiating.
    pub fn from_logits(xi: &DMatrix<f64>) -> Result<Self, AttentionError> {
        if !xi.is_square() || xi.nrows() == 0 {
            return Err(AttentionError::ShapeMismatch(format!(
                "logits must be square and non-empty, got {}x{}",
                xi.nrows(),
                xi.ncols()
            )));
        }
        if !xi.iter().all(|v| v.is_finite()) {
            return Err(AttentionError::NonFinite("attention logits"));
        }
        let n = xi.nrows();
        let mut upsilon = DMatrix::zeros(n, n);
        for q in 0..n {
            let column = xi.column(q);
            let max = column.max();
            let exps: Vec<f64> = column.iter().map(|&v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (p, e) in exps.into_iter().enumerate() {
                upsilon[(q, p)] = e / sum;
            }
        }
        Ok(Self { upsilon })
    }

    /// Uses `upsilon` as given; rows must be distributions.
    pub fn from_table(upsilon: DMatrix<f64>) -> Result<Self, AttentionError> {
        if !upsilon.is_square() || upsilon.nrows() == 0 {
            return Err(AttentionError::ShapeMismatch(
                "attention table must be square".into(),
            ));
        }
        for row in upsilon.row_iter() {
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (row.sum() - 1.0).abs() > 1e-6 {
                return Err(AttentionError::ShapeMismatch(
                    "attention rows must be distributions".into(),
                ));
            }
        }
        Ok(Self { upsilon })
    }

    pub fn table(&self) -> &DMatrix<f64> {
        &self.upsilon
    }
}

pub fn merge(cls_feat: &FeatureMap, reg_feat: &FeatureMap) -> Result<FeatureMap, AttentionError> {
    cls_feat.same_shape(reg_feat)?;
    cls_feat.with_values(&cls_feat.values + &reg_feat.values)
}

/// `Ξ = (Wf·F)(Wg·F)ᵀ`, summed over spatial positions.
pub fn attention_logits(
    f: &FeatureMap,
    w: &AttentionWeights,
) -> Result<DMatrix<f64>, AttentionError> {
    w.check(f)?;
    let xi = (&w.wf * &f.values) * (&w.wg * &f.values).transpose();
    if !xi.iter().all(|v| v.is_finite()) {
        return Err(AttentionError::NonFinite("attention logits"));
    }
    Ok(xi)
}

pub fn attention_map(f: &FeatureMap, w: &AttentionWeights) -> Result<AttentionMap, AttentionError> {
    AttentionMap::from_logits(&attention_logits(f, w)?)
}

/// `γ·Υ·(Wh·F) + F` for a given attention table.
pub fn attend_with(
    f: &FeatureMap,
    map: &AttentionMap,
    w: &AttentionWeights,
) -> Result<FeatureMap, AttentionError> {
    w.check(f)?;
    if map.upsilon.nrows() != f.channels() {
        return Err(AttentionError::ShapeMismatch(format!(
            "{}x{} attention for {} channels",
            map.upsilon.nrows(),
            map.upsilon.ncols(),
            f.channels()
        )));
    }
    if w.gamma == 0.0 {
        return Ok(f.clone());
    }
    let theta = &map.upsilon * (&w.wh * &f.values);
    f.with_values(theta * w.gamma + &f.values)
}

pub fn attend(f: &FeatureMap, w: &AttentionWeights) -> Result<FeatureMap, AttentionError> {
    attend_with(f, &attention_map(f, w)?, w)
}

/// `attend(merge(cls, reg)) + ori`.
pub fn ie_fuse(
    cls_feat: &FeatureMap,
    reg_feat: &FeatureMap,
    ori_feat: &FeatureMap,
    w: &AttentionWeights,
) -> Result<FeatureMap, AttentionError> {
    let merged = merge(cls_feat, reg_feat)?;
    merged.same_shape(ori_feat)?;
    let attended = attend(&merged, w)?;
    attended.with_values(&attended.values + &ori_feat.values)
}
