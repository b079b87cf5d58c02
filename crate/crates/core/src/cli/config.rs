//! Run configuration: defaults, overridden by a `key = value` file, overridden
//! by command-line flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::evaluation::ApMode;
use crate::inference::InferenceConfig;
use crate::losses::{FitConfig, LossWeights};
use crate::targets::{LevelRanges, DEFAULT_CENTER_RADIUS_MULT, DEFAULT_STRIDES};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{file}:{line}: {reason}")]
    Syntax {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {reason}")]
    BadValue { key: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub weights: LossWeights,
    pub inference: InferenceConfig,
    pub strides: Vec<usize>,
    pub ranges: LevelRanges,
    pub center_radius_mult: f64,
    pub mode: ApMode,
    pub iou_threshold: f64,
    pub seed: u64,
    pub threads: Option<usize>,
    pub steps: usize,
    pub lr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let fit = FitConfig::default();
        Self {
            weights: LossWeights::default(),
            inference: InferenceConfig::default(),
            strides: DEFAULT_STRIDES.to_vec(),
            ranges: LevelRanges::default(),
            center_radius_mult: DEFAULT_CENTER_RADIUS_MULT,
            mode: ApMode::default(),
            iou_threshold: 0.5,
            seed: fit.seed,
            threads: None,
            steps: fit.steps,
            lr: fit.lr,
        }
    }
}

/// Recognized keys, in the order they are documented.
pub const KEYS: [&str; 19] = [
    "lambda",
    "omega",
    "lambda_reg",
    "lambda_ori",
    "alpha",
    "beta",
    "score_threshold",
    "nms_iou_threshold",
    "max_detections",
    "nms",
    "strides",
    "level_ranges",
    "center_radius_mult",
    "mode",
    "iou_threshold",
    "seed",
    "threads",
    "steps",
    "lr",
];

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str, file: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let syntax = |reason: &str| ConfigError::Syntax {
            file: file.to_string(),
            line: i + 1,
            reason: reason.to_string(),
        };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| syntax("expected key = value"))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(syntax("empty key"));
        }
        if !KEYS.contains(&k) {
            return Err(ConfigError::UnknownKey(k.to_string()));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(syntax(&format!("duplicate key {k:?}")));
        }
    }
    Ok(out)
}

fn bad(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse()
        .map_err(|_| bad(key, format!("cannot parse {v:?}")))
}

fn non_negative(key: &str, v: &str) -> Result<f64, ConfigError> {
    let x: f64 = num(key, v)?;
    if !(x >= 0.0 && x.is_finite()) {
        return Err(bad(key, "must be a finite value >= 0"));
    }
    Ok(x)
}

/// `"8,16,32"`.
pub fn parse_strides(v: &str) -> Result<Vec<usize>, ConfigError> {
    let strides: Vec<usize> = v
        .split(',')
        .map(|s| num::<usize>("strides", s.trim()))
        .collect::<Result<_, _>>()?;
    if strides.is_empty() || strides.contains(&0) {
        return Err(bad("strides", "need at least one positive stride"));
    }
    Ok(strides)
}

/// Level boundaries `"64,128,256,512"`: ranges `(0,64], (64,128], …, (512,inf)`.
pub fn parse_ranges(v: &str) -> Result<LevelRanges, ConfigError> {
    let mut edges = vec![0.0];
    if !v.trim().is_empty() {
        for s in v.split(',') {
            edges.push(non_negative("level_ranges", s.trim())?);
        }
    }
    edges.push(f64::INFINITY);
    let ranges = edges.windows(2).map(|w| (w[0], w[1])).collect();
    LevelRanges::new(ranges).map_err(|e| bad("level_ranges", e.to_string()))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "lambda" => self.weights.lambda = non_negative(key, v)?,
            "omega" => self.weights.omega = non_negative(key, v)?,
            "lambda_reg" => self.weights.lambda_reg = non_negative(key, v)?,
            "lambda_ori" => self.weights.lambda_ori = non_negative(key, v)?,
            "alpha" => self.weights.alpha = non_negative(key, v)?,
            "beta" => self.weights.beta = non_negative(key, v)?,
            "score_threshold" => self.inference.score_threshold = non_negative(key, v)?,
            "nms_iou_threshold" => self.inference.nms_iou_threshold = non_negative(key, v)?,
            "max_detections" => self.inference.max_detections = num(key, v)?,
            "nms" => self.inference.nms = num(key, v)?,
            "strides" => self.strides = parse_strides(v)?,
            "level_ranges" => self.ranges = parse_ranges(v)?,
            "center_radius_mult" => self.center_radius_mult = non_negative(key, v)?,
            "mode" => {
                self.mode = v
                    .parse()
                    .map_err(|e: crate::evaluation::EvalError| bad(key, e.to_string()))?
            }
            "iou_threshold" => self.iou_threshold = non_negative(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "threads" => {
                let n: usize = num(key, v)?;
                if n == 0 {
                    return Err(bad(key, "must be >= 1"));
                }
                self.threads = Some(n);
            }
            "steps" => self.steps = num(key, v)?,
            "lr" => self.lr = non_negative(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn apply(&mut self, entries: &BTreeMap<String, String>) -> Result<(), ConfigError> {
        for (k, v) in entries {
            self.set(k, v)?;
        }
        self.check()
    }

    pub fn load(path: &Path) -> Result<BTreeMap<String, String>, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        parse_config_text(&text, &path.display().to_string())
    }

    /// Cross-field checks that single assignments cannot see.
    pub fn check(&self) -> Result<(), ConfigError> {
        if self.strides.len() != self.ranges.len() {
            return Err(bad(
                "level_ranges",
                format!(
                    "{} strides but {} level ranges",
                    self.strides.len(),
                    self.ranges.len()
                ),
            ));
        }
        self.inference
            .validate()
            .map_err(|e| bad("inference", e.to_string()))?;
        if self.iou_threshold > 1.0 {
            return Err(bad("iou_threshold", "must be in [0, 1]"));
        }
        Ok(())
    }
}
