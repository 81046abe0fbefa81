//! Flat `key = value` run configuration.
//!
//! Every key has a default; a config file may set any subset, and the CLI
//! exposes each key as a same-named `--flag`. Lines starting with `#` are
//! comments.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::affine::RansacConfig;
use crate::bspline::OptimizerConfig;
use crate::error::{Error, Result};
use crate::matching::{default_angles, DetectorConfig};
use crate::metrics::DEFAULT_PIXEL_SIZE_UM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferencePolicy {
    First,
    Middle,
}

impl ReferencePolicy {
    pub fn index(self, n: usize) -> usize {
        match self {
            ReferencePolicy::First => 0,
            ReferencePolicy::Middle => (n.max(1) - 1) / 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub detector: DetectorConfig,
    pub match_ratio: f64,
    pub rotation_angles: Vec<f64>,
    pub ransac: RansacConfig,
    pub bspline_enabled: bool,
    pub bspline_spacing: f64,
    pub optimizer: OptimizerConfig,
    pub reference: ReferencePolicy,
    pub spacing: [f64; 3],
    pub spacing_unit: String,
    pub pixel_size_um: f64,
    pub legacy_two_pass: bool,
    pub raw_volume: bool,
    /// Worker threads for pair registration; 0 picks the machine default.
    /// Not echoed into manifests: results do not depend on it.
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            match_ratio: 0.9,
            rotation_angles: default_angles(15.0),
            ransac: RansacConfig::default(),
            bspline_enabled: true,
            bspline_spacing: 32.0,
            optimizer: OptimizerConfig::default(),
            reference: ReferencePolicy::First,
            spacing: [1.0, 1.0, 8.0],
            spacing_unit: "mm".into(),
            pixel_size_um: DEFAULT_PIXEL_SIZE_UM,
            legacy_two_pass: false,
            raw_volume: false,
            workers: 0,
        }
    }
}

/// Name and one-line description of every configuration key.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("detector-max-keypoints", "keep at most this many keypoints per image"),
    ("detector-levels", "pyramid levels of the corner detector"),
    ("detector-nms-radius", "non-maximum suppression radius in pixels"),
    ("detector-harris-k", "Harris cornerness constant"),
    ("detector-threshold", "corner threshold relative to the strongest response"),
    ("match-ratio", "ratio-test bound on cosine distances, in (0, 1]"),
    ("rotation-angles", "comma-separated sweep angles in degrees"),
    ("ransac-iterations", "RANSAC iterations"),
    ("ransac-threshold", "RANSAC inlier threshold in pixels"),
    ("ransac-min-inliers", "smallest accepted consensus set"),
    ("ransac-seed", "RANSAC random seed"),
    ("bspline", "run the B-spline stage (true/false)"),
    ("bspline-spacing", "control-point spacing in pixels"),
    ("bspline-lambda", "regularization weight"),
    ("bspline-alpha", "step size in pixels"),
    ("bspline-max-iterations", "iteration cap of the descent"),
    ("bspline-epsilon", "stop when the loss changes by less than this"),
    ("bspline-window-radius", "NCC window half-width in pixels"),
    ("bspline-stride", "spacing of NCC window centres in pixels"),
    ("bspline-normalize-gradient", "max-norm gradient normalization (true/false)"),
    ("bspline-backtracking", "halve the step on loss increase (true/false)"),
    ("bspline-max-halvings", "step halvings allowed per iteration"),
    ("reference", "reference slice policy: first or middle"),
    ("spacing", "voxel spacing sx,sy,sz"),
    ("spacing-unit", "unit label of the voxel spacing"),
    ("pixel-size-um", "in-plane pixel size in micrometres"),
    ("fill", "intensity used outside image bounds"),
    ("legacy-two-pass", "export with two resampling passes (true/false)"),
    ("raw-volume", "also write an 8-bit raw volume (true/false)"),
    ("workers", "worker threads, 0 for all cores"),
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            parse::<f64>(key, s).and_then(|v| {
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::Config(format!("non-finite value in `{key}`")))
                }
            })
        })
        .collect()
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let o = &mut self.optimizer;
        match key {
            "detector-max-keypoints" => self.detector.max_keypoints = parse(key, value)?,
            "detector-levels" => self.detector.levels = parse(key, value)?,
            "detector-nms-radius" => self.detector.nms_radius = parse(key, value)?,
            "detector-harris-k" => self.detector.harris_k = parse(key, value)?,
            "detector-threshold" => self.detector.relative_threshold = parse(key, value)?,
            "match-ratio" => self.match_ratio = parse(key, value)?,
            "rotation-angles" => self.rotation_angles = parse_list(key, value)?,
            "ransac-iterations" => self.ransac.max_iterations = parse(key, value)?,
            "ransac-threshold" => self.ransac.inlier_threshold = parse(key, value)?,
            "ransac-min-inliers" => self.ransac.min_inliers = parse(key, value)?,
            "ransac-seed" => self.ransac.seed = parse(key, value)?,
            "bspline" => self.bspline_enabled = parse_bool(key, value)?,
            "bspline-spacing" => self.bspline_spacing = parse(key, value)?,
            "bspline-lambda" => o.lambda = parse(key, value)?,
            "bspline-alpha" => o.alpha = parse(key, value)?,
            "bspline-max-iterations" => o.max_iterations = parse(key, value)?,
            "bspline-epsilon" => o.epsilon = parse(key, value)?,
            "bspline-window-radius" => o.ncc_window_radius = parse(key, value)?,
            "bspline-stride" => o.sample_stride = parse(key, value)?,
            "bspline-normalize-gradient" => o.normalize_gradient = parse_bool(key, value)?,
            "bspline-backtracking" => o.backtracking = parse_bool(key, value)?,
            "bspline-max-halvings" => o.max_halvings = parse(key, value)?,
            "reference" => {
                self.reference = match value.trim() {
                    "first" => ReferencePolicy::First,
                    "middle" => ReferencePolicy::Middle,
                    other => {
                        return Err(Error::Config(format!(
                            "reference must be `first` or `middle`, got `{other}`"
                        )))
                    }
                }
            }
            "spacing" => {
                let v = parse_list(key, value)?;
                if v.len() != 3 {
                    return Err(Error::Config("spacing needs three values sx,sy,sz".into()));
                }
                self.spacing = [v[0], v[1], v[2]];
            }
            "spacing-unit" => self.spacing_unit = value.trim().to_string(),
            "pixel-size-um" => self.pixel_size_um = parse(key, value)?,
            "fill" => o.fill = parse(key, value)?,
            "legacy-two-pass" => self.legacy_two_pass = parse_bool(key, value)?,
            "raw-volume" => self.raw_volume = parse_bool(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let o = &self.optimizer;
        Some(match key {
            "detector-max-keypoints" => self.detector.max_keypoints.to_string(),
            "detector-levels" => self.detector.levels.to_string(),
            "detector-nms-radius" => self.detector.nms_radius.to_string(),
            "detector-harris-k" => self.detector.harris_k.to_string(),
            "detector-threshold" => self.detector.relative_threshold.to_string(),
            "match-ratio" => self.match_ratio.to_string(),
            "rotation-angles" => fmt_list(&self.rotation_angles),
            "ransac-iterations" => self.ransac.max_iterations.to_string(),
            "ransac-threshold" => self.ransac.inlier_threshold.to_string(),
            "ransac-min-inliers" => self.ransac.min_inliers.to_string(),
            "ransac-seed" => self.ransac.seed.to_string(),
            "bspline" => self.bspline_enabled.to_string(),
            "bspline-spacing" => self.bspline_spacing.to_string(),
            "bspline-lambda" => o.lambda.to_string(),
            "bspline-alpha" => o.alpha.to_string(),
            "bspline-max-iterations" => o.max_iterations.to_string(),
            "bspline-epsilon" => o.epsilon.to_string(),
            "bspline-window-radius" => o.ncc_window_radius.to_string(),
            "bspline-stride" => o.sample_stride.to_string(),
            "bspline-normalize-gradient" => o.normalize_gradient.to_string(),
            "bspline-backtracking" => o.backtracking.to_string(),
            "bspline-max-halvings" => o.max_halvings.to_string(),
            "reference" => match self.reference {
                ReferencePolicy::First => "first".into(),
                ReferencePolicy::Middle => "middle".into(),
            },
            "spacing" => fmt_list(&self.spacing),
            "spacing-unit" => self.spacing_unit.clone(),
            "pixel-size-um" => self.pixel_size_um.to_string(),
            "fill" => o.fill.to_string(),
            "legacy-two-pass" => self.legacy_two_pass.to_string(),
            "raw-volume" => self.raw_volume.to_string(),
            "workers" => self.workers.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: idx + 1,
                message: "expected `key = value`".into(),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: idx + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key except `workers`, in declaration order.
    pub fn echo(&self) -> Vec<(String, String)> {
        CONFIG_KEYS
            .iter()
            .filter(|(k, _)| *k != "workers")
            .map(|(k, _)| (k.to_string(), self.get(k).expect("declared key")))
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.echo()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.ransac.validate()?;
        if !(self.match_ratio > 0.0 && self.match_ratio <= 1.0) {
            return Err(Error::Config(format!("match-ratio must be in (0, 1], got {}", self.match_ratio)));
        }
        if self.rotation_angles.is_empty() {
            return Err(Error::Config("rotation-angles must not be empty".into()));
        }
        if !self.rotation_angles.iter().any(|a| a.rem_euclid(360.0) == 0.0) {
            return Err(Error::Config("rotation-angles must include 0".into()));
        }
        if !(self.bspline_spacing >= 4.0) || !self.bspline_spacing.is_finite() {
            return Err(Error::Config("bspline-spacing must be >= 4 pixels".into()));
        }
        if self.spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Config("spacing values must be positive".into()));
        }
        if !(self.pixel_size_um > 0.0) || !self.pixel_size_um.is_finite() {
            return Err(Error::Config("pixel-size-um must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.optimizer.fill) {
            return Err(Error::Config("fill must lie in [0, 1]".into()));
        }
        if self.detector.max_keypoints < 4 || self.detector.levels == 0 {
            return Err(Error::Config("detector needs max-keypoints >= 4 and levels >= 1".into()));
        }
        Ok(())
    }
}
