use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use masklift::labels::DEFAULT_ETA;
use masklift::lift::DEFAULT_OVERLAP_THRESHOLD;
use masklift::losses::{LossWeights, DEFAULT_LOG_ZERO};
use masklift::reliability::{
    AugmentRanges, KnnConfig, StackConfig, DEFAULT_AUGMENTATIONS, DEFAULT_KAPPA, DEFAULT_TAU,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_N_VIEW: usize = 5;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("config schema_version {found} is not supported (expected {SCHEMA_VERSION})")]
    Schema { found: u32 },
    #[error("invalid {field}: {msg}")]
    Invalid { field: &'static str, msg: String },
}

fn invalid(field: &'static str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        msg: msg.into(),
    }
}

/// Everything a pipeline run depends on. Reports echo it verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub scenes: Vec<PathBuf>,
    pub out: PathBuf,
    pub n_view: usize,
    /// Depth tolerance in meters; `null` takes each scene's `delta_depth`.
    pub delta: Option<f64>,
    pub theta: f64,
    pub tau: f64,
    pub kappa: f64,
    pub augmentations: usize,
    pub eta: f64,
    pub knn: KnnConfig,
    pub augment: AugmentRanges,
    pub aug_seed: u64,
    pub weights: LossWeights,
    pub log_zero: f64,
    /// Precomputed prediction stack inside each scene directory, used in
    /// place of the nearest-seed predictor.
    pub stack_file: Option<String>,
    pub write_stack: bool,
    pub eta_sweep: Vec<f64>,
    /// Worker threads; 0 lets the runtime decide.
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            scenes: Vec::new(),
            out: PathBuf::from("out"),
            n_view: DEFAULT_N_VIEW,
            delta: None,
            theta: DEFAULT_OVERLAP_THRESHOLD,
            tau: DEFAULT_TAU,
            kappa: DEFAULT_KAPPA,
            augmentations: DEFAULT_AUGMENTATIONS,
            eta: DEFAULT_ETA,
            knn: KnnConfig::default(),
            augment: AugmentRanges::default(),
            aug_seed: 0,
            weights: LossWeights::default(),
            log_zero: DEFAULT_LOG_ZERO,
            stack_file: None,
            write_stack: false,
            eta_sweep: vec![0.3, 0.5, 0.7, 0.9],
            jobs: 0,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: Self = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(cfg)
    }

    pub fn stack_config(&self) -> StackConfig {
        StackConfig {
            augmentations: self.augmentations,
            aug_seed: self.aug_seed,
            knn: self.knn,
            ranges: self.augment,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Schema {
                found: self.schema_version,
            });
        }
        if self.n_view == 0 {
            return Err(invalid("n_view", "must be at least 1"));
        }
        if let Some(d) = self.delta {
            if !(d > 0.0 && d.is_finite()) {
                return Err(invalid("delta", format!("must be positive, got {d}")));
            }
        }
        if !(self.theta >= 0.0 && self.theta.is_finite()) {
            return Err(invalid("theta", format!("must be >= 0, got {}", self.theta)));
        }
        if self.tau.is_nan() {
            return Err(invalid("tau", "is NaN"));
        }
        if !(self.kappa >= 0.0) {
            return Err(invalid("kappa", format!("must be >= 0, got {}", self.kappa)));
        }
        if self.augmentations == 0 {
            return Err(invalid("augmentations", "must be at least 1"));
        }
        for &eta in std::iter::once(&self.eta).chain(&self.eta_sweep) {
            if !(0.0..=1.0).contains(&eta) {
                return Err(invalid("eta", format!("must lie in [0, 1], got {eta}")));
            }
        }
        if self.knn.k == 0 {
            return Err(invalid("knn.k", "must be at least 1"));
        }
        if !(self.knn.temperature > 0.0 && self.knn.temperature.is_finite()) {
            return Err(invalid("knn.temperature", "must be positive"));
        }
        let a = &self.augment;
        if !(0.5 <= a.scale_min && a.scale_min <= a.scale_max && a.scale_max <= 2.0) {
            return Err(invalid("augment", "scale range must lie in [0.5, 2.0]"));
        }
        if !(a.max_rotation_deg >= 0.0 && a.max_translation >= 0.0 && a.jitter_sigma >= 0.0) {
            return Err(invalid("augment", "ranges must be non-negative"));
        }
        self.weights
            .validate()
            .map_err(|e| invalid("weights", e.to_string()))?;
        if !self.log_zero.is_finite() {
            return Err(invalid("log_zero", "must be finite"));
        }
        let mut ids = BTreeSet::new();
        for s in &self.scenes {
            if !ids.insert(scene_id(s)) {
                return Err(invalid("scenes", format!("duplicate scene name {}", scene_id(s))));
            }
        }
        Ok(())
    }
}

/// Output subdirectory name for a scene.
pub fn scene_id(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.to_string_lossy().into_owned())
}
