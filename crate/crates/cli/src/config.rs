//! Experiment configuration file: JSON with sections dataset, split, noise,
//! schedule, train, metrics. Unknown keys are rejected and every module-level
//! invariant is revalidated on load, with errors naming the offending key.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use blv_core::{
    BlobSpecF64, ClampRule, FrequencySource, LossMode, NoiseFamily, NoiseSpecF64, ScheduleMode,
    SigmaScheduleF64, SplitSpec, TrainConfigF64, DEFAULT_IGNORE_INDEX,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: invalid JSON: {message}")]
    Json { path: String, message: String },
    #[error("config key {key_path}: {message}")]
    Schema { key_path: String, message: String },
    #[error("config key {key_path}: {message}")]
    Invalid { key_path: String, message: String },
    #[error("override `{expr}` is not of the form key.path=value")]
    BadOverride { expr: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub schedule: Option<ScheduleSection>,
    pub train: TrainSection,
    #[serde(default)]
    pub metrics: MetricsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default = "default_dims")]
    pub dims: usize,
    #[serde(default = "default_counts")]
    pub counts: Vec<u64>,
    /// Per-class means; defaults to evenly spaced points on the unit circle
    /// starting at 90 degrees (2-D only).
    #[serde(default)]
    pub means: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_stddev")]
    pub stddev: f64,
    #[serde(default)]
    pub seed: u64,
    /// Held-out set composition; defaults to 500 samples per class.
    #[serde(default)]
    pub eval_counts: Option<Vec<u64>>,
    /// Defaults to `seed + 1`.
    #[serde(default)]
    pub eval_seed: Option<u64>,
}

fn default_num_classes() -> usize {
    3
}
fn default_dims() -> usize {
    2
}
fn default_counts() -> Vec<u64> {
    vec![2000, 200, 20]
}
fn default_stddev() -> f64 {
    0.9
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            num_classes: default_num_classes(),
            dims: default_dims(),
            counts: default_counts(),
            means: None,
            stddev: default_stddev(),
            seed: 0,
            eval_counts: None,
            eval_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    #[serde(default = "default_fraction")]
    pub labeled_fraction: f64,
    #[serde(default = "default_split_seed")]
    pub seed: u64,
}

fn default_fraction() -> f64 {
    0.25
}
fn default_split_seed() -> u64 {
    1
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            labeled_fraction: default_fraction(),
            seed: default_split_seed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(default = "default_family")]
    pub family: NoiseFamily,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_alpha")]
    pub beta: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_clamp")]
    pub clamp_rule: ClampRule,
}

fn default_family() -> NoiseFamily {
    NoiseFamily::Gaussian
}
fn default_sigma() -> f64 {
    6.0
}
fn default_alpha() -> f64 {
    0.5
}
fn default_lambda() -> f64 {
    1.0
}
fn default_clamp() -> ClampRule {
    ClampRule::ClampRaw
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            family: default_family(),
            sigma: default_sigma(),
            alpha: default_alpha(),
            beta: default_alpha(),
            lambda: default_lambda(),
            clamp_rule: default_clamp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(default = "default_schedule_mode")]
    pub mode: ScheduleMode,
    /// Defaults to `noise.sigma`.
    #[serde(default)]
    pub sigma0: Option<f64>,
    #[serde(default = "default_t_mid")]
    pub t_mid: u64,
    #[serde(default = "default_t_end")]
    pub t_end: u64,
}

fn default_schedule_mode() -> ScheduleMode {
    ScheduleMode::Constant
}
fn default_t_mid() -> u64 {
    30_000
}
fn default_t_end() -> u64 {
    40_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_mode")]
    pub mode: LossMode,
    #[serde(default = "default_source")]
    pub frequency_source: FrequencySource,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Seed list used by sweeps; defaults to the single effective seed.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "default_true")]
    pub warmup_blv: bool,
    #[serde(default)]
    pub include_labeled_counts: bool,
    #[serde(default = "default_smoothing")]
    pub smoothing: f64,
    #[serde(default = "default_ignore")]
    pub ignore_index: u32,
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default)]
    pub source_counts: Option<Vec<u64>>,
    /// Constant used by the no-variation mode instead of the analytic mean.
    #[serde(default)]
    pub no_variation_kappa: Option<f64>,
    #[serde(default)]
    pub debug_logits: bool,
}

fn default_mode() -> LossMode {
    LossMode::Blv
}
fn default_source() -> FrequencySource {
    FrequencySource::GroundTruth
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    0.05
}
fn default_momentum() -> f64 {
    0.9
}
fn default_warmup() -> usize {
    5
}
fn default_true() -> bool {
    true
}
fn default_smoothing() -> f64 {
    1.0
}
fn default_ignore() -> u32 {
    DEFAULT_IGNORE_INDEX
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    #[serde(default = "default_tail")]
    pub tail_classes: Vec<usize>,
}

fn default_tail() -> Vec<usize> {
    vec![2]
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            tail_classes: default_tail(),
        }
    }
}

/// Apply one `key.path=value` override to the raw JSON document.
/// The value parses as JSON when possible and falls back to a string.
pub fn apply_override(doc: &mut serde_json::Value, expr: &str) -> Result<(), ConfigError> {
    let (path, raw) = expr
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride {
            expr: expr.to_string(),
        })?;
    if path.is_empty() {
        return Err(ConfigError::BadOverride {
            expr: expr.to_string(),
        });
    }
    let value =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = doc;
    let segments: Vec<&str> = path.split('.').collect();
    for segment in &segments[..segments.len() - 1] {
        if !node.is_object() {
            return Err(ConfigError::BadOverride {
                expr: expr.to_string(),
            });
        }
        node = node
            .as_object_mut()
            .unwrap()
            .entry(segment.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    match node.as_object_mut() {
        Some(map) => {
            map.insert(segments[segments.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(ConfigError::BadOverride {
            expr: expr.to_string(),
        }),
    }
}

/// Deserialize with key-path errors like `train.epochs: missing required key`.
pub fn config_from_value(doc: serde_json::Value) -> Result<ExperimentConfig, ConfigError> {
    let deserializer = doc.clone();
    serde_path_to_error::deserialize(&deserializer).map_err(|e| {
        let mut key_path = e.path().to_string();
        let message = e.inner().to_string();
        // Point missing/unknown-field errors at the field itself.
        for (pattern, rewrite) in [
            ("missing field `", "missing required key"),
            ("unknown field `", "unknown key"),
        ] {
            if let Some(rest) = message.split(pattern).nth(1) {
                if let Some(field) = rest.split('`').next() {
                    if key_path == "." {
                        key_path = field.to_string();
                    } else {
                        key_path = format!("{key_path}.{field}");
                    }
                    return ConfigError::Schema {
                        key_path,
                        message: rewrite.to_string(),
                    };
                }
            }
        }
        ConfigError::Schema { key_path, message }
    })
}

pub fn load_config(
    path: &Path,
    overrides: &[String],
    seed_override: Option<u64>,
) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| ConfigError::Json {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    for expr in overrides {
        apply_override(&mut doc, expr)?;
    }
    let mut config = config_from_value(doc)?;
    if let Some(seed) = seed_override {
        config.train.seed = Some(seed);
    }
    config.validate()?;
    Ok(config)
}

/// Flag > config > BLV_SEED environment variable > 0.
pub fn resolve_seed(config: &ExperimentConfig) -> u64 {
    config
        .train
        .seed
        .or_else(|| std::env::var("BLV_SEED").ok().and_then(|s| s.parse().ok()))
        .unwrap_or(0)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.assemble_blob_spec().map(|_| ())?;
        self.assemble_eval_spec().map(|_| ())?;
        let split = self.assemble_split();
        if !split.labeled_fraction.is_finite()
            || split.labeled_fraction <= 0.0
            || split.labeled_fraction > 1.0
        {
            return Err(ConfigError::Invalid {
                key_path: "split.labeled_fraction".into(),
                message: format!("must be in (0, 1], got {}", split.labeled_fraction),
            });
        }
        self.assemble_noise_spec()?;
        self.assemble_schedule()?;
        self.assemble_train_config(0)?;
        Ok(())
    }

    fn unit_circle_means(&self) -> Vec<Vec<f64>> {
        (0..self.dataset.num_classes)
            .map(|k| {
                let angle = PI / 2.0 + 2.0 * PI * k as f64 / self.dataset.num_classes as f64;
                vec![angle.cos(), angle.sin()]
            })
            .collect()
    }

    pub fn assemble_blob_spec(&self) -> Result<BlobSpecF64, ConfigError> {
        let means = match &self.dataset.means {
            Some(m) => m.clone(),
            None if self.dataset.dims == 2 => self.unit_circle_means(),
            None => {
                return Err(ConfigError::Invalid {
                    key_path: "dataset.means".into(),
                    message: format!("required when dims != 2 (got dims = {})", self.dataset.dims),
                })
            }
        };
        let spec = BlobSpecF64 {
            num_classes: self.dataset.num_classes,
            dims: self.dataset.dims,
            counts: self.dataset.counts.clone(),
            means,
            stddev: self.dataset.stddev,
            seed: self.dataset.seed,
        };
        spec.validate().map_err(|e| ConfigError::Invalid {
            key_path: "dataset".into(),
            message: e.to_string(),
        })?;
        Ok(spec)
    }

    pub fn assemble_eval_spec(&self) -> Result<BlobSpecF64, ConfigError> {
        let mut spec = self.assemble_blob_spec()?;
        spec.counts = self
            .dataset
            .eval_counts
            .clone()
            .unwrap_or_else(|| vec![500; self.dataset.num_classes]);
        spec.seed = self.dataset.eval_seed.unwrap_or(self.dataset.seed + 1);
        spec.validate().map_err(|e| ConfigError::Invalid {
            key_path: "dataset.eval_counts".into(),
            message: e.to_string(),
        })?;
        Ok(spec)
    }

    pub fn assemble_split(&self) -> SplitSpec {
        SplitSpec {
            labeled_fraction: self.split.labeled_fraction,
            seed: self.split.seed,
        }
    }

    pub fn assemble_noise_spec(&self) -> Result<NoiseSpecF64, ConfigError> {
        NoiseSpecF64::new(
            self.noise.family,
            self.noise.sigma,
            self.noise.alpha,
            self.noise.beta,
            self.noise.lambda,
            self.noise.clamp_rule,
        )
        .map_err(|e| ConfigError::Invalid {
            key_path: "noise".into(),
            message: e.to_string(),
        })
    }

    pub fn assemble_schedule(&self) -> Result<SigmaScheduleF64, ConfigError> {
        let schedule = match &self.schedule {
            None => SigmaScheduleF64::constant(self.noise.sigma),
            Some(s) => SigmaScheduleF64 {
                mode: s.mode,
                sigma0: s.sigma0.unwrap_or(self.noise.sigma),
                t_mid: s.t_mid,
                t_end: s.t_end,
            },
        };
        schedule.validate().map_err(|e| ConfigError::Invalid {
            key_path: "schedule".into(),
            message: e.to_string(),
        })?;
        Ok(schedule)
    }

    pub fn assemble_train_config(&self, seed: u64) -> Result<TrainConfigF64, ConfigError> {
        let config = TrainConfigF64 {
            mode: self.train.mode,
            noise: self.assemble_noise_spec()?,
            schedule: self.assemble_schedule()?,
            frequency_source: self.train.frequency_source,
            num_classes: self.dataset.num_classes,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            momentum: self.train.momentum,
            seed,
            tail_classes: self.metrics.tail_classes.clone(),
            warmup_epochs: self.train.warmup_epochs,
            warmup_blv: self.train.warmup_blv,
            include_labeled_counts: self.train.include_labeled_counts,
            smoothing: self.train.smoothing,
            ignore_index: self.train.ignore_index,
            hidden: self.train.hidden,
            source_counts: self.train.source_counts.clone(),
            no_variation_kappa: self.train.no_variation_kappa,
            debug_logits: self.train.debug_logits,
        };
        config.validate().map_err(|e| ConfigError::Invalid {
            key_path: "train".into(),
            message: e.to_string(),
        })?;
        Ok(config)
    }

    /// Seeds a sweep runs: explicit list, else the single effective seed.
    pub fn sweep_seeds(&self) -> Vec<u64> {
        match &self.train.seeds {
            Some(seeds) if !seeds.is_empty() => seeds.clone(),
            _ => vec![resolve_seed(self)],
        }
    }
}
