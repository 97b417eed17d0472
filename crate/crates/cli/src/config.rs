//! Versioned TOML run configuration.

use std::fmt;
use std::path::{Path, PathBuf};

use pocon_core::baselines::BaselineConfig;
use pocon_core::datastream::{AugConfig, SyntheticSpec};
use pocon_core::evaluation::ProbeConfig;
use pocon_core::pocon::{ModelConfig, PoconConfig, StageConfig, TaskFreeConfig};
use pocon_core::semisup::{DriftCompensation, SemiSupConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

/// A config that failed to parse or validate. The CLI exits with status 2.
#[derive(Debug)]
pub struct ConfigError {
    /// Dotted path of the offending field, when known.
    pub field: Option<String>,
    pub message: String,
}

impl ConfigError {
    fn at(field: &str, message: impl fmt::Display) -> Self {
        Self { field: Some(field.to_string()), message: message.to_string() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.field {
            Some(field) => write!(f, "invalid config field `{field}`: {}", self.message),
            None => write!(f, "invalid config: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pocon,
    Ft,
    Pfr,
    Cassle,
    Joint,
    PoconTaskfree,
    Semisup,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Pocon => "pocon",
            Method::Ft => "ft",
            Method::Pfr => "pfr",
            Method::Cassle => "cassle",
            Method::Joint => "joint",
            Method::PoconTaskfree => "pocon_taskfree",
            Method::Semisup => "semisup",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    /// Packed array files `train_path` and `test_path`.
    Packed,
    /// One sub-directory of PNG images per class under `root/train` and `root/test`.
    ImageDir,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub source: DataSource,
    pub num_tasks: usize,
    #[serde(default)]
    pub synthetic: SyntheticSpec,
    #[serde(default)]
    pub train_path: Option<PathBuf>,
    #[serde(default)]
    pub test_path: Option<PathBuf>,
    #[serde(default)]
    pub root: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFreeSection {
    /// Expert steps between snapshots.
    pub s: usize,
    /// Integration steps per snapshot.
    pub ds: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Total iterations over the blurred stream.
    pub iterations: usize,
}

fn default_beta() -> f64 {
    4.0
}

impl TaskFreeSection {
    pub fn core(&self) -> TaskFreeConfig {
        TaskFreeConfig { s: self.s, ds: self.ds }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemiSupSection {
    /// Method whose checkpoints the prototypes are built on.
    pub base: Method,
    pub label_fraction: f64,
    pub refine_passes: usize,
    pub compensation: DriftCompensation,
    pub sigma: Option<f64>,
}

impl Default for SemiSupSection {
    fn default() -> Self {
        let d = SemiSupConfig::default();
        Self {
            base: Method::Pocon,
            label_fraction: d.label_fraction,
            refine_passes: d.refine_passes,
            compensation: d.compensation,
            sigma: d.sigma,
        }
    }
}

impl SemiSupSection {
    pub fn core(&self) -> SemiSupConfig {
        SemiSupConfig {
            label_fraction: self.label_fraction,
            refine_passes: self.refine_passes,
            compensation: self.compensation,
            sigma: self.sigma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// One-based tasks whose stability curves are reported.
    pub anchors: Vec<usize>,
    pub probe: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { anchors: vec![1], probe: ProbeConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub name: String,
    pub methods: Vec<Method>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub precision: Precision,
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub stages: StageConfig,
    #[serde(default)]
    pub aug: AugConfig,
    #[serde(default)]
    pub baselines: BaselineConfig,
    #[serde(default)]
    pub taskfree: Option<TaskFreeSection>,
    #[serde(default)]
    pub semisup: SemiSupSection,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError { field: None, message: format!("cannot read {}: {e}", path.display()) })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            // toml reports the offending key inside the message and its span
            let field = e.span().map(|s| key_at(text, s.start)).filter(|k| !k.is_empty());
            ConfigError { field, message: e.message().trim().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hash of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn pocon(&self) -> PoconConfig {
        PoconConfig { model: self.model.clone(), stages: self.stages.clone(), aug: self.aug.clone() }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::at(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return Err(ConfigError::at("name", "must be nonempty and use only letters, digits, '-', '_' or '.'"));
        }
        if self.methods.is_empty() {
            return Err(ConfigError::at("methods", "at least one method is required"));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::at("seeds", "at least one seed is required"));
        }
        let d = &self.data;
        if d.num_tasks == 0 {
            return Err(ConfigError::at("data.num_tasks", "must be positive"));
        }
        match d.source {
            DataSource::Synthetic => {
                let s = &d.synthetic;
                if s.num_classes < d.num_tasks {
                    return Err(ConfigError::at("data.synthetic.num_classes", "must be at least data.num_tasks"));
                }
                if s.image_size < 8 {
                    return Err(ConfigError::at("data.synthetic.image_size", "must be at least 8"));
                }
                if s.train_per_class < 2 || s.test_per_class == 0 {
                    return Err(ConfigError::at("data.synthetic", "train_per_class must be >= 2 and test_per_class >= 1"));
                }
                if !(s.noise >= 0.0) {
                    return Err(ConfigError::at("data.synthetic.noise", "must be nonnegative"));
                }
            }
            DataSource::Packed => {
                if d.train_path.is_none() {
                    return Err(ConfigError::at("data.train_path", "required for packed data"));
                }
                if d.test_path.is_none() {
                    return Err(ConfigError::at("data.test_path", "required for packed data"));
                }
            }
            DataSource::ImageDir => {
                if d.root.is_none() {
                    return Err(ConfigError::at("data.root", "required for image_dir data"));
                }
            }
        }
        self.model.validate().map_err(|e| ConfigError::at("model", e))?;
        self.stages.validate().map_err(|e| ConfigError::at("stages", e))?;
        self.aug.validate().map_err(|e| ConfigError::at("aug", e))?;
        self.pocon().validate().map_err(|e| ConfigError::at("stages.init_strategy", e))?;
        if !(self.baselines.pfr_lambda >= 0.0) {
            return Err(ConfigError::at("baselines.pfr_lambda", "must be nonnegative"));
        }
        if !(self.baselines.cassle_lambda >= 0.0) {
            return Err(ConfigError::at("baselines.cassle_lambda", "must be nonnegative"));
        }
        if self.methods.contains(&Method::PoconTaskfree) {
            let Some(tf) = &self.taskfree else {
                return Err(ConfigError::at("taskfree", "required when methods include pocon_taskfree"));
            };
            tf.core().validate().map_err(|e| ConfigError::at("taskfree", e))?;
            if !(tf.beta > 0.0) {
                return Err(ConfigError::at("taskfree.beta", "must be positive"));
            }
            if tf.iterations < d.num_tasks {
                return Err(ConfigError::at("taskfree.iterations", "must be at least data.num_tasks"));
            }
        }
        if self.methods.contains(&Method::Semisup) {
            let s = &self.semisup;
            if matches!(s.base, Method::Semisup | Method::Joint) {
                return Err(ConfigError::at("semisup.base", "must be a continual method"));
            }
            if !(s.label_fraction > 0.0 && s.label_fraction <= 1.0) {
                return Err(ConfigError::at("semisup.label_fraction", "must be in (0, 1]"));
            }
            if s.refine_passes == 0 {
                return Err(ConfigError::at("semisup.refine_passes", "must be positive"));
            }
            if s.sigma.is_some_and(|v| !(v > 0.0)) {
                return Err(ConfigError::at("semisup.sigma", "must be positive"));
            }
        }
        if let Some(&a) = self.eval.anchors.iter().find(|&&a| a == 0 || a > d.num_tasks) {
            return Err(ConfigError::at("eval.anchors", format!("anchor {a} outside 1..={}", d.num_tasks)));
        }
        self.eval.probe.validate().map_err(|e| ConfigError::at("eval.probe", e))?;
        Ok(())
    }
}

/// Dotted key path of the table entry containing byte offset `pos`.
fn key_at(text: &str, pos: usize) -> String {
    let before = &text[..pos.min(text.len())];
    let table = before
        .lines()
        .rev()
        .find_map(|l| {
            let l = l.trim();
            l.strip_prefix('[').and_then(|r| r.strip_suffix(']')).map(|t| t.trim_matches(['[', ']']).trim().to_string())
        })
        .unwrap_or_default();
    let start = before.rfind('\n').map_or(0, |i| i + 1);
    let line = text[start..].lines().next().unwrap_or("");
    let key = line.split('=').next().unwrap_or("").trim().trim_matches('"').to_string();
    match (table.is_empty(), key.is_empty() || key.starts_with('[')) {
        (true, _) => key,
        (false, true) => table,
        (false, false) => format!("{table}.{key}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
name = "t"
methods = ["pocon"]

[data]
num_tasks = 2

[model]
main = { arch = "tiny_conv", width = 4, feature_dim = 16 }
projector_dim = 32
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.seeds, vec![0]);
        assert_eq!(cfg.stages, StageConfig::default());
        assert_eq!(cfg.eval.anchors, vec![1]);
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_field_is_reported_with_its_path() {
        let text = MINIMAL.replace("projector_dim = 32", "projector_dim = 32\nprojecter = 3");
        let err = RunConfig::parse(&text).unwrap_err();
        assert_eq!(err.field.as_deref(), Some("model.projecter"), "{err}");
    }

    #[test]
    fn wrong_type_is_reported_with_its_path() {
        let text = MINIMAL.replace("num_tasks = 2", "num_tasks = \"two\"");
        let err = RunConfig::parse(&text).unwrap_err();
        assert_eq!(err.field.as_deref(), Some("data.num_tasks"), "{err}");
    }

    #[test]
    fn semantic_errors_name_the_field() {
        let text = MINIMAL.replace("num_tasks = 2", "num_tasks = 2\n[eval]\nanchors = [3]");
        assert_eq!(RunConfig::parse(&text).unwrap_err().field.as_deref(), Some("eval.anchors"));
        let text = MINIMAL.replace("schema_version = 1", "schema_version = 9");
        assert_eq!(RunConfig::parse(&text).unwrap_err().field.as_deref(), Some("schema_version"));
        let text = MINIMAL.replace("[\"pocon\"]", "[\"pocon_taskfree\"]");
        assert_eq!(RunConfig::parse(&text).unwrap_err().field.as_deref(), Some("taskfree"));
    }
}
