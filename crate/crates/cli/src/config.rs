//! `RunConfig`: TOML file, then `MODGATE_*` environment overrides, then flags.

use modgate_core::catalog::CorpusSpec;
use modgate_core::detectors::{
    DetectorKind, DetectorSpec, LogisticHyper, ShallowParams, TemplateParams,
};
use modgate_core::pipeline::{Limits, ThresholdPolicy};
use modgate_core::router::{L1Mode, REST};
use modgate_core::synthgen::{DatasetSpec, LogoSpec, TransformConfig};
use modgate_server::ReviewSettings;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

pub const ENV_PREFIX: &str = "MODGATE_";
/// Separates nested keys in environment overrides: `MODGATE_REVIEW__BUDGET`.
pub const ENV_SEPARATOR: &str = "__";
/// Read by `--config`; never treated as a config key.
pub const ENV_CONFIG: &str = "MODGATE_CONFIG";
/// Log filter for the binary; never treated as a config key.
pub const ENV_LOG: &str = "MODGATE_LOG";
pub const DEFAULT_CONFIG_FILE: &str = "modgate.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub catalog: PathBuf,
    pub logos: PathBuf,
    pub dataset: PathBuf,
    pub index: PathBuf,
    /// Event log and queue logs.
    pub pipeline: PathBuf,
    pub review: PathBuf,
    pub eval: PathBuf,
    pub models: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        let d = |s: &str| PathBuf::from("data").join(s);
        Self {
            catalog: d("catalog"),
            logos: d("logos"),
            dataset: d("synth"),
            index: d("index"),
            pipeline: d("pipeline"),
            review: d("review"),
            eval: d("eval"),
            models: d("models"),
        }
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.catalog,
            &mut self.logos,
            &mut self.dataset,
            &mut self.index,
            &mut self.pipeline,
            &mut self.review,
            &mut self.eval,
            &mut self.models,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub n_images: usize,
    pub categories: Vec<String>,
    pub width: u32,
    pub height: u32,
    pub id_prefix: String,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let s = CorpusSpec::new(
            200,
            ["apparel", "toys", "electronics", "home", "rest"]
                .map(String::from)
                .to_vec(),
            0,
        );
        Self {
            n_images: s.n_images,
            categories: s.categories,
            width: s.width,
            height: s.height,
            id_prefix: s.id_prefix,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogoSection {
    pub classes: Vec<String>,
    pub variants_per_class: usize,
    pub train_variants: usize,
    pub lookalikes_per_class: usize,
    pub base_size: u32,
}

impl Default for LogoSection {
    fn default() -> Self {
        let s = LogoSpec::default();
        Self {
            classes: s.classes,
            variants_per_class: s.variants_per_class,
            train_variants: s.train_variants,
            lookalikes_per_class: s.lookalikes_per_class,
            base_size: s.base_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub classes: Vec<String>,
    pub n_per_class: usize,
    pub neg_ratio: f64,
    pub lookalike_fraction: f64,
    pub transform: TransformConfig,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = DatasetSpec::default();
        Self {
            classes: s.classes,
            n_per_class: s.n_per_class,
            neg_ratio: s.neg_ratio,
            lookalike_fraction: s.lookalike_fraction,
            transform: s.transform,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Minimum IoU for a predicted box to count as a hit.
    pub iou_min: f64,
    /// Image-level operating point; defaults to the global `t_block`.
    pub threshold: Option<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            iou_min: 0.5,
            threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct L1Section {
    pub mode: L1Mode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub bind: String,
    pub paths: Paths,
    pub corpus: CorpusSection,
    pub logos: LogoSection,
    pub synth: SynthSection,
    /// Detector id -> spec.
    pub detectors: BTreeMap<String, DetectorSpec>,
    /// Category -> detector ids. `rest` is implicit and routes to nothing.
    pub routing: BTreeMap<String, BTreeSet<String>>,
    pub l1: L1Section,
    pub thresholds: ThresholdPolicy,
    /// JSON policy written by `tune`; replaces `thresholds` when set.
    pub policy_file: Option<PathBuf>,
    pub limits: Limits,
    pub review: ReviewSettings,
    pub shallow: LogisticHyper,
    pub eval: EvalSection,
    /// Directory relative paths resolve against; set at load time.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            workers: 4,
            bind: "127.0.0.1:8080".into(),
            paths: Paths::default(),
            corpus: CorpusSection::default(),
            logos: LogoSection::default(),
            synth: SynthSection::default(),
            detectors: BTreeMap::new(),
            routing: BTreeMap::new(),
            l1: L1Section::default(),
            thresholds: ThresholdPolicy::default(),
            policy_file: None,
            limits: Limits::default(),
            review: ReviewSettings::default(),
            shallow: LogisticHyper::default(),
            eval: EvalSection::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

/// Flag values that win over file and environment.
#[derive(Debug, Clone, Default)]
pub struct FlagOverrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub bind: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("invalid configuration: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

impl RunConfig {
    /// Loads `path` (or `modgate.toml` in the working directory when present, or the
    /// defaults), applies environment overrides and flags, and validates the result.
    pub fn load(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        flags: &FlagOverrides,
    ) -> Result<Self, ConfigError> {
        let default_path = Path::new(DEFAULT_CONFIG_FILE);
        let path = path.or(default_path.exists().then_some(default_path));
        let (mut table, base_dir) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
                    ConfigError::Parse(format!("{}: {e}", p.display()))
                })?;
                let base = p
                    .parent()
                    .filter(|d| !d.as_os_str().is_empty())
                    .unwrap_or(Path::new("."));
                (table, base.to_path_buf())
            }
            None => (toml::Table::new(), PathBuf::from(".")),
        };
        apply_env(&mut table, env)?;
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        if let Some(s) = flags.seed {
            cfg.seed = s;
        }
        if let Some(w) = flags.workers {
            cfg.workers = w;
        }
        if let Some(b) = &flags.bind {
            cfg.bind = b.clone();
        }
        cfg.base_dir = std::path::absolute(&base_dir).unwrap_or(base_dir);
        cfg.paths.resolve(&cfg.base_dir);
        if let Some(p) = &mut cfg.policy_file {
            if p.is_relative() {
                *p = cfg.base_dir.join(&*p);
            }
        }
        let v = cfg.violations();
        if !v.is_empty() {
            return Err(ConfigError::Invalid(v));
        }
        Ok(cfg)
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            n_images: self.corpus.n_images,
            categories: self.corpus.categories.clone(),
            seed: self.seed,
            width: self.corpus.width,
            height: self.corpus.height,
            id_prefix: self.corpus.id_prefix.clone(),
        }
    }

    pub fn logo_spec(&self) -> LogoSpec {
        LogoSpec {
            classes: self.logos.classes.clone(),
            variants_per_class: self.logos.variants_per_class,
            train_variants: self.logos.train_variants,
            lookalikes_per_class: self.logos.lookalikes_per_class,
            base_size: self.logos.base_size,
            seed: self.seed,
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            classes: self.synth.classes.clone(),
            n_per_class: self.synth.n_per_class,
            neg_ratio: self.synth.neg_ratio,
            lookalike_fraction: self.synth.lookalike_fraction,
            seed: self.seed,
            transform: self.synth.transform.clone(),
        }
    }

    /// Every problem with the configuration.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(1..=1024).contains(&self.workers) {
            v.push(format!(
                "workers must be in 1..=1024 (got {})",
                self.workers
            ));
        }
        if self.bind.parse::<std::net::SocketAddr>().is_err() {
            v.push(format!(
                "bind must be host:port with a literal IP (got {:?})",
                self.bind
            ));
        }
        v.extend(
            self.corpus_spec()
                .violations()
                .into_iter()
                .map(|m| format!("corpus: {m}")),
        );
        v.extend(
            self.logo_spec()
                .violations()
                .into_iter()
                .map(|m| format!("logos: {m}")),
        );
        v.extend(
            self.dataset_spec()
                .violations()
                .into_iter()
                .map(|m| format!("synth: {m}")),
        );
        if self.policy_file.is_none() {
            v.extend(
                self.thresholds
                    .violations()
                    .into_iter()
                    .map(|m| format!("thresholds: {m}")),
            );
        }
        if self.limits.min_dim == 0 || self.limits.min_dim > self.limits.max_dim {
            v.push(format!(
                "limits: need 1 <= min_dim <= max_dim (got {} and {})",
                self.limits.min_dim, self.limits.max_dim
            ));
        }
        if !self.limits.allowed_formats.iter().any(|f| f == "png") {
            v.push(
                "limits: allowed_formats must include png, the only format images are stored in"
                    .into(),
            );
        }
        if !(0.0..=1.0).contains(&self.review.floor) {
            v.push(format!(
                "review: floor must be in [0, 1] (got {})",
                self.review.floor
            ));
        }
        if !(self.eval.iou_min > 0.0 && self.eval.iou_min <= 1.0) {
            v.push(format!(
                "eval: iou_min must be in (0, 1] (got {})",
                self.eval.iou_min
            ));
        }
        if let Some(t) = self.eval.threshold {
            if !(0.0..=1.0).contains(&t) {
                v.push(format!("eval: threshold must be in [0, 1] (got {t})"));
            }
        }
        if !(self.shallow.learning_rate > 0.0 && self.shallow.learning_rate.is_finite()) {
            v.push("shallow: learning_rate must be > 0".into());
        }
        if self.shallow.epochs == 0 {
            v.push("shallow: epochs must be >= 1".into());
        }
        if !(self.shallow.l2 >= 0.0) {
            v.push("shallow: l2 must be >= 0".into());
        }
        for (id, spec) in &self.detectors {
            if id.is_empty() {
                v.push("detectors: empty detector id".into());
            }
            if spec.class.is_empty() {
                v.push(format!("detectors.{id}: class must be non-empty"));
            }
            let bad_params = match spec.kind {
                DetectorKind::Template => {
                    serde_json::from_value::<TemplateParams>(spec.params.clone())
                        .err()
                        .map(|e| e.to_string())
                        .or_else(|| {
                            let p: TemplateParams =
                                serde_json::from_value(spec.params.clone()).ok()?;
                            (p.scales.is_empty() || p.scales.iter().any(|s| !(*s > 0.0)))
                                .then(|| "scales must be non-empty and positive".to_string())
                        })
                }
                DetectorKind::Shallow => {
                    serde_json::from_value::<ShallowParams>(spec.params.clone())
                        .err()
                        .map(|e| e.to_string())
                }
                DetectorKind::Skin => (!spec.params.is_null()
                    && spec.params != serde_json::json!({}))
                .then(|| "skin detectors take no params".to_string()),
            };
            if let Some(e) = bad_params {
                v.push(format!("detectors.{id}: {e}"));
            }
        }
        if self.routing.get(REST).is_some_and(|d| !d.is_empty()) {
            v.push(format!(
                "routing: category {REST:?} must route to no detectors"
            ));
        }
        for (cat, dets) in &self.routing {
            for d in dets {
                if !self.detectors.contains_key(d) {
                    v.push(format!("routing.{cat}: unknown detector {d:?}"));
                }
            }
        }
        v
    }

    /// Thresholds in force: the tuned policy file when configured, else `thresholds`.
    pub fn policy(&self) -> Result<ThresholdPolicy, ConfigError> {
        let Some(path) = &self.policy_file else {
            return Ok(self.thresholds.clone());
        };
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.clone(),
            source,
        })?;
        let policy: ThresholdPolicy = serde_json::from_str(&text)
            .map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
        let v: Vec<String> = policy
            .violations()
            .into_iter()
            .map(|m| format!("{}: {m}", path.display()))
            .collect();
        if v.is_empty() {
            Ok(policy)
        } else {
            Err(ConfigError::Invalid(v))
        }
    }
}

/// Applies `MODGATE_A__B=value` as `a.b = value`. Values parse as TOML scalars or
/// arrays when they can, and as plain strings otherwise.
pub fn apply_env(
    table: &mut toml::Table,
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<(), ConfigError> {
    let mut vars: Vec<(String, String)> = env
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX) && k != ENV_CONFIG && k != ENV_LOG)
        .collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..]
            .split(ENV_SEPARATOR)
            .map(str::to_lowercase)
            .collect();
        if path.iter().any(String::is_empty) {
            return Err(ConfigError::Parse(format!(
                "malformed override variable {key}"
            )));
        }
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or(toml::Value::String(raw));
        let (last, parents) = path.split_last().expect("non-empty");
        let mut cur = &mut *table;
        for p in parents {
            let entry = cur
                .entry(p.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cur = entry
                .as_table_mut()
                .ok_or_else(|| ConfigError::Parse(format!("{key}: {p} is not a table")))?;
        }
        cur.insert(last.clone(), value);
    }
    Ok(())
}
