//! Layered run configuration: built-in defaults, then a TOML file, then
//! `PROTOSEG_*` environment variables, then command-line flags.
//!
//! Environment keys are the config keys upper-cased with the `PROTOSEG_`
//! prefix; nested keys use a double underscore (`PROTOSEG_PATHS__CACHE`).
//! Values are parsed as TOML literals and fall back to plain strings, so
//! `PROTOSEG_WINDOWS="[448, 336]"` and `PROTOSEG_GENERATOR=synthetic` both work.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bank::{DEFAULT_K_PARTS, DEFAULT_STUFF_THRESHOLD};
use crate::error::{Error, Result};
use crate::features::{EnsembleSpace, ExtractorConfig};
use crate::inference::{
    BackgroundMode, BackgroundPool, SegmentOptions, WindowOptions, DEFAULT_ETA, DEFAULT_NO_BG_THRESHOLD,
    DEFAULT_SHORT_SIDE, DEFAULT_STRIDE, DEFAULT_WINDOWS,
};
use crate::proposal::{FallbackThresholds, DEFAULT_FALLBACK_BG, DEFAULT_FALLBACK_FG};
use crate::support::DEFAULT_SUPPORT_SIZE;
use crate::vocabulary::DEFAULT_TEMPLATE;

pub const ENV_PREFIX: &str = "PROTOSEG_";
/// Log filter variable; not a config key.
pub const LOG_ENV: &str = "PROTOSEG_LOG";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Bank directories; the first one is written by `build`.
    pub banks: Vec<PathBuf>,
    pub cache: PathBuf,
    pub vocabulary: Option<PathBuf>,
    pub thing_stuff: Option<PathBuf>,
    pub scene: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            banks: vec![PathBuf::from("bank")],
            cache: PathBuf::from("cache"),
            vocabulary: None,
            thing_stuff: None,
            scene: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub template: String,
    pub n_support: usize,
    pub k_parts: usize,
    pub fallback_fg: f32,
    pub fallback_bg: f32,
    pub stuff_threshold: f32,
    pub prefilter: bool,
    pub eta: usize,
    pub bg_prototypes: bool,
    pub bg_threshold: f32,
    pub bg_pool: BackgroundPool,
    pub windows: Vec<usize>,
    pub stride: usize,
    /// Shorter-side resize before windowing; 0 disables resizing.
    pub short_side: usize,
    /// Extractor names (presets or entries of `extractors`).
    pub ensemble: Vec<String>,
    /// Per-member weights; empty means uniform.
    pub ensemble_weights: Vec<f64>,
    pub extractors: BTreeMap<String, ExtractorConfig>,
    pub generator: String,
    pub proposer: String,
    pub scorer: String,
    pub paths: Paths,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            template: DEFAULT_TEMPLATE.to_string(),
            n_support: DEFAULT_SUPPORT_SIZE,
            k_parts: DEFAULT_K_PARTS,
            fallback_fg: DEFAULT_FALLBACK_FG,
            fallback_bg: DEFAULT_FALLBACK_BG,
            stuff_threshold: DEFAULT_STUFF_THRESHOLD,
            prefilter: true,
            eta: DEFAULT_ETA,
            bg_prototypes: true,
            bg_threshold: DEFAULT_NO_BG_THRESHOLD,
            bg_pool: BackgroundPool::Kept,
            windows: DEFAULT_WINDOWS.to_vec(),
            stride: DEFAULT_STRIDE,
            short_side: DEFAULT_SHORT_SIDE,
            ensemble: vec!["color-hash".into()],
            ensemble_weights: Vec::new(),
            extractors: BTreeMap::new(),
            generator: "synthetic".into(),
            proposer: "scene".into(),
            scorer: "scene".into(),
            paths: Paths::default(),
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Turns `a.b = value` into a nested table.
fn override_table(key: &str, value: toml::Value) -> toml::Table {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut table = toml::Table::from_iter([(last.to_string(), value)]);
    while let Some(p) = parts.pop() {
        table = toml::Table::from_iter([(p.to_string(), toml::Value::Table(table))]);
    }
    table
}

impl Config {
    /// Defaults overlaid with `file` and then with `PROTOSEG_*` entries of `env`.
    pub fn layered(file: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut table = toml::Table::try_from(Config::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            merge(&mut table, toml::from_str(&text)?);
        }
        let mut env: Vec<(String, String)> =
            env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX) && k.len() > ENV_PREFIX.len() && k != LOG_ENV).collect();
        env.sort();
        for (k, v) in env {
            let key = k[ENV_PREFIX.len()..].to_ascii_lowercase().replace("__", ".");
            merge(&mut table, override_table(&key, parse_value(&v)));
        }
        let config: Config = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Applies one `key=value` override (same syntax as the environment).
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got {assignment:?}")))?;
        let mut table = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut table, override_table(key.trim(), parse_value(value.trim())));
        *self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_support == 0 {
            return fail("n_support must be at least 1");
        }
        if self.k_parts == 0 {
            return fail("k_parts must be at least 1");
        }
        if self.eta == 0 || self.eta > 20 {
            return fail("eta must be between 1 and 20");
        }
        if self.windows.is_empty() || self.windows.contains(&0) {
            return fail("windows must be a non-empty list of positive sizes");
        }
        if self.stride == 0 || self.stride > *self.windows.iter().min().expect("non-empty") {
            return fail("stride must be positive and no larger than the smallest window");
        }
        if !(0.0 <= self.fallback_bg && self.fallback_bg < self.fallback_fg && self.fallback_fg <= 1.0) {
            return fail("fallback thresholds must satisfy 0 <= bg < fg <= 1");
        }
        if !(self.stuff_threshold > 0.0 && self.stuff_threshold <= 1.0) {
            return fail("stuff_threshold must lie in (0, 1]");
        }
        if self.ensemble.is_empty() {
            return fail("ensemble needs at least one extractor");
        }
        if !self.ensemble_weights.is_empty() && self.ensemble_weights.len() != self.ensemble.len() {
            return fail("ensemble_weights needs one weight per ensemble member");
        }
        Ok(())
    }

    /// Digest of every setting that affects results (paths excluded).
    pub fn digest(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("paths");
        }
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    pub fn extractor_config(&self, name: &str) -> Result<ExtractorConfig> {
        self.extractors
            .get(name)
            .cloned()
            .or_else(|| ExtractorConfig::preset(name))
            .ok_or_else(|| Error::Config(format!("unknown extractor {name:?}")))
    }

    pub fn ensemble_space(&self) -> Result<EnsembleSpace> {
        let members = self.ensemble.iter().map(|n| self.extractor_config(n).map(|c| c.space_id())).collect::<Result<_>>()?;
        if self.ensemble_weights.is_empty() {
            EnsembleSpace::uniform(members)
        } else {
            EnsembleSpace::weighted(members, self.ensemble_weights.clone())
        }
    }

    pub fn segment_options(&self) -> SegmentOptions {
        SegmentOptions {
            background: if self.bg_prototypes {
                BackgroundMode::Prototypes
            } else {
                BackgroundMode::Threshold(self.bg_threshold)
            },
            background_pool: self.bg_pool,
            eta: self.prefilter.then_some(self.eta),
        }
    }

    pub fn window_options(&self) -> WindowOptions {
        WindowOptions {
            windows: self.windows.clone(),
            stride: self.stride,
            short_side: (self.short_side > 0).then_some(self.short_side),
        }
    }

    pub fn fallback(&self) -> FallbackThresholds {
        FallbackThresholds { fg: self.fallback_fg, bg: self.fallback_bg }
    }
}
