//! Run configuration: one TOML document holding the global seed, paths and
//! every module's settings, resolved as defaults, then the file, then
//! `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::{AlignConfig, AugmentationConfig};
use crate::error::{Error, Result};
use crate::experiments::{ProbeSpec, SwapPolicy};
use crate::margin::MarginConfig;
use crate::sampler::SamplerConfig;
use crate::seed;
use crate::trainer::TrainConfig;
use crate::verifier::{Metric, Sweep};

/// Environment variable naming the config file used when none is passed.
pub const CONFIG_ENV: &str = "SYNTHFACE_CONFIG";
pub const SNAPSHOT_FILE: &str = "config.snapshot.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub landmarks: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub metric: Metric,
    pub sweep: Sweep,
    /// Concatenate the embedding of the mirrored crop.
    pub flip: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { metric: Metric::L2, sweep: Sweep::default(), flip: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Module seeds derive from this value and the module name.
    pub seed: u64,
    pub paths: Paths,
    pub sampler: SamplerConfig,
    pub align: AlignConfig,
    pub augmentation: AugmentationConfig,
    pub margin: MarginConfig,
    /// `train.seed` always equals `module_seed("train")`.
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub swap: SwapPolicy,
    pub probe: ProbeSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            sampler: SamplerConfig::default(),
            align: AlignConfig::default(),
            augmentation: AugmentationConfig::default(),
            margin: MarginConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            swap: SwapPolicy::default(),
            probe: ProbeSpec::default(),
        }
    }
}

fn parse_err(path: &str, msg: impl std::fmt::Display) -> Error {
    Error::Parse { path: path.to_string(), line: 0, message: msg.to_string() }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::validation(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::validation(format!("override {key}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Resolves `file` (or the file named by [`CONFIG_ENV`]) plus `key=value`
    /// overrides over the defaults, then validates every section.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let env_path = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        let (mut table, name) = match file.or(env_path.as_deref()) {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let t: toml::Table = text.parse().map_err(|e| parse_err(&p.display().to_string(), e))?;
                (t, p.display().to_string())
            }
            None => (toml::Table::new(), "<defaults>".to_string()),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::validation(format!("override {o:?} is not key=value")))?;
            set_path(&mut table, k.trim(), override_value(v.trim()))?;
        }
        let explicit_train_seed = table.get("train").and_then(|t| t.get("seed")).is_some();
        let mut cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e| parse_err(&name, e))?;
        let derived = cfg.module_seed("train");
        if explicit_train_seed && cfg.train.seed != derived {
            return Err(Error::validation("train.seed is derived from the global seed; set `seed` instead"));
        }
        cfg.train.seed = derived;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.augmentation.validate()?;
        self.margin.validate()?;
        self.train.validate()?;
        self.align.template.check_well_posed("align.template")?;
        if !(0.0..=1.0).contains(&self.swap.fraction) {
            return Err(Error::validation(format!("swap.fraction {} outside [0, 1]", self.swap.fraction)));
        }
        Ok(())
    }

    /// Seed of one module, derived from the global seed and the module name.
    pub fn module_seed(&self, module: &str) -> u64 {
        seed::derive(self.seed, module)
    }

    /// `paths.<key>`, or an error naming the key and its flag.
    pub fn require(&self, key: &str) -> Result<&Path> {
        let p = match key {
            "manifest" => &self.paths.manifest,
            "images" => &self.paths.images,
            "landmarks" => &self.paths.landmarks,
            "pairs" => &self.paths.pairs,
            "output" => &self.paths.output,
            _ => return Err(Error::validation(format!("unknown path key {key}"))),
        };
        p.as_deref()
            .ok_or_else(|| Error::validation(format!("paths.{key} is required (set it in the config or pass --{key})")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::validation(format!("config serialization: {e}")))
    }

    /// Writes the resolved config into `dir` as [`SNAPSHOT_FILE`].
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(SNAPSHOT_FILE);
        std::fs::write(&p, self.to_toml()?).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}
