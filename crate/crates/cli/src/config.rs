use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tom_core::envs::{PointMassConfig, PointMassReach, RoadAndRocks, RoadAndRocksConfig};
use tom_core::mbrl::LoopConfig;

use crate::CliError;

pub const OUTPUT_ROOT_ENV: &str = "TOM_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Online,
    Offline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvSelection {
    PointMass(PointMassConfig),
    RoadAndRocks(RoadAndRocksConfig),
}

impl Default for EnvSelection {
    fn default() -> Self {
        EnvSelection::PointMass(PointMassConfig::default())
    }
}

impl EnvSelection {
    pub fn name(&self) -> &'static str {
        match self {
            EnvSelection::PointMass(_) => "point_mass",
            EnvSelection::RoadAndRocks(_) => "road_and_rocks",
        }
    }
}

pub enum BuiltEnv {
    PointMass(PointMassReach),
    RoadAndRocks(RoadAndRocks),
}

impl EnvSelection {
    pub fn build(&self) -> BuiltEnv {
        match self {
            EnvSelection::PointMass(c) => BuiltEnv::PointMass(PointMassReach::new(c.clone())),
            EnvSelection::RoadAndRocks(c) => BuiltEnv::RoadAndRocks(RoadAndRocks::new(c.clone())),
        }
    }
}

/// Which policy supplies next-state values in the offline dual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    /// The scripted expert that produced the current-policy data.
    #[default]
    Expert,
    /// The policy being trained.
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_random: usize,
    pub n_expert_trajectories: usize,
    pub seed: u64,
    /// Load a buffer written by `make-dataset` instead of generating one.
    pub path: Option<PathBuf>,
    pub expert_path: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_random: 5000,
            n_expert_trajectories: 20,
            seed: 0,
            path: None,
            expert_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub env: EnvSelection,
    #[serde(default, rename = "loop")]
    pub loop_config: LoopConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub reference: ReferenceKind,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            mode: Mode::default(),
            seeds: default_seeds(),
            output_dir: default_output_dir(),
            env: EnvSelection::default(),
            loop_config: LoopConfig::default(),
            dataset: DatasetConfig::default(),
            reference: ReferenceKind::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(CliError::Usage(format!("invalid experiment name {:?}", self.name)));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Usage("seeds must not be empty".into()));
        }
        if self.mode == Mode::Offline && !matches!(self.env, EnvSelection::RoadAndRocks(_)) {
            return Err(CliError::Usage("offline mode runs on road_and_rocks only".into()));
        }
        self.loop_config
            .validate()
            .map_err(|e| CliError::Usage(format!("loop: {e}")))
    }

    /// Output root: the environment override when set, else `output_dir`.
    pub fn output_root(&self) -> PathBuf {
        std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output_dir.clone())
    }

    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.output_root().join(format!("{}-seed{seed}", self.name))
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parses a config file and applies `key=value` overrides. Dotted keys reach
/// into nested tables; values are read as TOML and fall back to strings. The
/// key `seed` replaces the seed list with a single seed.
pub fn load(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::MissingConfig(path.to_path_buf()),
        _ => CliError::Io(e),
    })?;
    parse(&text, overrides).map_err(|e| match e {
        CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse(text: &str, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    // parsing the untouched text first keeps line numbers in error messages
    toml::from_str::<ExperimentConfig>(text).map_err(|e| CliError::Config(e.to_string()))?;
    let mut table: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let config: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(format!("after overrides: {e}")))?;
    config.validate()?;
    Ok(config)
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(CliError::Usage(format!("override {spec:?} has an empty key")));
    }
    let value = parse_value(raw.trim());
    if key == "seed" {
        table.insert("seeds".into(), toml::Value::Array(vec![value]));
        return Ok(());
    }
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().expect("non-empty key");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("override {key:?}: {p:?} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
