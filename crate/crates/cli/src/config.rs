//! The run configuration file: one TOML document holding every option of
//! every command. Missing keys take their defaults, unknown keys are errors.

use std::path::{Path, PathBuf};

use hytrec::data::{LogFormat, SyntheticConfig};
use hytrec::eval::{AblationConfig, BenchConfig, Variant};
use hytrec::model::ModelConfig;
use hytrec::train::{GradcheckOptions, TrainConfig};
use hytrec::{Error, Result};
use serde::{Deserialize, Serialize};

/// Relative output paths are resolved against this directory when it is set.
pub const OUT_ROOT_ENV: &str = "HYTREC_OUT_ROOT";

/// Name of the resolved config written into every output directory.
pub const ECHO_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Output directory; empty means a per-command default (`prepared`,
    /// `train`, `eval`, ...) under the output root.
    pub out_dir: String,
    pub data: DataConfig,
    pub synthetic: SyntheticConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub gradcheck: GradcheckConfig,
    pub bench: BenchConfig,
    pub ablation: AblationConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    /// Parse `data.input`.
    Log,
    /// Generate from the `[synthetic]` section.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub mode: DataMode,
    /// Interaction log, relative to the working directory.
    pub input: String,
    pub format: LogFormat,
    pub min_user_events: usize,
    pub min_item_count: usize,
    pub train_targets_per_user: usize,
    /// Where `prepare` wrote its artifacts, relative to the output root.
    pub dataset_dir: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            mode: DataMode::Log,
            input: String::new(),
            format: LogFormat::default(),
            min_user_events: 5,
            min_item_count: 5,
            train_targets_per_user: 1,
            dataset_dir: "prepared".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Relative to the output root.
    pub checkpoint: String,
    /// `test` or `valid`.
    pub split: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![10, 50, 500],
            checkpoint: "train/best.ckpt".into(),
            split: "test".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Ratio,
    Heads,
    Variant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    /// Ratios or head counts as integers, variants by name.
    pub values: Vec<String>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            axis: SweepAxis::Variant,
            values: [Variant::Full, Variant::NoTadn, Variant::NoShort, Variant::Neither]
                .iter()
                .map(|v| v.to_string())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    /// Checked as given; `vocab_size` must be set.
    pub model: ModelConfig,
    pub seq_len: usize,
    pub examples: usize,
    pub seed: u64,
    pub options: GradcheckOptions,
    /// Test hook: `OP:FACTOR` scales one derivative rule, e.g. `gather:1.01`.
    pub fault: String,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            model: ModelConfig {
                vocab_size: 20,
                d_model: 8,
                n_heads: 2,
                short_window_k: 3,
                decay_period: 3.0,
                ..Default::default()
            },
            seq_len: 12,
            examples: 1,
            seed: 0,
            options: GradcheckOptions::default(),
            fault: String::new(),
        }
    }
}

impl RunConfig {
    /// Reads a config file and applies `KEY=VALUE` overrides (dotted keys,
    /// TOML values; anything that does not parse as TOML is a string).
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("reading config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("parsing config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        RunConfig::deserialize(toml::Value::Table(doc)).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    /// Sets every seed in the config.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.init_seed = seed;
        self.train.shuffle_seed = seed;
        self.synthetic.seed = seed;
        self.bench.seed = seed;
        self.gradcheck.seed = seed;
        let n = self.ablation.seeds.len() as u64;
        self.ablation.seeds = (seed..seed + n).collect();
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serialising config: {e}")))
    }
}

fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not KEY=VALUE")))?;
    let key = key.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key {key:?}: {p} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Output root: the environment variable if set, else the working directory.
pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

/// Absolute paths pass through; relative ones hang off the output root.
pub fn under_root(p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out_root().join(p)
    }
}
