use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use betavae::nn::ModelConfig;
use betavae::training::{StageConfig, LARGE_BETA, SMALL_BETA, STAGE2_EPOCH_RATIO};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const OUTPUT_ROOT_ENV: &str = "BETAVAE_OUTPUT_ROOT";
pub const CONFIG_FILE: &str = "config.json";
pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n: usize,
    pub dims: [usize; 3],
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: 30,
            dims: [32, 32, 32],
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub train_fraction: f64,
    pub split_seed: u64,
    pub gamma: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            split_seed: 7,
            gamma: 1.0,
        }
    }
}

/// Every knob of a run. Missing fields take their defaults, so a partial
/// JSON document is a valid override.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub stage1_large: StageConfig,
    pub stage1_small: StageConfig,
    pub stage2: StageConfig,
    pub eval: EvalConfig,
    pub output_root: Option<PathBuf>,
    /// Zero the wall-clock column of curve CSVs so reruns are byte-identical.
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let epochs = 200;
        Self {
            data: DataConfig::default(),
            model: ModelConfig::toy(),
            stage1_large: StageConfig::stage1(LARGE_BETA, epochs, 1),
            stage1_small: StageConfig::stage1(SMALL_BETA, epochs, 1),
            stage2: StageConfig::stage2(STAGE2_EPOCH_RATIO * epochs, 2),
            eval: EvalConfig::default(),
            output_root: None,
            deterministic: true,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let config: Self =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        config.model.validate()?;
        Ok(config)
    }

    /// sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Resolves and creates the run directory. An explicit `--out` must be
/// absent or empty; run directories are never written into twice.
pub fn run_dir(out: Option<&Path>, command: &str, config: &RunConfig) -> Result<PathBuf> {
    let dir = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var_os(OUTPUT_ROOT_ENV)
                .map(PathBuf::from)
                .or_else(|| config.output_root.clone())
                .unwrap_or_else(|| PathBuf::from("runs"));
            let ts = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            let base = format!("{command}-{ts}-{}", &config.hash()[..8]);
            let mut dir = root.join(&base);
            let mut k = 1;
            while dir.exists() {
                dir = root.join(format!("{base}-{k}"));
                k += 1;
            }
            dir
        }
    };
    if dir.exists() {
        let nonempty = std::fs::read_dir(&dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if nonempty {
            bail!("output directory {} is not empty; run directories are append-only", dir.display());
        }
    }
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(config)?)?;
    Ok(dir)
}

#[derive(Debug, Serialize)]
pub struct RunRecord<'a> {
    pub command: &'a str,
    pub args: Vec<String>,
    pub config_hash: String,
    /// Input name to sha256 of its manifest or parameters.
    pub inputs: Vec<(String, String)>,
}

pub fn write_run_record(dir: &Path, record: &RunRecord<'_>) -> Result<()> {
    std::fs::write(dir.join(RUN_FILE), serde_json::to_string_pretty(record)?)?;
    Ok(())
}
