//! Resolved per-command configurations and their `run.json` echo.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use crowd_density::corpus::Split;
use crowd_density::evaluation::DEFAULT_AREA_RATIOS;
use crowd_density::groundtruth::GtMode;
use crowd_density::network::NetworkConfig;
use crowd_density::synth::{SceneParams, SplitFractions};
use crowd_density::training::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// A problem with the user's input; reported with exit status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

fn default_out(command: &str) -> PathBuf {
    Path::new("runs").join(command)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthRun {
    pub id: String,
    pub count: usize,
    pub scene: SceneParams,
    pub split: SplitFractions,
    pub out: PathBuf,
}

impl Default for SynthRun {
    fn default() -> Self {
        SynthRun {
            id: "synthetic".into(),
            count: 200,
            scene: SceneParams::default(),
            split: SplitFractions::default(),
            out: default_out("synth"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GtRun {
    pub manifest: Option<PathBuf>,
    pub gt: GtMode,
    pub out: PathBuf,
}

impl Default for GtRun {
    fn default() -> Self {
        GtRun {
            manifest: None,
            gt: GtMode::default(),
            out: default_out("gt"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRun {
    pub manifest: Option<PathBuf>,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub precision: Precision,
    pub out: PathBuf,
}

impl Default for TrainRun {
    fn default() -> Self {
        TrainRun {
            manifest: None,
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            precision: Precision::default(),
            out: default_out("train"),
        }
    }
}

/// Shared by `eval`, `sweep` and `cross-eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRun {
    pub checkpoint: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    /// Taken from the `run.json` beside the checkpoint when absent.
    pub network: Option<NetworkConfig>,
    pub split: Split,
    pub precision: Precision,
    /// Only used by `sweep`.
    pub ratios: Vec<f64>,
    pub out: PathBuf,
}

impl EvalRun {
    pub fn new(command: &str) -> Self {
        EvalRun {
            checkpoint: None,
            manifest: None,
            network: None,
            split: Split::Test,
            precision: Precision::default(),
            ratios: DEFAULT_AREA_RATIOS.to_vec(),
            out: default_out(command),
        }
    }
}

impl Default for EvalRun {
    fn default() -> Self {
        EvalRun::new("eval")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckRun {
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for GradcheckRun {
    fn default() -> Self {
        GradcheckRun {
            seed: 0,
            out: default_out("gradcheck"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixerTestRun {
    pub groups: usize,
    pub draws: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for MixerTestRun {
    fn default() -> Self {
        MixerTestRun {
            groups: 6,
            draws: 10_000,
            seed: 0,
            out: default_out("mixer-test"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportRun {
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Read a configuration file. Either a bare configuration or the `run.json`
/// of an earlier run of the same command is accepted.
pub fn load<C: DeserializeOwned>(path: &Path, command: &str) -> Result<C> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| usage(format!("config {} is not valid JSON: {e}", path.display())))?;
    if let Some(echoed) = value.get("command").and_then(|c| c.as_str()) {
        if echoed != command {
            return Err(usage(format!(
                "{} was written by `{echoed}`, not `{command}`",
                path.display()
            )));
        }
        value = value.get("config").cloned().unwrap_or_default();
    }
    serde_json::from_value(value).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

#[derive(Serialize, Deserialize)]
pub struct RunEcho<C> {
    pub command: String,
    pub config: C,
}

/// Write the resolved configuration as `dir/run.json`.
pub fn echo<C: Serialize>(dir: &Path, command: &str, config: &C) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("run.json");
    let body = serde_json::to_string_pretty(&RunEcho {
        command: command.to_string(),
        config,
    })?;
    fs::write(&path, body + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Network configuration echoed by the training run that wrote `checkpoint`.
pub fn network_beside(checkpoint: &Path) -> Result<NetworkConfig> {
    let run = checkpoint.parent().unwrap_or(Path::new(".")).join("run.json");
    if !run.exists() {
        return Err(usage(format!(
            "no network configuration given and no run.json beside {}",
            checkpoint.display()
        )));
    }
    let train: TrainRun = load(&run, "train")?;
    Ok(train.network)
}
