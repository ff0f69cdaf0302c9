//! Flag definitions. Every subcommand's flags can also come from a JSON
//! file passed with `--config`; keys are the flag names with underscores,
//! and flags given on the command line win.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "noisyquant", version, about = "Noisy-bias post-training quantization toolkit")]
pub struct Cli {
    /// Log filter (e.g. `info`, `debug`, `noisyquant_core=trace`).
    #[arg(long, global = true, default_value = "warn")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sweep the noise half-range and the threshold distance on a snapshot.
    VerifyTheory(Flags<VerifyTheoryArgs>),
    /// Generate a random encoder-block model bundle.
    GenModel(Flags<GenModelArgs>),
    /// Generate Gaussian input batches for a model.
    GenData(Flags<GenDataArgs>),
    /// Fit quantizers and search per-layer noise.
    Calibrate(Flags<CalibrateArgs>),
    /// Report quantization errors and model-output metrics.
    Evaluate(Flags<EvaluateArgs>),
    /// Evaluate every per-layer-type noise pattern.
    Ablate(Flags<AblateArgs>),
    /// Re-run a command from its manifest and compare output hashes.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
pub struct Flags<T: Args> {
    /// JSON file with default values for this command's flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub args: T,
}

impl<T: Args + Serialize + DeserializeOwned> Flags<T> {
    /// Config-file values overlaid by explicitly given flags.
    pub fn merged(&self) -> CliResult<T> {
        let Some(path) = &self.config else {
            return to_value(&self.args).and_then(from_value);
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut base: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("config {}: {e}", path.display())))?;
        // reject unknown keys before merging
        from_value::<T>(base.clone())?;
        let Value::Object(base_map) = &mut base else {
            return Err(CliError::config("config file must hold a JSON object"));
        };
        if let Value::Object(flags) = to_value(&self.args)? {
            for (k, v) in flags {
                if !v.is_null() {
                    base_map.insert(k, v);
                }
            }
        }
        from_value(base)
    }
}

fn to_value<T: Serialize>(v: &T) -> CliResult<Value> {
    serde_json::to_value(v).map_err(|e| CliError::config(e.to_string()))
}

fn from_value<T: DeserializeOwned>(v: Value) -> CliResult<T> {
    serde_json::from_value(v).map_err(|e| CliError::config(format!("config: {e}")))
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyTheoryArgs {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Which sweep(s) to run.
    #[arg(long, value_enum)]
    pub sweep: Option<SweepArg>,
    /// Half bin width.
    #[arg(long)]
    pub b: Option<f64>,
    /// Threshold distance held fixed in the noise sweep.
    #[arg(long)]
    pub x: Option<f64>,
    #[arg(long)]
    pub n_start: Option<f64>,
    #[arg(long)]
    pub n_end: Option<f64>,
    #[arg(long)]
    pub n_step: Option<f64>,
    /// Noise half-range held fixed in the distance sweep.
    #[arg(long)]
    pub n: Option<f64>,
    #[arg(long)]
    pub x_start: Option<f64>,
    #[arg(long)]
    pub x_end: Option<f64>,
    #[arg(long)]
    pub x_step: Option<f64>,
    /// Elements per snapshot instance.
    #[arg(long)]
    pub elements: Option<usize>,
    /// Independent instances per grid point.
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepArg {
    N,
    X,
    Both,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenModelArgs {
    /// Bundle directory to create.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub tokens: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub mlp: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataArgs {
    /// Model bundle whose input shape is used.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Directory for the batch files.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of batches.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitterArg {
    Minmax,
    Percentile,
    #[value(name = "scale_search", alias = "scale-search")]
    ScaleSearch,
    Twin,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveArg {
    #[value(name = "closed_form", alias = "closed-form")]
    ClosedForm,
    Empirical,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Directory of calibration batches.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for `calib.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub bits_w: Option<u32>,
    #[arg(long)]
    pub bits_a: Option<u32>,
    #[arg(long, value_enum)]
    pub fitter: Option<FitterArg>,
    /// Percentile used by the `percentile` fitter.
    #[arg(long)]
    pub percentile: Option<f64>,
    #[arg(long, value_enum)]
    pub objective: Option<ObjectiveArg>,
    /// Layer types allowed to carry noise: `all`, `none`, or a list like `qkv,fc2`.
    #[arg(long)]
    pub noise_layers: Option<String>,
    /// Noise half-range candidates as fractions of the activation step.
    #[arg(long, value_delimiter = ',')]
    pub noise_grid: Option<Vec<f64>>,
    /// Batches used for calibration.
    #[arg(long)]
    pub calib_samples: Option<usize>,
    /// Required gain of a noise candidate, in standard errors.
    #[arg(long)]
    pub min_gain_z: Option<f64>,
    /// Refit activation grids on the noisy activations.
    #[arg(long)]
    pub refit_after_noise: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Directory of evaluation batches.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Calibration result (`calib.json`).
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    /// Manifest written by an earlier run.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for the re-run outputs (default: `<manifest dir>/replay`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_prefers_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, r#"{"count": 3, "seed": 1}"#).unwrap();
        let flags = Flags {
            config: Some(cfg.clone()),
            args: GenDataArgs { seed: Some(2), ..Default::default() },
        };
        let m = flags.merged().unwrap();
        assert_eq!((m.count, m.seed), (Some(3), Some(2)));

        std::fs::write(&cfg, "[1, 2]").unwrap();
        assert!(matches!(flags.merged(), Err(CliError::Config(_))));
    }
}
