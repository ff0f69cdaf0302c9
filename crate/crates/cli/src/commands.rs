//! Resolved per-command configurations and their execution.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tracing::info;

use noisyquant_core::calibration::{
    apply_calibration, calibrate, default_noise_grid, ActFitter, CalibConfig, CalibResult, NoiseLayers,
    Objective,
};
use noisyquant_core::model::{evaluate, gen_data, gen_model, load_batches, save_batches, Model, ModelDims};
use noisyquant_core::noisy_linear::{LayerType, QEReport};
use noisyquant_core::numerics::io::write_atomic;
use noisyquant_core::numerics::Tensor2D;
use noisyquant_core::theory::{linear_grid, sweep_n, sweep_x, SnapshotSpec};

use crate::args::*;
use crate::error::{CliError, CliResult, Loading};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    pub sweep: SweepArg,
    pub b: f64,
    pub x: f64,
    pub n_start: f64,
    pub n_end: f64,
    pub n_step: f64,
    pub n: f64,
    pub x_start: f64,
    pub x_end: f64,
    pub x_step: f64,
    pub elements: usize,
    pub instances: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenModelConfig {
    pub dims: ModelDims,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub model: PathBuf,
    pub count: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateConfig {
    pub model: PathBuf,
    pub data: PathBuf,
    pub calib: CalibConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub model: PathBuf,
    pub data: PathBuf,
    pub calib: PathBuf,
}

/// A command with every parameter resolved; this is what a manifest stores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "config", rename_all = "kebab-case")]
pub enum Resolved {
    VerifyTheory(TheoryConfig),
    GenModel(GenModelConfig),
    GenData(GenDataConfig),
    Calibrate(CalibrateConfig),
    Evaluate(EvaluateConfig),
    Ablate(EvaluateConfig),
}

impl Resolved {
    pub fn name(&self) -> &'static str {
        match self {
            Self::VerifyTheory(_) => "verify-theory",
            Self::GenModel(_) => "gen-model",
            Self::GenData(_) => "gen-data",
            Self::Calibrate(_) => "calibrate",
            Self::Evaluate(_) => "evaluate",
            Self::Ablate(_) => "ablate",
        }
    }

    /// Seeds consumed by the command, by role.
    pub fn seeds(&self) -> Vec<(&'static str, u64)> {
        match self {
            Self::VerifyTheory(c) => vec![("master", c.seed)],
            Self::GenModel(c) => vec![("master", c.seed)],
            Self::GenData(c) => vec![("master", c.seed)],
            Self::Calibrate(c) => vec![("master", c.calib.seed)],
            Self::Evaluate(_) | Self::Ablate(_) => vec![],
        }
    }

    /// Files and directories read by the command.
    pub fn inputs(&self) -> Vec<&Path> {
        match self {
            Self::VerifyTheory(_) | Self::GenModel(_) => vec![],
            Self::GenData(c) => vec![&c.model],
            Self::Calibrate(c) => vec![&c.model, &c.data],
            Self::Evaluate(c) | Self::Ablate(c) => vec![&c.model, &c.data, &c.calib],
        }
    }

    /// Runs the command, writing into `out`; returns the written files
    /// relative to `out`.
    pub fn execute(&self, out: &Path) -> CliResult<Vec<PathBuf>> {
        fs::create_dir_all(out)
            .map_err(|e| CliError::io(format!("cannot create {}: {e}", out.display())))?;
        match self {
            Self::VerifyTheory(c) => run_theory(c, out),
            Self::GenModel(c) => run_gen_model(c, out),
            Self::GenData(c) => run_gen_data(c, out),
            Self::Calibrate(c) => run_calibrate(c, out),
            Self::Evaluate(c) => run_evaluate(c, out),
            Self::Ablate(c) => run_ablate(c, out),
        }
    }
}

fn required(p: Option<PathBuf>, flag: &str) -> CliResult<PathBuf> {
    p.ok_or_else(|| CliError::config(format!("missing --{flag}")))
}

/// Input paths are stored absolute so a manifest can be replayed from any
/// working directory.
fn input_path(p: Option<PathBuf>, flag: &str) -> CliResult<PathBuf> {
    let p = required(p, flag)?;
    fs::canonicalize(&p).map_err(|e| CliError::io(format!("--{flag} {}: {e}", p.display())))
}

pub fn resolve_theory(a: VerifyTheoryArgs) -> CliResult<(Resolved, PathBuf)> {
    let c = TheoryConfig {
        sweep: a.sweep.unwrap_or(SweepArg::Both),
        b: a.b.unwrap_or(1.0),
        x: a.x.unwrap_or(0.1),
        n_start: a.n_start.unwrap_or(0.1),
        n_end: a.n_end.unwrap_or(1.9),
        n_step: a.n_step.unwrap_or(0.1),
        n: a.n.unwrap_or(1.4),
        x_start: a.x_start.unwrap_or(0.0),
        x_end: a.x_end.unwrap_or(0.6),
        x_step: a.x_step.unwrap_or(0.05),
        elements: a.elements.unwrap_or(20),
        instances: a.instances.unwrap_or(10),
        seed: a.seed.unwrap_or(0),
    };
    if c.elements == 0 || c.instances == 0 {
        return Err(CliError::config("--elements and --instances must be at least 1"));
    }
    Ok((Resolved::VerifyTheory(c), required(a.out, "out")?))
}

pub fn resolve_gen_model(a: GenModelArgs) -> CliResult<(Resolved, PathBuf)> {
    let d = ModelDims::default();
    let dims = ModelDims {
        tokens: a.tokens.unwrap_or(d.tokens),
        width: a.width.unwrap_or(d.width),
        mlp: a.mlp.unwrap_or(d.mlp),
        heads: a.heads.unwrap_or(d.heads),
        classes: a.classes.unwrap_or(d.classes),
    };
    dims.validate().map_err(|e| CliError::config(e.to_string()))?;
    let c = GenModelConfig { dims, seed: a.seed.unwrap_or(0) };
    Ok((Resolved::GenModel(c), required(a.out, "out")?))
}

pub fn resolve_gen_data(a: GenDataArgs) -> CliResult<(Resolved, PathBuf)> {
    let count = a.count.unwrap_or(256);
    if count == 0 {
        return Err(CliError::config("--count must be at least 1"));
    }
    let c = GenDataConfig { model: input_path(a.model, "model")?, count, seed: a.seed.unwrap_or(0) };
    Ok((Resolved::GenData(c), required(a.out, "out")?))
}

pub fn resolve_calibrate(a: CalibrateArgs) -> CliResult<(Resolved, PathBuf)> {
    let d = CalibConfig::default();
    let fitter = match (a.fitter, a.percentile) {
        (Some(FitterArg::Minmax), _) => ActFitter::Minmax,
        (Some(FitterArg::ScaleSearch), _) => ActFitter::ScaleSearch,
        (Some(FitterArg::Twin), _) => ActFitter::Twin,
        (Some(FitterArg::Percentile), Some(pct)) => ActFitter::Percentile { pct },
        (Some(FitterArg::Percentile), None) => ActFitter::Percentile { pct: 99.9 },
        (None, Some(pct)) => ActFitter::Percentile { pct },
        (None, None) => d.fitter,
    };
    if a.percentile.is_some() && !matches!(fitter, ActFitter::Percentile { .. }) {
        return Err(CliError::config("--percentile only applies to the percentile fitter"));
    }
    let noise_layers = match &a.noise_layers {
        Some(s) => NoiseLayers::parse(s).map_err(|e| CliError::config(e.to_string()))?,
        None => d.noise_layers,
    };
    let calib = CalibConfig {
        bits_w: a.bits_w.unwrap_or(d.bits_w),
        bits_a: a.bits_a.unwrap_or(d.bits_a),
        fitter,
        noise_grid: a.noise_grid.unwrap_or_else(default_noise_grid),
        objective: match a.objective {
            Some(ObjectiveArg::ClosedForm) => Objective::ClosedForm,
            Some(ObjectiveArg::Empirical) => Objective::Empirical,
            None => d.objective,
        },
        noise_layers,
        seed: a.seed.unwrap_or(d.seed),
        calib_samples: a.calib_samples.unwrap_or(d.calib_samples),
        refit_after_noise: a.refit_after_noise.unwrap_or(d.refit_after_noise),
        min_gain_z: a.min_gain_z.unwrap_or(d.min_gain_z),
    };
    calib.validate().map_err(|e| CliError::config(e.to_string()))?;
    let c = CalibrateConfig { model: input_path(a.model, "model")?, data: input_path(a.data, "data")?, calib };
    Ok((Resolved::Calibrate(c), required(a.out, "out")?))
}

fn resolve_eval_config(model: Option<PathBuf>, data: Option<PathBuf>, calib: Option<PathBuf>) -> CliResult<EvaluateConfig> {
    Ok(EvaluateConfig {
        model: input_path(model, "model")?,
        data: input_path(data, "data")?,
        calib: input_path(calib, "calib")?,
    })
}

pub fn resolve_evaluate(a: EvaluateArgs) -> CliResult<(Resolved, PathBuf)> {
    let c = resolve_eval_config(a.model, a.data, a.calib)?;
    Ok((Resolved::Evaluate(c), required(a.out, "out")?))
}

pub fn resolve_ablate(a: AblateArgs) -> CliResult<(Resolved, PathBuf)> {
    let c = resolve_eval_config(a.model, a.data, a.calib)?;
    Ok((Resolved::Ablate(c), required(a.out, "out")?))
}

fn write_file(out: &Path, rel: impl Into<PathBuf>, bytes: &[u8]) -> CliResult<PathBuf> {
    let rel = rel.into();
    let path = out.join(&rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| CliError::io(format!("cannot create {}: {e}", parent.display())))?;
    }
    write_atomic(&path, bytes).map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))?;
    Ok(rel)
}

fn json_bytes<T: Serialize>(v: &T) -> CliResult<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v).map_err(|e| CliError::io(e.to_string()))?;
    s.push(b'\n');
    Ok(s)
}

fn run_theory(c: &TheoryConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    if !(c.b > 0.0 && c.b.is_finite()) {
        return Err(CliError::precondition(format!("b must be positive, got {}", c.b)));
    }
    let template = SnapshotSpec {
        elements: c.elements,
        instances: c.instances,
        seed: c.seed,
        ..SnapshotSpec::new(c.x, c.b, c.n)
    };
    let mut written = Vec::new();
    if matches!(c.sweep, SweepArg::N | SweepArg::Both) {
        if !(0.0..=c.b).contains(&c.x) {
            return Err(CliError::precondition(format!("x = {} lies outside [0, b = {}]", c.x, c.b)));
        }
        let grid = linear_grid(c.n_start, c.n_end, c.n_step).map_err(|e| CliError::config(e.to_string()))?;
        let curve = sweep_n(c.x, c.b, &grid, &template)?;
        info!(points = curve.len(), "noise sweep done");
        written.push(write_file(out, "sweep_n.csv", curve.to_csv().as_bytes())?);
    }
    if matches!(c.sweep, SweepArg::X | SweepArg::Both) {
        if !(c.n > 0.0 && c.n <= 2.0 * c.b) {
            return Err(CliError::precondition(format!("n = {} lies outside (0, 2b = {}]", c.n, 2.0 * c.b)));
        }
        let grid = linear_grid(c.x_start, c.x_end, c.x_step).map_err(|e| CliError::config(e.to_string()))?;
        let curve = sweep_x(c.n, c.b, &grid, &template)?;
        info!(points = curve.len(), root = ?curve.empirical_root(), "distance sweep done");
        written.push(write_file(out, "sweep_x.csv", curve.to_csv().as_bytes())?);
    }
    Ok(written)
}

fn list_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = fs::read_dir(&d).map_err(|e| CliError::io(format!("{}: {e}", d.display())))?;
        for e in entries {
            let p = e.map_err(|e| CliError::io(e.to_string()))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    Ok(files)
}

/// Writes into a fresh staging directory, then moves every file into `out`.
fn relocate(staging: &Path, out: &Path) -> CliResult<Vec<PathBuf>> {
    let mut written = Vec::new();
    for p in list_files(staging)? {
        let rel = p.strip_prefix(staging).expect("listed under staging").to_path_buf();
        let target = out.join(&rel);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(e.to_string()))?;
        }
        fs::rename(&p, &target).map_err(|e| CliError::io(format!("{}: {e}", target.display())))?;
        written.push(rel);
    }
    fs::remove_dir_all(staging).map_err(|e| CliError::io(e.to_string()))?;
    Ok(written)
}

fn staging_dir(out: &Path) -> CliResult<PathBuf> {
    let dir = out.join(".staging");
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| CliError::io(e.to_string()))?;
    }
    Ok(dir)
}

fn run_gen_model(c: &GenModelConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    let model = gen_model(c.dims, c.seed)?;
    let staging = staging_dir(out)?;
    fs::create_dir_all(&staging).map_err(|e| CliError::io(e.to_string()))?;
    model.save(&staging).map_err(|e| CliError::io(e.to_string()))?;
    relocate(&staging, out)
}

fn load_model(path: &Path) -> CliResult<Model> {
    Model::load(path).loading("model", path)
}

fn load_data(path: &Path) -> CliResult<Vec<Tensor2D>> {
    load_batches(path).loading("data", path)
}

fn load_calib(path: &Path) -> CliResult<CalibResult> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("calib {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::io(format!("calib {}: {e}", path.display())))
}

fn run_gen_data(c: &GenDataConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    let model = load_model(&c.model)?;
    let batches = gen_data(&model.spec().dims, c.count, c.seed)?;
    let staging = staging_dir(out)?;
    save_batches(&staging, &batches).map_err(|e| CliError::io(e.to_string()))?;
    relocate(&staging, out)
}

fn run_calibrate(c: &CalibrateConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    let model = load_model(&c.model)?;
    let data = load_data(&c.data)?;
    let result = calibrate(&model, &data, &c.calib)?;
    for l in &result.layers {
        info!(layer = %l.name, n = l.n, objective = l.objective, "calibrated");
    }
    Ok(vec![write_file(out, "calib.json", &json_bytes(&result)?)?])
}

fn qe_csv(reports: &[QEReport]) -> String {
    let mut s = String::from(QEReport::CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

fn run_evaluate(c: &EvaluateConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    let model = load_model(&c.model)?;
    let data = load_data(&c.data)?;
    let calib = load_calib(&c.calib)?;
    let quantized = apply_calibration(&model, &calib)?;
    let metrics = evaluate(&quantized, &data)?;

    let mut written = vec![
        write_file(out, "metrics.json", &json_bytes(&metrics)?)?,
        write_file(out, "qe_report.csv", qe_csv(&metrics.reports).as_bytes())?,
    ];
    let mut by_type = String::from("layer_type,layers,input_qe,input_qe_noisy,D,output_qe,output_qe_noisy,drop_pct\n");
    for t in &metrics.by_type {
        by_type.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            t.layer_type, t.layers, t.input_qe, t.input_qe_noisy, t.delta, t.output_qe, t.output_qe_noisy, t.drop_pct
        ));
    }
    written.push(write_file(out, "qe_by_type.csv", by_type.as_bytes())?);
    for r in &metrics.reports {
        written.push(write_file(out, format!("histograms/{}.input.csv", r.layer), r.input_histogram.to_csv().as_bytes())?);
        written.push(write_file(out, format!("histograms/{}.output.csv", r.layer), r.output_histogram.to_csv().as_bytes())?);
    }
    Ok(written)
}

/// The enable patterns of the layer-type ablation, in report order.
pub fn ablation_patterns() -> Vec<(&'static str, NoiseLayers)> {
    let mut p = vec![("none", NoiseLayers::NONE)];
    for ty in LayerType::NOISY {
        p.push((ty.as_str(), NoiseLayers::only(ty)));
    }
    p.push(("all", NoiseLayers::ALL));
    p
}

pub const ABLATION_HEADER: &str = "pattern,output_mse,agreement,input_qe_total,input_qe_noisy_total,D_total";

fn run_ablate(c: &EvaluateConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    let model = load_model(&c.model)?;
    let data = load_data(&c.data)?;
    let calib = load_calib(&c.calib)?;
    let mut table = format!("{ABLATION_HEADER}\n");
    let mut written = Vec::new();
    for (name, mask) in ablation_patterns() {
        let quantized = apply_calibration(&model, &calib.masked(mask))?;
        let m = evaluate(&quantized, &data)?;
        let sum = |f: fn(&QEReport) -> f64| m.reports.iter().map(f).sum::<f64>();
        table.push_str(&format!(
            "{name},{},{},{},{},{}\n",
            m.output_mse_noisy,
            m.agreement_noisy,
            sum(|r| r.input_qe),
            sum(|r| r.input_qe_noisy),
            sum(|r| r.delta)
        ));
        written.push(write_file(out, format!("qe_report_{name}.csv"), qe_csv(&m.reports).as_bytes())?);
        info!(pattern = name, mse = m.output_mse_noisy, "ablation row");
    }
    written.insert(0, write_file(out, "ablation.csv", table.as_bytes())?);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_rows_in_table_order() {
        let names: Vec<_> = ablation_patterns().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["none", "qkv", "proj", "fc1", "fc2", "all"]);
    }

    #[test]
    fn theory_defaults() {
        let (r, _) = resolve_theory(VerifyTheoryArgs { out: Some("o".into()), ..Default::default() }).unwrap();
        let Resolved::VerifyTheory(c) = r else { panic!() };
        assert_eq!((c.x, c.b, c.n, c.elements, c.instances), (0.1, 1.0, 1.4, 20, 10));
        assert!(resolve_theory(VerifyTheoryArgs::default()).is_err());
    }

    #[test]
    fn resolved_round_trips_through_json() {
        let r = Resolved::GenModel(GenModelConfig { dims: ModelDims::default(), seed: 5 });
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["name"], "gen-model");
        assert_eq!(serde_json::from_value::<Resolved>(v).unwrap(), r);
    }
}
