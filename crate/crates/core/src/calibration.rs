//! Calibration: fit weight and activation grids on full-precision
//! activations, then pick each layer's noise half-range by a linear search
//! over the expected error change.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{linear_inputs, AttentionQuant, Layer, Model};
use crate::noisy_linear::{LayerType, NoisyBias, QuantLinearLayer, WeightQuant};
use crate::numerics::{sub_seed, Tensor2D};
use crate::quantizers::{
    default_search_alphas, fit_activation_minmax, fit_activation_percentile,
    fit_activation_scale_search, fit_twin_region, fit_weight_minmax, ActQuant, QuantParams,
};
use crate::theory::{delta_closed_form, is_feasible};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActFitter {
    Minmax,
    Percentile { pct: f64 },
    ScaleSearch,
    Twin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    ClosedForm,
    Empirical,
}

/// Which layer types may carry noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseLayers {
    pub qkv: bool,
    pub proj: bool,
    pub fc1: bool,
    pub fc2: bool,
}

impl NoiseLayers {
    pub const ALL: Self = Self { qkv: true, proj: true, fc1: true, fc2: true };
    pub const NONE: Self = Self { qkv: false, proj: false, fc1: false, fc2: false };

    pub fn only(ty: LayerType) -> Self {
        let mut s = Self::NONE;
        s.set(ty, true);
        s
    }

    pub fn enabled(&self, ty: LayerType) -> bool {
        match ty {
            LayerType::Qkv => self.qkv,
            LayerType::Proj => self.proj,
            LayerType::Fc1 => self.fc1,
            LayerType::Fc2 => self.fc2,
            LayerType::Other => false,
        }
    }

    pub fn set(&mut self, ty: LayerType, on: bool) {
        match ty {
            LayerType::Qkv => self.qkv = on,
            LayerType::Proj => self.proj = on,
            LayerType::Fc1 => self.fc1 = on,
            LayerType::Fc2 => self.fc2 = on,
            LayerType::Other => {}
        }
    }

    /// Parses `qkv,proj,fc1,fc2` style lists; `none` and `all` are accepted.
    pub fn parse(list: &str) -> Result<Self> {
        match list.trim() {
            "none" | "" => return Ok(Self::NONE),
            "all" => return Ok(Self::ALL),
            _ => {}
        }
        let mut s = Self::NONE;
        for item in list.split(',') {
            let ty: LayerType = item.trim().parse()?;
            if ty == LayerType::Other {
                return Err(Error::InvalidArgument("layer type `other` cannot carry noise".into()));
            }
            s.set(ty, true);
        }
        Ok(s)
    }
}

/// Default noise grid: 0.05, 0.10, ..., 1.00 activation steps.
pub fn default_noise_grid() -> Vec<f64> {
    (1..=20).map(|i| i as f64 / 20.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibConfig {
    pub bits_w: u32,
    pub bits_a: u32,
    pub fitter: ActFitter,
    /// Candidate half-ranges as fractions of the activation scale.
    pub noise_grid: Vec<f64>,
    pub objective: Objective,
    pub noise_layers: NoiseLayers,
    pub seed: u64,
    /// Number of calibration batches used (taken from the front of the data).
    pub calib_samples: usize,
    /// Refit the activation grid on `X + N` after the search.
    pub refit_after_noise: bool,
    /// Required margin of a candidate's gain, in standard errors of `L`.
    pub min_gain_z: f64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            bits_w: 6,
            bits_a: 6,
            fitter: ActFitter::Percentile { pct: 99.9 },
            noise_grid: default_noise_grid(),
            objective: Objective::Empirical,
            noise_layers: NoiseLayers::ALL,
            seed: 0,
            calib_samples: 256,
            refit_after_noise: false,
            min_gain_z: 3.0,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        if self.noise_grid.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::InvalidArgument("noise grid fractions must lie in (0, 1]".into()));
        }
        if !(self.min_gain_z >= 0.0 && self.min_gain_z.is_finite()) {
            return Err(Error::InvalidArgument("min_gain_z must be finite and non-negative".into()));
        }
        if self.calib_samples == 0 {
            return Err(Error::InvalidArgument("calib_samples must be at least 1".into()));
        }
        if let ActFitter::Percentile { pct } = self.fitter {
            if !(pct > 0.0 && pct <= 100.0) {
                return Err(Error::InvalidArgument(format!("percentile {pct} outside (0, 100]")));
            }
        }
        for bits in [self.bits_w, self.bits_a] {
            if !(2..=16).contains(&bits) {
                return Err(Error::InvalidArgument(format!("bit width {bits} outside 2..=16")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCalib {
    pub index: usize,
    pub name: String,
    pub layer_type: LayerType,
    pub weight: QuantParams,
    pub act: ActQuant,
    /// Chosen half-range; 0 when noise is off for this layer.
    pub n: f64,
    /// Per-element objective at `n`.
    pub objective: f64,
    pub noise_seed: u64,
    /// The search ran but no candidate cleared the gain margin.
    pub noise_rejected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionCalib {
    pub index: usize,
    pub grids: AttentionQuant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibResult {
    pub config: CalibConfig,
    pub layers: Vec<LayerCalib>,
    pub attention: Vec<AttentionCalib>,
}

impl CalibResult {
    /// Copy with noise switched off on every layer whose type is disabled
    /// in `mask`. Noise on enabled types is left as calibrated.
    pub fn masked(&self, mask: NoiseLayers) -> Self {
        let mut out = self.clone();
        for l in &mut out.layers {
            if !mask.enabled(l.layer_type) {
                l.n = 0.0;
                l.objective = 0.0;
            }
        }
        out.config.noise_layers = NoiseLayers {
            qkv: mask.qkv && self.config.noise_layers.qkv,
            proj: mask.proj && self.config.noise_layers.proj,
            fc1: mask.fc1 && self.config.noise_layers.fc1,
            fc2: mask.fc2 && self.config.noise_layers.fc2,
        };
        out
    }
}

/// Per linear layer (keyed by layer index): the full-precision inputs over
/// the calibration batches, concatenated along tokens in batch order.
pub fn collect_activations(model: &Model, data: &[Tensor2D]) -> Result<BTreeMap<usize, Tensor2D>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty calibration data".into()));
    }
    linear_inputs(model, data)
}

/// Mean and standard error of the per-element error change.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveStat {
    pub mean: f64,
    pub std_error: f64,
}

impl ObjectiveStat {
    fn from_terms(terms: &[f64]) -> Self {
        let k = terms.len();
        if k == 0 {
            return Self { mean: 0.0, std_error: 0.0 };
        }
        let mean = terms.iter().sum::<f64>() / k as f64;
        let var = if k > 1 {
            terms.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (k - 1) as f64
        } else {
            0.0
        };
        Self { mean, std_error: (var / k as f64).sqrt() }
    }
}

/// Per-element objective `L(n)`.
///
/// `ClosedForm` sums the closed-form error change over in-range elements
/// whose window `x <= n <= 2b - x` admits `n` (others contribute 0).
/// `Empirical` draws the layer's noise column from `seed` (broadcast over
/// tokens as at inference) and measures `QE(X + N) - QE(X)` directly.
pub fn objective_l(activations: &Tensor2D, act: &ActQuant, n: f64, mode: Objective, seed: u64) -> Result<f64> {
    Ok(objective_stat(activations, act, n, mode, seed)?.mean)
}

/// [`objective_l`] together with its standard error over elements.
pub fn objective_stat(
    activations: &Tensor2D,
    act: &ActQuant,
    n: f64,
    mode: Objective,
    seed: u64,
) -> Result<ObjectiveStat> {
    let terms = match mode {
        Objective::ClosedForm => act
            .snapshot_distances(activations.data())
            .into_iter()
            .map(|d| match d {
                Some((x, b)) if is_feasible(x, n, b) => delta_closed_form(x, n, b),
                _ => Ok(0.0),
            })
            .collect::<Result<Vec<_>>>()?,
        Objective::Empirical => {
            let a_scale = act.reference_scale().unwrap_or(1.0);
            let noise = NoisyBias::sample(activations.rows(), n as f32, seed, a_scale)?;
            let shifted = activations.add_column(noise.values())?;
            let qx = act.quantize(activations)?;
            let qs = act.quantize(&shifted)?;
            let sq = |a: f32, b: f32| {
                let d = a as f64 - b as f64;
                d * d
            };
            (0..activations.len())
                .map(|i| {
                    sq(qs.data()[i], shifted.data()[i]) - sq(qx.data()[i], activations.data()[i])
                })
                .collect()
        }
    };
    Ok(ObjectiveStat::from_terms(&terms))
}

/// Outcome of [`search_noise_range`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseChoice {
    pub n: f64,
    pub objective: f64,
}

/// Evaluates `L` at `n = frac * scale` for every grid fraction and returns
/// the minimizer (first one on ties). A candidate only counts when
/// `L < -min_gain_z * std_error`; with none left, noise is disabled
/// (`n = 0`, objective 0).
pub fn search_noise_range(
    activations: &Tensor2D,
    act: &ActQuant,
    grid: &[f64],
    mode: Objective,
    seed: u64,
    min_gain_z: f64,
) -> Result<NoiseChoice> {
    let Some(scale) = act.reference_scale() else {
        return Ok(NoiseChoice { n: 0.0, objective: 0.0 });
    };
    let mut best = NoiseChoice { n: 0.0, objective: 0.0 };
    for &frac in grid {
        // the half-range the layer will actually store
        let n = (frac * scale as f64) as f32 as f64;
        let l = objective_stat(activations, act, n, mode, seed)?;
        if l.mean < best.objective && l.mean < -min_gain_z * l.std_error {
            best = NoiseChoice { n, objective: l.mean };
        }
    }
    Ok(best)
}

fn fit_act(config: &CalibConfig, x: &Tensor2D, layer: &QuantLinearLayer) -> Result<ActQuant> {
    let bits = config.bits_a;
    Ok(match config.fitter {
        ActFitter::Minmax => ActQuant::uniform(fit_activation_minmax(x, bits)?),
        ActFitter::Percentile { pct } => ActQuant::uniform(fit_activation_percentile(x, bits, pct)?),
        ActFitter::ScaleSearch => ActQuant::uniform(
            fit_activation_scale_search(
                x,
                layer.weight(),
                Some(layer.bias()),
                config.bits_w,
                bits,
                &default_search_alphas(),
            )?
            .params,
        ),
        ActFitter::Twin => ActQuant::Twin { params: fit_twin_region(x, bits)? },
    })
}

fn fit_operand(config: &CalibConfig, x: &Tensor2D) -> Result<QuantParams> {
    match config.fitter {
        ActFitter::Percentile { pct } => fit_activation_percentile(x, config.bits_a, pct),
        _ => fit_activation_minmax(x, config.bits_a),
    }
}

/// Fits every quantizer of `model` on `data` and searches per-layer noise.
pub fn calibrate(model: &Model, data: &[Tensor2D], config: &CalibConfig) -> Result<CalibResult> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty calibration data".into()));
    }
    let batches = &data[..config.calib_samples.min(data.len())];

    let mut attn_parts: BTreeMap<usize, [Vec<Tensor2D>; 4]> = BTreeMap::new();
    let mut lin_parts: BTreeMap<usize, Vec<Tensor2D>> = BTreeMap::new();
    for x in batches {
        let t = model.trace(x)?;
        for (i, _) in model.linears() {
            lin_parts.entry(i).or_default().push(t.acts[i].clone());
        }
        for (i, ops) in t.attention {
            let e = attn_parts.entry(i).or_default();
            e[0].push(ops.query);
            e[1].push(ops.key);
            e[2].push(ops.value);
            e[3].push(ops.probs);
        }
    }

    let mut layers = Vec::new();
    for (i, layer) in model.linears() {
        let x = Tensor2D::hcat(&lin_parts[&i])?;
        let weight = fit_weight_minmax(layer.weight(), config.bits_w)?;
        let mut act = fit_act(config, &x, layer)?;
        let noise_seed = sub_seed(config.seed, i as u64, "noisy-bias");
        let enabled = config.noise_layers.enabled(layer.layer_type());
        let choice = if enabled {
            search_noise_range(&x, &act, &config.noise_grid, config.objective, noise_seed, config.min_gain_z)?
        } else {
            NoiseChoice { n: 0.0, objective: 0.0 }
        };
        if config.refit_after_noise && choice.n > 0.0 {
            let a_scale = act.reference_scale().unwrap_or(1.0);
            let noise = NoisyBias::sample(x.rows(), choice.n as f32, noise_seed, a_scale)?;
            act = fit_act(config, &x.add_column(noise.values())?, layer)?;
        }
        layers.push(LayerCalib {
            index: i,
            name: layer.name().to_string(),
            layer_type: layer.layer_type(),
            weight,
            act,
            n: choice.n,
            objective: choice.objective,
            noise_seed,
            noise_rejected: enabled && choice.n == 0.0,
        });
    }

    let attention = attn_parts
        .into_iter()
        .map(|(index, [q, k, v, p])| {
            Ok(AttentionCalib {
                index,
                grids: AttentionQuant {
                    query: fit_operand(config, &Tensor2D::hcat(&q)?)?,
                    key: fit_operand(config, &Tensor2D::hcat(&k)?)?,
                    value: fit_operand(config, &Tensor2D::hcat(&v)?)?,
                    probs: fit_operand(config, &Tensor2D::hcat(&p)?)?,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(CalibResult {
        config: config.clone(),
        layers,
        attention,
    })
}

/// Installs the calibrated quantizers and noisy biases into a copy of `model`.
pub fn apply_calibration(model: &Model, calib: &CalibResult) -> Result<Model> {
    let mut out = model.clone();
    let layers = out.layers_mut();
    for lc in &calib.layers {
        let Some(Layer::Linear(l)) = layers.get(lc.index) else {
            return Err(Error::Shape(format!("calibration layer {} is not linear", lc.index)));
        };
        if l.name() != lc.name {
            return Err(Error::Shape(format!(
                "calibration for {} does not match layer {}",
                lc.name,
                l.name()
            )));
        }
        let q = l.with_quantizers(WeightQuant::Channel { params: lc.weight.clone() }, lc.act.clone())?;
        layers[lc.index] = Layer::Linear(q.attach_noise(lc.n as f32, lc.noise_seed)?);
    }
    for ac in &calib.attention {
        match layers.get_mut(ac.index) {
            Some(Layer::Attention { quant, .. }) => *quant = Some(ac.grids.clone()),
            _ => return Err(Error::Shape(format!("layer {} is not attention", ac.index))),
        }
    }
    Ok(out)
}
