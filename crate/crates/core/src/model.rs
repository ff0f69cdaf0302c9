//! Desk-scale transformer encoder block and evaluation.
//!
//! Activations are `features x tokens`: each column is one token. The block
//! is `LN -> qkv -> attention -> proj -> +res -> LN -> fc1 -> GELU -> fc2 ->
//! +res -> LN -> head`. Softmax, LayerNorm and residual adds stay in full
//! precision; attention-score and attention-value matmuls quantize their
//! operands with per-tensor grids and never carry noise.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noisy_linear::{LayerType, QEReport, QuantLinearLayer};
use crate::numerics::io::write_atomic;
use crate::numerics::{
    gelu, layernorm_columns, load_tensor, matmul, normal_tensor, save_tensor, softmax_rows, Rng,
    Tensor2D,
};
use crate::quantizers::QuantParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub tokens: usize,
    pub width: usize,
    pub mlp: usize,
    pub heads: usize,
    pub classes: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            tokens: 16,
            width: 64,
            mlp: 256,
            heads: 4,
            classes: 10,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let ModelDims { tokens, width, mlp, heads, classes } = *self;
        if tokens == 0 || width == 0 || mlp == 0 || heads == 0 || classes == 0 {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        if width % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(())
    }
}

/// One entry of the layer list in `model.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear {
        name: String,
        layer_type: LayerType,
        in_features: usize,
        out_features: usize,
        weight: String,
        bias: String,
    },
    Gelu,
    SoftmaxRows,
    Layernorm,
    /// Adds the activation with index `from` (0 is the model input, `i + 1`
    /// the output of layer `i`).
    ResidualAdd { from: usize },
    /// Multi-head self-attention over a `3 * width` qkv activation.
    Attention { heads: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub dims: ModelDims,
    pub layers: Vec<LayerSpec>,
}

/// Per-tensor grids for the two attention matmuls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionQuant {
    pub query: QuantParams,
    pub key: QuantParams,
    pub value: QuantParams,
    pub probs: QuantParams,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Linear(QuantLinearLayer),
    Gelu,
    SoftmaxRows,
    Layernorm,
    ResidualAdd { from: usize },
    Attention { heads: usize, quant: Option<AttentionQuant> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Fp,
    Quant,
    NoisyQuant,
    Integer,
}

impl std::str::FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp" => Ok(Self::Fp),
            "quant" => Ok(Self::Quant),
            "noisyquant" => Ok(Self::NoisyQuant),
            "integer" => Ok(Self::Integer),
            _ => Err(Error::InvalidArgument(format!("unknown run mode {s:?}"))),
        }
    }
}

/// Operands of an attention layer captured during a full-precision pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOperands {
    pub query: Tensor2D,
    pub key: Tensor2D,
    pub value: Tensor2D,
    pub probs: Tensor2D,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
}

fn quantize_opt(p: Option<&QuantParams>, x: &Tensor2D) -> Result<Tensor2D> {
    match p {
        Some(p) => p.quantize(x),
        None => Ok(x.clone()),
    }
}

/// Multi-head attention. `qkv` is `3w x t`; returns the `w x t` context and
/// the per-head operands (concatenated over heads) when `capture` is set.
fn attention(
    qkv: &Tensor2D,
    heads: usize,
    quant: Option<&AttentionQuant>,
    capture: bool,
) -> Result<(Tensor2D, Option<AttentionOperands>)> {
    if qkv.rows() % 3 != 0 || (qkv.rows() / 3) % heads != 0 {
        return Err(Error::Shape(format!(
            "attention input has {} rows, not 3 x width divisible by {heads} heads",
            qkv.rows()
        )));
    }
    let width = qkv.rows() / 3;
    let d = width / heads;
    let inv_sqrt = 1.0 / (d as f32).sqrt();
    let (mut ctx, mut qs, mut ks, mut vs, mut ps) = (vec![], vec![], vec![], vec![], vec![]);
    for h in 0..heads {
        let q = qkv.slice_rows(h * d, (h + 1) * d)?;
        let k = qkv.slice_rows(width + h * d, width + (h + 1) * d)?;
        let v = qkv.slice_rows(2 * width + h * d, 2 * width + (h + 1) * d)?;
        let qq = quantize_opt(quant.map(|a| &a.query), &q)?;
        let kq = quantize_opt(quant.map(|a| &a.key), &k)?;
        let scores = matmul(&qq.transpose(), &kq)?.scale(inv_sqrt);
        let p = softmax_rows(&scores);
        let pq = quantize_opt(quant.map(|a| &a.probs), &p)?;
        let vq = quantize_opt(quant.map(|a| &a.value), &v)?;
        ctx.push(matmul(&vq, &pq.transpose())?);
        if capture {
            qs.push(q);
            ks.push(k);
            vs.push(v);
            ps.push(p);
        }
    }
    let operands = if capture {
        Some(AttentionOperands {
            query: Tensor2D::vcat(&qs)?,
            key: Tensor2D::vcat(&ks)?,
            value: Tensor2D::vcat(&vs)?,
            probs: Tensor2D::vcat(&ps)?,
        })
    } else {
        None
    };
    Ok((Tensor2D::vcat(&ctx)?, operands))
}

/// Full-precision activations of one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// `acts[0]` is the input; `acts[i + 1]` is the output of layer `i`.
    pub acts: Vec<Tensor2D>,
    /// Attention operands keyed by layer index.
    pub attention: BTreeMap<usize, AttentionOperands>,
}

impl Model {
    pub fn from_parts(spec: ModelSpec, layers: Vec<Layer>) -> Result<Self> {
        if spec.layers.len() != layers.len() {
            return Err(Error::Shape("layer list and spec disagree".into()));
        }
        let model = Self { spec, layers };
        model.check_chain()?;
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// `(layer index, layer)` for every linear layer, in order.
    pub fn linears(&self) -> impl Iterator<Item = (usize, &QuantLinearLayer)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match l {
            Layer::Linear(lin) => Some((i, lin)),
            _ => None,
        })
    }

    pub fn attentions(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, Layer::Attention { .. }).then_some(i))
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Verifies the feature-dimension chain through the layer list.
    fn check_chain(&self) -> Result<()> {
        let mut dims = vec![self.spec.dims.width];
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = *dims.last().expect("input dim");
            let next = match layer {
                Layer::Linear(l) => {
                    if l.in_features() != cur {
                        return Err(Error::Shape(format!(
                            "layer {i} ({}) expects {} features, receives {cur}",
                            l.name(),
                            l.in_features()
                        )));
                    }
                    l.out_features()
                }
                Layer::Attention { heads, .. } => {
                    if cur % 3 != 0 || (cur / 3) % heads != 0 {
                        return Err(Error::Shape(format!("layer {i}: attention over {cur} features")));
                    }
                    cur / 3
                }
                Layer::ResidualAdd { from } => {
                    if *from > i || dims[*from] != cur {
                        return Err(Error::Shape(format!("layer {i}: residual from {from} mismatched")));
                    }
                    cur
                }
                Layer::Gelu | Layer::SoftmaxRows | Layer::Layernorm => cur,
            };
            dims.push(next);
        }
        Ok(())
    }

    fn run_inner(
        &self,
        x: &Tensor2D,
        mode_of: &dyn Fn(usize) -> RunMode,
        capture: bool,
    ) -> Result<Trace> {
        let mut acts = vec![x.clone()];
        let mut attn = BTreeMap::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = acts.last().expect("input present");
            let mode = mode_of(i);
            let out = match layer {
                Layer::Linear(l) => match mode {
                    RunMode::Fp => l.forward_fp(cur)?,
                    RunMode::Quant => l.forward_quant(cur)?,
                    RunMode::NoisyQuant => l.forward_noisyquant(cur)?,
                    RunMode::Integer => l.forward_integer(cur)?,
                },
                Layer::Attention { heads, quant } => {
                    let q = match mode {
                        RunMode::Fp => None,
                        _ => Some(quant.as_ref().ok_or_else(|| {
                            Error::Uncalibrated(format!("attention layer {i} has no grids"))
                        })?),
                    };
                    let (ctx, ops) = attention(cur, *heads, q, capture)?;
                    if let Some(ops) = ops {
                        attn.insert(i, ops);
                    }
                    ctx
                }
                Layer::Gelu => gelu(cur),
                Layer::SoftmaxRows => softmax_rows(cur),
                Layer::Layernorm => layernorm_columns(cur),
                Layer::ResidualAdd { from } => cur.add(&acts[*from])?,
            };
            acts.push(out);
        }
        Ok(Trace { acts, attention: attn })
    }

    /// Runs one batch in `mode`.
    pub fn run(&self, x: &Tensor2D, mode: RunMode) -> Result<Tensor2D> {
        self.run_layerwise(x, &|_| mode)
    }

    /// Runs one batch choosing the mode per layer index.
    pub fn run_layerwise(&self, x: &Tensor2D, mode_of: &dyn Fn(usize) -> RunMode) -> Result<Tensor2D> {
        let mut t = self.run_inner(x, mode_of, false)?;
        Ok(t.acts.pop().expect("output"))
    }

    /// Full-precision pass recording every activation and attention operand.
    pub fn trace(&self, x: &Tensor2D) -> Result<Trace> {
        self.run_inner(x, &|_| RunMode::Fp, true)
    }

    /// Writes `model.json` and one `.t2d` per weight and bias into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (spec, layer) in self.spec.layers.iter().zip(&self.layers) {
            if let (LayerSpec::Linear { weight, bias, .. }, Layer::Linear(l)) = (spec, layer) {
                save_tensor(&dir.join(weight), l.weight())?;
                save_tensor(&dir.join(bias), l.bias())?;
            }
        }
        let json = serde_json::to_vec_pretty(&self.spec)?;
        write_atomic(&dir.join("model.json"), &json)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_slice(&fs::read(dir.join("model.json"))?)?;
        spec.dims.validate()?;
        let layers = spec
            .layers
            .iter()
            .map(|l| {
                Ok(match l {
                    LayerSpec::Linear { name, layer_type, in_features, out_features, weight, bias } => {
                        let w = load_tensor(&dir.join(weight))?;
                        let b = load_tensor(&dir.join(bias))?;
                        if w.shape() != (*out_features, *in_features) {
                            return Err(Error::Shape(format!(
                                "{name}: weight file is {}x{}, spec says {out_features}x{in_features}",
                                w.rows(),
                                w.cols()
                            )));
                        }
                        Layer::Linear(QuantLinearLayer::new(name.clone(), *layer_type, w, b)?)
                    }
                    LayerSpec::Gelu => Layer::Gelu,
                    LayerSpec::SoftmaxRows => Layer::SoftmaxRows,
                    LayerSpec::Layernorm => Layer::Layernorm,
                    LayerSpec::ResidualAdd { from } => Layer::ResidualAdd { from: *from },
                    LayerSpec::Attention { heads } => Layer::Attention { heads: *heads, quant: None },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(spec, layers)
    }
}

fn linear_spec(name: &str, layer_type: LayerType, in_features: usize, out_features: usize) -> LayerSpec {
    LayerSpec::Linear {
        name: name.into(),
        layer_type,
        in_features,
        out_features,
        weight: format!("{name}.weight.t2d"),
        bias: format!("{name}.bias.t2d"),
    }
}

/// Random single-block encoder plus classifier head. Weights are
/// `N(0, 1/fan_in)`, biases `N(0, 0.1^2)`.
pub fn gen_model(dims: ModelDims, seed: u64) -> Result<Model> {
    dims.validate()?;
    let ModelDims { width, mlp, heads, classes, .. } = dims;
    let specs = vec![
        LayerSpec::Layernorm,
        linear_spec("qkv", LayerType::Qkv, width, 3 * width),
        LayerSpec::Attention { heads },
        linear_spec("proj", LayerType::Proj, width, width),
        LayerSpec::ResidualAdd { from: 0 },
        LayerSpec::Layernorm,
        linear_spec("fc1", LayerType::Fc1, width, mlp),
        LayerSpec::Gelu,
        linear_spec("fc2", LayerType::Fc2, mlp, width),
        LayerSpec::ResidualAdd { from: 5 },
        LayerSpec::Layernorm,
        linear_spec("head", LayerType::Other, width, classes),
    ];
    let layers = specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(match s {
                LayerSpec::Linear { name, layer_type, in_features, out_features, .. } => {
                    let mut rng = Rng::derive(seed, i as u64, "weights");
                    let w = normal_tensor(&mut rng, *out_features, *in_features, 1.0 / (*in_features as f32).sqrt());
                    let b = normal_tensor(&mut rng, *out_features, 1, 0.1);
                    Layer::Linear(QuantLinearLayer::new(name.clone(), *layer_type, w, b)?)
                }
                LayerSpec::Gelu => Layer::Gelu,
                LayerSpec::SoftmaxRows => Layer::SoftmaxRows,
                LayerSpec::Layernorm => Layer::Layernorm,
                LayerSpec::ResidualAdd { from } => Layer::ResidualAdd { from: *from },
                LayerSpec::Attention { heads } => Layer::Attention { heads: *heads, quant: None },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Model::from_parts(ModelSpec { dims, layers: specs }, layers)
}

/// `count` batches of `width x tokens` standard-normal inputs.
pub fn gen_data(dims: &ModelDims, count: usize, seed: u64) -> Result<Vec<Tensor2D>> {
    if count == 0 {
        return Err(Error::InvalidArgument("data count must be at least 1".into()));
    }
    Ok((0..count)
        .map(|i| normal_tensor(&mut Rng::derive(seed, i as u64, "data"), dims.width, dims.tokens, 1.0))
        .collect())
}

pub fn save_batches(dir: &Path, batches: &[Tensor2D]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, b) in batches.iter().enumerate() {
        save_tensor(&dir.join(format!("batch_{i:04}.t2d")), b)?;
    }
    Ok(())
}

/// Loads every `.t2d` file of `dir` in file-name order.
pub fn load_batches(dir: &Path) -> Result<Vec<Tensor2D>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == crate::numerics::io::TENSOR_EXTENSION))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!("no .t2d batches in {}", dir.display())));
    }
    paths.iter().map(|p| load_tensor(p)).collect()
}

/// Per-layer-type averages, one row per noisy layer type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeSummary {
    pub layer_type: LayerType,
    pub layers: usize,
    pub input_qe: f64,
    pub input_qe_noisy: f64,
    #[serde(rename = "D")]
    pub delta: f64,
    pub output_qe: f64,
    pub output_qe_noisy: f64,
    pub drop_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub reports: Vec<QEReport>,
    pub by_type: Vec<TypeSummary>,
    pub output_mse_quant: f64,
    pub output_mse_noisy: f64,
    pub agreement_quant: f64,
    pub agreement_noisy: f64,
}

fn argmax(col: impl Iterator<Item = f32>) -> usize {
    col.enumerate()
        .fold((0, f32::NEG_INFINITY), |b, (i, v)| if v > b.1 { (i, v) } else { b })
        .0
}

/// Fraction of columns whose argmax agrees between `a` and `b`.
pub fn argmax_agreement(a: &Tensor2D, b: &Tensor2D) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape("agreement needs equal shapes".into()));
    }
    if a.cols() == 0 {
        return Ok(1.0);
    }
    let same = (0..a.cols())
        .filter(|&j| {
            argmax((0..a.rows()).map(|r| a.get(r, j))) == argmax((0..b.rows()).map(|r| b.get(r, j)))
        })
        .count();
    Ok(same as f64 / a.cols() as f64)
}

/// Output MSE and argmax agreement of `mode` against full precision.
pub fn compare_outputs(model: &Model, data: &[Tensor2D], mode: RunMode) -> Result<(f64, f64)> {
    let (mut sq, mut n, mut agree, mut cols) = (0.0f64, 0usize, 0.0f64, 0usize);
    for x in data {
        let fp = model.run(x, RunMode::Fp)?;
        let q = model.run(x, mode)?;
        sq += fp.mean_sq_diff(&q)? * fp.len() as f64;
        n += fp.len();
        agree += argmax_agreement(&fp, &q)? * fp.cols() as f64;
        cols += fp.cols();
    }
    Ok((sq / n.max(1) as f64, agree / cols.max(1) as f64))
}

/// Each linear layer's full-precision input over all batches, concatenated
/// along tokens in batch order.
pub fn linear_inputs(model: &Model, data: &[Tensor2D]) -> Result<BTreeMap<usize, Tensor2D>> {
    let mut parts: BTreeMap<usize, Vec<Tensor2D>> = BTreeMap::new();
    for x in data {
        let t = model.trace(x)?;
        for (i, _) in model.linears() {
            parts.entry(i).or_default().push(t.acts[i].clone());
        }
    }
    parts
        .into_iter()
        .map(|(i, p)| Ok((i, Tensor2D::hcat(&p)?)))
        .collect()
}

/// Quantization-error reports on every linear layer plus model-output
/// metrics for the quantized and noisy-quantized runs.
pub fn evaluate(model: &Model, data: &[Tensor2D]) -> Result<EvalMetrics> {
    let inputs = linear_inputs(model, data)?;
    let reports = model
        .linears()
        .map(|(i, l)| l.qe_report(&inputs[&i]))
        .collect::<Result<Vec<_>>>()?;
    let by_type = LayerType::NOISY
        .iter()
        .map(|&ty| {
            let rows: Vec<&QEReport> = reports.iter().filter(|r| r.layer_type == ty).collect();
            let k = rows.len().max(1) as f64;
            let avg = |f: fn(&QEReport) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / k;
            let output_qe = avg(|r| r.output_qe);
            let output_qe_noisy = avg(|r| r.output_qe_noisy);
            TypeSummary {
                layer_type: ty,
                layers: rows.len(),
                input_qe: avg(|r| r.input_qe),
                input_qe_noisy: avg(|r| r.input_qe_noisy),
                delta: avg(|r| r.delta),
                output_qe,
                output_qe_noisy,
                drop_pct: if output_qe > 0.0 {
                    100.0 * (output_qe - output_qe_noisy) / output_qe
                } else {
                    0.0
                },
            }
        })
        .collect();
    let (output_mse_quant, agreement_quant) = compare_outputs(model, data, RunMode::Quant)?;
    let (output_mse_noisy, agreement_noisy) = compare_outputs(model, data, RunMode::NoisyQuant)?;
    Ok(EvalMetrics {
        reports,
        by_type,
        output_mse_quant,
        output_mse_noisy,
        agreement_quant,
        agreement_noisy,
    })
}
