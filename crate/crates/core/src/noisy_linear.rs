//! Quantized fully-connected layers with a fixed noisy bias.
//!
//! `f(X) = W X + B` is executed as `q_W(W) q_A(X + N) + B'` where `N` is a
//! per-input-feature column sampled once from `U(-n, n)` and
//! `B' = B - q_W(W) N` is computed when the noise is attached.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, uniform_vector, Histogram, Rng, Tensor2D};
use crate::quantizers::{ActQuant, Granularity, QuantParams};

/// Noise codes live on a grid `NOISE_SUBDIVISIONS` times finer than the
/// activation grid.
pub const NOISE_SUBDIVISIONS: i64 = 256;

/// Fractional bits carried by activations entering the integer path, below
/// one activation step. Noise codes are shifted into this domain.
pub const ACTIVATION_FRACTION_BITS: u32 = 24;

const NOISE_SHIFT: u32 = ACTIVATION_FRACTION_BITS - 8;

/// Bins used for report histograms.
pub const REPORT_HISTOGRAM_BINS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerType {
    Qkv,
    Proj,
    Fc1,
    Fc2,
    Other,
}

impl LayerType {
    /// The four types that can carry noise, in reporting order.
    pub const NOISY: [LayerType; 4] = [Self::Qkv, Self::Proj, Self::Fc1, Self::Fc2];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Qkv => "qkv",
            Self::Proj => "proj",
            Self::Fc1 => "fc1",
            Self::Fc2 => "fc2",
            Self::Other => "other",
        }
    }
}

impl std::str::FromStr for LayerType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qkv" => Ok(Self::Qkv),
            "proj" => Ok(Self::Proj),
            "fc1" => Ok(Self::Fc1),
            "fc2" => Ok(Self::Fc2),
            "other" => Ok(Self::Other),
            _ => Err(Error::InvalidArgument(format!("unknown layer type {s:?}"))),
        }
    }
}

impl std::fmt::Display for LayerType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Fixed per-layer noise column and its INT16 image.
///
/// Values are snapped to the INT16 grid (`values = codes * noise_scale`), so
/// the float and integer paths add the same noise.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyBias {
    values: Tensor2D,
    half_range: f32,
    seed: u64,
    codes: Vec<i16>,
    noise_scale: f32,
}

impl NoisyBias {
    /// Samples `N ~ U(-n, n)` of length `m` with `noise_scale = a_scale / 256`.
    pub fn sample(m: usize, n: f32, seed: u64, a_scale: f32) -> Result<Self> {
        if !(n >= 0.0 && n.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise half-range must be >= 0, got {n}")));
        }
        let noise_scale = (a_scale as f64 / NOISE_SUBDIVISIONS as f64) as f32;
        if n == 0.0 {
            return Ok(Self {
                values: Tensor2D::zeros(m, 1),
                half_range: 0.0,
                seed,
                codes: vec![0; m],
                noise_scale,
            });
        }
        let limit = (n as f64 / noise_scale as f64).floor();
        if limit > i16::MAX as f64 {
            return Err(Error::InvalidArgument(format!(
                "noise half-range {n} exceeds the INT16 image ({} activation steps max)",
                i16::MAX as i64 / NOISE_SUBDIVISIONS
            )));
        }
        let raw = uniform_vector(&mut Rng::new(seed), m, -n, n)?;
        let codes: Vec<i16> = raw
            .data()
            .iter()
            .map(|&v| (v as f64 / noise_scale as f64).round().clamp(-limit, limit) as i16)
            .collect();
        Ok(Self::from_codes(codes, noise_scale, n, seed))
    }

    /// Wraps explicit noise values, snapping them to `noise_scale`.
    pub fn from_values(values: &Tensor2D, noise_scale: f32) -> Result<Self> {
        if values.cols() != 1 {
            return Err(Error::Shape("noise must be a column".into()));
        }
        let codes = values
            .data()
            .iter()
            .map(|&v| {
                let c = (v as f64 / noise_scale as f64).round();
                if c.abs() > i16::MAX as f64 {
                    Err(Error::InvalidArgument(format!("noise value {v} overflows INT16")))
                } else {
                    Ok(c as i16)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let half_range = values.max_abs();
        Ok(Self::from_codes(codes, noise_scale, half_range, 0))
    }

    fn from_codes(codes: Vec<i16>, noise_scale: f32, half_range: f32, seed: u64) -> Self {
        let values = codes
            .iter()
            .map(|&c| (c as f64 * noise_scale as f64) as f32)
            .collect();
        Self {
            values: Tensor2D::from_parts(codes.len(), 1, values),
            half_range,
            seed,
            codes,
            noise_scale,
        }
    }

    pub fn values(&self) -> &Tensor2D {
        &self.values
    }

    pub fn half_range(&self) -> f32 {
        self.half_range
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn codes(&self) -> &[i16] {
        &self.codes
    }

    pub fn noise_scale(&self) -> f32 {
        self.noise_scale
    }

    pub fn enabled(&self) -> bool {
        self.codes.iter().any(|&c| c != 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum WeightQuant {
    Identity,
    Channel { params: QuantParams },
}

/// INT16 image of the denoising bias: `B'_r ≈ code_r * 2^shift_r * s_a * s_w[r]`.
#[derive(Clone, Debug, PartialEq)]
struct BiasImage {
    codes: Vec<i16>,
    shifts: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
struct Quantized {
    weight: WeightQuant,
    act: ActQuant,
    weight_q: Tensor2D,
}

#[derive(Clone, Debug, PartialEq)]
struct Noise {
    bias: NoisyBias,
    denoise_bias: Tensor2D,
    image: Option<BiasImage>,
}

/// A fully-connected layer `W (k x m)`, `B (k x 1)` with optional
/// quantizers and noisy bias. Immutable once built; every builder step
/// returns a new layer.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantLinearLayer {
    name: String,
    layer_type: LayerType,
    weight: Tensor2D,
    bias: Tensor2D,
    quant: Option<Quantized>,
    noise: Option<Noise>,
}

fn per_tensor_int(act: &ActQuant) -> Option<&QuantParams> {
    match act {
        ActQuant::Uniform { params } if params.granularity() == Granularity::Tensor => Some(params),
        _ => None,
    }
}

/// Rounds `num / den` half away from zero, `den > 0`.
fn div_round_half_away(num: i64, den: i64) -> i64 {
    let q = num.abs() / den;
    let r = num.abs() % den;
    let mag = if 2 * r >= den { q + 1 } else { q };
    if num < 0 {
        -mag
    } else {
        mag
    }
}

impl QuantLinearLayer {
    pub fn new(name: impl Into<String>, layer_type: LayerType, weight: Tensor2D, bias: Tensor2D) -> Result<Self> {
        if bias.cols() != 1 || bias.rows() != weight.rows() {
            return Err(Error::Shape(format!(
                "bias must be {}x1, got {}x{}",
                weight.rows(),
                bias.rows(),
                bias.cols()
            )));
        }
        Ok(Self {
            name: name.into(),
            layer_type,
            weight,
            bias,
            quant: None,
            noise: None,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layer_type(&self) -> LayerType {
        self.layer_type
    }

    pub fn weight(&self) -> &Tensor2D {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor2D {
        &self.bias
    }

    pub fn in_features(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.rows()
    }

    pub fn weight_quant(&self) -> Option<&WeightQuant> {
        self.quant.as_ref().map(|q| &q.weight)
    }

    pub fn act_quant(&self) -> Option<&ActQuant> {
        self.quant.as_ref().map(|q| &q.act)
    }

    pub fn noisy_bias(&self) -> Option<&NoisyBias> {
        self.noise.as_ref().map(|n| &n.bias)
    }

    pub fn denoise_bias(&self) -> Option<&Tensor2D> {
        self.noise.as_ref().map(|n| &n.denoise_bias)
    }

    /// Dequantized weights `q_W(W)`.
    pub fn quantized_weight(&self) -> Result<&Tensor2D> {
        Ok(&self.quantized()?.weight_q)
    }

    fn quantized(&self) -> Result<&Quantized> {
        self.quant
            .as_ref()
            .ok_or_else(|| Error::Uncalibrated(format!("layer {} has no quantizers", self.name)))
    }

    /// Installs quantizers; any attached noise is dropped since `B'`
    /// depends on `q_W(W)`.
    pub fn with_quantizers(&self, weight: WeightQuant, act: ActQuant) -> Result<Self> {
        let weight_q = match &weight {
            WeightQuant::Identity => self.weight.clone(),
            WeightQuant::Channel { params } => {
                if params.granularity() != Granularity::Channel || params.scales().len() != self.weight.rows() {
                    return Err(Error::Shape(format!(
                        "layer {}: weight grid needs {} channel scales",
                        self.name,
                        self.weight.rows()
                    )));
                }
                params.quantize(&self.weight)?
            }
        };
        Ok(Self {
            quant: Some(Quantized { weight, act, weight_q }),
            noise: None,
            ..self.clone()
        })
    }

    fn check_input(&self, x: &Tensor2D) -> Result<()> {
        if x.rows() != self.in_features() {
            return Err(Error::Shape(format!(
                "layer {} expects {} input features, got {}",
                self.name,
                self.in_features(),
                x.rows()
            )));
        }
        Ok(())
    }

    /// `W X + B`.
    pub fn forward_fp(&self, x: &Tensor2D) -> Result<Tensor2D> {
        self.check_input(x)?;
        matmul(&self.weight, x)?.add_column(&self.bias)
    }

    /// `q_W(W) q_A(X) + B`.
    pub fn forward_quant(&self, x: &Tensor2D) -> Result<Tensor2D> {
        self.check_input(x)?;
        let q = self.quantized()?;
        matmul(&q.weight_q, &q.act.quantize(x)?)?.add_column(&self.bias)
    }

    /// Samples `N ~ U(-n, n)` from `seed` and attaches it. `n = 0` attaches
    /// an all-zero noise column, so `B' = B`.
    pub fn attach_noise(&self, n: f32, seed: u64) -> Result<Self> {
        let q = self.quantized()?;
        let a_scale = q.act.reference_scale().unwrap_or(1.0);
        let bias = NoisyBias::sample(self.in_features(), n, seed, a_scale)?;
        self.attach_noisy_bias(bias)
    }

    /// Attaches an explicit noise column and precomputes `B' = B - q_W(W) N`.
    pub fn attach_noisy_bias(&self, bias: NoisyBias) -> Result<Self> {
        let q = self.quantized()?;
        if bias.values().rows() != self.in_features() {
            return Err(Error::Shape(format!(
                "layer {}: noise length {} for {} input features",
                self.name,
                bias.values().rows(),
                self.in_features()
            )));
        }
        let denoise_bias = self.bias.sub(&matmul(&q.weight_q, bias.values())?)?;
        let image = self.bias_image(&denoise_bias)?;
        Ok(Self {
            noise: Some(Noise {
                bias,
                denoise_bias,
                image,
            }),
            ..self.clone()
        })
    }

    /// INT16 codes with per-channel power-of-two shifts in the accumulator
    /// domain, when both grids are integer-compatible.
    fn bias_image(&self, denoise_bias: &Tensor2D) -> Result<Option<BiasImage>> {
        let q = self.quantized()?;
        let (WeightQuant::Channel { params: w }, Some(a)) = (&q.weight, per_tensor_int(&q.act)) else {
            return Ok(None);
        };
        let s_a = a.scale() as f64;
        let mut codes = Vec::with_capacity(denoise_bias.rows());
        let mut shifts = Vec::with_capacity(denoise_bias.rows());
        for (r, &b) in denoise_bias.data().iter().enumerate() {
            let raw = b as f64 / (s_a * w.scales()[r] as f64);
            let mut shift = 0u32;
            while (raw / (1u64 << shift) as f64).round().abs() > i16::MAX as f64 {
                shift += 1;
            }
            codes.push((raw / (1u64 << shift) as f64).round() as i16);
            shifts.push(shift);
        }
        Ok(Some(BiasImage { codes, shifts }))
    }

    fn noise(&self) -> Result<&Noise> {
        self.noise
            .as_ref()
            .ok_or_else(|| Error::Uncalibrated(format!("layer {} has no noisy bias attached", self.name)))
    }

    /// `q_W(W) q_A(X + N) + B'`, with `N` broadcast across columns.
    pub fn forward_noisyquant(&self, x: &Tensor2D) -> Result<Tensor2D> {
        self.check_input(x)?;
        let q = self.quantized()?;
        let noise = self.noise()?;
        let shifted = x.add_column(noise.bias.values())?;
        matmul(&q.weight_q, &q.act.quantize(&shifted)?)?.add_column(&noise.denoise_bias)
    }

    /// Integer-only execution: activations enter as fixed point with
    /// [`ACTIVATION_FRACTION_BITS`] below the activation step, the INT16
    /// noise codes are added in that domain, the sum is re-rounded to the
    /// int8 activation grid, int8 x int8 products accumulate in i32 together
    /// with the shifted INT16 denoising bias, and the result is rescaled by
    /// `s_a * s_w[r]`.
    pub fn forward_integer(&self, x: &Tensor2D) -> Result<Tensor2D> {
        self.check_input(x)?;
        let q = self.quantized()?;
        let noise = self.noise()?;
        let (WeightQuant::Channel { params: wp }, Some(ap)) = (&q.weight, per_tensor_int(&q.act)) else {
            return Err(Error::Unsupported(format!(
                "layer {}: integer path needs per-channel weights and a per-tensor activation grid",
                self.name
            )));
        };
        if wp.bits() > 8 || ap.bits() > 8 {
            return Err(Error::Unsupported(format!(
                "layer {}: integer path supports at most 8-bit codes",
                self.name
            )));
        }
        let image = noise.image.as_ref().expect("image exists for integer-compatible grids");
        let (k, m, t) = (self.out_features(), self.in_features(), x.cols());
        let s_a = ap.scale() as f64;
        let one = 1i64 << ACTIVATION_FRACTION_BITS;
        let limit = (1i64 << 62) as f64;

        let mut a_codes = vec![0i32; m * t];
        for c in 0..m {
            let n_fixed = (noise.bias.codes()[c] as i64) << NOISE_SHIFT;
            for j in 0..t {
                let x_fixed = (x.get(c, j) as f64 / s_a * one as f64).round().clamp(-limit, limit) as i64;
                let code = div_round_half_away(x_fixed + n_fixed, one).clamp(ap.qmin(), ap.qmax());
                a_codes[c * t + j] = code as i32;
            }
        }
        let w_codes = wp.quantize_codes(&self.weight)?;

        let mut out = vec![0f32; k * t];
        for r in 0..k {
            let bias_acc = (image.codes[r] as i64) << image.shifts[r];
            let bias_acc = i32::try_from(bias_acc).map_err(|_| {
                Error::Overflow(format!("layer {}: denoising bias of channel {r} exceeds i32", self.name))
            })?;
            let s_out = s_a * wp.scales()[r] as f64;
            for j in 0..t {
                let mut acc = bias_acc;
                for c in 0..m {
                    let prod = w_codes[r * m + c] as i32 * a_codes[c * t + j];
                    acc = acc.checked_add(prod).ok_or_else(|| {
                        Error::Overflow(format!("layer {}: i32 accumulator at output ({r}, {j})", self.name))
                    })?;
                }
                out[r * t + j] = (acc as f64 * s_out) as f32;
            }
        }
        Tensor2D::new(k, t, out)
    }

    /// Per-output bound on `|forward_integer - forward_noisyquant|`:
    /// `sum_c |q_W(W)[r, c]| * noise_scale / 2 + bias_lsb[r] / 2`, where
    /// `bias_lsb[r] = s_a * s_w[r] * 2^shift[r]`.
    pub fn integer_deviation_bound(&self) -> Result<Vec<f64>> {
        let q = self.quantized()?;
        let noise = self.noise()?;
        let (WeightQuant::Channel { params: wp }, Some(ap), Some(image)) =
            (&q.weight, per_tensor_int(&q.act), noise.image.as_ref())
        else {
            return Err(Error::Unsupported("integer path unavailable for this layer".into()));
        };
        let ns = noise.bias.noise_scale() as f64;
        Ok((0..self.out_features())
            .map(|r| {
                let wsum: f64 = q.weight_q.row(r).iter().map(|w| w.abs() as f64).sum();
                let lsb = ap.scale() as f64 * wp.scales()[r] as f64 * (1u64 << image.shifts[r]) as f64;
                wsum * ns / 2.0 + lsb / 2.0
            })
            .collect())
    }

    /// Input/output quantization-error statistics on `x`. Layers without
    /// attached noise are reported with `n = 0`.
    pub fn qe_report(&self, x: &Tensor2D) -> Result<QEReport> {
        self.check_input(x)?;
        let q = self.quantized()?;
        let zero;
        let noise_values = match &self.noise {
            Some(n) => n.bias.values(),
            None => {
                zero = Tensor2D::zeros(self.in_features(), 1);
                &zero
            }
        };
        let half_range = self.noise.as_ref().map_or(0.0, |n| n.bias.half_range());
        let shifted = x.add_column(noise_values)?;
        let input_qe = q.act.quantize(x)?.mean_sq_diff(x)?;
        let input_qe_noisy = q.act.quantize(&shifted)?.mean_sq_diff(&shifted)?;

        let fp = self.forward_fp(x)?;
        let out_q = self.forward_quant(x)?;
        let out_nq = if self.noise.is_some() {
            self.forward_noisyquant(x)?
        } else {
            out_q.clone()
        };
        let output_qe = out_q.mean_sq_diff(&fp)?;
        let output_qe_noisy = out_nq.mean_sq_diff(&fp)?;
        let drop_pct = if output_qe > 0.0 {
            100.0 * (output_qe - output_qe_noisy) / output_qe
        } else {
            0.0
        };
        let (bits_w, bits_a) = match (&q.weight, &q.act) {
            (WeightQuant::Channel { params }, act) => (Some(params.bits()), act_bits(act)),
            (WeightQuant::Identity, act) => (None, act_bits(act)),
        };
        Ok(QEReport {
            layer: self.name.clone(),
            layer_type: self.layer_type,
            bits_w,
            bits_a,
            n: half_range as f64,
            input_qe,
            input_qe_noisy,
            delta: input_qe_noisy - input_qe,
            output_qe,
            output_qe_noisy,
            drop_pct,
            input_histogram: Histogram::uniform(x.data(), REPORT_HISTOGRAM_BINS)?,
            output_histogram: Histogram::uniform(fp.data(), REPORT_HISTOGRAM_BINS)?,
        })
    }
}

fn act_bits(act: &ActQuant) -> Option<u32> {
    match act {
        ActQuant::Identity => None,
        other => Some(other.bits()),
    }
}

/// Per-layer quantization-error statistics. All errors are per-element means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QEReport {
    pub layer: String,
    pub layer_type: LayerType,
    pub bits_w: Option<u32>,
    pub bits_a: Option<u32>,
    pub n: f64,
    pub input_qe: f64,
    pub input_qe_noisy: f64,
    #[serde(rename = "D")]
    pub delta: f64,
    pub output_qe: f64,
    pub output_qe_noisy: f64,
    pub drop_pct: f64,
    #[serde(skip)]
    pub input_histogram: Histogram,
    #[serde(skip)]
    pub output_histogram: Histogram,
}

impl QEReport {
    pub const CSV_HEADER: &'static str =
        "layer,layer_type,bits_w,bits_a,n,input_qe,input_qe_noisy,D,output_qe,output_qe_noisy,drop_pct";

    pub fn csv_row(&self) -> String {
        let bits = |b: Option<u32>| b.map(|b| b.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.layer,
            self.layer_type,
            bits(self.bits_w),
            bits(self.bits_a),
            self.n,
            self.input_qe,
            self.input_qe_noisy,
            self.delta,
            self.output_qe,
            self.output_qe_noisy,
            self.drop_pct
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gelu, normal_tensor};
    use crate::quantizers::{fit_activation_minmax, fit_weight_minmax};

    fn hand_layer() -> QuantLinearLayer {
        let w = Tensor2D::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        QuantLinearLayer::new("hand", LayerType::Other, w, Tensor2D::zeros(2, 1)).unwrap()
    }

    fn quantized_random(seed: u64, k: usize, m: usize, t: usize, bits: u32) -> (QuantLinearLayer, Tensor2D) {
        let mut rng = Rng::new(seed);
        let w = normal_tensor(&mut rng, k, m, 1.0 / (m as f32).sqrt());
        let b = normal_tensor(&mut rng, k, 1, 0.1);
        let x = gelu(&normal_tensor(&mut rng, m, t, 1.0));
        let layer = QuantLinearLayer::new("l", LayerType::Fc2, w.clone(), b).unwrap();
        let wq = WeightQuant::Channel { params: fit_weight_minmax(&w, bits).unwrap() };
        let aq = ActQuant::uniform(fit_activation_minmax(&x, bits).unwrap());
        (layer.with_quantizers(wq, aq).unwrap(), x)
    }

    #[test]
    fn forward_fp_examples() {
        let l = hand_layer();
        let x = Tensor2D::column(vec![1.0, -1.0]).unwrap();
        assert_eq!(l.forward_fp(&x).unwrap().data(), &[-1.0, -1.0]);

        let id = QuantLinearLayer::new("id", LayerType::Other, Tensor2D::identity(3), Tensor2D::zeros(3, 1)).unwrap();
        let x = normal_tensor(&mut Rng::new(1), 3, 5, 1.0);
        assert_eq!(id.forward_fp(&x).unwrap(), x);

        let b = Tensor2D::column(vec![0.5, -2.0]).unwrap();
        let lb = QuantLinearLayer::new("b", LayerType::Other, Tensor2D::identity(2), b.clone()).unwrap();
        let y = lb.forward_fp(&Tensor2D::zeros(2, 3)).unwrap();
        assert_eq!(y, Tensor2D::zeros(2, 3).add_column(&b).unwrap());
        assert!(lb.forward_fp(&Tensor2D::zeros(3, 1)).is_err());
    }

    #[test]
    fn forward_quant_requires_quantizers() {
        let l = hand_layer();
        assert!(matches!(l.forward_quant(&Tensor2D::zeros(2, 1)), Err(Error::Uncalibrated(_))));
        assert!(matches!(l.attach_noise(0.1, 1), Err(Error::Uncalibrated(_))));
    }

    #[test]
    fn forward_quant_on_grid_is_exact() {
        let l = hand_layer();
        // 2-bit weights: qmax = 1, per-channel MinMax scale 2 and 4
        let two_bit = fit_weight_minmax(l.weight(), 2).unwrap();
        assert_eq!(two_bit.scales(), &[2.0, 4.0]);
        let q2 = l
            .with_quantizers(WeightQuant::Channel { params: two_bit }, ActQuant::uniform(QuantParams::per_tensor(8, 0.5).unwrap()))
            .unwrap();
        // round(1/2)=1 -> 2, round(2/2)=1 -> 2, round(3/4)=1 -> 4, round(4/4)=1 -> 4
        assert_eq!(q2.quantized_weight().unwrap().data(), &[2.0, 2.0, 4.0, 4.0]);

        let x = Tensor2D::column(vec![1.0, -0.5]).unwrap();
        let exact = l
            .with_quantizers(
                WeightQuant::Channel { params: QuantParams::per_channel(8, vec![1.0, 1.0]).unwrap() },
                ActQuant::uniform(QuantParams::per_tensor(8, 0.5).unwrap()),
            )
            .unwrap();
        assert_eq!(exact.forward_quant(&x).unwrap(), l.forward_fp(&x).unwrap());
    }

    #[test]
    fn fine_grids_match_fp() {
        let mut rng = Rng::new(4);
        let w = normal_tensor(&mut rng, 8, 8, 0.3);
        let x = normal_tensor(&mut rng, 8, 4, 1.0);
        let l = QuantLinearLayer::new("f", LayerType::Other, w.clone(), Tensor2D::zeros(8, 1)).unwrap();
        let l = l
            .with_quantizers(
                WeightQuant::Channel { params: fit_weight_minmax(&w, 32).unwrap() },
                ActQuant::uniform(fit_activation_minmax(&x, 32).unwrap()),
            )
            .unwrap();
        let fp = l.forward_fp(&x).unwrap();
        let q = l.forward_quant(&x).unwrap();
        for (a, b) in fp.data().iter().zip(q.data()) {
            assert!((a - b).abs() <= 1e-4 * a.abs().max(1e-3));
        }
    }

    #[test]
    fn attach_noise_hand_example() {
        let l = hand_layer()
            .with_quantizers(WeightQuant::Identity, ActQuant::Identity)
            .unwrap();
        let n = NoisyBias::from_values(&Tensor2D::column(vec![1.0, -1.0]).unwrap(), 1.0 / 256.0).unwrap();
        let l = l.attach_noisy_bias(n).unwrap();
        // B' = 0 - [[1,2],[3,4]] [1,-1] = [1, 1]
        assert_eq!(l.denoise_bias().unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn attach_zero_and_deterministic() {
        let (l, x) = quantized_random(9, 6, 5, 3, 6);
        let off = l.attach_noise(0.0, 3).unwrap();
        assert!(!off.noisy_bias().unwrap().enabled());
        assert_eq!(off.denoise_bias().unwrap(), l.bias());
        assert_eq!(off.forward_noisyquant(&x).unwrap(), l.forward_quant(&x).unwrap());

        let s = l.act_quant().unwrap().reference_scale().unwrap();
        let a = l.attach_noise(0.6 * s, 42).unwrap();
        let b = l.attach_noise(0.6 * s, 42).unwrap();
        assert_eq!(a, b);
        let nb = a.noisy_bias().unwrap();
        assert!(nb.values().data().iter().all(|v| v.abs() <= 0.6 * s));
        for (&c, &v) in nb.codes().iter().zip(nb.values().data()) {
            assert_eq!((c as f64 * nb.noise_scale() as f64) as f32, v);
        }
        // B' reproduces bitwise from stored N and q_W(W)
        let again = a.bias().sub(&matmul(a.quantized_weight().unwrap(), nb.values()).unwrap()).unwrap();
        assert_eq!(&again, a.denoise_bias().unwrap());
        assert!(l.attach_noise(200.0 * s, 1).is_err());
    }

    #[test]
    fn noisyquant_requires_noise() {
        let (l, x) = quantized_random(1, 4, 4, 2, 6);
        assert!(matches!(l.forward_noisyquant(&x), Err(Error::Uncalibrated(_))));
    }

    #[test]
    fn identity_quantizers_cancel_noise() {
        let (l, x) = quantized_random(2, 16, 12, 5, 6);
        let id = l
            .with_quantizers(WeightQuant::Identity, ActQuant::Identity)
            .unwrap()
            .attach_noisy_bias(NoisyBias::sample(12, 0.3, 7, 0.5).unwrap())
            .unwrap();
        let fp = id.forward_fp(&x).unwrap();
        let nq = id.forward_noisyquant(&x).unwrap();
        for (a, b) in fp.data().iter().zip(nq.data()) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0));
        }
    }

    #[test]
    fn integer_path_zero_noise_exact_on_dyadic_grids() {
        let mut rng = Rng::new(12);
        let w_codes = normal_tensor(&mut rng, 4, 6, 20.0).map(|v| v.round().clamp(-31.0, 31.0) * 0.125);
        let x = normal_tensor(&mut rng, 6, 3, 4.0).map(|v| (v * 4.0).round() * 0.25);
        let b = Tensor2D::column(vec![0.5, -0.25, 1.0, 0.0]).unwrap();
        let l = QuantLinearLayer::new("d", LayerType::Fc1, w_codes, b).unwrap();
        let l = l
            .with_quantizers(
                WeightQuant::Channel { params: QuantParams::per_channel(6, vec![0.125; 4]).unwrap() },
                ActQuant::uniform(QuantParams::per_tensor(8, 0.25).unwrap()),
            )
            .unwrap()
            .attach_noise(0.0, 0)
            .unwrap();
        assert_eq!(l.forward_integer(&x).unwrap(), l.forward_quant(&x).unwrap());
    }

    #[test]
    fn integer_path_within_bound() {
        for seed in 0..5 {
            let (l, x) = quantized_random(100 + seed, 32, 32, 8, 6);
            let s = l.act_quant().unwrap().reference_scale().unwrap();
            let l = l.attach_noise(0.5 * s, seed).unwrap();
            let int = l.forward_integer(&x).unwrap();
            let flt = l.forward_noisyquant(&x).unwrap();
            let bound = l.integer_deviation_bound().unwrap();
            for r in 0..int.rows() {
                for j in 0..int.cols() {
                    let d = (int.get(r, j) as f64 - flt.get(r, j) as f64).abs();
                    assert!(d <= bound[r], "seed {seed} ({r},{j}): {d} > {}", bound[r]);
                }
            }
        }
    }

    #[test]
    fn integer_path_rejects_unsupported() {
        let (l, x) = quantized_random(3, 4, 4, 2, 6);
        let twin = ActQuant::Twin {
            params: crate::quantizers::fit_twin_region(&x, 6).unwrap(),
        };
        let w = WeightQuant::Channel { params: fit_weight_minmax(l.weight(), 6).unwrap() };
        let t = l.with_quantizers(w.clone(), twin).unwrap().attach_noise(0.0, 0).unwrap();
        assert!(matches!(t.forward_integer(&x), Err(Error::Unsupported(_))));
        let wide = l
            .with_quantizers(w, ActQuant::uniform(fit_activation_minmax(&x, 12).unwrap()))
            .unwrap()
            .attach_noise(0.0, 0)
            .unwrap();
        assert!(matches!(wide.forward_integer(&x), Err(Error::Unsupported(_))));
    }

    #[test]
    fn accumulator_worst_case_fits() {
        // 127 * 127 per product; 1e5 inputs stay below 2^31
        assert!(100_000i64 * 127 * 127 < i32::MAX as i64);
    }

    #[test]
    fn rounding_helper() {
        assert_eq!(div_round_half_away(5, 2), 3);
        assert_eq!(div_round_half_away(-5, 2), -3);
        assert_eq!(div_round_half_away(4, 3), 1);
        assert_eq!(div_round_half_away(-4, 3), -1);
        assert_eq!(div_round_half_away(0, 7), 0);
    }

    #[test]
    fn report_identity_weight_and_zero_noise() {
        let mut rng = Rng::new(8);
        let x = normal_tensor(&mut rng, 8, 16, 1.0);
        let l = QuantLinearLayer::new("i", LayerType::Qkv, Tensor2D::identity(8), Tensor2D::zeros(8, 1))
            .unwrap()
            .with_quantizers(WeightQuant::Identity, ActQuant::uniform(fit_activation_minmax(&x, 4).unwrap()))
            .unwrap();
        let r = l.attach_noise(0.0, 0).unwrap().qe_report(&x).unwrap();
        assert_eq!(r.output_qe, r.input_qe);
        assert_eq!(r.delta, 0.0);
        assert_eq!(r.output_qe, r.output_qe_noisy);
        assert_eq!(r.input_histogram.total(), 128);
        let json = serde_json::to_value(&r).unwrap();
        for key in ["layer", "layer_type", "bits_w", "bits_a", "n", "input_qe", "input_qe_noisy", "D", "output_qe", "output_qe_noisy", "drop_pct"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn output_qe_matches_brute_force() {
        for seed in 0..10 {
            let mut rng = Rng::new(500 + seed);
            let (k, m, t) = (1 + (seed as usize % 8), 8, 1 + (seed as usize % 7));
            let w = normal_tensor(&mut rng, k, m, 0.5);
            let x = normal_tensor(&mut rng, m, t, 1.0);
            let a = fit_activation_minmax(&x, 3).unwrap();
            let l = QuantLinearLayer::new("b", LayerType::Other, w.clone(), Tensor2D::zeros(k, 1))
                .unwrap()
                .with_quantizers(WeightQuant::Identity, ActQuant::uniform(a.clone()))
                .unwrap();
            let r = l.qe_report(&x).unwrap();
            // ||W (Q(X) - X)||^2 / size by explicit loops in f64
            let qx = a.quantize(&x).unwrap();
            let mut sum = 0.0f64;
            for i in 0..k {
                for j in 0..t {
                    let mut e = 0.0f64;
                    for c in 0..m {
                        e += w.get(i, c) as f64 * (qx.get(c, j) as f64 - x.get(c, j) as f64);
                    }
                    sum += e * e;
                }
            }
            let brute = sum / (k * t) as f64;
            assert!((r.output_qe - brute).abs() <= 1e-9 + 1e-6 * brute, "{} vs {}", r.output_qe, brute);
        }
    }
}
