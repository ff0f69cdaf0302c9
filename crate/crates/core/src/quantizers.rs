//! Symmetric uniform quantizers and their fitting procedures.
//!
//! Codes are `clamp(round_half_away(x / scale), qmin, qmax)` with
//! `qmin = -2^(bits-1)` and `qmax = 2^(bits-1) - 1`; the zero point is fixed
//! at 0, so every grid contains an exact zero level.

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::numerics::{matmul, Tensor2D};

/// Scale assigned to degenerate (all-zero) channels or sample sets.
pub const EPSILON_SCALE: f32 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Tensor,
    Channel,
}

/// A symmetric quantization grid, per tensor or per output channel (row).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "QuantParamsRepr", try_from = "QuantParamsRepr")]
pub struct QuantParams {
    bits: u32,
    granularity: Granularity,
    scales: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ScaleRepr {
    One(f32),
    Many(Vec<f32>),
}

#[derive(Serialize, Deserialize)]
struct QuantParamsRepr {
    bits: u32,
    granularity: Granularity,
    scale: ScaleRepr,
    rounding: String,
}

impl From<QuantParams> for QuantParamsRepr {
    fn from(p: QuantParams) -> Self {
        let scale = match p.granularity {
            Granularity::Tensor => ScaleRepr::One(p.scales[0]),
            Granularity::Channel => ScaleRepr::Many(p.scales),
        };
        Self {
            bits: p.bits,
            granularity: p.granularity,
            scale,
            rounding: "half-away".into(),
        }
    }
}

impl TryFrom<QuantParamsRepr> for QuantParams {
    type Error = Error;

    fn try_from(r: QuantParamsRepr) -> Result<Self> {
        if r.rounding != "half-away" {
            return Err(Error::InvalidArgument(format!(
                "unsupported rounding mode {:?}",
                r.rounding
            )));
        }
        match (r.granularity, r.scale) {
            (Granularity::Tensor, ScaleRepr::One(s)) => QuantParams::per_tensor(r.bits, s),
            (Granularity::Channel, ScaleRepr::Many(s)) => QuantParams::per_channel(r.bits, s),
            _ => Err(Error::InvalidArgument(
                "scale must be a number for tensor granularity and a list for channel".into(),
            )),
        }
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if !(2..=32).contains(&bits) {
        return Err(Error::InvalidArgument(format!("bits must be in 2..=32, got {bits}")));
    }
    Ok(())
}

fn check_scale(s: f32) -> Result<()> {
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::InvalidArgument(format!("scale must be positive and finite, got {s}")));
    }
    Ok(())
}

/// Round half away from zero, then saturate into `[qmin, qmax]`.
#[inline]
pub fn quantize_code(x: f32, scale: f32, qmin: i64, qmax: i64) -> i64 {
    let q = (x as f64 / scale as f64).round();
    (q.clamp(qmin as f64, qmax as f64)) as i64
}

impl QuantParams {
    pub fn per_tensor(bits: u32, scale: f32) -> Result<Self> {
        check_bits(bits)?;
        check_scale(scale)?;
        Ok(Self {
            bits,
            granularity: Granularity::Tensor,
            scales: vec![scale],
        })
    }

    pub fn per_channel(bits: u32, scales: Vec<f32>) -> Result<Self> {
        check_bits(bits)?;
        if scales.is_empty() {
            return Err(Error::InvalidArgument("per-channel grid needs at least one scale".into()));
        }
        scales.iter().try_for_each(|&s| check_scale(s))?;
        Ok(Self {
            bits,
            granularity: Granularity::Channel,
            scales,
        })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    /// The per-tensor scale; for per-channel grids, the first channel's.
    pub fn scale(&self) -> f32 {
        self.scales[0]
    }

    pub fn qmin(&self) -> i64 {
        -(1i64 << (self.bits - 1))
    }

    pub fn qmax(&self) -> i64 {
        (1i64 << (self.bits - 1)) - 1
    }

    /// Half bin width `b = scale / 2` of a per-tensor grid.
    pub fn half_bin(&self) -> f64 {
        self.scale() as f64 / 2.0
    }

    /// Representable range `[qmin * scale, qmax * scale]` of a per-tensor grid.
    pub fn clip_range(&self) -> (f64, f64) {
        let s = self.scale() as f64;
        (self.qmin() as f64 * s, self.qmax() as f64 * s)
    }

    fn channel_scale(&self, t: &Tensor2D, row: usize) -> Result<f32> {
        match self.granularity {
            Granularity::Tensor => Ok(self.scales[0]),
            Granularity::Channel if self.scales.len() == t.rows() => Ok(self.scales[row]),
            Granularity::Channel => Err(Error::Shape(format!(
                "{} channel scales for a tensor with {} rows",
                self.scales.len(),
                t.rows()
            ))),
        }
    }

    /// Integer codes, row-major. Per-channel grids use one scale per row.
    pub fn quantize_codes(&self, x: &Tensor2D) -> Result<Vec<i64>> {
        let (qmin, qmax) = (self.qmin(), self.qmax());
        let mut codes = Vec::with_capacity(x.len());
        for r in 0..x.rows() {
            let s = self.channel_scale(x, r)?;
            codes.extend(x.row(r).iter().map(|&v| quantize_code(v, s, qmin, qmax)));
        }
        Ok(codes)
    }

    /// Quantize-dequantize: `code * scale`.
    pub fn quantize(&self, x: &Tensor2D) -> Result<Tensor2D> {
        let codes = self.quantize_codes(x)?;
        let cols = x.cols().max(1);
        let data = codes
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let s = match self.granularity {
                    Granularity::Tensor => self.scales[0],
                    Granularity::Channel => self.scales[i / cols],
                };
                (c as f64 * s as f64) as f32
            })
            .collect();
        Ok(Tensor2D::from_parts(x.rows(), x.cols(), data))
    }

    /// Distance of each value from its bin center (the rounding threshold
    /// between two adjacent levels): `b - |x - scale * round(x / scale)|`.
    /// Values outside the clip range are flagged and get distance 0.
    pub fn bin_center_distance(&self, x: &Tensor2D) -> Result<BinDistances> {
        if self.granularity != Granularity::Tensor {
            return Err(Error::Unsupported(
                "bin-center distance needs a per-tensor grid".into(),
            ));
        }
        let s = self.scale() as f64;
        let b = s / 2.0;
        let (lo, hi) = self.clip_range();
        let mut distance = Vec::with_capacity(x.len());
        let mut clipped = Vec::with_capacity(x.len());
        for &v in x.data() {
            let v = v as f64;
            if v < lo || v > hi {
                distance.push(0.0);
                clipped.push(true);
            } else {
                distance.push(threshold_distance(v, s));
                clipped.push(false);
            }
        }
        Ok(BinDistances { b, distance, clipped })
    }
}

/// `b - |r|` with `r = v - s * round(v / s)`, clamped into `[0, b]`.
pub fn threshold_distance(v: f64, s: f64) -> f64 {
    let b = s / 2.0;
    let r = v - s * (v / s).round();
    (b - r.abs()).clamp(0.0, b)
}

/// Output of [`QuantParams::bin_center_distance`].
#[derive(Clone, Debug, PartialEq)]
pub struct BinDistances {
    pub b: f64,
    pub distance: Vec<f64>,
    pub clipped: Vec<bool>,
}

impl BinDistances {
    /// Distances of the in-range elements, in order.
    pub fn in_range(&self) -> impl Iterator<Item = f64> + '_ {
        self.distance
            .iter()
            .zip(&self.clipped)
            .filter(|(_, &c)| !c)
            .map(|(&d, _)| d)
    }
}

/// Two symmetric grids selected by the sign of the value (split at 0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwinQuantParams {
    pub negative: QuantParams,
    pub positive: QuantParams,
}

impl TwinQuantParams {
    fn region(&self, v: f32) -> &QuantParams {
        if v < 0.0 {
            &self.negative
        } else {
            &self.positive
        }
    }

    pub fn quantize(&self, x: &Tensor2D) -> Tensor2D {
        x.map(|v| {
            let p = self.region(v);
            let c = quantize_code(v, p.scale(), p.qmin(), p.qmax());
            (c as f64 * p.scale() as f64) as f32
        })
    }
}

/// Activation quantizer of a linear layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ActQuant {
    /// No quantization; used to check that the noise cancels exactly.
    Identity,
    Uniform { params: QuantParams },
    Twin { params: TwinQuantParams },
}

impl ActQuant {
    pub fn uniform(params: QuantParams) -> Self {
        Self::Uniform { params }
    }

    pub fn bits(&self) -> u32 {
        match self {
            Self::Identity => 32,
            Self::Uniform { params } => params.bits(),
            Self::Twin { params } => params.positive.bits(),
        }
    }

    /// Scale used to express noise ranges; the positive region's for twin grids.
    pub fn reference_scale(&self) -> Option<f32> {
        match self {
            Self::Identity => None,
            Self::Uniform { params } => Some(params.scale()),
            Self::Twin { params } => Some(params.positive.scale()),
        }
    }

    pub fn quantize(&self, x: &Tensor2D) -> Result<Tensor2D> {
        match self {
            Self::Identity => Ok(x.clone()),
            Self::Uniform { params } => {
                if params.granularity() != Granularity::Tensor {
                    return Err(Error::Unsupported(
                        "activation grids must be per-tensor".into(),
                    ));
                }
                params.quantize(x)
            }
            Self::Twin { params } => Ok(params.quantize(x)),
        }
    }

    /// Per element: `Some((distance, b))` for in-range values under the grid
    /// that owns them, `None` for clipped values.
    pub fn snapshot_distances(&self, values: &[f32]) -> Vec<Option<(f64, f64)>> {
        let one = |p: &QuantParams, v: f32| {
            let (lo, hi) = p.clip_range();
            let v = v as f64;
            if v < lo || v > hi {
                None
            } else {
                let s = p.scale() as f64;
                Some((threshold_distance(v, s), s / 2.0))
            }
        };
        values
            .iter()
            .map(|&v| match self {
                Self::Identity => None,
                Self::Uniform { params } => one(params, v),
                Self::Twin { params } => one(params.region(v), v),
            })
            .collect()
    }
}

/// Per-channel (per-row) absolute-MinMax weight grid: `scale_c = max|w_c| / qmax`.
pub fn fit_weight_minmax(w: &Tensor2D, bits: u32) -> Result<QuantParams> {
    check_bits(bits)?;
    let qmax = ((1i64 << (bits - 1)) - 1) as f64;
    let scales = (0..w.rows())
        .map(|r| {
            let m = w.row(r).iter().fold(0.0f32, |m, v| m.max(v.abs()));
            if m == 0.0 {
                warn!(channel = r, "all-zero weight channel, using epsilon scale");
                EPSILON_SCALE
            } else {
                (m as f64 / qmax) as f32
            }
        })
        .collect();
    QuantParams::per_channel(bits, scales)
}

/// Linear-interpolated percentile of `|values|`, `pct` in (0, 100].
pub fn abs_percentile(values: &[f32], pct: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("percentile of an empty sample".into()));
    }
    if !(pct > 0.0 && pct <= 100.0) {
        return Err(Error::InvalidArgument(format!("percentile must be in (0, 100], got {pct}")));
    }
    let mut abs: Vec<f64> = values.iter().map(|v| v.abs() as f64).collect();
    abs.sort_by(f64::total_cmp);
    let rank = pct / 100.0 * (abs.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Ok(abs[lo] + (abs[hi] - abs[lo]) * (rank - lo as f64))
}

fn scale_from_range(range: f64, bits: u32, what: &str) -> Result<QuantParams> {
    let qmax = ((1i64 << (bits - 1)) - 1) as f64;
    let scale = if range == 0.0 {
        warn!("{what}: all-zero samples, using epsilon scale");
        EPSILON_SCALE
    } else {
        (range / qmax) as f32
    };
    QuantParams::per_tensor(bits, scale)
}

/// Per-tensor grid with `scale = percentile_pct(|samples|) / qmax`.
pub fn fit_activation_percentile(samples: &Tensor2D, bits: u32, pct: f64) -> Result<QuantParams> {
    check_bits(bits)?;
    let range = abs_percentile(samples.data(), pct)?;
    scale_from_range(range, bits, "percentile fit")
}

/// Per-tensor MinMax grid (the 100th percentile).
pub fn fit_activation_minmax(samples: &Tensor2D, bits: u32) -> Result<QuantParams> {
    fit_activation_percentile(samples, bits, 100.0)
}

/// Default scale-search multipliers: 0.50, 0.51, ..., 1.20.
pub fn default_search_alphas() -> Vec<f32> {
    (50..=120).map(|i| i as f32 / 100.0).collect()
}

/// Result of [`fit_activation_scale_search`].
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleSearch {
    pub params: QuantParams,
    pub alpha: f32,
    pub similarity: f64,
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Picks the activation scale `alpha * s_minmax` that maximizes the cosine
/// similarity between `W X + B` and `q_W(W) q_A(X) + B` on the calibration
/// batch. Weights use the per-channel MinMax grid. Ties go to the smaller scale.
pub fn fit_activation_scale_search(
    x_cal: &Tensor2D,
    weight: &Tensor2D,
    bias: Option<&Tensor2D>,
    bits_w: u32,
    bits_a: u32,
    alphas: &[f32],
) -> Result<ScaleSearch> {
    if x_cal.is_empty() {
        return Err(Error::InvalidArgument("empty calibration set".into()));
    }
    if alphas.is_empty() {
        return Err(Error::InvalidArgument("empty scale-search grid".into()));
    }
    let base = fit_activation_minmax(x_cal, bits_a)?.scale();
    let w_q = fit_weight_minmax(weight, bits_w)?.quantize(weight)?;
    let with_bias = |y: Tensor2D| match bias {
        Some(b) => y.add_column(b),
        None => Ok(y),
    };
    let reference = with_bias(matmul(weight, x_cal)?)?;

    let mut candidates: Vec<f32> = alphas.to_vec();
    candidates.sort_by(f32::total_cmp);
    let mut best: Option<ScaleSearch> = None;
    for alpha in candidates {
        let params = QuantParams::per_tensor(bits_a, base * alpha)?;
        let out = with_bias(matmul(&w_q, &params.quantize(x_cal)?)?)?;
        let similarity = cosine_similarity(reference.data(), out.data());
        if best.as_ref().map_or(true, |b| similarity > b.similarity) {
            best = Some(ScaleSearch {
                params,
                alpha,
                similarity,
            });
        }
    }
    Ok(best.expect("non-empty grid"))
}

/// Sign-split quantizer: MinMax on the negative values, 99.99th percentile
/// on the non-negative values. An empty side gets the epsilon scale.
pub fn fit_twin_region(samples: &Tensor2D, bits: u32) -> Result<TwinQuantParams> {
    check_bits(bits)?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty sample set".into()));
    }
    let (neg, pos): (Vec<f32>, Vec<f32>) = samples.data().iter().partition(|&&v| v < 0.0);
    let negative = if neg.is_empty() {
        QuantParams::per_tensor(bits, EPSILON_SCALE)?
    } else {
        scale_from_range(abs_percentile(&neg, 100.0)?, bits, "twin negative region")?
    };
    let positive = if pos.is_empty() {
        QuantParams::per_tensor(bits, EPSILON_SCALE)?
    } else {
        scale_from_range(abs_percentile(&pos, 99.99)?, bits, "twin positive region")?
    };
    Ok(TwinQuantParams { negative, positive })
}
