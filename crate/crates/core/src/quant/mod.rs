//! Uniform quantizers: asymmetric (activations) and symmetric per-channel
//! (weights), per-token static and dynamic parameters, smoothing scales,
//! int4 packing and calibration statistics.
//!
//! Rounding is `f32::round` (half away from zero) everywhere.

mod pack;
mod smooth;
mod stats;

pub use pack::{pack_int4, unpack_int4, unpack_int4_into};
pub use smooth::{apply_smoothing, fold_divide_into_rows, smooth_scale, weight_col_max_abs, SmoothScale, SmoothedLinear};
pub use stats::{check_taps, collect_activation_stats, ActStats, CaptureHooks, StatsConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest step size; degenerate ranges are floored here.
pub const MIN_STEP: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerOutChannel,
    PerToken,
}

/// Step sizes, zero offsets and clip ratios of one quantizer.
///
/// `delta`, `clip_ratio` and (when present) `eps` have one entry per group:
/// one for per-tensor, one per row otherwise. Symmetric quantizers carry no
/// zero offset.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    pub bits: u32,
    pub granularity: Granularity,
    pub delta: Vec<f32>,
    pub eps: Option<Vec<i32>>,
    pub clip_ratio: Vec<f32>,
}

pub fn check_bits(bits: u32) -> Result<()> {
    if !(2..=8).contains(&bits) {
        return Err(Error::Invalid(format!("bit width {bits} outside 2..=8")));
    }
    Ok(())
}

fn check_gamma(gamma: f32) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Invalid(format!("clip ratio {gamma} outside (0, 1]")));
    }
    Ok(())
}

/// Largest unsigned code, `2ᵇ − 1`.
#[inline]
pub fn qmax_unsigned(bits: u32) -> i32 {
    (1 << bits) - 1
}

/// Largest symmetric code, `2ᵇ⁻¹ − 1`.
#[inline]
pub fn qmax_symmetric(bits: u32) -> i32 {
    (1 << (bits - 1)) - 1
}

/// Affine code `clip(round(x/Δ) + ε, 0, 2ᵇ−1)`.
#[inline]
pub fn affine_code(x: f32, delta: f32, eps: i32, qmax: i32) -> i32 {
    ((x / delta).round() as i32).saturating_add(eps).clamp(0, qmax)
}

/// `Δ·(code − ε)`.
#[inline]
pub fn affine_fake(x: f32, delta: f32, eps: i32, qmax: i32) -> f32 {
    delta * (affine_code(x, delta, eps, qmax) - eps) as f32
}

/// `(Δ, ε)` for the range `[lo, hi]` shrunk symmetrically by `gamma`.
///
/// The shrunk range is widened to contain zero so that the unsigned offset
/// `ε ∈ [0, 2ᵇ−1]` can always place it; a range of width zero gets
/// `Δ = MIN_STEP`.
pub fn affine_from_range(lo: f32, hi: f32, bits: u32, gamma: f32) -> (f32, i32) {
    let qmax = qmax_unsigned(bits);
    let r = hi - lo;
    let lo = (lo + (1.0 - gamma) * r / 2.0).min(0.0);
    let hi = (hi - (1.0 - gamma) * r / 2.0).max(0.0);
    let delta = ((hi - lo) / qmax as f32).max(MIN_STEP);
    let eps = ((-lo / delta).round() as i32).clamp(0, qmax);
    (delta, eps)
}

fn min_max(x: impl IntoIterator<Item = f32>) -> Option<(f32, f32)> {
    x.into_iter().fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

/// Per-tensor asymmetric min-max parameters with clip ratio `gamma`.
pub fn minmax_affine_params(x: &[f32], bits: u32, gamma: f32) -> Result<QuantParams> {
    check_bits(bits)?;
    check_gamma(gamma)?;
    let (lo, hi) = min_max(x.iter().copied()).ok_or(Error::Empty)?;
    let (delta, eps) = affine_from_range(lo, hi, bits, gamma);
    Ok(QuantParams {
        bits,
        granularity: Granularity::PerTensor,
        delta: vec![delta],
        eps: Some(vec![eps]),
        clip_ratio: vec![gamma],
    })
}

/// Affine fake quantization of `x` (`[L × D]`) with per-tensor or
/// per-token parameters.
pub fn fake_quant_affine(x: &Tensor<f32>, qp: &QuantParams) -> Result<Tensor<f32>> {
    let eps = qp
        .eps
        .as_ref()
        .ok_or_else(|| Error::Invalid("affine quantizer needs a zero offset".into()))?;
    let qmax = qmax_unsigned(qp.bits);
    match qp.granularity {
        Granularity::PerTensor => Ok(x.map(|v| affine_fake(v, qp.delta[0], eps[0], qmax))),
        Granularity::PerToken => {
            if qp.delta.len() != x.rows() {
                return Err(Error::TokenLength {
                    found: x.rows(),
                    expected: qp.delta.len(),
                });
            }
            let mut out = x.clone();
            for i in 0..out.rows() {
                let (d, e) = (qp.delta[i], eps[i]);
                out.row_mut(i).iter_mut().for_each(|v| *v = affine_fake(*v, d, e, qmax));
            }
            Ok(out)
        }
        Granularity::PerOutChannel => Err(Error::Invalid("per-channel affine activations are not supported".into())),
    }
}

/// Per-output-channel symmetric step sizes `γ·max|W[o,:]| / (2ᵇ⁻¹−1)`.
pub fn symmetric_weight_params(w: &Tensor<f32>, bits: u32) -> Result<QuantParams> {
    symmetric_weight_params_clipped(w, bits, &vec![1.0; w.rows()])
}

/// [`symmetric_weight_params`] with a clip ratio per output channel.
pub fn symmetric_weight_params_clipped(w: &Tensor<f32>, bits: u32, gamma: &[f32]) -> Result<QuantParams> {
    check_bits(bits)?;
    if gamma.len() != w.rows() {
        return Err(Error::shape(w.shape(), &[gamma.len()], "weight clip ratios"));
    }
    gamma.iter().try_for_each(|&g| check_gamma(g))?;
    let qmax = qmax_symmetric(bits) as f32;
    let delta = (0..w.rows())
        .map(|o| {
            let m = w.row(o).iter().fold(0.0f32, |m, v| m.max(v.abs()));
            (gamma[o] * m / qmax).max(MIN_STEP)
        })
        .collect();
    Ok(QuantParams {
        bits,
        granularity: Granularity::PerOutChannel,
        delta,
        eps: None,
        clip_ratio: gamma.to_vec(),
    })
}

#[inline]
pub fn symmetric_code(w: f32, delta: f32, qmax: i32) -> i32 {
    ((w / delta).round() as i32).clamp(-qmax, qmax)
}

/// Integer weight codes `clip(round(W/Δ_W), −2ᵇ⁻¹+1, 2ᵇ⁻¹−1)`.
pub fn quantize_weights(w: &Tensor<f32>, qp: &QuantParams) -> Result<Tensor<i8>> {
    if qp.granularity != Granularity::PerOutChannel || qp.delta.len() != w.rows() {
        return Err(Error::shape(w.shape(), &[qp.delta.len()], "per-channel weight params"));
    }
    let qmax = qmax_symmetric(qp.bits);
    let mut out = Tensor::<i8>::zeros(w.shape());
    for o in 0..w.rows() {
        let d = qp.delta[o];
        for (c, &v) in out.row_mut(o).iter_mut().zip(w.row(o)) {
            *c = symmetric_code(v, d, qmax) as i8;
        }
    }
    Ok(out)
}

/// `diag(Δ_W)·W̄` for integer codes.
pub fn dequantize_weights(codes: &Tensor<i8>, delta: &[f32]) -> Tensor<f32> {
    Tensor::from_fn(codes.rows(), codes.cols(), |o, i| delta[o] * codes.at(o, i) as f32)
}

pub fn fake_quant_symmetric(w: &Tensor<f32>, qp: &QuantParams) -> Result<Tensor<f32>> {
    Ok(dequantize_weights(&quantize_weights(w, qp)?, &qp.delta))
}

/// Per-position ranges pooled over samples and channels.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRanges {
    pub min: Vec<f32>,
    pub max: Vec<f32>,
}

impl TokenRanges {
    pub fn from_samples(acts: &[Tensor<f32>]) -> Result<Self> {
        let first = acts.first().ok_or(Error::Empty)?;
        let l = first.rows();
        let mut min = vec![f32::INFINITY; l];
        let mut max = vec![f32::NEG_INFINITY; l];
        for a in acts {
            if a.rows() != l {
                return Err(Error::TokenLength {
                    found: a.rows(),
                    expected: l,
                });
            }
            for t in 0..l {
                if let Some((lo, hi)) = min_max(a.row(t).iter().copied()) {
                    min[t] = min[t].min(lo);
                    max[t] = max[t].max(hi);
                }
            }
        }
        if min.iter().any(|v| !v.is_finite()) {
            return Err(Error::Empty);
        }
        Ok(Self { min, max })
    }

    pub fn params(&self, bits: u32, gamma: &[f32]) -> Result<QuantParams> {
        check_bits(bits)?;
        if gamma.len() != self.min.len() {
            return Err(Error::shape(&[self.min.len()], &[gamma.len()], "token clip ratios"));
        }
        gamma.iter().try_for_each(|&g| check_gamma(g))?;
        let (delta, eps) = self
            .min
            .iter()
            .zip(&self.max)
            .zip(gamma)
            .map(|((&lo, &hi), &g)| affine_from_range(lo, hi, bits, g))
            .unzip();
        Ok(QuantParams {
            bits,
            granularity: Granularity::PerToken,
            delta,
            eps: Some(eps),
            clip_ratio: gamma.to_vec(),
        })
    }
}

/// Per-token static parameters from calibration activations `[L × D]` each.
pub fn per_token_params(calib_acts: &[Tensor<f32>], bits: u32, gamma: f32) -> Result<QuantParams> {
    let ranges = TokenRanges::from_samples(calib_acts)?;
    let l = ranges.min.len();
    ranges.params(bits, &vec![gamma; l])
}

/// Row-wise online min-max quantization. Returns unsigned codes and the
/// per-row parameters that produced them.
pub fn dynamic_per_token_quant(x: &Tensor<f32>, bits: u32) -> Result<(Tensor<u8>, QuantParams)> {
    check_bits(bits)?;
    let qmax = qmax_unsigned(bits);
    let mut codes = Tensor::<u8>::zeros(x.shape());
    let mut delta = Vec::with_capacity(x.rows());
    let mut eps = Vec::with_capacity(x.rows());
    for t in 0..x.rows() {
        let (lo, hi) = min_max(x.row(t).iter().copied()).ok_or(Error::Empty)?;
        let (d, e) = affine_from_range(lo, hi, bits, 1.0);
        for (c, &v) in codes.row_mut(t).iter_mut().zip(x.row(t)) {
            *c = affine_code(v, d, e, qmax) as u8;
        }
        delta.push(d);
        eps.push(e);
    }
    let l = x.rows();
    Ok((
        codes,
        QuantParams {
            bits,
            granularity: Granularity::PerToken,
            delta,
            eps: Some(eps),
            clip_ratio: vec![1.0; l],
        },
    ))
}
