//! Quantized linear layers.
//!
//! The integer path computes, for token row `ℓ` and output channel `o`,
//!
//! ```text
//! Y[ℓ,o] = Δ_W[o]·Δ_X[ℓ]·(Σ_k X̄[ℓ,k]·W̄[o,k] − ε_X[ℓ]·Σ_k W̄[o,k]) + b[o]
//! ```
//!
//! with unsigned activation codes stored shifted by `−128` so they fit `i8`.
//! The shift is undone through the same row-sum correction as `ε_X`.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{
    affine_code, affine_from_range, check_bits, dequantize_weights, pack_int4, qmax_symmetric, qmax_unsigned,
    unpack_int4, unpack_int4_into,
};
use crate::tensor::{dot_i8, matmul, Tensor};

/// Shift that maps unsigned codes `[0, 255]` onto `i8`.
const CODE_SHIFT: i32 = 128;

/// Activation quantization granularity at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    /// One `(Δ, ε)` per layer, calibrated offline.
    PerTensorStatic,
    /// One `(Δ, ε)` per token row, computed from each input.
    PerTokenDynamic,
    /// One `(Δ, ε)` per token position, calibrated offline.
    Pts,
}

impl ActMode {
    pub fn name(self) -> &'static str {
        match self {
            ActMode::PerTensorStatic => "per_tensor_static",
            ActMode::PerTokenDynamic => "per_token_dynamic",
            ActMode::Pts => "pts",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "per_tensor_static" | "per-tensor" | "static" => Some(ActMode::PerTensorStatic),
            "per_token_dynamic" | "dynamic" => Some(ActMode::PerTokenDynamic),
            "pts" => Some(ActMode::Pts),
            _ => None,
        }
    }
}

/// Weight codes, packed two per byte at 4 bits or less.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightCodes {
    Int8(Tensor<i8>),
    Int4 { packed: Tensor<u8>, cols: usize },
}

impl WeightCodes {
    pub fn from_codes(codes: &Tensor<i8>, bits: u32) -> Result<Self> {
        if bits > 4 {
            return Ok(WeightCodes::Int8(codes.clone()));
        }
        let (rows, cols) = (codes.rows(), codes.cols());
        let per_row = cols.div_ceil(2);
        let mut packed = Vec::with_capacity(rows * per_row);
        for o in 0..rows {
            packed.extend(pack_int4(codes.row(o))?);
        }
        Ok(WeightCodes::Int4 {
            packed: Tensor::matrix(rows, per_row, packed),
            cols,
        })
    }

    pub fn rows(&self) -> usize {
        match self {
            WeightCodes::Int8(t) => t.rows(),
            WeightCodes::Int4 { packed, .. } => packed.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            WeightCodes::Int8(t) => t.cols(),
            WeightCodes::Int4 { cols, .. } => *cols,
        }
    }

    pub fn unpacked(&self) -> Tensor<i8> {
        match self {
            WeightCodes::Int8(t) => t.clone(),
            WeightCodes::Int4 { packed, cols } => {
                let data = (0..packed.rows()).flat_map(|o| unpack_int4(packed.row(o), *cols)).collect();
                Tensor::matrix(packed.rows(), *cols, data)
            }
        }
    }

    pub fn byte_len(&self) -> usize {
        match self {
            WeightCodes::Int8(t) => t.len(),
            WeightCodes::Int4 { packed, .. } => packed.len(),
        }
    }
}

/// Accumulated time spent in each stage of the quantized linears.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimes {
    pub smooth: Duration,
    pub quantize: Duration,
    pub gemm: Duration,
    pub dequantize: Duration,
}

impl PhaseTimes {
    pub fn total(&self) -> Duration {
        self.smooth + self.quantize + self.gemm + self.dequantize
    }
}

/// How a quantized linear evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecPath {
    /// Integer GEMM with per-token rescaling.
    Integer,
    /// Dequantized operands multiplied in f32.
    Fake,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLinear {
    pub w_bits: u32,
    pub a_bits: u32,
    pub mode: ActMode,
    pub codes: WeightCodes,
    pub dw: Vec<f32>,
    pub row_sums: Vec<i32>,
    /// Activation step sizes: one (per-tensor), `L` (PTS), none (dynamic).
    pub dx: Vec<f32>,
    pub eps: Vec<i32>,
    /// Smoothing divide applied to the input before quantization.
    pub s: Vec<f32>,
    pub bias: Option<Vec<f32>>,
    // Dequantized weight, transposed to `[in × out]`.
    w_hat_t: Tensor<f32>,
    // Static modes: `Δ_W[o]·Δ_X[ℓ]` and `(ε_X[ℓ] − 128)·rowsum[o]`, `[groups × out]`.
    scale_table: Vec<f32>,
    offset_table: Vec<i32>,
}

pub fn row_sums(codes: &Tensor<i8>) -> Vec<i32> {
    (0..codes.rows()).map(|o| codes.row(o).iter().map(|&c| c as i32).sum()).collect()
}

impl QuantizedLinear {
    /// Assembles a layer from frozen integer codes and step sizes.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        codes: &Tensor<i8>,
        dw: Vec<f32>,
        s: Vec<f32>,
        mode: ActMode,
        dx: Vec<f32>,
        eps: Vec<i32>,
        bias: Option<Vec<f32>>,
        w_bits: u32,
        a_bits: u32,
    ) -> Result<Self> {
        check_bits(w_bits)?;
        check_bits(a_bits)?;
        let (out, inp) = (codes.rows(), codes.cols());
        if dw.len() != out || s.len() != inp {
            return Err(Error::shape(codes.shape(), &[dw.len(), s.len()], "quantized linear params"));
        }
        if bias.as_ref().is_some_and(|b| b.len() != out) {
            return Err(Error::shape(codes.shape(), &[bias.as_ref().map_or(0, |b| b.len())], "bias"));
        }
        let wq = qmax_symmetric(w_bits);
        if let Some(&c) = codes.data().iter().find(|&&c| (c as i32).abs() > wq) {
            return Err(Error::CodeRange {
                code: c as i32,
                lo: -wq,
                hi: wq,
            });
        }
        match mode {
            ActMode::PerTensorStatic if dx.len() != 1 || eps.len() != 1 => {
                return Err(Error::Invalid("per-tensor mode needs one step size".into()))
            }
            ActMode::Pts if dx.is_empty() || dx.len() != eps.len() => {
                return Err(Error::Invalid("PTS needs one step size and offset per token".into()))
            }
            _ => {}
        }
        let aq = qmax_unsigned(a_bits);
        if let Some(&e) = eps.iter().find(|&&e| !(0..=aq).contains(&e)) {
            return Err(Error::CodeRange { code: e, lo: 0, hi: aq });
        }
        if let Some(bad) = dx.iter().chain(&dw).chain(&s).find(|&&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Invalid(format!("step sizes and smoothing scales must be positive, found {bad}")));
        }
        let rs = row_sums(codes);
        let w_hat_t = dequantize_weights(codes, &dw).transpose();
        let mut scale_table = Vec::new();
        let mut offset_table = Vec::new();
        if mode != ActMode::PerTokenDynamic {
            for (&d, &e) in dx.iter().zip(&eps) {
                scale_table.extend(dw.iter().map(|&w| w * d));
                offset_table.extend(rs.iter().map(|&r| (e - CODE_SHIFT) * r));
            }
        }
        Ok(Self {
            w_bits,
            a_bits,
            mode,
            codes: WeightCodes::from_codes(codes, w_bits)?,
            dw,
            row_sums: rs,
            dx,
            eps,
            s,
            bias,
            w_hat_t,
            scale_table,
            offset_table,
        })
    }

    pub fn in_features(&self) -> usize {
        self.codes.cols()
    }

    pub fn out_features(&self) -> usize {
        self.codes.rows()
    }

    /// `diag(Δ_W)·W̄`, `[out × in]`.
    pub fn dequantized_weight(&self) -> Tensor<f32> {
        self.w_hat_t.transpose()
    }

    /// Recomputes the row sums from the stored codes.
    pub fn check_row_sums(&self) -> bool {
        row_sums(&self.codes.unpacked()) == self.row_sums
    }

    fn check_input(&self, x: &Tensor<f32>) -> Result<()> {
        if x.cols() != self.in_features() {
            return Err(Error::shape(x.shape(), &[self.out_features(), self.in_features()], "quantized linear input"));
        }
        if self.mode == ActMode::Pts && x.rows() != self.dx.len() {
            return Err(Error::TokenLength {
                found: x.rows(),
                expected: self.dx.len(),
            });
        }
        Ok(())
    }

    /// `(Δ, ε)` used for token row `t` of a smoothed input row `u`.
    #[inline]
    fn row_params(&self, t: usize, u: &[f32]) -> (f32, i32) {
        match self.mode {
            ActMode::PerTensorStatic => (self.dx[0], self.eps[0]),
            ActMode::Pts => (self.dx[t], self.eps[t]),
            ActMode::PerTokenDynamic => {
                let (lo, hi) = u
                    .iter()
                    .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
                affine_from_range(lo, hi, self.a_bits, 1.0)
            }
        }
    }

    pub fn forward(&self, x: &Tensor<f32>, fp_row: Option<usize>, path: ExecPath) -> Result<Tensor<f32>> {
        match path {
            ExecPath::Integer => self.forward_int(x, fp_row, None),
            ExecPath::Fake => self.forward_fake(x, fp_row),
        }
    }

    /// Fake-quant path: `x̂ = Δ_X·(code − ε)` times `diag(Δ_W)·W̄`, in f32.
    /// Row `fp_row` (if any) skips activation quantization.
    pub fn forward_fake(&self, x: &Tensor<f32>, fp_row: Option<usize>) -> Result<Tensor<f32>> {
        self.check_input(x)?;
        let qmax = qmax_unsigned(self.a_bits);
        let mut xq = x.clone();
        for t in 0..xq.rows() {
            let row = xq.row_mut(t);
            for (v, s) in row.iter_mut().zip(&self.s) {
                *v /= s;
            }
            if fp_row == Some(t) {
                continue;
            }
            let (d, e) = self.row_params(t, row);
            for v in row.iter_mut() {
                *v = d * (affine_code(*v, d, e, qmax) - e) as f32;
            }
        }
        let mut y = matmul(&xq, &self.w_hat_t)?;
        if let Some(b) = &self.bias {
            crate::model::add_bias(&mut y, b);
        }
        Ok(y)
    }

    /// Integer path. When `phases` is given, each stage is timed and the
    /// smoothing divide runs as its own pass so it can be measured.
    pub fn forward_int(&self, x: &Tensor<f32>, fp_row: Option<usize>, mut phases: Option<&mut PhaseTimes>) -> Result<Tensor<f32>> {
        self.check_input(x)?;
        let (l, k, n) = (x.rows(), self.in_features(), self.out_features());
        let qmax = qmax_unsigned(self.a_bits);
        let timed = phases.is_some();
        let mut clock = Instant::now();
        let mut lap = |slot: fn(&mut PhaseTimes) -> &mut Duration, phases: &mut Option<&mut PhaseTimes>| {
            if let Some(p) = phases.as_deref_mut() {
                let now = Instant::now();
                *slot(p) += now - clock;
                clock = now;
            }
        };

        let smoothed;
        let src: &Tensor<f32> = if timed {
            let mut u = x.clone();
            for t in 0..l {
                for (v, s) in u.row_mut(t).iter_mut().zip(&self.s) {
                    *v /= s;
                }
            }
            smoothed = u;
            &smoothed
        } else {
            x
        };
        lap(|p| &mut p.smooth, &mut phases);

        let mut q = vec![0i8; l * k];
        let mut row_dx = vec![0.0f32; l];
        let mut row_eps = vec![0i32; l];
        let mut buf = vec![0.0f32; k];
        for t in 0..l {
            if fp_row == Some(t) {
                continue;
            }
            let xr = src.row(t);
            let u: &[f32] = if timed {
                xr
            } else {
                for ((b, &v), s) in buf.iter_mut().zip(xr).zip(&self.s) {
                    *b = v / s;
                }
                &buf
            };
            let (d, e) = self.row_params(t, u);
            row_dx[t] = d;
            row_eps[t] = e;
            for (c, &v) in q[t * k..(t + 1) * k].iter_mut().zip(u) {
                *c = (affine_code(v, d, e, qmax) - CODE_SHIFT) as i8;
            }
        }
        lap(|p| &mut p.quantize, &mut phases);

        let mut acc = vec![0i32; l * n];
        let mut wrow = vec![0i8; k];
        for o in 0..n {
            let w: &[i8] = match &self.codes {
                WeightCodes::Int8(c) => c.row(o),
                WeightCodes::Int4 { packed, .. } => {
                    unpack_int4_into(packed.row(o), &mut wrow);
                    &wrow
                }
            };
            for t in 0..l {
                acc[t * n + o] = dot_i8(&q[t * k..(t + 1) * k], w);
            }
        }
        lap(|p| &mut p.gemm, &mut phases);

        let mut y = vec![0.0f32; l * n];
        for t in 0..l {
            let yr = &mut y[t * n..(t + 1) * n];
            let ar = &acc[t * n..(t + 1) * n];
            if fp_row == Some(t) {
                continue;
            }
            match self.mode {
                ActMode::PerTokenDynamic => {
                    let (d, e) = (row_dx[t], row_eps[t] - CODE_SHIFT);
                    for o in 0..n {
                        yr[o] = (ar[o] - e * self.row_sums[o]) as f32 * (self.dw[o] * d);
                    }
                }
                _ => {
                    let g = if self.mode == ActMode::Pts { t } else { 0 };
                    let sc = &self.scale_table[g * n..(g + 1) * n];
                    let off = &self.offset_table[g * n..(g + 1) * n];
                    for o in 0..n {
                        yr[o] = (ar[o] - off[o]) as f32 * sc[o];
                    }
                }
            }
            if let Some(b) = &self.bias {
                for (v, b) in yr.iter_mut().zip(b) {
                    *v += b;
                }
            }
        }
        let mut y = Tensor::matrix(l, n, y);
        if let Some(p) = fp_row.filter(|&p| p < l) {
            let mut u = Tensor::matrix(1, k, x.row(p).to_vec());
            for (v, s) in u.row_mut(0).iter_mut().zip(&self.s) {
                *v /= s;
            }
            let mut r = matmul(&u, &self.w_hat_t)?;
            if let Some(b) = &self.bias {
                crate::model::add_bias(&mut r, b);
            }
            y.row_mut(p).copy_from_slice(r.row(0));
        }
        lap(|p| &mut p.dequantize, &mut phases);
        Ok(y)
    }
}
