//! Per-input-channel smoothing scales that move activation range into the
//! weights: `Y = (X·diag(s)⁻¹)·(W·diag(s))ᵀ`.

use crate::error::{Error, Result};
use crate::model::Linear;
use crate::tensor::Tensor;

use super::MIN_STEP;

/// Smoothing vector of one linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothScale {
    pub s: Vec<f32>,
    pub alpha: f32,
    /// Whether the activation-side divide lives in the producing layer
    /// rather than as an explicit divide before quantization.
    pub folded: bool,
}

impl SmoothScale {
    pub fn identity(n: usize) -> Self {
        Self {
            s: vec![1.0; n],
            alpha: 0.0,
            folded: false,
        }
    }
}

/// `s = max|X|^α / max|W|^(1−α)` per input channel, zeros floored at 1e-8.
pub fn smooth_scale(max_abs_x: &[f32], max_abs_w: &[f32], alpha: f32) -> Result<Vec<f32>> {
    if max_abs_x.len() != max_abs_w.len() {
        return Err(Error::shape(&[max_abs_x.len()], &[max_abs_w.len()], "smoothing statistics"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!("smoothing exponent {alpha} outside [0, 1]")));
    }
    max_abs_x
        .iter()
        .zip(max_abs_w)
        .map(|(&x, &w)| {
            if x < 0.0 || w < 0.0 || !x.is_finite() || !w.is_finite() {
                return Err(Error::Invalid(format!("max-abs statistics must be finite and >= 0, got {x}, {w}")));
            }
            let (x, w) = (x.max(MIN_STEP) as f64, w.max(MIN_STEP) as f64);
            Ok((x.powf(alpha as f64) / w.powf(1.0 - alpha as f64)) as f32)
        })
        .collect()
}

/// Column-wise `max|W[:, i]|`.
pub fn weight_col_max_abs(w: &Tensor<f32>) -> Vec<f32> {
    let mut m = vec![0.0f32; w.cols()];
    for o in 0..w.rows() {
        for (acc, v) in m.iter_mut().zip(w.row(o)) {
            *acc = acc.max(v.abs());
        }
    }
    m
}

/// A linear layer whose weight already carries `diag(s)` and whose input
/// must be divided by `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedLinear {
    pub layer: Linear,
    pub divide: Vec<f32>,
}

impl SmoothedLinear {
    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        if x.cols() != self.divide.len() {
            return Err(Error::shape(x.shape(), &[self.divide.len()], "smoothing divide"));
        }
        let mut u = x.clone();
        for i in 0..u.rows() {
            for (v, s) in u.row_mut(i).iter_mut().zip(&self.divide) {
                *v /= s;
            }
        }
        self.layer.forward(&u)
    }
}

/// Scales the weight columns by `s` and records the matching input divide.
pub fn apply_smoothing(layer: &Linear, s: &[f32]) -> Result<SmoothedLinear> {
    if s.len() != layer.in_features() {
        return Err(Error::shape(layer.weight().shape(), &[s.len()], "smoothing scale"));
    }
    if let Some(bad) = s.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Invalid(format!("smoothing scale must be positive, found {bad}")));
    }
    let w = layer.weight();
    let scaled = Tensor::from_fn(w.rows(), w.cols(), |o, i| w.at(o, i) * s[i]);
    Ok(SmoothedLinear {
        layer: layer.with_weight(scaled)?,
        divide: s.to_vec(),
    })
}

/// Folds an input divide into the producer of that input: output rows
/// `offset..offset + s.len()` of `producer` (weight and bias) are divided by `s`.
/// Exact only when nothing nonlinear sits between the two layers.
pub fn fold_divide_into_rows(producer: &Linear, offset: usize, s: &[f32]) -> Result<Linear> {
    if offset + s.len() > producer.out_features() {
        return Err(Error::shape(producer.weight().shape(), &[offset, s.len()], "fold target rows"));
    }
    let mut w = producer.weight().clone();
    let mut bias = producer.bias().map(|b| b.to_vec());
    for (k, &sv) in s.iter().enumerate() {
        w.row_mut(offset + k).iter_mut().for_each(|v| *v /= sv);
        if let Some(b) = bias.as_mut() {
            b[offset + k] /= sv;
        }
    }
    Linear::new(w, bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{rel_diff, seeded_normal};

    #[test]
    fn scale_examples() {
        assert_eq!(smooth_scale(&[4.0], &[1.0], 0.5).unwrap(), vec![2.0]);
        assert_eq!(smooth_scale(&[3.0], &[3.0], 0.5).unwrap(), vec![1.0]);
        assert!((smooth_scale(&[3.0], &[3.0], 0.8).unwrap()[0] - 3f32.powf(0.6)).abs() < 1e-6);
        assert_eq!(smooth_scale(&[5.0], &[7.0], 1.0).unwrap(), vec![5.0]);
        assert!(smooth_scale(&[0.0], &[0.0], 0.5).unwrap()[0] > 0.0);
        assert!(smooth_scale(&[1.0, 2.0], &[1.0], 0.5).is_err());
    }

    #[test]
    fn two_channel_toy() {
        let layer = Linear::new(Tensor::matrix(1, 2, vec![1.0, 1.0]), None).unwrap();
        let sl = apply_smoothing(&layer, &[2.0, 0.5]).unwrap();
        assert_eq!(sl.layer.weight().data(), &[2.0, 0.5]);
        assert_eq!(sl.divide, vec![2.0, 0.5]);
        let x = Tensor::matrix(1, 2, vec![4.0, 1.0]);
        assert_eq!(sl.forward(&x).unwrap(), layer.forward(&x).unwrap());
    }

    #[test]
    fn unit_scale_is_noop() {
        let w = seeded_normal(1, &[5, 3], 0.0, 1.0).unwrap();
        let layer = Linear::new(w, Some(vec![0.1; 5])).unwrap();
        let sl = apply_smoothing(&layer, &[1.0; 3]).unwrap();
        assert_eq!(sl.layer, layer);
    }

    #[test]
    fn fold_into_producer() {
        let prod = Linear::new(seeded_normal(2, &[6, 4], 0.0, 1.0).unwrap(), Some(vec![0.3; 6])).unwrap();
        let cons = Linear::new(seeded_normal(3, &[5, 2], 0.0, 1.0).unwrap(), None).unwrap();
        let s = [3.0f32, 0.25];
        let x = seeded_normal(4, &[7, 4], 0.0, 1.0).unwrap();
        let mid = prod.forward(&x).unwrap().slice_cols(2, 2);
        let want = cons.forward(&mid).unwrap();
        let folded = fold_divide_into_rows(&prod, 2, &s).unwrap();
        let smoothed = apply_smoothing(&cons, &s).unwrap();
        let got = smoothed.layer.forward(&folded.forward(&x).unwrap().slice_cols(2, 2)).unwrap();
        assert!(rel_diff(got.data(), want.data()) < 1e-6);
    }
}
