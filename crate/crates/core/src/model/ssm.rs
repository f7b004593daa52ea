//! Discretization and the selective-scan recurrence.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Zero-order-hold discretization of a scalar (diagonal) SSM mode.
///
/// Returns `(Ā, B̄)` with `Ā = exp(ΔA)` and `B̄ = (ΔA)⁻¹(exp(ΔA) − 1)·ΔB`.
/// For `A == 0` the limit `B̄ = ΔB` is used.
pub fn zoh_discretize(a: f32, b: f32, delta: f32) -> Result<(f32, f32)> {
    if !(delta > 0.0) {
        return Err(Error::Precondition(format!("step size must be positive, got {delta}")));
    }
    let (a, b, delta) = (a as f64, b as f64, delta as f64);
    let da = delta * a;
    let a_bar = da.exp();
    let b_bar = if a == 0.0 { delta * b } else { da.exp_m1() / da * delta * b };
    Ok((a_bar as f32, b_bar as f32))
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Runs the selective scan with the Mamba simplification `B̄_t = Δ̄_t·B_t`:
///
/// ```text
/// h_t[d,n] = exp(Δ̄_t[d]·A[d,n])·h_{t−1}[d,n] + Δ̄_t[d]·B_t[n]·x_t[d]
/// y_t[d]   = Σ_n C_t[n]·h_t[d,n] + D[d]·x_t[d]
/// ```
///
/// Shapes: `x, delta: [L×D]`, `b, c: [L×N]`, `a: [D×N]`, `d_skip: [D]`.
pub fn selective_scan(
    x: &Tensor<f32>,
    delta: &Tensor<f32>,
    b: &Tensor<f32>,
    c: &Tensor<f32>,
    a: &Tensor<f32>,
    d_skip: Option<&[f32]>,
) -> Result<Tensor<f32>> {
    selective_scan_with(x, delta, b, c, a, d_skip, &mut |_| {})
}

/// [`selective_scan`] with a callback that sees (and may rewrite) the hidden
/// state `h_t` (`[D×N]`, row-major) after every recurrence step.
pub fn selective_scan_with(
    x: &Tensor<f32>,
    delta: &Tensor<f32>,
    b: &Tensor<f32>,
    c: &Tensor<f32>,
    a: &Tensor<f32>,
    d_skip: Option<&[f32]>,
    on_state: &mut dyn FnMut(&mut [f32]),
) -> Result<Tensor<f32>> {
    let (l, d) = (x.rows(), x.cols());
    let n = a.cols();
    if delta.shape() != x.shape() {
        return Err(Error::shape(x.shape(), delta.shape(), "scan delta"));
    }
    if b.rows() != l || b.cols() != n || c.rows() != l || c.cols() != n {
        return Err(Error::shape(b.shape(), c.shape(), "scan B/C"));
    }
    if a.rows() != d {
        return Err(Error::shape(x.shape(), a.shape(), "scan A"));
    }
    if let Some(ds) = d_skip {
        if ds.len() != d {
            return Err(Error::shape(&[d], &[ds.len()], "scan D skip"));
        }
    }
    if let Some(bad) = delta.data().iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::Precondition(format!("scan step sizes must be positive, found {bad}")));
    }

    let ad = a.data();
    let mut h = vec![0.0f32; d * n];
    let mut y = vec![0.0f32; l * d];
    for t in 0..l {
        let xt = x.row(t);
        let dt = delta.row(t);
        let bt = b.row(t);
        for ch in 0..d {
            let hrow = &mut h[ch * n..(ch + 1) * n];
            let arow = &ad[ch * n..(ch + 1) * n];
            let dx = dt[ch] * xt[ch];
            for s in 0..n {
                hrow[s] = (dt[ch] * arow[s]).exp() * hrow[s] + dx * bt[s];
            }
        }
        on_state(&mut h);
        let ct = c.row(t);
        let yt = &mut y[t * d..(t + 1) * d];
        for ch in 0..d {
            let hrow = &h[ch * n..(ch + 1) * n];
            let mut acc = 0.0f32;
            for s in 0..n {
                acc += ct[s] * hrow[s];
            }
            if let Some(ds) = d_skip {
                acc += ds[ch] * xt[ch];
            }
            yt[ch] = acc;
        }
    }
    Ok(Tensor::matrix(l, d, y))
}
