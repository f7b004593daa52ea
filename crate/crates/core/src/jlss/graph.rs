//! Learned per-layer quantizer state and the differentiable block graph.

use std::collections::BTreeMap;

use super::tape::{Mat, QuantSpec, Rounding, Tape, Var};
use crate::error::{Error, Result};
use crate::exec::{ActMode, QuantizedLinear};
use crate::model::{Block, Branch, Linear};
use crate::quant::{qmax_unsigned, MIN_STEP};
use crate::tensor::Tensor;

/// Quantizer state of one linear layer during calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub mode: ActMode,
    pub w_bits: u32,
    pub a_bits: u32,
    /// Activation-side smoothing divide.
    pub s: Vec<f32>,
    pub dx: Vec<f32>,
    /// Frozen zero offsets (one per group).
    pub eps: Vec<i32>,
    pub dw: Vec<f32>,
    /// Frozen integer weights, `[out × in]`.
    pub wbar: Tensor<i8>,
    /// Clip ratios picked by the grid search (weights per channel, activations per group).
    pub gamma_w: Vec<f32>,
    pub gamma_x: Vec<f32>,
}

impl LayerState {
    pub fn to_quantized(&self, layer: &Linear) -> Result<QuantizedLinear> {
        QuantizedLinear::new(
            &self.wbar,
            self.dw.clone(),
            self.s.clone(),
            self.mode,
            self.dx.clone(),
            self.eps.clone(),
            layer.bias().map(|b| b.to_vec()),
            self.w_bits,
            self.a_bits,
        )
    }
}

/// Which learned quantity a stage-3 sub-pass updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Smooth,
    ActStep,
    WeightStep,
}

impl ParamGroup {
    pub const ORDER: [ParamGroup; 3] = [ParamGroup::Smooth, ParamGroup::ActStep, ParamGroup::WeightStep];
}

/// Gradient of the block loss for one layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerGrad {
    pub s: Vec<f64>,
    pub dx: Vec<f64>,
    pub dw: Vec<f64>,
}

struct ParamVars {
    s: Var,
    dx: Var,
    dw: Var,
}

struct Builder<'a> {
    tape: Tape,
    states: &'a BTreeMap<String, LayerState>,
    train: Option<ParamGroup>,
    seg: usize,
    vars: BTreeMap<String, ParamVars>,
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn mat_of(t: &Tensor<f32>) -> Mat {
    Mat::from_vec(t.rows(), t.cols(), to_f64(t.data()))
}

impl Builder<'_> {
    fn param(&mut self, v: &[f32], group: ParamGroup) -> Var {
        let trainable = self.train.is_none_or(|g| g == group);
        self.tape.leaf(Mat::row_vec(to_f64(v)), trainable)
    }

    fn linear(&mut self, x: Var, path: &str, layer: &Linear) -> Result<Var> {
        let st = self
            .states
            .get(path)
            .ok_or_else(|| Error::MissingLayer(path.to_string()))?;
        let shared = match st.mode {
            ActMode::PerTensorStatic => true,
            ActMode::Pts => false,
            ActMode::PerTokenDynamic => {
                return Err(Error::Invalid(format!("`{path}`: dynamic activation ranges have no learnable step")))
            }
        };
        let s = self.param(&st.s, ParamGroup::Smooth);
        let dx = self.param(&st.dx, ParamGroup::ActStep);
        let dw = self.param(&st.dw, ParamGroup::WeightStep);
        let spec = QuantSpec {
            eps: st.eps.clone(),
            qmax: qmax_unsigned(st.a_bits),
            seg: self.seg,
            shared,
        };
        let q = self.tape.quant_input(x, s, dx, spec);
        let w = Mat::from_vec(
            st.wbar.rows(),
            st.wbar.cols(),
            st.wbar.data().iter().map(|&c| c as f64).collect(),
        );
        let mut y = self.tape.qlinear(q, dw, w);
        if let Some(b) = layer.bias() {
            y = self.tape.add_row(y, &to_f64(b));
        }
        self.vars.insert(path.to_string(), ParamVars { s, dx, dw });
        Ok(y)
    }

    fn branch(&mut self, x: Var, br: &Branch, prefix: &str) -> Result<Var> {
        let mut u = x;
        if let Some(conv) = &br.conv {
            u = self.tape.conv(u, mat_of(&conv.weight), self.seg);
            u = self.tape.add_row(u, &to_f64(&conv.bias));
        }
        let u = self.tape.silu(u);
        let r = br.dt_proj.in_features();
        let n = br.ssm.a().cols();
        let dbc = self.linear(u, &format!("{prefix}.x_proj"), &br.x_proj)?;
        let dt_in = self.tape.slice_cols(dbc, 0, r);
        let b = self.tape.slice_cols(dbc, r, n);
        let c = self.tape.slice_cols(dbc, r + n, n);
        let dt = self.linear(dt_in, &format!("{prefix}.dt_proj"), &br.dt_proj)?;
        let dt = self.tape.softplus(dt);
        let d = br.ssm.d_skip.as_deref().map(to_f64);
        Ok(self.tape.scan(u, dt, b, c, mat_of(br.ssm.a()), d, self.seg))
    }

    fn block(&mut self, x0: Var, block: &Block, prefix: &str) -> Result<Var> {
        let e = block.d_inner();
        let xz = self.linear(x0, &format!("{prefix}.in_proj"), &block.in_proj)?;
        let x = self.tape.slice_cols(xz, 0, e);
        let z = self.tape.slice_cols(xz, e, e);
        let mut y = self.branch(x, &block.fwd, &format!("{prefix}.fwd"))?;
        if let Some(bwd) = &block.bwd {
            let xr = self.tape.reverse(x, self.seg);
            let yb = self.branch(xr, bwd, &format!("{prefix}.bwd"))?;
            let yb = self.tape.reverse(yb, self.seg);
            let sum = self.tape.add(y, yb);
            y = self.tape.scale(sum, 0.5);
        }
        let gz = self.tape.silu(z);
        let mut g = self.tape.mul(y, gz);
        if let Some(scale) = &block.gate_scale {
            g = self.tape.mul_row(g, &to_f64(scale));
        }
        let out = self.linear(g, &format!("{prefix}.out_proj"), &block.out_proj)?;
        Ok(self.tape.add(x0, out))
    }
}

fn stack(batch: &[Tensor<f32>]) -> Result<Mat> {
    let first = batch.first().ok_or(Error::Empty)?;
    let (l, d) = (first.rows(), first.cols());
    let mut data = Vec::with_capacity(batch.len() * l * d);
    for t in batch {
        if t.rows() != l || t.cols() != d {
            return Err(Error::shape(first.shape(), t.shape(), "batch member"));
        }
        data.extend(t.data().iter().map(|&v| v as f64));
    }
    Ok(Mat::from_vec(batch.len() * l, d, data))
}

fn build_loss<'a>(
    block: &Block,
    prefix: &str,
    states: &'a BTreeMap<String, LayerState>,
    inputs: &[Tensor<f32>],
    targets: &[Tensor<f32>],
    group: Option<ParamGroup>,
    tape: Tape,
) -> Result<(Builder<'a>, Var)> {
    if inputs.len() != targets.len() {
        return Err(Error::shape(&[inputs.len()], &[targets.len()], "inputs vs references"));
    }
    let x = stack(inputs)?;
    let target = stack(targets)?;
    let seg = inputs[0].rows();
    let mut b = Builder {
        tape,
        states,
        train: group,
        seg,
        vars: BTreeMap::new(),
    };
    let x0 = b.tape.leaf(x, false);
    let out = b.block(x0, block, prefix)?;
    let loss = b.tape.cosine_loss(out, target, seg);
    Ok((b, loss))
}

/// Rounding state of every quantizer in the block at the current
/// parameters, for [`surrogate_block_loss`].
pub fn block_rounding(
    block: &Block,
    prefix: &str,
    states: &BTreeMap<String, LayerState>,
    inputs: &[Tensor<f32>],
    targets: &[Tensor<f32>],
) -> Result<Rounding> {
    let (b, _) = build_loss(block, prefix, states, inputs, targets, None, Tape::new())?;
    Ok(b.tape.rounding())
}

/// Block loss with every quantizer's rounding residual and clip state held
/// at `at`. Smooth in `(s, Δ_X, Δ_W)`; equals the block loss at the point
/// where `at` was recorded and has [`block_grads`] as its exact gradient there.
pub fn surrogate_block_loss(
    block: &Block,
    prefix: &str,
    states: &BTreeMap<String, LayerState>,
    inputs: &[Tensor<f32>],
    targets: &[Tensor<f32>],
    at: &Rounding,
) -> Result<f64> {
    let (b, loss) = build_loss(block, prefix, states, inputs, targets, None, Tape::frozen(at.clone()))?;
    Ok(b.tape.value(loss).data[0])
}

/// Block loss on the tape and its gradient with respect to every layer's
/// `(s, Δ_X, Δ_W)`, restricted to `group` when given. Returns the loss
/// alongside the gradients keyed by layer path.
pub fn block_grads(
    block: &Block,
    prefix: &str,
    states: &BTreeMap<String, LayerState>,
    inputs: &[Tensor<f32>],
    targets: &[Tensor<f32>],
    group: Option<ParamGroup>,
) -> Result<(f64, BTreeMap<String, LayerGrad>)> {
    let (b, loss) = build_loss(block, prefix, states, inputs, targets, group, Tape::new())?;
    let value = b.tape.value(loss).data[0];
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("{prefix} block loss")));
    }
    let grads = b.tape.backward(loss);
    let pick = |v: Var, n: usize| grads[v.index()].as_ref().map_or_else(|| vec![0.0; n], |m| m.data.clone());
    let mut out = BTreeMap::new();
    for (path, v) in &b.vars {
        let st = &states[path];
        let g = LayerGrad {
            s: pick(v.s, st.s.len()),
            dx: pick(v.dx, st.dx.len()),
            dw: pick(v.dw, st.dw.len()),
        };
        if g.s.iter().chain(&g.dx).chain(&g.dw).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{path}`")));
        }
        out.insert(path.clone(), g);
    }
    Ok((value, out))
}


/// One projected gradient step on `group`: `p ← max(p − lr·g, 1e-8)`.
pub fn apply_step(states: &mut BTreeMap<String, LayerState>, grads: &BTreeMap<String, LayerGrad>, group: ParamGroup, lr: f32) {
    for (path, g) in grads {
        let Some(st) = states.get_mut(path) else { continue };
        let (p, g) = match group {
            ParamGroup::Smooth => (&mut st.s, &g.s),
            ParamGroup::ActStep => (&mut st.dx, &g.dx),
            ParamGroup::WeightStep => (&mut st.dw, &g.dw),
        };
        for (v, &d) in p.iter_mut().zip(g) {
            *v = ((*v as f64 - lr as f64 * d) as f32).max(MIN_STEP);
        }
    }
}
