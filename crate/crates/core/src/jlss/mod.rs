//! Three-stage calibration: smoothing initialization, per-layer grid search
//! of the clip ratios, and block-wise gradient tuning of the smoothing
//! divide and both step sizes against a cosine loss on block outputs.
//!
//! Blocks are processed in order. Each block is calibrated on the outputs
//! of the already-quantized blocks before it, and its float reference is the
//! float block applied to those same inputs.

mod graph;
pub mod tape;

pub use graph::{apply_step, block_grads, block_rounding, surrogate_block_loss, LayerGrad, LayerState, ParamGroup};
pub use tape::Rounding;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{
    calibrate_hidden_ranges, row_sums, ActMode, CalibMeta, ExecOptions, ExecPath, Flags, LayerRecipe, QuantizedLinear,
    QuantizedModel, Recipe, FLOAT_BITS,
};
use crate::model::{block_prefix, linear_paths, FloatHooks, Model};
use crate::quant::{
    affine_code, affine_from_range, check_bits, collect_activation_stats, qmax_symmetric, qmax_unsigned, smooth_scale,
    symmetric_code, weight_col_max_abs, CaptureHooks, SmoothScale, StatsConfig, MIN_STEP,
};
use crate::tensor::Tensor;

/// Clip-ratio candidates `1.00, 0.95, …, 0.50`.
pub const DEFAULT_GRID: [f32; 11] = [1.0, 0.95, 0.9, 0.85, 0.8, 0.75, 0.7, 0.65, 0.6, 0.55, 0.5];

/// Stage-3 epochs by bit width: 10 at 8 bits, 50 at 6, 100 at 4 and below.
pub fn default_epochs(bits: u32) -> usize {
    match bits {
        0..=4 => 100,
        5..=6 => 50,
        _ => 10,
    }
}

/// Calibration hyperparameters. Missing fields take their defaults when
/// read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub lr_s: f32,
    pub lr_q: f32,
    pub alpha: f32,
    /// `None` picks [`default_epochs`] for the activation bit width.
    pub epochs: Option<usize>,
    pub grid: Vec<f32>,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            lr_s: 1e-2,
            lr_q: 5e-4,
            alpha: 0.5,
            epochs: None,
            grid: DEFAULT_GRID.to_vec(),
            batch_size: 8,
            seed: 0,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        // A zero rate is allowed: it freezes the corresponding parameters.
        for (name, lr) in [("lr_s", self.lr_s), ("lr_q", self.lr_q)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {lr}")));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.grid.is_empty() || !self.grid.contains(&1.0) {
            return Err(Error::Config("grid must be non-empty and contain 1.0".into()));
        }
        if let Some(g) = self.grid.iter().find(|&&g| !(g > 0.0 && g <= 1.0)) {
            return Err(Error::Config(format!("grid value {g} outside (0, 1]")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Parses a TOML config holding any subset of the fields and validates it.
    pub fn from_toml(text: &str) -> Result<Self> {
        let h: Hyper = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        h.validate()?;
        Ok(h)
    }

    pub fn epochs_for(&self, bits: u32) -> usize {
        self.epochs.unwrap_or_else(|| default_epochs(bits))
    }

    /// The grid sorted from the largest ratio down, duplicates removed.
    fn sorted_grid(&self) -> Vec<f32> {
        descending(&self.grid)
    }
}

fn descending(grid: &[f32]) -> Vec<f32> {
    let mut g = grid.to_vec();
    g.sort_by(|a, b| b.total_cmp(a));
    g.dedup();
    g
}

/// Calibration methods, from the plainest baseline to the full pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Per-tensor static min-max, no smoothing.
    Minmax,
    /// Smoothing initialization plus per-tensor static min-max.
    Smoothquant,
    /// Smoothing, per-token static ranges and grid-searched clip ratios.
    PtsGrid,
    /// `PtsGrid` followed by block-wise gradient tuning.
    Ptq4vm,
}

impl Method {
    pub const LADDER: [Method; 4] = [Method::Minmax, Method::Smoothquant, Method::PtsGrid, Method::Ptq4vm];

    pub fn name(self) -> &'static str {
        match self {
            Method::Minmax => "minmax",
            Method::Smoothquant => "smoothquant",
            Method::PtsGrid => "pts_grid",
            Method::Ptq4vm => "ptq4vm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::LADDER.into_iter().find(|m| m.name() == s)
    }

    fn mode(self) -> ActMode {
        match self {
            Method::Minmax | Method::Smoothquant => ActMode::PerTensorStatic,
            Method::PtsGrid | Method::Ptq4vm => ActMode::Pts,
        }
    }
}

/// Weight and activation bit widths; [`FLOAT_BITS`] for both means float.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bits {
    pub w: u32,
    pub a: u32,
}

impl Bits {
    pub const FLOAT: Bits = Bits {
        w: FLOAT_BITS,
        a: FLOAT_BITS,
    };

    pub fn new(w: u32, a: u32) -> Self {
        Self { w, a }
    }

    /// Parses `w8a8`, `w6a6`, `w4a4` (any `w{n}a{m}`) or `fp`.
    pub fn parse(s: &str) -> Result<Self> {
        if s == "fp" {
            return Ok(Self::FLOAT);
        }
        let bad = || Error::Config(format!("bit setting `{s}` is not `fp` or `w<bits>a<bits>`"));
        let rest = s.strip_prefix('w').ok_or_else(bad)?;
        let (w, a) = rest.split_once('a').ok_or_else(bad)?;
        let bits = Self {
            w: w.parse().map_err(|_| bad())?,
            a: a.parse().map_err(|_| bad())?,
        };
        check_bits(bits.w)?;
        check_bits(bits.a)?;
        Ok(bits)
    }

    pub fn is_float(self) -> bool {
        self.w == FLOAT_BITS
    }

    pub fn label(self) -> String {
        if self.is_float() {
            "fp".into()
        } else {
            format!("w{}a{}", self.w, self.a)
        }
    }
}

/// Outcome of a clip-ratio search on one tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridChoice {
    pub gamma: f32,
    pub delta: f32,
    /// Zero offset (always 0 for symmetric weights).
    pub eps: i32,
    /// `Σ (x − x̂)²` at the chosen ratio.
    pub err: f64,
}

fn search(grid: &[f32], mut eval: impl FnMut(f32) -> (f32, i32, f64)) -> Result<GridChoice> {
    let mut best: Option<GridChoice> = None;
    for gamma in descending(grid) {
        let (delta, eps, err) = eval(gamma);
        // Strict improvement only, so ties keep the larger ratio.
        if best.is_none_or(|b| err < b.err) {
            best = Some(GridChoice { gamma, delta, eps, err });
        }
    }
    best.ok_or_else(|| Error::Precondition("clip-ratio grid is empty".into()))
}

/// Symmetric per-row search: `Δ = γ·max|w| / (2ᵇ⁻¹−1)`.
pub fn grid_search_symmetric(row: &[f32], bits: u32, grid: &[f32]) -> Result<GridChoice> {
    check_bits(bits)?;
    let qmax = qmax_symmetric(bits);
    let m = row.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    search(grid, |gamma| {
        let delta = (gamma * m / qmax as f32).max(MIN_STEP);
        let err = row
            .iter()
            .map(|&w| {
                let d = (w - delta * symmetric_code(w, delta, qmax) as f32) as f64;
                d * d
            })
            .sum();
        (delta, 0, err)
    })
}

/// Asymmetric search over the pooled values of one activation group.
pub fn grid_search_affine(values: &[f32], bits: u32, grid: &[f32]) -> Result<GridChoice> {
    check_bits(bits)?;
    let qmax = qmax_unsigned(bits);
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return Err(Error::Empty);
    }
    search(grid, |gamma| {
        let (delta, eps) = affine_from_range(lo, hi, bits, gamma);
        let err = values
            .iter()
            .map(|&x| {
                let d = (x - delta * (affine_code(x, delta, eps, qmax) - eps) as f32) as f64;
                d * d
            })
            .sum();
        (delta, eps, err)
    })
}

/// Stage 1: per-layer smoothing scales from float activation statistics.
/// The divide is kept explicit (fused into activation quantization), so
/// the float model itself is untouched.
pub fn stage1_smooth_init(model: &Model, calib: &[Tensor<f32>], alpha: f32) -> Result<BTreeMap<String, SmoothScale>> {
    let taps = linear_paths(model);
    let cfg = StatsConfig {
        reservoir_cap: 0,
        seed: 0,
    };
    let stats = collect_activation_stats(model, calib, &taps, &cfg)?;
    taps.into_iter()
        .map(|path| {
            let w = model.linear(&path).expect("tap from model").weight();
            let s = smooth_scale(&stats[&path].max_abs, &weight_col_max_abs(w), alpha)?;
            Ok((
                path,
                SmoothScale {
                    s,
                    alpha,
                    folded: false,
                },
            ))
        })
        .collect()
}

/// Stage 2 for one layer: grid-searched weight codes of `W·diag(s)` and
/// activation ranges of `x / s` (per token position under PTS, pooled
/// otherwise). `acts` are the layer's float inputs, `[L × in]` each.
#[allow(clippy::too_many_arguments)]
pub fn stage2_grid_search(
    weight: &Tensor<f32>,
    s: &[f32],
    acts: &[Tensor<f32>],
    mode: ActMode,
    bits: Bits,
    grid: &[f32],
) -> Result<LayerState> {
    if s.len() != weight.cols() {
        return Err(Error::shape(weight.shape(), &[s.len()], "smoothing scale"));
    }
    let first = acts.first().ok_or_else(|| Error::Precondition("no calibration activations".into()))?;
    let ws = Tensor::from_fn(weight.rows(), weight.cols(), |o, i| weight.at(o, i) * s[i]);
    let wq = qmax_symmetric(bits.w);
    let mut codes = Tensor::<i8>::zeros(ws.shape());
    let mut dw = Vec::with_capacity(ws.rows());
    let mut gamma_w = Vec::with_capacity(ws.rows());
    for o in 0..ws.rows() {
        let c = grid_search_symmetric(ws.row(o), bits.w, grid)?;
        for (q, &v) in codes.row_mut(o).iter_mut().zip(ws.row(o)) {
            *q = symmetric_code(v, c.delta, wq) as i8;
        }
        dw.push(c.delta);
        gamma_w.push(c.gamma);
    }
    let l = first.rows();
    let smoothed = |t: usize| -> Vec<f32> {
        acts.iter()
            .flat_map(|a| a.row(t).iter().zip(s).map(|(&x, &sv)| x / sv))
            .collect()
    };
    let groups: Vec<Vec<f32>> = match mode {
        ActMode::Pts => (0..l).map(smoothed).collect(),
        ActMode::PerTensorStatic => vec![(0..l).flat_map(smoothed).collect()],
        ActMode::PerTokenDynamic => Vec::new(),
    };
    let mut dx = Vec::new();
    let mut eps = Vec::new();
    let mut gamma_x = Vec::new();
    for g in &groups {
        let c = grid_search_affine(g, bits.a, grid)?;
        dx.push(c.delta);
        eps.push(c.eps);
        gamma_x.push(c.gamma);
    }
    Ok(LayerState {
        mode,
        w_bits: bits.w,
        a_bits: bits.a,
        s: s.to_vec(),
        dx,
        eps,
        dw,
        wbar: codes,
        gamma_w,
        gamma_x,
    })
}

/// `1 − ⟨y_fp, y_q⟩ / (‖y_fp‖‖y_q‖ + 1e-12)`; 0 for a zero reference.
pub fn cosine_loss(y_fp: &[f32], y_q: &[f32]) -> f64 {
    let a: Vec<f64> = y_q.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = y_fp.iter().map(|&v| v as f64).collect();
    tape::cosine_loss_rows(&a, &b, a.len().max(1))
}

fn quantized_layers(model: &Model, states: &BTreeMap<String, LayerState>) -> Result<BTreeMap<String, QuantizedLinear>> {
    states
        .iter()
        .map(|(p, st)| {
            let layer = model.linear(p).ok_or_else(|| Error::MissingLayer(p.clone()))?;
            Ok((p.clone(), st.to_quantized(layer)?))
        })
        .collect()
}

fn fake_opts() -> ExecOptions {
    ExecOptions {
        path: ExecPath::Fake,
        quantize_linears: true,
        quantize_hidden_state: false,
        cls_fp_override: false,
    }
}

/// Quantized outputs of block `i` (fake-quant path) for every input.
pub fn quantized_block_outputs(
    model: &Model,
    i: usize,
    states: &BTreeMap<String, LayerState>,
    inputs: &[Tensor<f32>],
) -> Result<Vec<Tensor<f32>>> {
    let qm = QuantizedModel::from_layers(model, quantized_layers(model, states)?, fake_opts());
    inputs.par_iter().map(|x| model.block_forward(i, x, &qm)).collect()
}

/// Mean cosine loss of quantized block `i` against the float references.
pub fn block_loss(
    model: &Model,
    i: usize,
    states: &BTreeMap<String, LayerState>,
    inputs: &[Tensor<f32>],
    refs: &[Tensor<f32>],
) -> Result<f64> {
    if inputs.len() != refs.len() || inputs.is_empty() {
        return Err(Error::shape(&[inputs.len()], &[refs.len()], "block loss batch"));
    }
    let ys = quantized_block_outputs(model, i, states, inputs)?;
    let total: f64 = ys.iter().zip(refs).map(|(y, r)| cosine_loss(r.data(), y.data())).sum();
    let loss = total / inputs.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("{} block loss", block_prefix(i))));
    }
    Ok(loss)
}

/// Mean gradient over a batch; samples run in parallel and are reduced in
/// order. `group` limits which parameters are differentiated.
pub fn batch_grads(
    model: &Model,
    i: usize,
    states: &BTreeMap<String, LayerState>,
    inputs: &[Tensor<f32>],
    refs: &[Tensor<f32>],
    group: Option<ParamGroup>,
) -> Result<(f64, BTreeMap<String, LayerGrad>)> {
    if inputs.len() != refs.len() || inputs.is_empty() {
        return Err(Error::shape(&[inputs.len()], &[refs.len()], "gradient batch"));
    }
    let block = &model.blocks[i];
    let prefix = block_prefix(i);
    let per: Vec<(f64, BTreeMap<String, LayerGrad>)> = inputs
        .par_iter()
        .zip(refs)
        .map(|(x, r)| block_grads(block, &prefix, states, std::slice::from_ref(x), std::slice::from_ref(r), group))
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let mut loss = 0.0;
    let mut acc: BTreeMap<String, LayerGrad> = BTreeMap::new();
    for (l, g) in per {
        loss += l / n;
        for (path, lg) in g {
            let e = acc.entry(path).or_insert_with(|| LayerGrad {
                s: vec![0.0; lg.s.len()],
                dx: vec![0.0; lg.dx.len()],
                dw: vec![0.0; lg.dw.len()],
            });
            for (a, b) in e.s.iter_mut().zip(&lg.s).chain(e.dx.iter_mut().zip(&lg.dx)).chain(e.dw.iter_mut().zip(&lg.dw)) {
                *a += b / n;
            }
        }
    }
    Ok((loss, acc))
}

/// Gradients of the block loss with respect to every layer's `(s, Δ_X, Δ_W)`.
pub fn block_backward(
    model: &Model,
    i: usize,
    states: &BTreeMap<String, LayerState>,
    inputs: &[Tensor<f32>],
    refs: &[Tensor<f32>],
) -> Result<BTreeMap<String, LayerGrad>> {
    Ok(batch_grads(model, i, states, inputs, refs, None)?.1)
}

/// Loss trajectory of one block's tuning.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TuneReport {
    /// Block loss after stage 2.
    pub initial_loss: f64,
    /// Block loss of the kept parameters.
    pub final_loss: f64,
    /// Block loss at the end of every epoch.
    pub history: Vec<f64>,
    /// Epoch whose parameters were kept; `None` keeps the stage-2 values.
    pub best_epoch: Option<usize>,
}

/// Stage 3: each epoch runs three full passes over shuffled minibatches,
/// updating only `s`, then only `Δ_X`, then only `Δ_W` by projected
/// gradient descent. The parameters with the lowest end-of-epoch loss
/// (stage-2 values included) are kept. Integer weights never change.
pub fn stage3_block_tune(
    model: &Model,
    i: usize,
    states: &mut BTreeMap<String, LayerState>,
    inputs: &[Tensor<f32>],
    refs: &[Tensor<f32>],
    hyper: &Hyper,
    epochs: usize,
) -> Result<TuneReport> {
    hyper.validate()?;
    let initial = block_loss(model, i, states, inputs, refs)?;
    let mut report = TuneReport {
        initial_loss: initial,
        final_loss: initial,
        history: Vec::with_capacity(epochs),
        best_epoch: None,
    };
    let mut best = states.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(i as u64 + 1)));
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for epoch in 0..epochs {
        for group in ParamGroup::ORDER {
            let lr = match group {
                ParamGroup::Smooth => hyper.lr_s,
                _ => hyper.lr_q,
            };
            order.shuffle(&mut rng);
            for chunk in order.chunks(hyper.batch_size) {
                let xs: Vec<Tensor<f32>> = chunk.iter().map(|&k| inputs[k].clone()).collect();
                let ys: Vec<Tensor<f32>> = chunk.iter().map(|&k| refs[k].clone()).collect();
                let (_, g) = batch_grads(model, i, states, &xs, &ys, Some(group))?;
                apply_step(states, &g, group, lr);
            }
        }
        let loss = block_loss(model, i, states, inputs, refs)?;
        report.history.push(loss);
        if loss < report.final_loss {
            report.final_loss = loss;
            report.best_epoch = Some(epoch);
            best = states.clone();
        }
    }
    *states = best;
    Ok(report)
}

/// Per-block summary of a calibration run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CalibReport {
    pub blocks: Vec<TuneReport>,
}

/// Float inputs of every linear layer in block `i`, one `[L × in]` per sample.
fn capture_block_inputs(model: &Model, i: usize, inputs: &[Tensor<f32>]) -> Result<BTreeMap<String, Vec<Tensor<f32>>>> {
    let paths = model.blocks[i].linear_paths(&block_prefix(i));
    let captured: Vec<BTreeMap<String, Tensor<f32>>> = inputs
        .par_iter()
        .map(|x| {
            let hooks = CaptureHooks::new(&FloatHooks, paths.iter().cloned());
            model.block_forward(i, x, &hooks)?;
            Ok(hooks.into_captured())
        })
        .collect::<Result<_>>()?;
    let mut out: BTreeMap<String, Vec<Tensor<f32>>> = BTreeMap::new();
    for sample in captured {
        for (k, v) in sample {
            out.entry(k).or_default().push(v);
        }
    }
    Ok(out)
}

fn float_recipe(model: &Model, calib: &[Tensor<f32>], meta: CalibMeta) -> Result<Recipe> {
    let layers = linear_paths(model)
        .into_iter()
        .map(|p| {
            let n = model.linear(&p).expect("path from model").in_features();
            (p, LayerRecipe::float(n))
        })
        .collect();
    Ok(Recipe {
        mode: ActMode::Pts,
        w_bits: FLOAT_BITS,
        a_bits: FLOAT_BITS,
        flags: Flags::default(),
        meta,
        layers,
        hidden: calibrate_hidden_ranges(model, calib)?,
    })
}

/// Runs `method` end to end and returns the recipe with per-block loss
/// reports. Deterministic for fixed inputs and `hyper.seed`.
pub fn calibrate(
    model: &Model,
    calib: &[Tensor<f32>],
    bits: Bits,
    hyper: &Hyper,
    method: Method,
) -> Result<(Recipe, CalibReport)> {
    if calib.is_empty() {
        return Err(Error::Precondition("calibration set is empty".into()));
    }
    hyper.validate()?;
    let epochs = match method {
        Method::Ptq4vm => hyper.epochs_for(bits.a.min(bits.w)),
        _ => 0,
    };
    let meta = CalibMeta {
        method: method.name().into(),
        seed: hyper.seed,
        calib_count: calib.len(),
        alpha: hyper.alpha,
        lr_s: hyper.lr_s,
        lr_q: hyper.lr_q,
        epochs,
        batch_size: hyper.batch_size,
        grid: hyper.sorted_grid(),
    };
    if bits.is_float() {
        return Ok((float_recipe(model, calib, meta)?, CalibReport::default()));
    }
    check_bits(bits.w)?;
    check_bits(bits.a)?;
    let smooth: BTreeMap<String, SmoothScale> = match method {
        Method::Minmax => linear_paths(model)
            .into_iter()
            .map(|p| {
                let n = model.linear(&p).expect("path from model").in_features();
                (p, SmoothScale::identity(n))
            })
            .collect(),
        _ => stage1_smooth_init(model, calib, hyper.alpha)?,
    };
    let grid = match method {
        Method::Minmax | Method::Smoothquant => vec![1.0],
        _ => hyper.sorted_grid(),
    };
    let mode = method.mode();
    let mut xs: Vec<Tensor<f32>> = calib.par_iter().map(|p| model.embed(p)).collect::<Result<_>>()?;
    let mut all: BTreeMap<String, LayerState> = BTreeMap::new();
    let mut report = CalibReport::default();
    for i in 0..model.blocks.len() {
        let refs: Vec<Tensor<f32>> = xs
            .par_iter()
            .map(|x| model.block_forward(i, x, &FloatHooks))
            .collect::<Result<_>>()?;
        let acts = capture_block_inputs(model, i, &xs)?;
        let mut states = BTreeMap::new();
        for (path, a) in &acts {
            let w = model.linear(path).ok_or_else(|| Error::MissingLayer(path.clone()))?.weight();
            states.insert(path.clone(), stage2_grid_search(w, &smooth[path].s, a, mode, bits, &grid)?);
        }
        let tune = stage3_block_tune(model, i, &mut states, &xs, &refs, hyper, epochs)?;
        report.blocks.push(tune);
        xs = quantized_block_outputs(model, i, &states, &xs)?;
        all.extend(states);
    }
    let layers = all
        .into_iter()
        .map(|(p, st)| {
            let rowsum = row_sums(&st.wbar);
            (
                p,
                LayerRecipe {
                    wbar: Some(st.wbar),
                    dw: st.dw,
                    dx: st.dx,
                    eps: st.eps,
                    s: st.s,
                    rowsum,
                },
            )
        })
        .collect();
    let recipe = Recipe {
        mode,
        w_bits: bits.w,
        a_bits: bits.a,
        flags: Flags::default(),
        meta,
        layers,
        hidden: calibrate_hidden_ranges(model, calib)?,
    };
    Ok((recipe, report))
}
