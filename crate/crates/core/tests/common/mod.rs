//! Finite-difference check of the block backward pass, shared by the
//! `gradient` and `acceptance` targets.
//!
//! Rounding has zero derivative almost everywhere, so the oracle
//! differentiates the straight-through surrogate: every quantizer's rounding
//! residual and clip state is held at the evaluation point. Its exact
//! derivative is the straight-through / learned-step rule, and it equals the
//! quantized block loss at that point.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vmq::exec::ActMode;
use vmq::jlss::{block_grads, block_rounding, stage2_grid_search, surrogate_block_loss, Bits, LayerState, DEFAULT_GRID};
use vmq::model::{random_block, Block, FloatHooks, ModelSpec};
use vmq::quant::CaptureHooks;
use vmq::Tensor;

pub const PREFIX: &str = "blocks.0";
pub const POINTS: usize = 50;
/// Relative step of the central difference.
pub const REL_H: f32 = 1e-3;
/// Per-coordinate relative error bound.
pub const TOL: f64 = 1e-3;
/// Denominator floor of the relative error.
pub const FLOOR: f64 = 1e-6;
/// Points whose smallest rounding margin is below this are resampled.
pub const MIN_MARGIN: f64 = 1e-4;

/// `D_model = 4`, `E = 8`, `N = 2`; inputs use `L = 5`.
pub fn tiny_block_spec() -> ModelSpec {
    ModelSpec {
        d_model: 4,
        d_inner: 8,
        d_state: 2,
        dt_rank: 2,
        ..ModelSpec::tiny()
    }
}

pub const SEQ: usize = 5;

pub fn inputs(rng: &mut ChaCha8Rng, n: usize, l: usize, d: usize) -> Vec<Tensor<f32>> {
    (0..n).map(|_| Tensor::from_fn(l, d, |_, _| rng.random_range(-1.5..1.5))).collect()
}

pub fn base_states(block: &Block, xs: &[Tensor<f32>]) -> BTreeMap<String, LayerState> {
    let paths = block.linear_paths(PREFIX);
    let mut acts: BTreeMap<String, Vec<Tensor<f32>>> = BTreeMap::new();
    for x in xs {
        let hooks = CaptureHooks::new(&FloatHooks, paths.iter().cloned());
        block.forward(x, &hooks, PREFIX, None).unwrap();
        for (k, v) in hooks.into_captured() {
            acts.entry(k).or_default().push(v);
        }
    }
    paths
        .iter()
        .map(|p| {
            let layer = block.linear(&p[PREFIX.len() + 1..]).unwrap();
            let s = vec![1.0; layer.in_features()];
            let st = stage2_grid_search(layer.weight(), &s, &acts[p], ActMode::Pts, Bits::new(4, 4), &DEFAULT_GRID).unwrap();
            (p.clone(), st)
        })
        .collect()
}

// Random point: every learnable parameter scaled by a factor in [0.7, 1.3].
fn jitter(states: &BTreeMap<String, LayerState>, rng: &mut ChaCha8Rng) -> BTreeMap<String, LayerState> {
    let mut out = states.clone();
    for st in out.values_mut() {
        for v in st.s.iter_mut().chain(st.dx.iter_mut()).chain(st.dw.iter_mut()) {
            *v *= rng.random_range(0.7..1.3);
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub enum Which {
    S,
    Dx,
    Dw,
}

fn param(st: &mut LayerState, w: Which) -> &mut Vec<f32> {
    match w {
        Which::S => &mut st.s,
        Which::Dx => &mut st.dx,
        Which::Dw => &mut st.dw,
    }
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(FLOOR)
}

#[derive(Debug, Clone, Default)]
pub struct FdSummary {
    pub points: usize,
    pub coords: usize,
    pub worst: f64,
    pub worst_at: String,
    /// Largest `|loss − surrogate|` at the evaluation points.
    pub surrogate_gap: f64,
    /// Coordinates above `TOL`.
    pub failures: usize,
}

impl FdSummary {
    fn record(&mut self, rel: f64, at: impl FnOnce() -> String) {
        self.coords += 1;
        if rel >= TOL {
            self.failures += 1;
        }
        if rel > self.worst {
            self.worst = rel;
            self.worst_at = at();
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.surrogate_gap <= 1e-12
    }
}

/// Every `s`, `Δ_X` and `Δ_W` coordinate at `POINTS` random non-boundary
/// points of the tiny block.
pub fn block_fd_check(seed: u64) -> FdSummary {
    let spec = tiny_block_spec();
    let block = random_block(&spec, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = inputs(&mut rng, 2, SEQ, spec.d_model);
    let refs: Vec<_> = xs.iter().map(|x| block.forward(x, &FloatHooks, PREFIX, None).unwrap()).collect();
    let base = base_states(&block, &xs);

    let mut sum = FdSummary::default();
    let mut attempts = 0;
    while sum.points < POINTS {
        attempts += 1;
        assert!(attempts < 10 * POINTS, "too few non-boundary points");
        let states = jitter(&base, &mut rng);
        let at = block_rounding(&block, PREFIX, &states, &xs, &refs).unwrap();
        if at.min_margin() < MIN_MARGIN {
            continue;
        }
        let (loss, grads) = block_grads(&block, PREFIX, &states, &xs, &refs, None).unwrap();
        let surrogate = surrogate_block_loss(&block, PREFIX, &states, &xs, &refs, &at).unwrap();
        sum.surrogate_gap = sum.surrogate_gap.max((loss - surrogate).abs() / (1.0 + loss.abs()));

        for (path, g) in &grads {
            for (which, gv) in [(Which::S, &g.s), (Which::Dx, &g.dx), (Which::Dw, &g.dw)] {
                for (k, &analytic) in gv.iter().enumerate() {
                    let p0 = param(&mut states[path].clone(), which)[k];
                    let eval = |v: f32| {
                        let mut st = states.clone();
                        param(st.get_mut(path).unwrap(), which)[k] = v;
                        surrogate_block_loss(&block, PREFIX, &st, &xs, &refs, &at).unwrap()
                    };
                    let (hi, lo) = (p0 * (1.0 + REL_H), p0 * (1.0 - REL_H));
                    let fd = (eval(hi) - eval(lo)) / (hi as f64 - lo as f64);
                    let point = sum.points;
                    sum.record(rel_err(analytic, fd), || {
                        format!("point {point} {path} {which:?}[{k}]: analytic {analytic:.6e} vs fd {fd:.6e}")
                    });
                }
            }
        }
        sum.points += 1;
    }
    sum
}

/// `Δ_W` of `out_proj` against the raw quantized loss. Weight codes are
/// frozen, so `Δ_W` enters that loss smoothly and needs no surrogate.
pub fn weight_step_fd_check(seed: u64) -> FdSummary {
    let spec = tiny_block_spec();
    let block = random_block(&spec, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = inputs(&mut rng, 2, SEQ, spec.d_model);
    let refs: Vec<_> = xs.iter().map(|x| block.forward(x, &FloatHooks, PREFIX, None).unwrap()).collect();
    let states = base_states(&block, &xs);
    let (_, grads) = block_grads(&block, PREFIX, &states, &xs, &refs, None).unwrap();
    let raw = |st: &BTreeMap<String, LayerState>| block_grads(&block, PREFIX, st, &xs, &refs, None).unwrap().0;
    let path = format!("{PREFIX}.out_proj");
    let mut sum = FdSummary {
        points: 1,
        ..FdSummary::default()
    };
    for k in 0..states[&path].dw.len() {
        let p0 = states[&path].dw[k];
        let mut hi = states.clone();
        let mut lo = states.clone();
        let (vh, vl) = (p0 * (1.0 + REL_H), p0 * (1.0 - REL_H));
        hi.get_mut(&path).unwrap().dw[k] = vh;
        lo.get_mut(&path).unwrap().dw[k] = vl;
        let fd = (raw(&hi) - raw(&lo)) / (vh as f64 - vl as f64);
        let g = grads[&path].dw[k];
        sum.record(rel_err(g, fd), || format!("dw[{k}]: {g:.6e} vs {fd:.6e}"));
    }
    sum
}
