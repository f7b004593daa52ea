//! Activation statistics at linear-layer inputs.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{linear_paths, Hooks, Linear, Model, Site};
use crate::tensor::Tensor;

/// Records the input of selected linear layers, delegating the computation
/// itself to `inner`.
pub struct CaptureHooks<'a> {
    inner: &'a dyn Hooks,
    taps: BTreeSet<String>,
    captured: Mutex<BTreeMap<String, Tensor<f32>>>,
}

impl<'a> CaptureHooks<'a> {
    pub fn new(inner: &'a dyn Hooks, taps: impl IntoIterator<Item = String>) -> Self {
        Self {
            inner,
            taps: taps.into_iter().collect(),
            captured: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn into_captured(self) -> BTreeMap<String, Tensor<f32>> {
        self.captured.into_inner().expect("capture lock poisoned")
    }
}

impl Hooks for CaptureHooks<'_> {
    fn linear(&self, site: &Site<'_>, x: &Tensor<f32>, layer: &Linear) -> Result<Tensor<f32>> {
        if self.taps.contains(site.path) {
            self.captured
                .lock()
                .expect("capture lock poisoned")
                .insert(site.path.to_string(), x.clone());
        }
        self.inner.linear(site, x, layer)
    }

    fn state_hook(&self, path: &str) -> Option<Box<dyn FnMut(&mut [f32]) + '_>> {
        self.inner.state_hook(path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatsConfig {
    /// Maximum number of whole `[L × D]` samples kept per tap.
    pub reservoir_cap: usize,
    pub seed: u64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            reservoir_cap: 256,
            seed: 0,
        }
    }
}

/// Reductions over the calibration activations at one tap.
#[derive(Debug, Clone, PartialEq)]
pub struct ActStats {
    /// `max |X|` per input channel.
    pub max_abs: Vec<f32>,
    pub token_min: Vec<f32>,
    pub token_max: Vec<f32>,
    /// Uniform sample of whole activation matrices (at most `reservoir_cap`).
    pub reservoir: Vec<Tensor<f32>>,
    pub count: usize,
}

impl ActStats {
    fn new(first: &Tensor<f32>) -> Self {
        Self {
            max_abs: vec![0.0; first.cols()],
            token_min: vec![f32::INFINITY; first.rows()],
            token_max: vec![f32::NEG_INFINITY; first.rows()],
            reservoir: Vec::new(),
            count: 0,
        }
    }

    fn update(&mut self, x: &Tensor<f32>, cap: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        if x.rows() != self.token_min.len() || x.cols() != self.max_abs.len() {
            return Err(Error::TokenLength {
                found: x.rows(),
                expected: self.token_min.len(),
            });
        }
        for t in 0..x.rows() {
            for (j, &v) in x.row(t).iter().enumerate() {
                self.max_abs[j] = self.max_abs[j].max(v.abs());
                self.token_min[t] = self.token_min[t].min(v);
                self.token_max[t] = self.token_max[t].max(v);
            }
        }
        if self.reservoir.len() < cap {
            self.reservoir.push(x.clone());
        } else if cap > 0 {
            let j = rng.random_range(0..=self.count);
            if j < cap {
                self.reservoir[j] = x.clone();
            }
        }
        self.count += 1;
        Ok(())
    }
}

/// Validates tap names against the model's linear layers.
pub fn check_taps(model: &Model, taps: &[String]) -> Result<()> {
    let known: BTreeSet<String> = linear_paths(model).into_iter().collect();
    match taps.iter().find(|t| !known.contains(*t)) {
        Some(t) => Err(Error::UnknownTap(t.clone())),
        None => Ok(()),
    }
}

const CHUNK: usize = 64;

/// Runs the FP model over `calib` and reduces the inputs of every tap.
pub fn collect_activation_stats(
    model: &Model,
    calib: &[Tensor<f32>],
    taps: &[String],
    cfg: &StatsConfig,
) -> Result<BTreeMap<String, ActStats>> {
    if calib.is_empty() {
        return Err(Error::Precondition("calibration set is empty".into()));
    }
    check_taps(model, taps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out: BTreeMap<String, ActStats> = BTreeMap::new();
    for chunk in calib.chunks(CHUNK) {
        let captured = chunk
            .par_iter()
            .map(|p| {
                let hooks = CaptureHooks::new(&crate::model::FloatHooks, taps.iter().cloned());
                model.forward_with(p, &hooks)?;
                Ok(hooks.into_captured())
            })
            .collect::<Result<Vec<_>>>()?;
        for sample in captured {
            for tap in taps {
                let x = &sample[tap];
                out.entry(tap.clone())
                    .or_insert_with(|| ActStats::new(x))
                    .update(x, cfg.reservoir_cap, &mut rng)?;
            }
        }
    }
    Ok(out)
}
