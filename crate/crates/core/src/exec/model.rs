//! Whole-model quantized execution through the forward-pass hooks.

use std::collections::BTreeMap;
use std::sync::Mutex;

use rayon::prelude::*;

use super::linear::{ExecPath, PhaseTimes, QuantizedLinear};
use super::recipe::{HiddenRange, Recipe};
use crate::error::{Error, Result};
use crate::model::{block_prefix, linear_paths, Hooks, Linear, Model, Site};
use crate::quant::{affine_fake, affine_from_range, qmax_unsigned};
use crate::tensor::Tensor;

/// Bit width of the hidden-state ablation quantizer.
pub const HIDDEN_BITS: u32 = 8;

/// Which parts of the model are quantized at run time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecOptions {
    pub path: ExecPath,
    pub quantize_linears: bool,
    pub quantize_hidden_state: bool,
    pub cls_fp_override: bool,
}

/// Run-time overrides of the recipe flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ablation {
    /// Use the recipe as written.
    #[default]
    None,
    /// Linears stay in float; only the scan state is quantized.
    HiddenStateOnly,
    /// Quantized linears with the CLS row kept in float.
    ClsFp,
}

impl Ablation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Ablation::None),
            "hstate" => Some(Ablation::HiddenStateOnly),
            "clsfp" => Some(Ablation::ClsFp),
            _ => None,
        }
    }
}

impl ExecOptions {
    pub fn from_recipe(recipe: &Recipe, ablation: Ablation) -> Self {
        let base = Self {
            path: ExecPath::Integer,
            quantize_linears: true,
            quantize_hidden_state: recipe.flags.quantize_hidden_state,
            cls_fp_override: recipe.flags.cls_fp_override,
        };
        match ablation {
            Ablation::None => base,
            Ablation::HiddenStateOnly => Self {
                quantize_linears: false,
                quantize_hidden_state: true,
                cls_fp_override: false,
                ..base
            },
            Ablation::ClsFp => Self {
                cls_fp_override: true,
                ..base
            },
        }
    }
}

/// A model bound to a recipe with every quantized layer prepared once.
pub struct QuantizedModel<'m> {
    pub model: &'m Model,
    layers: BTreeMap<String, QuantizedLinear>,
    hidden: BTreeMap<String, HiddenRange>,
    pub opts: ExecOptions,
    phases: Option<Mutex<PhaseTimes>>,
}

impl<'m> QuantizedModel<'m> {
    pub fn new(model: &'m Model, recipe: &Recipe, opts: ExecOptions) -> Result<Self> {
        recipe.check_model(model)?;
        let mut layers = BTreeMap::new();
        if !recipe.is_float() && opts.quantize_linears {
            for path in linear_paths(model) {
                let ql = recipe.quantized_linear(model, &path)?;
                layers.insert(path, ql);
            }
        }
        if opts.quantize_hidden_state {
            for (i, b) in model.blocks.iter().enumerate() {
                let p = block_prefix(i);
                let mut branches = vec![format!("{p}.fwd")];
                if b.bwd.is_some() {
                    branches.push(format!("{p}.bwd"));
                }
                if let Some(missing) = branches.into_iter().find(|b| !recipe.hidden.contains_key(b)) {
                    return Err(Error::MissingLayer(missing));
                }
            }
        }
        Ok(Self {
            model,
            layers,
            hidden: recipe.hidden.clone(),
            opts,
            phases: None,
        })
    }

    /// Builds from already-prepared layers (used while calibrating).
    pub fn from_layers(model: &'m Model, layers: BTreeMap<String, QuantizedLinear>, opts: ExecOptions) -> Self {
        Self {
            model,
            layers,
            hidden: BTreeMap::new(),
            opts,
            phases: None,
        }
    }

    pub fn layer(&self, path: &str) -> Option<&QuantizedLinear> {
        self.layers.get(path)
    }

    /// Enables per-phase timing of the quantized linears.
    pub fn with_phase_timing(mut self) -> Self {
        self.phases = Some(Mutex::new(PhaseTimes::default()));
        self
    }

    pub fn take_phases(&self) -> PhaseTimes {
        self.phases
            .as_ref()
            .map(|m| std::mem::take(&mut *m.lock().expect("phase lock poisoned")))
            .unwrap_or_default()
    }

    pub fn forward(&self, patches: &Tensor<f32>) -> Result<Vec<f32>> {
        self.model.forward_with(patches, self)
    }

    pub fn forward_batch(&self, batch: &[Tensor<f32>]) -> Result<Vec<Vec<f32>>> {
        batch.par_iter().map(|p| self.forward(p)).collect()
    }
}

impl Hooks for QuantizedModel<'_> {
    fn linear(&self, site: &Site<'_>, x: &Tensor<f32>, layer: &Linear) -> Result<Tensor<f32>> {
        if !self.opts.quantize_linears || self.layers.is_empty() {
            return layer.forward(x);
        }
        let ql = self
            .layers
            .get(site.path)
            .ok_or_else(|| Error::MissingLayer(site.path.to_string()))?;
        let fp_row = if self.opts.cls_fp_override { site.cls_row } else { None };
        match (self.opts.path, &self.phases) {
            (ExecPath::Integer, Some(m)) => {
                let mut local = PhaseTimes::default();
                let y = ql.forward_int(x, fp_row, Some(&mut local))?;
                let mut p = m.lock().expect("phase lock poisoned");
                p.smooth += local.smooth;
                p.quantize += local.quantize;
                p.gemm += local.gemm;
                p.dequantize += local.dequantize;
                Ok(y)
            }
            (path, _) => ql.forward(x, fp_row, path),
        }
    }

    fn state_hook(&self, path: &str) -> Option<Box<dyn FnMut(&mut [f32]) + '_>> {
        if !self.opts.quantize_hidden_state {
            return None;
        }
        let h = *self.hidden.get(path)?;
        let qmax = qmax_unsigned(HIDDEN_BITS);
        Some(Box::new(move |state: &mut [f32]| {
            for v in state.iter_mut() {
                *v = affine_fake(*v, h.delta, h.eps, qmax);
            }
        }))
    }
}

/// One-shot quantized forward; prefer [`QuantizedModel`] for repeated calls.
pub fn quantized_model_forward(model: &Model, recipe: &Recipe, patches: &Tensor<f32>) -> Result<Vec<f32>> {
    QuantizedModel::new(model, recipe, ExecOptions::from_recipe(recipe, Ablation::None))?.forward(patches)
}

struct StateRanges {
    ranges: Mutex<BTreeMap<String, (f32, f32)>>,
}

impl Hooks for StateRanges {
    fn state_hook(&self, path: &str) -> Option<Box<dyn FnMut(&mut [f32]) + '_>> {
        let key = path.to_string();
        Some(Box::new(move |h: &mut [f32]| {
            let (lo, hi) = h
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let mut r = self.ranges.lock().expect("range lock poisoned");
            let e = r.entry(key.clone()).or_insert((lo, hi));
            e.0 = e.0.min(lo);
            e.1 = e.1.max(hi);
        }))
    }
}

/// Per-branch 8-bit hidden-state ranges from a float pass over `calib`.
pub fn calibrate_hidden_ranges(model: &Model, calib: &[Tensor<f32>]) -> Result<BTreeMap<String, HiddenRange>> {
    let hooks = StateRanges {
        ranges: Mutex::new(BTreeMap::new()),
    };
    for p in calib {
        model.forward_with(p, &hooks)?;
    }
    Ok(hooks
        .ranges
        .into_inner()
        .expect("range lock poisoned")
        .into_iter()
        .map(|(k, (lo, hi))| {
            let (delta, eps) = affine_from_range(lo, hi, HIDDEN_BITS, 1.0);
            (k, HiddenRange { delta, eps })
        })
        .collect())
}
