//! Calibration output: per-layer integer weights, step sizes, zero offsets
//! and smoothing scales, persisted as a `VMQ1` container plus a TOML manifest.
//!
//! Container keys per linear layer path `P` (for example `blocks.0.fwd.x_proj`):
//!
//! | key | dtype | shape |
//! |-----|-------|-------|
//! | `P.wbar` | `i8` (`u8` packed at ≤ 4 bits) | `[out × in]` (`[out × ⌈in/2⌉]`) |
//! | `P.dw` | `f32` | `[out]` |
//! | `P.dx`, `P.eps` | `f32`, `i32` | `[1]`, `[L]` or `[0]` by mode |
//! | `P.s` | `f32` | `[in]` |
//! | `P.rowsum` | `i32` | `[out]` |
//!
//! Hidden-state ranges are stored per scan branch `B` (`blocks.0.fwd`) as
//! `B.hdx` (`f32 [1]`) and `B.heps` (`i32 [1]`). A float recipe
//! (`w_bits = 32`) stores only `P.s`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::linear::{row_sums, ActMode, QuantizedLinear, WeightCodes};
use crate::container::{load_container, save_container, AnyTensor, TensorMap, TensorMapExt};
use crate::error::{Error, Result};
use crate::model::{linear_paths, spec_path, Model};
use crate::quant::{affine_from_range, qmax_unsigned, unpack_int4};
use crate::tensor::Tensor;

pub const RECIPE_VERSION: u32 = 1;

/// Bit width that marks a float (unquantized) recipe.
pub const FLOAT_BITS: u32 = 32;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    /// Fake-quantize the scan state after every step (8-bit, per tensor).
    pub quantize_hidden_state: bool,
    /// Feed the CLS row to every linear unquantized.
    pub cls_fp_override: bool,
}

/// How the recipe was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibMeta {
    pub method: String,
    pub seed: u64,
    pub calib_count: usize,
    pub alpha: f32,
    pub lr_s: f32,
    pub lr_q: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub grid: Vec<f32>,
}

impl Default for CalibMeta {
    fn default() -> Self {
        Self {
            method: "none".into(),
            seed: 0,
            calib_count: 0,
            alpha: 0.0,
            lr_s: 0.0,
            lr_q: 0.0,
            epochs: 0,
            batch_size: 0,
            grid: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecipe {
    /// Unpacked weight codes; `None` for float recipes.
    pub wbar: Option<Tensor<i8>>,
    pub dw: Vec<f32>,
    pub dx: Vec<f32>,
    pub eps: Vec<i32>,
    pub s: Vec<f32>,
    pub rowsum: Vec<i32>,
}

impl LayerRecipe {
    pub fn float(in_features: usize) -> Self {
        Self {
            wbar: None,
            dw: Vec::new(),
            dx: Vec::new(),
            eps: Vec::new(),
            s: vec![1.0; in_features],
            rowsum: Vec::new(),
        }
    }
}

/// 8-bit per-tensor range of one scan branch's hidden state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HiddenRange {
    pub delta: f32,
    pub eps: i32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recipe {
    pub mode: ActMode,
    pub w_bits: u32,
    pub a_bits: u32,
    pub flags: Flags,
    pub meta: CalibMeta,
    pub layers: BTreeMap<String, LayerRecipe>,
    pub hidden: BTreeMap<String, HiddenRange>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerShape {
    in_features: usize,
    out_features: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    mode: ActMode,
    w_bits: u32,
    a_bits: u32,
    flags: Flags,
    meta: CalibMeta,
    layers: BTreeMap<String, LayerShape>,
    hidden: Vec<String>,
}

impl Recipe {
    pub fn is_float(&self) -> bool {
        self.w_bits == FLOAT_BITS
    }

    /// Checks that every linear layer of `model` has an entry of the right
    /// shape; the first missing path is reported.
    pub fn check_model(&self, model: &Model) -> Result<()> {
        for path in linear_paths(model) {
            let entry = self.layers.get(&path).ok_or_else(|| Error::MissingLayer(path.clone()))?;
            let layer = model.linear(&path).expect("path from model");
            if entry.s.len() != layer.in_features() {
                return Err(Error::shape(layer.weight().shape(), &[entry.s.len()], "recipe smoothing scale"));
            }
            if let Some(w) = &entry.wbar {
                if w.shape() != layer.weight().shape() {
                    return Err(Error::shape(layer.weight().shape(), w.shape(), "recipe weight codes"));
                }
            }
        }
        Ok(())
    }

    /// Builds the executable layer for `path`, taking the bias from `model`.
    pub fn quantized_linear(&self, model: &Model, path: &str) -> Result<QuantizedLinear> {
        let entry = self.layers.get(path).ok_or_else(|| Error::MissingLayer(path.to_string()))?;
        let layer = model.linear(path).ok_or_else(|| Error::MissingLayer(path.to_string()))?;
        let wbar = entry
            .wbar
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("`{path}` has no weight codes in a {}-bit recipe", self.w_bits)))?;
        QuantizedLinear::new(
            wbar,
            entry.dw.clone(),
            entry.s.clone(),
            self.mode,
            entry.dx.clone(),
            entry.eps.clone(),
            layer.bias().map(|b| b.to_vec()),
            self.w_bits,
            self.a_bits,
        )
    }

    /// Bytes of weight payload as stored on disk.
    pub fn weight_bytes(&self) -> Result<usize> {
        let mut n = 0;
        for l in self.layers.values() {
            if let Some(w) = &l.wbar {
                n += WeightCodes::from_codes(w, self.w_bits)?.byte_len();
            }
        }
        Ok(n)
    }

    /// The same calibration re-expressed under another activation mode.
    ///
    /// PTS → per-tensor takes the envelope of all per-token ranges; any
    /// static mode → dynamic drops the stored ranges. Other conversions need
    /// a fresh calibration and are rejected.
    pub fn with_mode(&self, mode: ActMode) -> Result<Recipe> {
        if mode == self.mode || self.is_float() {
            return Ok(Recipe { mode, ..self.clone() });
        }
        let qmax = qmax_unsigned(self.a_bits);
        let mut out = self.clone();
        out.mode = mode;
        for (path, l) in out.layers.iter_mut() {
            match (self.mode, mode) {
                (_, ActMode::PerTokenDynamic) => {
                    l.dx.clear();
                    l.eps.clear();
                }
                (ActMode::Pts, ActMode::PerTensorStatic) => {
                    let (lo, hi) = l.dx.iter().zip(&l.eps).fold((0.0f32, 0.0f32), |(lo, hi), (&d, &e)| {
                        (lo.min(-(e as f32) * d), hi.max((qmax - e) as f32 * d))
                    });
                    let (d, e) = affine_from_range(lo, hi, self.a_bits, 1.0);
                    l.dx = vec![d];
                    l.eps = vec![e];
                }
                (from, to) => {
                    return Err(Error::Invalid(format!(
                        "`{path}`: cannot convert {} ranges to {}",
                        from.name(),
                        to.name()
                    )))
                }
            }
        }
        Ok(out)
    }

    pub fn to_tensors(&self) -> Result<TensorMap> {
        let mut m = TensorMap::new();
        for (path, l) in &self.layers {
            m.insert(format!("{path}.s"), Tensor::from_vec(l.s.clone()).into());
            let Some(w) = &l.wbar else { continue };
            let codes: AnyTensor = match WeightCodes::from_codes(w, self.w_bits)? {
                WeightCodes::Int8(t) => t.into(),
                WeightCodes::Int4 { packed, .. } => packed.into(),
            };
            m.insert(format!("{path}.wbar"), codes);
            m.insert(format!("{path}.dw"), Tensor::from_vec(l.dw.clone()).into());
            m.insert(format!("{path}.dx"), Tensor::from_vec(l.dx.clone()).into());
            m.insert(format!("{path}.eps"), Tensor::from_vec(l.eps.clone()).into());
            m.insert(format!("{path}.rowsum"), Tensor::from_vec(l.rowsum.clone()).into());
        }
        for (branch, h) in &self.hidden {
            m.insert(format!("{branch}.hdx"), Tensor::from_vec(vec![h.delta]).into());
            m.insert(format!("{branch}.heps"), Tensor::from_vec(vec![h.eps]).into());
        }
        Ok(m)
    }

    fn manifest(&self) -> Manifest {
        Manifest {
            version: RECIPE_VERSION,
            mode: self.mode,
            w_bits: self.w_bits,
            a_bits: self.a_bits,
            flags: self.flags,
            meta: self.meta.clone(),
            layers: self
                .layers
                .iter()
                .map(|(p, l)| {
                    let shape = LayerShape {
                        in_features: l.s.len(),
                        out_features: l.wbar.as_ref().map_or(0, |w| w.rows()),
                    };
                    (p.clone(), shape)
                })
                .collect(),
            hidden: self.hidden.keys().cloned().collect(),
        }
    }
}

fn take_vec<T: crate::tensor::Element>(m: &TensorMap, key: String) -> Result<Vec<T>> {
    Ok(m.take::<T>(&key)?.into_data())
}

pub fn export_recipe(recipe: &Recipe, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = toml::to_string(&recipe.manifest()).map_err(|e| Error::Config(e.to_string()))?;
    save_container(path, &recipe.to_tensors()?)?;
    fs::write(spec_path(path), text)?;
    Ok(())
}

pub fn import_recipe(path: impl AsRef<Path>) -> Result<Recipe> {
    let path = path.as_ref();
    let text = fs::read_to_string(spec_path(path))?;
    let raw: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    let found = raw.get("version").and_then(|v| v.as_integer()).unwrap_or(-1);
    if found != RECIPE_VERSION as i64 {
        return Err(Error::Version {
            found: u32::try_from(found).unwrap_or(0),
            expected: RECIPE_VERSION,
        });
    }
    let man: Manifest = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    let m = load_container(path)?;
    let float = man.w_bits == FLOAT_BITS;
    let mut layers = BTreeMap::new();
    for (p, shape) in &man.layers {
        let s = take_vec::<f32>(&m, format!("{p}.s"))?;
        if s.len() != shape.in_features {
            return Err(Error::shape(&[shape.in_features], &[s.len()], "recipe smoothing scale"));
        }
        if float {
            layers.insert(p.clone(), LayerRecipe::float(shape.in_features));
            continue;
        }
        let wkey = format!("{p}.wbar");
        let wbar = match m.get(&wkey) {
            Some(AnyTensor::I8(t)) => t.clone(),
            Some(AnyTensor::U8(t)) => {
                let cols = shape.in_features;
                let data = (0..t.rows()).flat_map(|o| unpack_int4(t.row(o), cols)).collect();
                Tensor::matrix(t.rows(), cols, data)
            }
            Some(other) => {
                return Err(Error::DType {
                    expected: "i8",
                    found: other.dtype().name(),
                })
            }
            None => return Err(Error::MissingTensor(wkey)),
        };
        let rowsum = take_vec::<i32>(&m, format!("{p}.rowsum"))?;
        if row_sums(&wbar) != rowsum {
            return Err(Error::Invalid(format!("`{p}` row sums do not match its weight codes")));
        }
        layers.insert(
            p.clone(),
            LayerRecipe {
                wbar: Some(wbar),
                dw: take_vec(&m, format!("{p}.dw"))?,
                dx: take_vec(&m, format!("{p}.dx"))?,
                eps: take_vec(&m, format!("{p}.eps"))?,
                s,
                rowsum,
            },
        );
    }
    let mut hidden = BTreeMap::new();
    for b in &man.hidden {
        let delta = take_vec::<f32>(&m, format!("{b}.hdx"))?;
        let eps = take_vec::<i32>(&m, format!("{b}.heps"))?;
        match (delta.as_slice(), eps.as_slice()) {
            ([d], [e]) => hidden.insert(b.clone(), HiddenRange { delta: *d, eps: *e }),
            _ => return Err(Error::Header(format!("hidden range of `{b}` must hold one value"))),
        };
    }
    Ok(Recipe {
        mode: man.mode,
        w_bits: man.w_bits,
        a_bits: man.a_bits,
        flags: man.flags,
        meta: man.meta,
        layers,
        hidden,
    })
}

/// [`import_recipe`] followed by a coverage check against `model`.
pub fn import_recipe_for(path: impl AsRef<Path>, model: &Model) -> Result<Recipe> {
    let r = import_recipe(path)?;
    r.check_model(model)?;
    Ok(r)
}
