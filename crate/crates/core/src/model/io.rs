//! Model persistence: a `VMQ1` container for the parameters next to a TOML
//! file holding the [`ModelSpec`].
//!
//! Tensor keys:
//!
//! | key | shape |
//! |-----|-------|
//! | `patch_embed.weight`, `patch_embed.bias` | `[D × D_in]`, `[D]` |
//! | `cls` | `[D]` (when a CLS token is configured) |
//! | `token_bias` | `[L]` (optional) |
//! | `blocks.{i}.in_proj.weight` | `[2E × D]` |
//! | `blocks.{i}.{fwd,bwd}.conv.weight`, `.conv.bias` | `[E × 3]`, `[E]` |
//! | `blocks.{i}.{fwd,bwd}.x_proj.weight` | `[R + 2N × E]` |
//! | `blocks.{i}.{fwd,bwd}.dt_proj.weight`, `.dt_proj.bias` | `[E × R]`, `[E]` |
//! | `blocks.{i}.{fwd,bwd}.a_log`, `.d_skip` | `[E × N]`, `[E]` |
//! | `blocks.{i}.gate_scale` | `[E]` (optional) |
//! | `blocks.{i}.out_proj.weight` | `[D × E]` |
//! | `norm.weight` | `[D]` |
//! | `head.weight`, `head.bias` | `[classes × D]`, `[classes]` |
//!
//! Any linear may additionally carry a `.bias`.

use std::fs;
use std::path::{Path, PathBuf};

use super::{block_prefix, Block, Branch, DwConv, Linear, Model, ModelSpec, Sample, SsmParams};
use crate::container::{load_container, save_container, TensorMap, TensorMapExt};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Path of the TOML sidecar (model spec or recipe manifest) next to a container.
pub fn spec_path(path: &Path) -> PathBuf {
    path.with_extension("toml")
}

fn put_linear(m: &mut TensorMap, key: &str, l: &Linear) {
    m.insert(format!("{key}.weight"), l.weight().clone().into());
    if let Some(b) = l.bias() {
        m.insert(format!("{key}.bias"), Tensor::from_vec(b.to_vec()).into());
    }
}

fn get_linear(m: &TensorMap, key: &str) -> Result<Linear> {
    let w: Tensor<f32> = m.take(&format!("{key}.weight"))?;
    let bias = match m.contains_key(&format!("{key}.bias")) {
        true => Some(m.take::<f32>(&format!("{key}.bias"))?.into_data()),
        false => None,
    };
    Linear::new(w, bias)
}

fn get_vec(m: &TensorMap, key: &str) -> Result<Option<Vec<f32>>> {
    if !m.contains_key(key) {
        return Ok(None);
    }
    Ok(Some(m.take::<f32>(key)?.into_data()))
}

fn put_branch(m: &mut TensorMap, key: &str, b: &Branch) {
    if let Some(conv) = &b.conv {
        m.insert(format!("{key}.conv.weight"), conv.weight.clone().into());
        m.insert(format!("{key}.conv.bias"), Tensor::from_vec(conv.bias.clone()).into());
    }
    put_linear(m, &format!("{key}.x_proj"), &b.x_proj);
    put_linear(m, &format!("{key}.dt_proj"), &b.dt_proj);
    m.insert(format!("{key}.a_log"), b.ssm.a_log().clone().into());
    if let Some(d) = &b.ssm.d_skip {
        m.insert(format!("{key}.d_skip"), Tensor::from_vec(d.clone()).into());
    }
}

fn get_branch(m: &TensorMap, key: &str) -> Result<Branch> {
    let conv = match m.contains_key(&format!("{key}.conv.weight")) {
        true => Some(DwConv {
            weight: m.take(&format!("{key}.conv.weight"))?,
            bias: m.take::<f32>(&format!("{key}.conv.bias"))?.into_data(),
        }),
        false => None,
    };
    Ok(Branch {
        conv,
        x_proj: get_linear(m, &format!("{key}.x_proj"))?,
        dt_proj: get_linear(m, &format!("{key}.dt_proj"))?,
        ssm: SsmParams::new(m.take(&format!("{key}.a_log"))?, get_vec(m, &format!("{key}.d_skip"))?),
    })
}

pub fn model_tensors(model: &Model) -> TensorMap {
    let mut m = TensorMap::new();
    put_linear(&mut m, "patch_embed", &model.patch_embed);
    if let Some(cls) = &model.cls {
        m.insert("cls".into(), Tensor::from_vec(cls.clone()).into());
    }
    if let Some(tb) = &model.token_bias {
        m.insert("token_bias".into(), Tensor::from_vec(tb.clone()).into());
    }
    for (i, b) in model.blocks.iter().enumerate() {
        let p = block_prefix(i);
        put_linear(&mut m, &format!("{p}.in_proj"), &b.in_proj);
        put_branch(&mut m, &format!("{p}.fwd"), &b.fwd);
        if let Some(bwd) = &b.bwd {
            put_branch(&mut m, &format!("{p}.bwd"), bwd);
        }
        if let Some(s) = &b.gate_scale {
            m.insert(format!("{p}.gate_scale"), Tensor::from_vec(s.clone()).into());
        }
        put_linear(&mut m, &format!("{p}.out_proj"), &b.out_proj);
    }
    m.insert("norm.weight".into(), Tensor::from_vec(model.norm.clone()).into());
    put_linear(&mut m, "head", &model.head);
    m
}

pub fn model_from_tensors(spec: ModelSpec, m: &TensorMap) -> Result<Model> {
    spec.validate()?;
    let blocks = (0..spec.blocks)
        .map(|i| {
            let p = block_prefix(i);
            Ok(Block {
                in_proj: get_linear(m, &format!("{p}.in_proj"))?,
                fwd: get_branch(m, &format!("{p}.fwd"))?,
                bwd: match spec.bidirectional {
                    true => Some(get_branch(m, &format!("{p}.bwd"))?),
                    false => None,
                },
                gate_scale: get_vec(m, &format!("{p}.gate_scale"))?,
                out_proj: get_linear(m, &format!("{p}.out_proj"))?,
                dt_rank: spec.dt_rank,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = Model {
        patch_embed: get_linear(m, "patch_embed")?,
        cls: get_vec(m, "cls")?,
        token_bias: get_vec(m, "token_bias")?,
        blocks,
        norm: m.take::<f32>("norm.weight")?.into_data(),
        head: get_linear(m, "head")?,
        spec,
    };
    if model.cls.is_some() != model.spec.cls_index().is_some() {
        return Err(Error::Config("CLS embedding does not match the model's CLS placement".into()));
    }
    if let Some(tb) = &model.token_bias {
        if tb.len() != model.seq_len() {
            return Err(Error::shape(&[tb.len()], &[model.seq_len()], "token bias"));
        }
    }
    Ok(model)
}

/// Writes `path` (container) and `path` with a `.toml` extension (spec).
pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = toml::to_string(&model.spec).map_err(|e| Error::Config(e.to_string()))?;
    save_container(path, &model_tensors(model))?;
    fs::write(spec_path(path), text)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let text = fs::read_to_string(spec_path(path))?;
    let spec: ModelSpec = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    model_from_tensors(spec, &load_container(path)?)
}

/// Writes a sample set as a container with `patches` `[S × L₀ × D_in]`
/// (f32) and `labels` `[S]` (i32).
pub fn save_samples(samples: &[Sample], path: impl AsRef<Path>) -> Result<()> {
    let first = samples.first().ok_or(Error::Empty)?;
    let (l, d) = (first.patches.rows(), first.patches.cols());
    let mut data = Vec::with_capacity(samples.len() * l * d);
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        if s.patches.shape() != first.patches.shape() {
            return Err(Error::shape(s.patches.shape(), first.patches.shape(), "sample patches"));
        }
        data.extend_from_slice(s.patches.data());
        labels.push(i32::try_from(s.label).map_err(|_| Error::Invalid(format!("label {} too large", s.label)))?);
    }
    let mut m = TensorMap::new();
    m.insert("patches".into(), Tensor::new(vec![samples.len(), l, d], data)?.into());
    m.insert("labels".into(), Tensor::from_vec(labels).into());
    save_container(path, &m)
}

pub fn load_samples(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let m = load_container(path)?;
    let patches: Tensor<f32> = m.take("patches")?;
    let labels: Tensor<i32> = m.take("labels")?;
    let &[s, l, d] = patches.shape() else {
        return Err(Error::Header(format!("patches must be 3-D, got {:?}", patches.shape())));
    };
    if labels.len() != s || s == 0 {
        return Err(Error::shape(&[labels.len()], &[s], "labels vs samples"));
    }
    let data = patches.data();
    labels
        .data()
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            Ok(Sample {
                patches: Tensor::matrix(l, d, data[i * l * d..(i + 1) * l * d].to_vec()),
                label: usize::try_from(label).map_err(|_| Error::Invalid(format!("negative label {label}")))?,
            })
        })
        .collect()
}
