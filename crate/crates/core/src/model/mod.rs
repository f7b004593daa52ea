//! A desk-scale Visual-Mamba classifier: patch embedding, optional CLS
//! token, a stack of selective-scan mixer blocks, RMS norm and a linear head.

mod block;
mod build;
mod io;
pub mod ssm;

use serde::{Deserialize, Serialize};

pub use block::{Block, Branch, DwConv, FloatHooks, Hooks, Linear, ScanDirection, Site, SsmParams};
pub(crate) use block::add_bias;
pub use build::{gen_calibration_set, make_pathological_model, random_block, random_model, Sample};
pub use io::{load_model, load_samples, model_from_tensors, model_tensors, save_model, save_samples, spec_path};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Placement of the CLS token in the token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsPlacement {
    None,
    Front,
    Middle,
    At(usize),
}

/// Engineered activation pathologies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathologySpec {
    /// `out_proj` input channels to inflate.
    pub outlier_channels: Vec<usize>,
    pub outlier_gain: f32,
    /// Additive bias per token position (length `L`), empty for none.
    pub token_bias: Vec<f32>,
    /// Scale of the Student-t(3) gate-branch weights relative to the
    /// Gaussian init (`1` matches its variance); `0` keeps the gate Gaussian.
    pub tail_gain: f32,
}

impl PathologySpec {
    pub fn benign() -> Self {
        Self {
            outlier_channels: Vec::new(),
            outlier_gain: 1.0,
            token_bias: Vec::new(),
            tail_gain: 0.0,
        }
    }

    /// The pathology shipped with the default models: two outlier channels,
    /// a token spike at position 9 and a heavy-tailed gate.
    pub fn shipped(seq_len: usize) -> Self {
        let mut token_bias = vec![0.0; seq_len];
        if seq_len > 9 {
            token_bias[9] = 3.0;
        }
        Self {
            outlier_channels: vec![3, 17],
            outlier_gain: 50.0,
            token_bias,
            tail_gain: 1.0,
        }
    }

    pub fn is_benign(&self) -> bool {
        (self.outlier_channels.is_empty() || self.outlier_gain == 1.0)
            && self.token_bias.iter().all(|&b| b == 0.0)
            && self.tail_gain == 0.0
    }
}

/// Seed of the shipped pathological model (`vmq gen` default).
pub const SHIPPED_MODEL_SEED: u64 = 41;
/// Seeds and sizes of the default calibration and evaluation sets.
pub const CALIB_SEED: u64 = 1;
pub const EVAL_SEED: u64 = 2;
pub const DEFAULT_CALIB_COUNT: usize = 128;
pub const DEFAULT_EVAL_COUNT: usize = 1000;

/// Dimensions and structural flags of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Patch side in pixels; each patch has `patch² · channels` values.
    pub patch: usize,
    pub channels: usize,
    pub d_model: usize,
    /// Inner width `E` of the mixer.
    pub d_inner: usize,
    /// State size `N`.
    pub d_state: usize,
    pub dt_rank: usize,
    pub blocks: usize,
    pub classes: usize,
    pub cls: ClsPlacement,
    pub bidirectional: bool,
    pub conv: bool,
    pub d_skip: bool,
    pub pathology: PathologySpec,
}

impl ModelSpec {
    pub fn tiny() -> Self {
        Self {
            grid_h: 4,
            grid_w: 4,
            patch: 2,
            channels: 3,
            d_model: 16,
            d_inner: 32,
            d_state: 4,
            dt_rank: 4,
            blocks: 2,
            classes: 10,
            cls: ClsPlacement::Middle,
            bidirectional: true,
            conv: true,
            d_skip: true,
            pathology: PathologySpec::benign(),
        }
    }

    pub fn small() -> Self {
        Self {
            grid_h: 6,
            grid_w: 6,
            patch: 4,
            d_model: 32,
            d_inner: 64,
            d_state: 8,
            blocks: 3,
            ..Self::tiny()
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "small" => Ok(Self::small()),
            _ => Err(Error::Invalid(format!("unknown model size `{name}`"))),
        }
    }

    pub fn with_pathology(mut self, pathology: PathologySpec) -> Self {
        self.pathology = pathology;
        self
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Number of image patches `L₀`.
    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Token length `L` seen by the blocks.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + usize::from(self.cls != ClsPlacement::None)
    }

    pub fn cls_index(&self) -> Option<usize> {
        let l0 = self.num_patches();
        match self.cls {
            ClsPlacement::None => None,
            ClsPlacement::Front => Some(0),
            ClsPlacement::Middle => Some(l0 / 2),
            ClsPlacement::At(p) => Some(p.min(l0)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_inner == 0 || self.d_state == 0 || self.dt_rank == 0 || self.classes == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.num_patches() == 0 {
            return Err(Error::Config("empty patch grid".into()));
        }
        if let ClsPlacement::At(p) = self.cls {
            if p > self.num_patches() {
                return Err(Error::Config(format!("CLS position {p} beyond {} patches", self.num_patches())));
            }
        }
        let p = &self.pathology;
        if p.outlier_gain < 1.0 || !(p.tail_gain >= 0.0) {
            return Err(Error::Config("outlier gain must be >= 1 and tail gain >= 0".into()));
        }
        if let Some(&c) = p.outlier_channels.iter().find(|&&c| c >= self.d_inner) {
            return Err(Error::Config(format!("outlier channel {c} >= d_inner {}", self.d_inner)));
        }
        if !p.token_bias.is_empty() && p.token_bias.len() != self.seq_len() {
            return Err(Error::Config(format!(
                "token bias has {} entries, sequence has {}",
                p.token_bias.len(),
                self.seq_len()
            )));
        }
        Ok(())
    }
}

/// Paths of every quantizable (block-internal) linear layer, in execution order.
pub fn linear_paths(model: &Model) -> Vec<String> {
    model
        .blocks
        .iter()
        .enumerate()
        .flat_map(|(i, b)| b.linear_paths(&block_prefix(i)))
        .collect()
}

pub fn block_prefix(i: usize) -> String {
    format!("blocks.{i}")
}

/// Splits `blocks.3.fwd.x_proj` into `(3, "fwd.x_proj")`.
pub fn split_path(path: &str) -> Option<(usize, &str)> {
    let rest = path.strip_prefix("blocks.")?;
    let (idx, suffix) = rest.split_once('.')?;
    Some((idx.parse().ok()?, suffix))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub patch_embed: Linear,
    pub cls: Option<Vec<f32>>,
    /// Per-position additive bias (length `L`), applied after embedding.
    pub token_bias: Option<Vec<f32>>,
    pub blocks: Vec<Block>,
    pub norm: Vec<f32>,
    pub head: Linear,
}

pub(crate) const RMS_EPS: f32 = 1e-5;

pub(crate) fn rms_norm(x: &Tensor<f32>, gain: &[f32]) -> Tensor<f32> {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let ms = row.iter().map(|v| v * v).sum::<f32>() / row.len() as f32;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        for (v, g) in row.iter_mut().zip(gain) {
            *v *= inv * g;
        }
    }
    out
}

impl Model {
    pub fn seq_len(&self) -> usize {
        self.spec.seq_len()
    }

    pub fn linear(&self, path: &str) -> Option<&Linear> {
        let (i, suffix) = split_path(path)?;
        self.blocks.get(i)?.linear(suffix)
    }

    pub fn linear_mut(&mut self, path: &str) -> Option<&mut Linear> {
        let (i, suffix) = split_path(path)?;
        self.blocks.get_mut(i)?.linear_mut(suffix)
    }

    /// Patch embedding, CLS insertion and the positional bias: the input of
    /// block 0.
    pub fn embed(&self, patches: &Tensor<f32>) -> Result<Tensor<f32>> {
        let l0 = self.spec.num_patches();
        if patches.rows() != l0 || patches.cols() != self.spec.patch_dim() {
            return Err(Error::shape(patches.shape(), &[l0, self.spec.patch_dim()], "patches"));
        }
        let emb = self.patch_embed.forward(patches)?;
        let d = emb.cols();
        let mut tokens = Vec::with_capacity(self.seq_len() * d);
        let cls_at = self.spec.cls_index();
        for i in 0..=l0 {
            if cls_at == Some(i) {
                tokens.extend_from_slice(self.cls.as_deref().expect("CLS embedding present when placed"));
            }
            if i < l0 {
                tokens.extend_from_slice(emb.row(i));
            }
        }
        let mut tokens = Tensor::matrix(self.seq_len(), d, tokens);
        if let Some(bias) = &self.token_bias {
            for (i, &b) in bias.iter().enumerate() {
                tokens.row_mut(i).iter_mut().for_each(|v| *v += b);
            }
        }
        Ok(tokens)
    }

    pub fn block_forward(&self, i: usize, tokens: &Tensor<f32>, hooks: &dyn Hooks) -> Result<Tensor<f32>> {
        if tokens.rows() != self.seq_len() {
            return Err(Error::TokenLength {
                found: tokens.rows(),
                expected: self.seq_len(),
            });
        }
        self.blocks[i].forward(tokens, hooks, &block_prefix(i), self.spec.cls_index())
    }

    /// Final RMS norm, CLS (or mean-token) readout and the head.
    pub fn readout(&self, tokens: &Tensor<f32>) -> Result<Vec<f32>> {
        let normed = rms_norm(tokens, &self.norm);
        let feat: Vec<f32> = match self.spec.cls_index() {
            Some(p) => normed.row(p).to_vec(),
            None => {
                let l = normed.rows() as f32;
                (0..normed.cols())
                    .map(|j| (0..normed.rows()).map(|i| normed.at(i, j)).sum::<f32>() / l)
                    .collect()
            }
        };
        let d = feat.len();
        Ok(self.head.forward(&Tensor::matrix(1, d, feat))?.into_data())
    }

    pub fn forward(&self, patches: &Tensor<f32>) -> Result<Vec<f32>> {
        self.forward_with(patches, &FloatHooks)
    }

    pub fn forward_with(&self, patches: &Tensor<f32>, hooks: &dyn Hooks) -> Result<Vec<f32>> {
        let mut x = self.embed(patches)?;
        for i in 0..self.blocks.len() {
            x = self.block_forward(i, &x, hooks)?;
        }
        self.readout(&x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_parsing() {
        assert_eq!(split_path("blocks.12.fwd.x_proj"), Some((12, "fwd.x_proj")));
        assert_eq!(split_path("head"), None);
    }

    #[test]
    fn seq_len_counts_cls() {
        let s = ModelSpec::tiny();
        assert_eq!(s.seq_len(), 17);
        assert_eq!(s.cls_index(), Some(8));
        let s = ModelSpec {
            cls: ClsPlacement::None,
            ..ModelSpec::tiny()
        };
        assert_eq!(s.seq_len(), 16);
    }

    #[test]
    fn validate_rejects_bad_pathology() {
        let mut s = ModelSpec::tiny();
        s.pathology.outlier_channels = vec![99];
        assert!(s.validate().is_err());
        let mut s = ModelSpec::tiny();
        s.pathology.outlier_gain = 0.5;
        assert!(s.validate().is_err());
    }
}
