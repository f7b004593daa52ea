//! Linear layers, the Vim-style mixer block and the forward-pass hooks that
//! let quantized execution and statistics collection reuse one code path.

use crate::error::{Error, Result};
use crate::model::ssm::{selective_scan_with, silu, softplus};
use crate::tensor::{matmul, Tensor};

/// `y = x · Wᵀ + b` with `W: [out × in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    weight: Tensor<f32>,
    // [in × out] copy so the product runs as a k-ascending i-k-j loop.
    weight_t: Tensor<f32>,
    bias: Option<Vec<f32>>,
}

impl Linear {
    pub fn new(weight: Tensor<f32>, bias: Option<Vec<f32>>) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::shape(weight.shape(), &[0, 0], "linear weight"));
        }
        if let Some(b) = &bias {
            if b.len() != weight.rows() {
                return Err(Error::shape(weight.shape(), &[b.len()], "linear bias"));
            }
        }
        let weight_t = weight.transpose();
        Ok(Self { weight, weight_t, bias })
    }

    pub fn weight(&self) -> &Tensor<f32> {
        &self.weight
    }

    pub fn bias(&self) -> Option<&[f32]> {
        self.bias.as_deref()
    }

    pub fn out_features(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_features(&self) -> usize {
        self.weight.cols()
    }

    pub fn with_weight(&self, weight: Tensor<f32>) -> Result<Self> {
        if weight.shape() != self.weight.shape() {
            return Err(Error::shape(self.weight.shape(), weight.shape(), "replace weight"));
        }
        Self::new(weight, self.bias.clone())
    }

    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        if x.cols() != self.in_features() {
            return Err(Error::shape(x.shape(), self.weight.shape(), "linear input"));
        }
        let mut y = matmul(x, &self.weight_t)?;
        if let Some(b) = &self.bias {
            add_bias(&mut y, b);
        }
        Ok(y)
    }
}

pub(crate) fn add_bias(y: &mut Tensor<f32>, bias: &[f32]) {
    for i in 0..y.rows() {
        for (v, b) in y.row_mut(i).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Causal depthwise 1-D convolution along the token axis.
#[derive(Debug, Clone, PartialEq)]
pub struct DwConv {
    /// `[channels × width]`; tap `width − 1` multiplies the current token.
    pub weight: Tensor<f32>,
    pub bias: Vec<f32>,
}

impl DwConv {
    pub fn width(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (l, c) = (x.rows(), x.cols());
        if self.weight.rows() != c {
            return Err(Error::shape(x.shape(), self.weight.shape(), "conv channels"));
        }
        let k = self.width();
        let mut out = vec![0.0f32; l * c];
        for t in 0..l {
            let orow = &mut out[t * c..(t + 1) * c];
            orow.copy_from_slice(&self.bias);
            for j in 0..k {
                let src = t as isize + j as isize - (k as isize - 1);
                if src < 0 {
                    continue;
                }
                let xrow = x.row(src as usize);
                for ch in 0..c {
                    orow[ch] += self.weight.at(ch, j) * xrow[ch];
                }
            }
        }
        Ok(Tensor::matrix(l, c, out))
    }
}

/// SSM parameters of one scan direction. `A = −exp(a_log)` is cached.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    a_log: Tensor<f32>,
    a: Tensor<f32>,
    pub d_skip: Option<Vec<f32>>,
}

impl SsmParams {
    pub fn new(a_log: Tensor<f32>, d_skip: Option<Vec<f32>>) -> Self {
        let a = a_log.map(|v| -v.exp());
        Self { a_log, a, d_skip }
    }

    pub fn a_log(&self) -> &Tensor<f32> {
        &self.a_log
    }

    /// The strictly negative state matrix `[D × N]`.
    pub fn a(&self) -> &Tensor<f32> {
        &self.a
    }
}

/// One scan direction: conv → SiLU → x_proj → dt_proj → selective scan.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub conv: Option<DwConv>,
    pub x_proj: Linear,
    pub dt_proj: Linear,
    pub ssm: SsmParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanDirection {
    Forward,
    Bidirectional,
}

/// Vim-style mixer block with a residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub in_proj: Linear,
    pub fwd: Branch,
    pub bwd: Option<Branch>,
    /// Per-channel multiplier on the gated output, i.e. on the `out_proj`
    /// input (`None` for the plain block).
    pub gate_scale: Option<Vec<f32>>,
    pub out_proj: Linear,
    pub dt_rank: usize,
}

/// Where a linear layer sits: its path and, when the sequence carries a
/// CLS token, the row that token occupies in this layer's input.
#[derive(Debug, Clone, Copy)]
pub struct Site<'a> {
    pub path: &'a str,
    pub cls_row: Option<usize>,
}

/// Interception points of the forward pass.
pub trait Hooks: Sync {
    fn linear(&self, site: &Site<'_>, x: &Tensor<f32>, layer: &Linear) -> Result<Tensor<f32>> {
        let _ = site;
        layer.forward(x)
    }

    /// Callback applied to the hidden state after every scan step of the
    /// branch at `path` (e.g. `blocks.0.fwd`).
    fn state_hook(&self, path: &str) -> Option<Box<dyn FnMut(&mut [f32]) + '_>> {
        let _ = path;
        None
    }
}

/// Plain floating-point execution.
pub struct FloatHooks;

impl Hooks for FloatHooks {}

/// `y ∘ SiLU(z)`, the input of `out_proj`.
pub(crate) fn gate(y: &Tensor<f32>, z: &Tensor<f32>) -> Tensor<f32> {
    let data = y.data().iter().zip(z.data()).map(|(&a, &g)| a * silu(g)).collect();
    Tensor::matrix(y.rows(), y.cols(), data)
}

impl Branch {
    pub fn forward(&self, x: &Tensor<f32>, hooks: &dyn Hooks, prefix: &str, cls_row: Option<usize>) -> Result<Tensor<f32>> {
        let e = x.cols();
        let n = self.ssm.a().cols();
        let r = self.dt_proj.in_features();
        let u = match &self.conv {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        }
        .map(silu);
        let dbc = hooks.linear(
            &Site {
                path: &format!("{prefix}.x_proj"),
                cls_row,
            },
            &u,
            &self.x_proj,
        )?;
        if dbc.cols() != r + 2 * n {
            return Err(Error::shape(dbc.shape(), &[r, n], "x_proj output"));
        }
        let dt_in = dbc.slice_cols(0, r);
        let b = dbc.slice_cols(r, n);
        let c = dbc.slice_cols(r + n, n);
        let dt = hooks
            .linear(
                &Site {
                    path: &format!("{prefix}.dt_proj"),
                    cls_row,
                },
                &dt_in,
                &self.dt_proj,
            )?
            .map(|v| softplus(v).max(f32::MIN_POSITIVE));
        if dt.cols() != e {
            return Err(Error::shape(dt.shape(), u.shape(), "dt_proj output"));
        }
        let mut noop = |_: &mut [f32]| {};
        let mut hook = hooks.state_hook(prefix);
        let on_state: &mut dyn FnMut(&mut [f32]) = match hook.as_mut() {
            Some(h) => h.as_mut(),
            None => &mut noop,
        };
        selective_scan_with(&u, &dt, &b, &c, self.ssm.a(), self.ssm.d_skip.as_deref(), on_state)
    }
}

impl Block {
    pub fn d_model(&self) -> usize {
        self.in_proj.in_features()
    }

    pub fn d_inner(&self) -> usize {
        self.in_proj.out_features() / 2
    }

    pub fn direction(&self) -> ScanDirection {
        if self.bwd.is_some() {
            ScanDirection::Bidirectional
        } else {
            ScanDirection::Forward
        }
    }

    /// Paths of this block's linear layers, in execution order.
    pub fn linear_paths(&self, prefix: &str) -> Vec<String> {
        let mut v = vec![
            format!("{prefix}.in_proj"),
            format!("{prefix}.fwd.x_proj"),
            format!("{prefix}.fwd.dt_proj"),
        ];
        if self.bwd.is_some() {
            v.push(format!("{prefix}.bwd.x_proj"));
            v.push(format!("{prefix}.bwd.dt_proj"));
        }
        v.push(format!("{prefix}.out_proj"));
        v
    }

    /// Looks up a linear layer by its path suffix (`in_proj`, `fwd.x_proj`, ...).
    pub fn linear(&self, suffix: &str) -> Option<&Linear> {
        match suffix {
            "in_proj" => Some(&self.in_proj),
            "out_proj" => Some(&self.out_proj),
            "fwd.x_proj" => Some(&self.fwd.x_proj),
            "fwd.dt_proj" => Some(&self.fwd.dt_proj),
            "bwd.x_proj" => self.bwd.as_ref().map(|b| &b.x_proj),
            "bwd.dt_proj" => self.bwd.as_ref().map(|b| &b.dt_proj),
            _ => None,
        }
    }

    pub fn linear_mut(&mut self, suffix: &str) -> Option<&mut Linear> {
        match suffix {
            "in_proj" => Some(&mut self.in_proj),
            "out_proj" => Some(&mut self.out_proj),
            "fwd.x_proj" => Some(&mut self.fwd.x_proj),
            "fwd.dt_proj" => Some(&mut self.fwd.dt_proj),
            "bwd.x_proj" => self.bwd.as_mut().map(|b| &mut b.x_proj),
            "bwd.dt_proj" => self.bwd.as_mut().map(|b| &mut b.dt_proj),
            _ => None,
        }
    }

    /// `tokens + out_proj(scan(x) ∘ SiLU(z) ∘ gate_scale)`; the backward branch sees the
    /// reversed sequence and the two directions are averaged.
    pub fn forward(&self, tokens: &Tensor<f32>, hooks: &dyn Hooks, prefix: &str, cls_row: Option<usize>) -> Result<Tensor<f32>> {
        if tokens.cols() != self.d_model() {
            return Err(Error::shape(tokens.shape(), self.in_proj.weight().shape(), "block input"));
        }
        let l = tokens.rows();
        let e = self.d_inner();
        let xz = hooks.linear(
            &Site {
                path: &format!("{prefix}.in_proj"),
                cls_row,
            },
            tokens,
            &self.in_proj,
        )?;
        let x = xz.slice_cols(0, e);
        let z = xz.slice_cols(e, e);
        let mut y = self.fwd.forward(&x, hooks, &format!("{prefix}.fwd"), cls_row)?;
        if let Some(bwd) = &self.bwd {
            let yb = bwd
                .forward(&x.reverse_rows(), hooks, &format!("{prefix}.bwd"), cls_row.map(|p| l - 1 - p))?
                .reverse_rows();
            for (a, b) in y.data_mut().iter_mut().zip(yb.data()) {
                *a = 0.5 * (*a + *b);
            }
        }
        let mut g = gate(&y, &z);
        if let Some(scale) = &self.gate_scale {
            if scale.len() != e {
                return Err(Error::shape(&[scale.len()], &[e], "gate scale"));
            }
            for row in g.data_mut().chunks_mut(e) {
                row.iter_mut().zip(scale).for_each(|(v, s)| *v *= s);
            }
        }
        let out = hooks.linear(
            &Site {
                path: &format!("{prefix}.out_proj"),
                cls_row,
            },
            &g,
            &self.out_proj,
        )?;
        let res = tokens.add(&out)?;
        if res.rows() != l {
            return Err(Error::Invalid(format!("token length changed from {l} to {}", res.rows())));
        }
        Ok(res)
    }
}
