//! Random initialisation, pathology injection and synthetic calibration data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StudentT};

use super::{Block, Branch, DwConv, Linear, Model, ModelSpec, PathologySpec, SsmParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CONV_WIDTH: usize = 3;
const CLS_STD: f32 = 0.5;
/// Step sizes at zero input are log-uniform in `[DT_MIN, DT_MAX]`.
const DT_MIN: f32 = 1e-3;
const DT_MAX: f32 = 1e-1;
/// `out_proj` is drawn at `OUT_PROJ_GAIN / √E`. With the plain `1/√E` the
/// mixer output is so small next to the residual that the logits barely
/// depend on the image.
const OUT_PROJ_GAIN: f32 = 4.0;
const STUDENT_DF: f32 = 3.0;

/// One labelled image, already cut into `[L₀ × D_in]` patches.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub patches: Tensor<f32>,
    pub label: usize,
}

fn sub_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f32) -> Tensor<f32> {
    let dist = Normal::new(0.0f32, std).expect("finite std");
    Tensor::from_fn(rows, cols, |_, _| dist.sample(rng))
}

fn inverse_softplus(y: f32) -> f32 {
    y + (-(-y).exp_m1()).ln()
}

fn random_branch(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Result<Branch> {
    let (e, n, r) = (spec.d_inner, spec.d_state, spec.dt_rank);
    let conv = spec.conv.then(|| DwConv {
        weight: normal(rng, e, CONV_WIDTH, (1.0 / CONV_WIDTH as f32).sqrt()),
        bias: vec![0.0; e],
    });
    let x_proj = Linear::new(normal(rng, r + 2 * n, e, (1.0 / e as f32).sqrt()), None)?;
    let dt_w = normal(rng, e, r, (1.0 / r as f32).sqrt());
    let dt_bias = (0..e)
        .map(|_| {
            let u: f32 = rng.random();
            inverse_softplus((DT_MIN.ln() + u * (DT_MAX.ln() - DT_MIN.ln())).exp())
        })
        .collect();
    let dt_proj = Linear::new(dt_w, Some(dt_bias))?;
    let a_log = Tensor::from_fn(e, n, |_, s| ((s + 1) as f32).ln());
    let d_skip = spec.d_skip.then(|| vec![1.0; e]);
    Ok(Branch {
        conv,
        x_proj,
        dt_proj,
        ssm: SsmParams::new(a_log, d_skip),
    })
}

/// A block with standard random initialisation.
pub fn random_block(spec: &ModelSpec, seed: u64) -> Result<Block> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, e) = (spec.d_model, spec.d_inner);
    let in_proj = Linear::new(normal(&mut rng, 2 * e, d, (1.0 / d as f32).sqrt()), None)?;
    let fwd = random_branch(spec, &mut rng)?;
    let bwd = if spec.bidirectional {
        Some(random_branch(spec, &mut rng)?)
    } else {
        None
    };
    let out_proj = Linear::new(normal(&mut rng, d, e, OUT_PROJ_GAIN / (e as f32).sqrt()), None)?;
    Ok(Block {
        in_proj,
        fwd,
        bwd,
        gate_scale: None,
        out_proj,
        dt_rank: spec.dt_rank,
    })
}

/// A model with benign random weights (the pathology in `spec` is ignored).
pub fn random_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 0));
    let (d, din) = (spec.d_model, spec.patch_dim());
    let patch_embed = Linear::new(normal(&mut rng, d, din, (1.0 / din as f32).sqrt()), Some(vec![0.0; d]))?;
    let cls = spec.cls_index().map(|_| normal(&mut rng, 1, d, CLS_STD).into_data());
    let head = Linear::new(
        normal(&mut rng, spec.classes, d, (1.0 / d as f32).sqrt()),
        Some(vec![0.0; spec.classes]),
    )?;
    let blocks = (0..spec.blocks)
        .map(|i| random_block(spec, sub_seed(seed, i as u64 + 1)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Model {
        spec: ModelSpec {
            pathology: PathologySpec::benign(),
            ..spec.clone()
        },
        patch_embed,
        cls,
        token_bias: None,
        blocks,
        norm: vec![1.0; d],
        head,
    })
}

/// Random model with the activation pathologies of `pathology` injected:
///
/// * gate rows of `in_proj` are redrawn from Student-t(3) scaled by
///   `tail_gain` (skipped at 0);
/// * with a token bias, the gate rows of `in_proj` are centred so the
///   constant per-position offset reaches the scan branch but does not
///   open or close the gate of every channel at that position;
/// * every outlier channel of the `out_proj` input is multiplied by
///   `outlier_gain` through the block's gate scale and the matching
///   `out_proj` column divided by it, so the FP function is unchanged;
/// * `token_bias` is added to every channel of the embedded sequence.
pub fn make_pathological_model(spec: &ModelSpec, pathology: &PathologySpec, seed: u64) -> Result<Model> {
    let spec = spec.clone().with_pathology(pathology.clone());
    spec.validate()?;
    let mut model = random_model(&spec, seed)?;
    let (d, e) = (spec.d_model, spec.d_inner);
    let std = (1.0 / d as f32).sqrt();
    for (i, block) in model.blocks.iter_mut().enumerate() {
        let mut w = block.in_proj.weight().clone();
        if pathology.tail_gain > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 1000 + i as u64));
            let t = StudentT::new(STUDENT_DF).map_err(|err| Error::Invalid(err.to_string()))?;
            // Student-t(3) has variance 3; unit gain matches the Gaussian std.
            let scale = pathology.tail_gain * std / STUDENT_DF.sqrt();
            for row in e..2 * e {
                for v in w.row_mut(row) {
                    *v = t.sample(&mut rng) * scale;
                }
            }
        }
        if pathology.token_bias.iter().any(|&b| b != 0.0) {
            for row in e..2 * e {
                let r = w.row_mut(row);
                let mean = r.iter().sum::<f32>() / r.len() as f32;
                r.iter_mut().for_each(|v| *v -= mean);
            }
        }
        let mut out = block.out_proj.weight().clone();
        if !pathology.outlier_channels.is_empty() {
            let mut scale = vec![1.0; e];
            for &c in &pathology.outlier_channels {
                scale[c] = pathology.outlier_gain;
                for o in 0..d {
                    out.set(o, c, out.at(o, c) / pathology.outlier_gain);
                }
            }
            block.gate_scale = Some(scale);
        }
        block.in_proj = block.in_proj.with_weight(w)?;
        block.out_proj = block.out_proj.with_weight(out)?;
    }
    if pathology.token_bias.iter().any(|&b| b != 0.0) {
        model.token_bias = Some(pathology.token_bias.clone());
    }
    model.spec = spec;
    Ok(model)
}

/// Deterministic labelled images: per-class oriented sinusoids over a
/// class-specific colour gradient, plus Gaussian pixel noise.
pub fn gen_calibration_set(seed: u64, count: usize, spec: &ModelSpec) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(Error::Precondition("calibration count must be >= 1".into()));
    }
    let (h, w, p, ch) = (spec.grid_h * spec.patch, spec.grid_w * spec.patch, spec.patch, spec.channels);
    let classes = spec.classes.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, 0.15).expect("finite std");
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let label = rng.random_range(0..classes);
        let theta = std::f32::consts::PI * label as f32 / classes as f32 + rng.random_range(-0.15..0.15);
        let freq = 1.0 + (label % 3) as f32 + rng.random_range(-0.2..0.2);
        let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        let amp: f32 = rng.random_range(0.6..1.2);
        let (ct, st) = (theta.cos(), theta.sin());
        let mut img = vec![0.0f32; h * w * ch];
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f32 / w as f32, y as f32 / h as f32);
                let wave = amp * (std::f32::consts::TAU * freq * (u * ct + v * st) + phase).sin();
                for c in 0..ch {
                    let tint = ((label + c) % classes) as f32 / classes as f32 - 0.5;
                    let ramp = tint * (2.0 * u - 1.0 + (c as f32 - 1.0) * (2.0 * v - 1.0));
                    img[(y * w + x) * ch + c] = wave + ramp + noise.sample(&mut rng);
                }
            }
        }
        let mut patches = Vec::with_capacity(h * w * ch);
        for py in 0..spec.grid_h {
            for px in 0..spec.grid_w {
                for dy in 0..p {
                    for dx in 0..p {
                        let (y, x) = (py * p + dy, px * p + dx);
                        patches.extend_from_slice(&img[(y * w + x) * ch..(y * w + x + 1) * ch]);
                    }
                }
            }
        }
        out.push(Sample {
            patches: Tensor::matrix(spec.num_patches(), spec.patch_dim(), patches),
            label,
        });
    }
    Ok(out)
}
