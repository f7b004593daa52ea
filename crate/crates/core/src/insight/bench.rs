//! Median-of-N latency of whole-model forwards over a batch.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{ActMode, ExecOptions, PhaseTimes, QuantizedModel, Recipe};
use crate::model::Model;
use crate::tensor::Tensor;

/// Execution mode under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    Fp,
    Quant(ActMode),
}

impl BenchMode {
    pub fn name(self) -> &'static str {
        match self {
            BenchMode::Fp => "fp",
            BenchMode::Quant(m) => m.name(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s == "fp" {
            return Some(BenchMode::Fp);
        }
        ActMode::parse(s).map(BenchMode::Quant)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub warmup: usize,
    pub reps: usize,
    /// Worker threads for the batch; 1 by default.
    pub threads: usize,
    /// Extra timed forwards used only for the per-phase breakdown.
    pub phase_reps: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup: 100,
            reps: 100,
            threads: 1,
            phase_reps: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub mode: BenchMode,
    pub batch: usize,
    pub warmup: usize,
    pub reps: usize,
    pub threads: usize,
    pub median: Duration,
    /// Every timed repetition, in run order.
    pub samples: Vec<Duration>,
    /// Mean time per batch forward spent in quantized linears, by phase.
    pub phases: PhaseTimes,
}

fn median(v: &[Duration]) -> Duration {
    let mut s = v.to_vec();
    s.sort();
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2
    }
}

fn opts(path_only: bool) -> ExecOptions {
    ExecOptions {
        path: crate::exec::ExecPath::Integer,
        quantize_linears: path_only,
        quantize_hidden_state: false,
        cls_fp_override: false,
    }
}

/// Times `reps` forwards of the whole `batch` after `warmup` untimed ones
/// and reports the median.
pub fn bench_latency(
    model: &Model,
    recipe: &Recipe,
    mode: BenchMode,
    batch: &[Tensor<f32>],
    cfg: &BenchConfig,
) -> Result<BenchResult> {
    Ok(bench_interleaved(model, &[(recipe, mode)], batch, cfg)?.remove(0))
}

// Whether `mode` runs quantized linears; rejects a recipe of another mode.
fn check_case(recipe: &Recipe, mode: BenchMode) -> Result<bool> {
    match mode {
        BenchMode::Fp => Ok(false),
        BenchMode::Quant(m) => {
            if recipe.is_float() || recipe.mode != m {
                return Err(Error::Precondition(format!(
                    "recipe is {} but {} was requested",
                    if recipe.is_float() { "float" } else { recipe.mode.name() },
                    m.name()
                )));
            }
            Ok(true)
        }
    }
}

/// Benchmarks several configurations on the same batch. Each gets `warmup`
/// untimed forwards; the timed repetitions then run round-robin, so slow
/// drift in machine speed affects every configuration alike.
pub fn bench_interleaved(
    model: &Model,
    cases: &[(&Recipe, BenchMode)],
    batch: &[Tensor<f32>],
    cfg: &BenchConfig,
) -> Result<Vec<BenchResult>> {
    if batch.is_empty() || cfg.reps == 0 || cfg.threads == 0 || cases.is_empty() {
        return Err(Error::Precondition("benchmark needs a batch, a case, reps >= 1 and threads >= 1".into()));
    }
    let quantized = cases.iter().map(|&(r, m)| check_case(r, m)).collect::<Result<Vec<_>>>()?;
    let models = cases
        .iter()
        .zip(&quantized)
        .map(|(&(r, _), &q)| QuantizedModel::new(model, r, opts(q)))
        .collect::<Result<Vec<_>>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| -> Result<Vec<BenchResult>> {
        for qm in &models {
            for _ in 0..cfg.warmup {
                std::hint::black_box(qm.forward_batch(batch)?);
            }
        }
        let mut samples = vec![Vec::with_capacity(cfg.reps); models.len()];
        for _ in 0..cfg.reps {
            for (qm, out) in models.iter().zip(samples.iter_mut()) {
                let t0 = Instant::now();
                std::hint::black_box(qm.forward_batch(batch)?);
                out.push(t0.elapsed());
            }
        }
        let mut results = Vec::with_capacity(cases.len());
        for ((&(recipe, mode), &q), samples) in cases.iter().zip(&quantized).zip(samples) {
            let mut phases = PhaseTimes::default();
            if q && cfg.phase_reps > 0 {
                let timed = QuantizedModel::new(model, recipe, opts(true))?.with_phase_timing();
                for _ in 0..cfg.phase_reps {
                    std::hint::black_box(timed.forward_batch(batch)?);
                }
                let p = timed.take_phases();
                let n = cfg.phase_reps as u32;
                phases = PhaseTimes {
                    smooth: p.smooth / n,
                    quantize: p.quantize / n,
                    gemm: p.gemm / n,
                    dequantize: p.dequantize / n,
                };
            }
            results.push(BenchResult {
                mode,
                batch: batch.len(),
                warmup: cfg.warmup,
                reps: cfg.reps,
                threads: cfg.threads,
                median: median(&samples),
                samples,
                phases,
            });
        }
        Ok(results)
    })
}

pub const BENCH_CSV_HEADER: &str =
    "mode,batch,warmup,reps,threads,median_us,smooth_us,quantize_us,gemm_us,dequantize_us";

impl BenchResult {
    pub fn to_csv_row(&self) -> String {
        let us = |d: Duration| d.as_secs_f64() * 1e6;
        format!(
            "{},{},{},{},{},{:.3},{:.3},{:.3},{:.3},{:.3}",
            self.mode.name(),
            self.batch,
            self.warmup,
            self.reps,
            self.threads,
            us(self.median),
            us(self.phases.smooth),
            us(self.phases.quantize),
            us(self.phases.gemm),
            us(self.phases.dequantize)
        )
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "mode {} batch {} warmup {} reps {} threads {} median {:.3} ms",
            self.mode.name(),
            self.batch,
            self.warmup,
            self.reps,
            self.threads,
            self.median.as_secs_f64() * 1e3
        );
        if self.phases.total() > Duration::ZERO {
            let ms = |d: Duration| d.as_secs_f64() * 1e3;
            let _ = write!(
                s,
                " | linears: smooth {:.3} quantize {:.3} gemm {:.3} dequantize {:.3} ms",
                ms(self.phases.smooth),
                ms(self.phases.quantize),
                ms(self.phases.gemm),
                ms(self.phases.dequantize)
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jlss::{calibrate, Bits, Hyper, Method};
    use crate::model::{gen_calibration_set, random_model, ModelSpec};

    #[test]
    fn median_of_exact_reps() {
        let spec = ModelSpec::tiny();
        let m = random_model(&spec, 1).unwrap();
        let data: Vec<_> = gen_calibration_set(2, 4, &spec).unwrap().into_iter().map(|s| s.patches).collect();
        let (r, _) = calibrate(&m, &data, Bits::new(8, 8), &Hyper::default(), Method::PtsGrid).unwrap();
        let cfg = BenchConfig {
            warmup: 2,
            reps: 5,
            threads: 1,
            phase_reps: 1,
        };
        let res = bench_latency(&m, &r, BenchMode::Quant(ActMode::Pts), &data, &cfg).unwrap();
        assert_eq!(res.samples.len(), 5);
        assert!(res.phases.gemm > Duration::ZERO);
        let dynamic = r.with_mode(ActMode::PerTokenDynamic).unwrap();
        assert!(bench_latency(&m, &dynamic, BenchMode::Quant(ActMode::Pts), &data, &cfg).is_err());
        assert!(bench_latency(&m, &dynamic, BenchMode::Quant(ActMode::PerTokenDynamic), &data, &cfg).is_ok());
        let fp = bench_latency(&m, &r, BenchMode::Fp, &data, &cfg).unwrap();
        assert_eq!(fp.phases, PhaseTimes::default());
    }

    #[test]
    fn interleaved_cases_keep_their_order() {
        let spec = ModelSpec::tiny();
        let m = random_model(&spec, 1).unwrap();
        let data: Vec<_> = gen_calibration_set(2, 2, &spec).unwrap().into_iter().map(|s| s.patches).collect();
        let (r, _) = calibrate(&m, &data, Bits::new(8, 8), &Hyper::default(), Method::PtsGrid).unwrap();
        let t = r.with_mode(ActMode::PerTensorStatic).unwrap();
        let cfg = BenchConfig {
            warmup: 1,
            reps: 3,
            threads: 1,
            phase_reps: 0,
        };
        let cases = [(&r, BenchMode::Fp), (&r, BenchMode::Quant(ActMode::Pts)), (&t, BenchMode::Quant(ActMode::PerTensorStatic))];
        let res = bench_interleaved(&m, &cases, &data, &cfg).unwrap();
        assert_eq!(res.iter().map(|b| b.mode).collect::<Vec<_>>(), cases.map(|c| c.1));
        assert!(res.iter().all(|b| b.samples.len() == 3));
        assert!(bench_interleaved(&m, &[(&t, BenchMode::Quant(ActMode::Pts))], &data, &cfg).is_err());
        assert!(bench_interleaved(&m, &[], &data, &cfg).is_err());
    }

    #[test]
    fn median_rule() {
        let ms = Duration::from_millis;
        assert_eq!(median(&[ms(3), ms(1), ms(2)]), ms(2));
        assert_eq!(median(&[ms(4), ms(1), ms(2), ms(3)]), Duration::from_micros(2500));
    }
}
