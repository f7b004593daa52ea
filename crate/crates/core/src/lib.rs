//! Post-training quantization for selective state-space vision models.
//!
//! * [`tensor`] and [`container`]: dense tensors and the `VMQ1` file format.
//! * [`model`]: a small Visual-Mamba classifier with injectable pathologies.
//! * [`quant`]: quantizers, smoothing scales, int4 packing, calibration statistics.
//! * [`exec`]: quantized linears (fake-quant and integer paths) and recipes.
//! * [`jlss`]: three-stage calibration with block-wise gradient tuning.
//! * [`insight`]: activation-distribution reports, fidelity metrics and latency.

pub mod container;
pub mod error;
pub mod model;
pub mod quant;
pub mod exec;
pub mod jlss;
pub mod insight;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Configures the global rayon pool from `VMQ_THREADS` (if set). Safe to call
/// more than once; only the first call has an effect.
pub fn init_threads() -> Result<usize> {
    let requested = match std::env::var("VMQ_THREADS") {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Config(format!("VMQ_THREADS must be a positive integer, got `{v}`")))?,
        ),
        Err(_) => None,
    };
    if let Some(n) = requested {
        // An already-initialised pool is not an error for repeated calls.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}
