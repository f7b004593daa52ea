//! Measurements: activation-distribution reports, fidelity between float
//! and quantized logits, and a latency harness for the activation modes.

mod bench;
mod report;

pub use bench::{bench_interleaved, bench_latency, BenchConfig, BenchMode, BenchResult, BENCH_CSV_HEADER};
pub use report::{
    analyze_layers, benign, capture_layer_inputs, channel_outlier_report, fidelity_metrics, long_tail_metric, percentile,
    reports_csv, token_variance_report, ChannelReport, DistributionReport, Fidelity, LongTail, TokenProfile,
    DEFAULT_OUTLIER_K, FIDELITY_CSV_HEADER, MIN_TAIL_VALUES, REPORT_CSV_HEADER, REPORT_PERCENTILES, TAIL_PERCENTILES,
};
