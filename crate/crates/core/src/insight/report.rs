//! Activation-distribution metrics and fidelity between two sets of logits.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{FloatHooks, Model};
use crate::quant::CaptureHooks;
use crate::tensor::Tensor;

/// Default outlier threshold: a channel is flagged above `k × median`.
pub const DEFAULT_OUTLIER_K: f64 = 5.0;
/// Percentiles bounding the body of the distribution in the long-tail ratio.
pub const TAIL_PERCENTILES: (f64, f64) = (1.0, 99.0);
/// Percentiles listed in every report.
pub const REPORT_PERCENTILES: [f64; 9] = [0.0, 1.0, 5.0, 25.0, 50.0, 75.0, 95.0, 99.0, 100.0];

/// Below these values a layer counts as benign. Calibrated on the first
/// block's `in_proj` and `out_proj` inputs of 40 benign tiny models (128
/// calibration images): the largest values seen were 1.4, 10.5 and 17.1.
/// Deeper layers of benign models are naturally heavier-tailed.
pub mod benign {
    /// Largest token-profile max/median ratio.
    pub const TOKEN_RATIO: f64 = 2.0;
    /// Largest channel mean-|a| over the channel median.
    pub const CHANNEL_RATIO: f64 = 12.0;
    /// Largest long-tail ratio.
    pub const LONG_TAIL: f64 = 20.0;
}

/// Mean |activation| per token position and its stability across inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenProfile {
    pub profile: Vec<f64>,
    pub argmax: usize,
    /// `max / min` of the profile (infinite when some token is all zero).
    pub max_min_ratio: f64,
    /// `max / median` of the profile; unlike `max_min_ratio` it ignores a
    /// single quiet token such as a small CLS row.
    pub max_over_median: f64,
    /// Mean pairwise Pearson correlation of per-sample token profiles;
    /// 1 means the shape does not depend on the input. `None` for one sample
    /// or flat profiles.
    pub cross_sample_corr: Option<f64>,
}

fn check_acts(acts: &[Tensor<f32>]) -> Result<(usize, usize)> {
    let first = acts.first().ok_or_else(|| Error::Precondition("need at least one activation sample".into()))?;
    let (l, d) = (first.rows(), first.cols());
    if let Some(bad) = acts.iter().find(|a| a.rows() != l || a.cols() != d) {
        return Err(Error::shape(first.shape(), bad.shape(), "activation samples"));
    }
    Ok((l, d))
}

fn sample_profile(a: &Tensor<f32>) -> Vec<f64> {
    (0..a.rows())
        .map(|t| a.row(t).iter().map(|v| v.abs() as f64).sum::<f64>() / a.cols() as f64)
        .collect()
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

fn argmax(v: &[f64]) -> usize {
    // First index wins on ties.
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

pub fn token_variance_report(acts: &[Tensor<f32>]) -> Result<TokenProfile> {
    let (l, _) = check_acts(acts)?;
    let per: Vec<Vec<f64>> = acts.iter().map(sample_profile).collect();
    let profile: Vec<f64> = (0..l).map(|t| per.iter().map(|p| p[t]).sum::<f64>() / per.len() as f64).collect();
    let max = profile.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = profile.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_min_ratio = if max == min { 1.0 } else { max / min };
    let median = percentile(&sorted(profile.clone()), 50.0);
    let max_over_median = if max == median { 1.0 } else { max / median };
    let mut corr = Vec::new();
    for i in 0..per.len() {
        for j in i + 1..per.len() {
            if let Some(c) = pearson(&per[i], &per[j]) {
                corr.push(c);
            }
        }
    }
    let cross_sample_corr = (!corr.is_empty()).then(|| corr.iter().sum::<f64>() / corr.len() as f64);
    Ok(TokenProfile {
        argmax: argmax(&profile),
        profile,
        max_min_ratio,
        max_over_median,
        cross_sample_corr,
    })
}

/// Mean |activation| per channel and the channels above `k × median`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelReport {
    pub profile: Vec<f64>,
    pub median: f64,
    pub k: f64,
    /// Sorted, unique.
    pub flagged: Vec<usize>,
    /// `max(profile) / median` (1 for a zero median with a zero profile).
    pub max_over_median: f64,
}

pub fn channel_outlier_report(acts: &[Tensor<f32>], k: f64) -> Result<ChannelReport> {
    if !(k > 1.0) {
        return Err(Error::Invalid(format!("outlier threshold k must exceed 1, got {k}")));
    }
    let (l, d) = check_acts(acts)?;
    let mut profile = vec![0.0f64; d];
    for a in acts {
        for t in 0..l {
            for (p, v) in profile.iter_mut().zip(a.row(t)) {
                *p += v.abs() as f64;
            }
        }
    }
    let n = (acts.len() * l) as f64;
    profile.iter_mut().for_each(|p| *p /= n);
    let median = percentile(&sorted(profile.clone()), 50.0);
    let flagged = (0..d).filter(|&c| profile[c] > k * median).collect();
    let max = profile.iter().cloned().fold(0.0, f64::max);
    let max_over_median = if median > 0.0 {
        max / median
    } else if max == 0.0 {
        1.0
    } else {
        f64::INFINITY
    };
    Ok(ChannelReport {
        profile,
        median,
        k,
        flagged,
        max_over_median,
    })
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// Linear-interpolated percentile of sorted data, `p` in `[0, 100]`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p / 100.0 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// `(max − min) / (p99 − p1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LongTail {
    pub ratio: f64,
    /// Set when `p99 == p1`; the ratio is then reported as 1.
    pub degenerate: bool,
}

pub const MIN_TAIL_VALUES: usize = 100;

pub fn long_tail_metric(values: &[f32]) -> Result<LongTail> {
    if values.len() < MIN_TAIL_VALUES {
        return Err(Error::Precondition(format!(
            "long-tail ratio needs at least {MIN_TAIL_VALUES} values, got {}",
            values.len()
        )));
    }
    let s = sorted(values.iter().map(|&v| v as f64).collect());
    long_tail_sorted(&s)
}

fn long_tail_sorted(s: &[f64]) -> Result<LongTail> {
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("long-tail input".into()));
    }
    let body = percentile(s, TAIL_PERCENTILES.1) - percentile(s, TAIL_PERCENTILES.0);
    if body <= 0.0 {
        return Ok(LongTail {
            ratio: 1.0,
            degenerate: true,
        });
    }
    Ok(LongTail {
        ratio: (s[s.len() - 1] - s[0]) / body,
        degenerate: false,
    })
}

/// All three observation metrics for one layer input.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionReport {
    pub layer: String,
    pub tokens: TokenProfile,
    pub channels: ChannelReport,
    pub long_tail: LongTail,
    /// `(percentile, value)` pairs at [`REPORT_PERCENTILES`].
    pub percentiles: Vec<(f64, f64)>,
}

impl DistributionReport {
    pub fn from_acts(layer: &str, acts: &[Tensor<f32>], k: f64) -> Result<Self> {
        let tokens = token_variance_report(acts)?;
        let channels = channel_outlier_report(acts, k)?;
        let all = sorted(acts.iter().flat_map(|a| a.data().iter().map(|&v| v as f64)).collect());
        if all.len() < MIN_TAIL_VALUES {
            return Err(Error::Precondition(format!(
                "long-tail ratio needs at least {MIN_TAIL_VALUES} values, got {}",
                all.len()
            )));
        }
        let long_tail = long_tail_sorted(&all)?;
        let percentiles = REPORT_PERCENTILES.iter().map(|&p| (p, percentile(&all, p))).collect();
        Ok(Self {
            layer: layer.to_string(),
            tokens,
            channels,
            long_tail,
            percentiles,
        })
    }

    /// True when every metric is below its [`benign`] threshold.
    pub fn is_benign(&self) -> bool {
        self.tokens.max_over_median < benign::TOKEN_RATIO
            && self.channels.max_over_median < benign::CHANNEL_RATIO
            && self.long_tail.ratio < benign::LONG_TAIL
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "layer {}", self.layer);
        let _ = writeln!(
            s,
            "tokens: argmax {} max/min {:.4} max/median {:.4} cross-sample corr {}",
            self.tokens.argmax,
            self.tokens.max_min_ratio,
            self.tokens.max_over_median,
            self.tokens.cross_sample_corr.map_or("n/a".into(), |c| format!("{c:.4}"))
        );
        let _ = writeln!(
            s,
            "channels: median {:.6} max/median {:.4} flagged (k={}) {:?}",
            self.channels.median, self.channels.max_over_median, self.channels.k, self.channels.flagged
        );
        let _ = writeln!(
            s,
            "long tail: ratio {:.4}{}",
            self.long_tail.ratio,
            if self.long_tail.degenerate { " (degenerate)" } else { "" }
        );
        let pcts: Vec<String> = self.percentiles.iter().map(|(p, v)| format!("p{p}={v:.6}")).collect();
        let _ = writeln!(s, "percentiles: {}", pcts.join(" "));
        s
    }
}

/// Header of [`reports_csv`].
pub const REPORT_CSV_HEADER: &str = "layer,kind,index,value";

/// Flat CSV, one value per row. `kind` is one of `token_mean_abs`,
/// `channel_mean_abs`, `flagged_channel`, `percentile` (index = percentile),
/// `token_argmax`, `token_max_min_ratio`, `token_max_over_median`, `token_cross_corr`,
/// `channel_median`, `channel_max_over_median`, `long_tail_ratio`,
/// `long_tail_degenerate`.
pub fn reports_csv(reports: &[DistributionReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{REPORT_CSV_HEADER}");
    for r in reports {
        let l = &r.layer;
        for (i, v) in r.tokens.profile.iter().enumerate() {
            let _ = writeln!(s, "{l},token_mean_abs,{i},{v}");
        }
        for (i, v) in r.channels.profile.iter().enumerate() {
            let _ = writeln!(s, "{l},channel_mean_abs,{i},{v}");
        }
        for c in &r.channels.flagged {
            let _ = writeln!(s, "{l},flagged_channel,{c},1");
        }
        for (p, v) in &r.percentiles {
            let _ = writeln!(s, "{l},percentile,{p},{v}");
        }
        let _ = writeln!(s, "{l},token_argmax,,{}", r.tokens.argmax);
        let _ = writeln!(s, "{l},token_max_min_ratio,,{}", r.tokens.max_min_ratio);
        let _ = writeln!(s, "{l},token_max_over_median,,{}", r.tokens.max_over_median);
        if let Some(c) = r.tokens.cross_sample_corr {
            let _ = writeln!(s, "{l},token_cross_corr,,{c}");
        }
        let _ = writeln!(s, "{l},channel_median,,{}", r.channels.median);
        let _ = writeln!(s, "{l},channel_max_over_median,,{}", r.channels.max_over_median);
        let _ = writeln!(s, "{l},long_tail_ratio,,{}", r.long_tail.ratio);
        let _ = writeln!(s, "{l},long_tail_degenerate,,{}", r.long_tail.degenerate as u8);
    }
    s
}

/// Float inputs of `layers` over `data`, one `[L × in]` per sample and layer.
pub fn capture_layer_inputs(model: &Model, data: &[Tensor<f32>], layers: &[String]) -> Result<Vec<Vec<Tensor<f32>>>> {
    crate::quant::check_taps(model, layers)?;
    let mut out = vec![Vec::with_capacity(data.len()); layers.len()];
    for p in data {
        let hooks = CaptureHooks::new(&FloatHooks, layers.iter().cloned());
        model.forward_with(p, &hooks)?;
        let mut got = hooks.into_captured();
        for (slot, name) in out.iter_mut().zip(layers) {
            slot.push(got.remove(name).expect("captured tap"));
        }
    }
    Ok(out)
}

/// One report per layer over the float model's activations on `data`.
pub fn analyze_layers(model: &Model, data: &[Tensor<f32>], layers: &[String], k: f64) -> Result<Vec<DistributionReport>> {
    let acts = capture_layer_inputs(model, data, layers)?;
    layers
        .iter()
        .zip(&acts)
        .map(|(name, a)| DistributionReport::from_acts(name, a, k))
        .collect()
}

/// Agreement between reference and quantized logits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fidelity {
    /// Mean per-sample cosine similarity.
    pub cosine: f64,
    pub top1_agreement: f64,
    pub mean_abs_err: f64,
    pub samples: usize,
}

fn top1(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

pub fn fidelity_metrics(fp: &[Vec<f32>], q: &[Vec<f32>]) -> Result<Fidelity> {
    if fp.len() != q.len() || fp.is_empty() {
        return Err(Error::shape(&[fp.len()], &[q.len()], "logit batches"));
    }
    let (mut cos, mut agree, mut abs, mut count) = (0.0, 0usize, 0.0, 0usize);
    for (a, b) in fp.iter().zip(q) {
        if a.len() != b.len() {
            return Err(Error::shape(&[a.len()], &[b.len()], "logit vectors"));
        }
        let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
        let na = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let nb = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        cos += if na == 0.0 && nb == 0.0 { 1.0 } else { dot / (na * nb + 1e-12) };
        agree += (top1(a) == top1(b)) as usize;
        abs += a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>();
        count += a.len();
    }
    let n = fp.len() as f64;
    Ok(Fidelity {
        cosine: cos / n,
        top1_agreement: agree as f64 / n,
        mean_abs_err: abs / count.max(1) as f64,
        samples: fp.len(),
    })
}

pub const FIDELITY_CSV_HEADER: &str = "samples,cosine,top1_agreement,mean_abs_err";

impl Fidelity {
    pub fn to_csv_row(&self) -> String {
        format!("{},{},{},{}", self.samples, self.cosine, self.top1_agreement, self.mean_abs_err)
    }

    pub fn to_text(&self) -> String {
        format!(
            "samples {} cosine {:.6} top1_agreement {:.4} mean_abs_err {:.6}",
            self.samples, self.cosine, self.top1_agreement, self.mean_abs_err
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_normal;

    fn gauss(seed: u64, s: usize, l: usize, d: usize) -> Vec<Tensor<f32>> {
        (0..s).map(|i| seeded_normal(seed + i as u64, &[l, d], 0.0, 1.0).unwrap()).collect()
    }

    #[test]
    fn gaussian_token_profile_is_flat() {
        let acts = gauss(1, 40, 17, 32);
        let r = token_variance_report(&acts).unwrap();
        assert!(r.max_min_ratio < 1.5, "{}", r.max_min_ratio);
    }

    #[test]
    fn spike_sets_argmax() {
        let mut acts = gauss(2, 4, 17, 8);
        for a in &mut acts {
            a.row_mut(9).iter_mut().for_each(|v| *v += 6.0);
        }
        let r = token_variance_report(&acts).unwrap();
        assert_eq!(r.argmax, 9);
        assert!(r.cross_sample_corr.unwrap() > 0.9);
    }

    #[test]
    fn constant_profile_is_flat() {
        let acts = vec![Tensor::full(&[5, 3], 2.0f32); 3];
        let r = token_variance_report(&acts).unwrap();
        assert!(r.profile.iter().all(|&p| p == 2.0));
        assert_eq!(r.max_min_ratio, 1.0);
        assert_eq!(channel_outlier_report(&acts, 5.0).unwrap().flagged, Vec::<usize>::new());
    }

    #[test]
    fn injected_channels_are_flagged() {
        let mut acts = gauss(3, 8, 17, 32);
        assert!(channel_outlier_report(&acts, 5.0).unwrap().flagged.is_empty());
        for a in &mut acts {
            for t in 0..a.rows() {
                for c in [3, 17] {
                    let v = a.at(t, c) * 50.0;
                    a.set(t, c, v);
                }
            }
        }
        assert_eq!(channel_outlier_report(&acts, 5.0).unwrap().flagged, vec![3, 17]);
        assert!(channel_outlier_report(&acts, 1.0).is_err());
    }

    #[test]
    fn long_tail_examples() {
        let u: Vec<f32> = (0..10_001).map(|i| i as f32 / 10_000.0).collect();
        let r = long_tail_metric(&u).unwrap();
        assert!((r.ratio - 1.0 / 0.98).abs() < 1e-3, "{}", r.ratio);
        let mut spike = vec![1.0f32; 10_000];
        for (i, v) in spike.iter_mut().enumerate() {
            *v += (i % 7) as f32 * 0.01;
        }
        spike[0] = 1e4;
        assert!(long_tail_metric(&spike).unwrap().ratio > 100.0);
        let flat = long_tail_metric(&[3.0; 200]).unwrap();
        assert_eq!((flat.ratio, flat.degenerate), (1.0, true));
        assert!(long_tail_metric(&[1.0; 10]).is_err());
    }

    #[test]
    fn gaussian_tail_matches_sample_oracle() {
        let x = seeded_normal(9, &[20_000], 0.0, 1.0).unwrap().into_data();
        let r = long_tail_metric(&x).unwrap();
        let mut s: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        s.sort_by(f64::total_cmp);
        let expect = (s[s.len() - 1] - s[0]) / (percentile(&s, 99.0) - percentile(&s, 1.0));
        assert!((r.ratio - expect).abs() < 1e-12);
        // Range of 2e4 normals is about 8σ against a 4.65σ body.
        assert!(r.ratio > 1.4 && r.ratio < 2.2, "{}", r.ratio);
    }

    #[test]
    fn fidelity_examples() {
        let a = vec![vec![1.0f32, -2.0, 0.5], vec![0.3, 0.1, -0.7]];
        let f = fidelity_metrics(&a, &a).unwrap();
        assert!((f.cosine - 1.0).abs() < 1e-12);
        assert_eq!((f.top1_agreement, f.mean_abs_err), (1.0, 0.0));
        let neg: Vec<Vec<f32>> = a.iter().map(|v| v.iter().map(|x| -x).collect()).collect();
        assert!((fidelity_metrics(&a, &neg).unwrap().cosine + 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_logits_agree_at_chance() {
        let a: Vec<Vec<f32>> = (0..1000).map(|i| seeded_normal(i, &[10], 0.0, 1.0).unwrap().into_data()).collect();
        let b: Vec<Vec<f32>> = (0..1000).map(|i| seeded_normal(10_000 + i, &[10], 0.0, 1.0).unwrap().into_data()).collect();
        let f = fidelity_metrics(&a, &b).unwrap();
        assert!((f.top1_agreement - 0.1).abs() < 0.05, "{}", f.top1_agreement);
    }
}
