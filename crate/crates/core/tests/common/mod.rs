//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

/// Brute-force reference detector. For every sample it rebuilds the baseline
/// from scratch: all earlier non-flagged samples of the same source with
/// timestamps in `[t - span, t)`, then applies the two-pass mean and
/// population sd.
pub fn oracle_anomalies(
    samples: &[(String, u64, f64)],
    threshold: f64,
    span_ms: u64,
    min_samples: usize,
    eps: f64,
) -> Vec<(String, u64, f64)> {
    let mut kept: BTreeMap<&str, Vec<(u64, f64)>> = BTreeMap::new();
    let mut out = Vec::new();
    for (src, t, x) in samples {
        let hist = kept.entry(src.as_str()).or_default();
        // older samples can never re-enter a window; dropping them only saves time
        hist.retain(|(ts, _)| ts + span_ms >= *t);
        let window: Vec<f64> = hist
            .iter()
            .filter(|(ts, _)| *ts < *t && ts + span_ms >= *t)
            .map(|(_, v)| *v)
            .collect();
        if window.len() < min_samples {
            hist.push((*t, *x));
            continue;
        }
        let n = window.len() as f64;
        let mean = window.iter().sum::<f64>() / n;
        let sd = (window.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let z = if sd < eps { 0.0 } else { (x - mean) / sd };
        if z.abs() >= threshold {
            out.push((src.clone(), *t, z));
        } else {
            hist.push((*t, *x));
        }
    }
    out
}

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}
