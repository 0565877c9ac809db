//! Shared fixtures for the benchmarks.

use tbcal_core::{CurrentTrace, DetectorModel, GainDistribution, PulseShape, SourceConfig, TraceMeta};

/// Deterministic pseudo-noise; the benches only need realistic sizes.
pub fn ramp_trace(n: usize, dt: f64) -> CurrentTrace {
    let mut x = 0x9e37_79b9_7f4a_7c15u64;
    let samples = (0..n)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            (x >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
        .collect();
    CurrentTrace {
        dt,
        t0: 0.0,
        samples,
        meta: TraceMeta::new("bench"),
    }
}

/// Regime-II source at 5e8 pairs/s.
pub fn spdc_source(duration: f64) -> SourceConfig {
    SourceConfig::spontaneous(Some(5e8), Some(1e-3), 2e-12, duration, 1).expect("valid source")
}

pub fn detector(eta: f64) -> DetectorModel {
    DetectorModel::new(
        "bench",
        eta,
        PulseShape::Gaussian { width: 10e-9 },
        GainDistribution::Exponential { mean: 1.0 },
    )
}
