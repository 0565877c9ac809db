//! Correlator against independent oracles.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tbcal_core::correlator::{autocovariance, covariance, mean_stderr};
use tbcal_core::frontend::{CurrentTrace, DetectorModel, GainDistribution, TraceMeta};
use tbcal_core::io::correlation_csv;
use tbcal_core::oracle::predict;
use tbcal_core::pipeline::simulate;
use tbcal_core::pulse::PulseShape;
use tbcal_core::source::SourceConfig;
use tbcal_core::Error;

const DT: f64 = 1e-9;

fn white(n: usize, seed: u64) -> CurrentTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CurrentTrace {
        dt: DT,
        t0: 0.0,
        samples: (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
        meta: TraceMeta::new(format!("white{seed}")),
    }
}

#[test]
fn independent_noise_has_no_cross_covariance() {
    let (a, b) = (white(2_000_000, 1), white(2_000_000, 2));
    let rec = covariance(&a, &b, 30e-9, 20).unwrap();
    for (i, (&v, &se)) in rec.values.iter().zip(&rec.stderr).enumerate() {
        assert!(v.abs() < 5.0 * se, "lag {}: {v} +/- {se}", rec.lags[i]);
    }
    let auto = autocovariance(&a, 30e-9, 20).unwrap();
    // Unit variance at zero lag, nothing elsewhere.
    assert!((auto.values[0] - 1.0).abs() < 5.0 * auto.stderr[0]);
    for (&v, &se) in auto.values.iter().zip(&auto.stderr).skip(1) {
        assert!(v.abs() < 5.0 * se);
    }
}

#[test]
fn shifted_copy_peaks_at_the_shift() {
    let a = white(400_000, 3);
    let mut b = a.clone();
    b.samples.rotate_right(7);
    let rec = covariance(&a, &b, 20e-9, 4).unwrap();
    let (peak, _) = rec
        .values
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |m, (i, &v)| if v > m.1 { (i, v) } else { m });
    assert!((rec.lags[peak] - 7e-9).abs() < 1e-15);
}

#[test]
fn cross_symmetry_is_bitwise() {
    let (a, b) = (white(300_000, 4), white(300_000, 5));
    let ab = covariance(&a, &b, 25e-9, 5).unwrap();
    let ba = covariance(&b, &a, 25e-9, 5).unwrap();
    let n = ab.n_lags();
    for i in 0..n {
        assert_eq!(ab.values[i].to_bits(), ba.values[n - 1 - i].to_bits());
    }
    assert_eq!(ab.swapped().values, ba.values);
}

#[test]
fn spdc_shape_matches_the_sampled_oracle() {
    let src = SourceConfig::spontaneous(Some(5e8), Some(1e-3), 2e-12, 5e-3, 21).unwrap();
    let d1 = DetectorModel::new(
        "d1",
        0.5,
        PulseShape::Gaussian { width: 10e-9 },
        GainDistribution::Deterministic { mean: 1.0 },
    );
    let d2 = DetectorModel::new(
        "d2",
        0.7,
        PulseShape::OneSidedExponential { width: 10e-9 },
        GainDistribution::Gamma { mean: 2.0, shape: 3.0 },
    );
    let p = predict(&src, &d1, &d2).unwrap();
    let (t1, t2) = simulate(&src, &d1, &d2, DT).unwrap();
    let rec = covariance(&t1, &t2, 60e-9, 40).unwrap();
    for ((&tau, &v), &se) in rec.lags.iter().zip(&rec.values).zip(&rec.stderr) {
        let o = p.sampled_cross(tau, DT);
        assert!((v - o).abs() < 5.0 * se, "lag {tau:e}: {v} vs {o} +/- {se}");
    }
    let integral = rec.integrate();
    assert!((integral.value - p.integral_cross).abs() < 5.0 * integral.stderr);
    assert!(integral.decayed);
}

#[test]
fn stderr_scales_as_inverse_root_of_block_count() {
    // Fixed block length; the number of blocks and hence T grows.
    let block = 100_000;
    let counts = [4usize, 8, 16, 32, 64];
    let mut x = vec![];
    let mut y = vec![];
    for (k, &n) in counts.iter().enumerate() {
        let a = white(n * block, 100 + k as u64);
        let b = white(n * block, 200 + k as u64);
        let rec = covariance(&a, &b, 10e-9, n).unwrap();
        let (mean_se, _) = mean_stderr(&rec.stderr);
        x.push((n as f64).ln());
        y.push(mean_se.ln());
    }
    let (slope, _, _) = tbcal_core::sweep::linear_fit(&x, &y);
    assert!((slope + 0.5).abs() < 0.1, "slope {slope}");
}

#[test]
fn too_short_or_mismatched_inputs_are_data_errors() {
    let a = white(10_000, 1);
    let b = white(9_999, 2);
    assert!(matches!(covariance(&a, &b, 5e-9, 4), Err(Error::Data(_))));
    assert!(matches!(covariance(&a, &a, 5e-9, 1), Err(Error::Data(_))));
    // 20 * 4 * 1e-6 s is longer than the 10 us trace.
    assert!(matches!(covariance(&a, &a, 1e-6, 4), Err(Error::Data(_))));
    let mut c = white(10_000, 3);
    c.dt = 2e-9;
    assert!(matches!(covariance(&a, &c, 5e-9, 4), Err(Error::Data(_))));
}

#[test]
fn csv_export_lists_every_lag() {
    let a = white(100_000, 8);
    let rec = autocovariance(&a, 5e-9, 4).unwrap();
    let csv = correlation_csv(&rec);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("lag_seconds,value,stderr"));
    assert_eq!(lines.count(), rec.n_lags());
}
