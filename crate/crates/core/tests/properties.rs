//! Randomized invariants.

use proptest::prelude::*;

use tbcal_core::calibrator::classify_regime;
use tbcal_core::correlator::covariance;
use tbcal_core::io::{read_trace_binary, write_trace_binary};
use tbcal_core::pulse::{overlap, sampled_overlap};
use tbcal_core::source::window_counts;
use tbcal_core::{CurrentTrace, PulseShape, Regime, RegimeThresholds, RunConfig, TraceMeta};

fn shape() -> impl Strategy<Value = PulseShape> {
    (0..3u8, 1e-9..5e-8f64).prop_map(|(k, width)| match k {
        0 => PulseShape::Rectangular { width },
        1 => PulseShape::OneSidedExponential { width },
        _ => PulseShape::Gaussian { width },
    })
}

/// Sections of a valid config as `(header, key lines)`.
fn sections(eta1: f64, eta2: f64) -> Vec<(&'static str, Vec<String>)> {
    let det = |eta: f64| {
        vec![
            format!("eta = {eta:?}"),
            r#"pulse = { shape = "gaussian", width = 1e-8 }"#.to_string(),
            r#"gain = { kind = "exponential", mean = 2.0 }"#.to_string(),
        ]
    };
    vec![
        (
            "[source]",
            vec![
                r#"mode = "spontaneous""#.into(),
                "mean_flux = 5e8".into(),
                "coherence_time = 2e-12".into(),
            ],
        ),
        ("[detector1]", det(eta1)),
        ("[detector2]", det(eta2)),
        (
            "[acquisition]",
            vec![
                "dt = 1e-9".into(),
                "duration = 0.001".into(),
                "n_segments = 4".into(),
                "tau_max = 5e-8".into(),
            ],
        ),
        ("[[estimators]]", vec![r#"kind = "integrated_spdc""#.into()]),
    ]
}

fn render(secs: &[(&str, Vec<String>)], order: &[usize], key_rot: usize) -> String {
    let mut out = String::from("seed = 3\n");
    for &i in order {
        let (head, keys) = &secs[i];
        out.push_str(head);
        out.push('\n');
        let n = keys.len();
        for j in 0..n {
            out.push_str(&keys[(j + key_rot) % n]);
            out.push('\n');
        }
    }
    out
}

fn trace(samples: Vec<f64>, dt: f64) -> CurrentTrace {
    CurrentTrace {
        dt,
        t0: 0.0,
        samples,
        meta: TraceMeta::new("p"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn overlap_is_symmetric_under_swap(a in shape(), b in shape(), x in -3.0..3.0f64) {
        let tau = x * a.width().max(b.width());
        let ab = overlap(&a, &b, tau);
        let ba = overlap(&b, &a, -tau);
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-9 * ab.abs().max(1.0 / a.width().max(b.width())));
    }

    #[test]
    fn sampled_overlap_keeps_unit_area(a in shape(), b in shape()) {
        // Sampling redistributes the overlap between lags but keeps its sum.
        let dt = a.width().min(b.width()) / 10.0;
        let reach = 15.0 * a.width().max(b.width());
        let n = (reach / dt).ceil() as i64;
        let sum: f64 = (-n..=n).map(|k| sampled_overlap(&a, &b, k as f64 * dt, dt)).sum::<f64>() * dt;
        prop_assert!((sum - 1.0).abs() < 1e-6, "sum {}", sum);
    }

    #[test]
    fn config_hash_ignores_layout(
        order in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle(),
        rot in 0..4usize,
        eta1 in 0.05..1.0f64,
        eta2 in 0.05..1.0f64,
    ) {
        let secs = sections(eta1, eta2);
        let base = RunConfig::from_toml_str(&render(&secs, &[0, 1, 2, 3, 4], 0)).unwrap();
        let shuffled = RunConfig::from_toml_str(&render(&secs, &order, rot)).unwrap();
        prop_assert_eq!(base.hash(), shuffled.hash());
        let other = RunConfig::from_toml_str(&render(&sections(eta1, (eta2 * 0.5).max(0.01)), &order, rot)).unwrap();
        prop_assert_ne!(base.hash(), other.hash());
    }

    #[test]
    fn binary_traces_round_trip_exactly(
        samples in prop::collection::vec(-1e12..1e12f64, 0..500),
        dt in 1e-12..1e-6f64,
    ) {
        let t = trace(samples, dt);
        let mut buf = Vec::new();
        write_trace_binary(&mut buf, &t).unwrap();
        let back = read_trace_binary(&buf[..]).unwrap();
        prop_assert_eq!(back.dt.to_bits(), t.dt.to_bits());
        prop_assert!(back.samples.iter().zip(&t.samples).all(|(x, y)| x.to_bits() == y.to_bits()));
        prop_assert_eq!(back.samples.len(), t.samples.len());
    }

    #[test]
    fn window_counts_keep_every_event_in_full_windows(
        mut times in prop::collection::vec(0.0..1.0f64, 0..400),
        window in 0.01..0.3f64,
    ) {
        times.sort_by(f64::total_cmp);
        let counts = window_counts(&times, window, 1.0);
        let n = (1.0 / window).floor() as usize;
        prop_assert_eq!(counts.len(), n);
        let inside = times.iter().filter(|&&t| ((t / window) as usize) < n).count();
        prop_assert_eq!(counts.iter().map(|&c| c as usize).sum::<usize>(), inside);
    }

    #[test]
    fn cross_covariance_reverses_under_swap(
        a in prop::collection::vec(-10.0..10.0f64, 800),
        b in prop::collection::vec(-10.0..10.0f64, 800),
    ) {
        let (ta, tb) = (trace(a, 1e-9), trace(b, 1e-9));
        let ab = covariance(&ta, &tb, 5e-9, 2).unwrap();
        let ba = covariance(&tb, &ta, 5e-9, 2).unwrap();
        let n = ab.n_lags();
        for i in 0..n {
            prop_assert_eq!(ab.values[i].to_bits(), ba.values[n - 1 - i].to_bits());
            prop_assert_eq!(ab.stderr[i].to_bits(), ba.stderr[n - 1 - i].to_bits());
        }
    }

    #[test]
    fn regime_only_climbs_with_gain_and_flux(
        flux in 1e3..1e12f64,
        tau in 1e-10..1e-7f64,
        gain in 0.0..0.1f64,
        up in 1.0..100.0f64,
    ) {
        let th = RegimeThresholds::default();
        let rank = |r: Regime| match r { Regime::I => 0, Regime::II => 1, Regime::III => 2 };
        let base = rank(classify_regime(flux, tau, gain, &th));
        prop_assert!(rank(classify_regime(flux * up, tau, gain, &th)) >= base);
        prop_assert!(rank(classify_regime(flux, tau, gain * up, &th)) >= base);
        if gain >= th.gain {
            prop_assert_eq!(base, 2);
        }
    }
}
