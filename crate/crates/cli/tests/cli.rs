use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tbcal_core::io::{read_trace, write_trace};

fn tbcal() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tbcal"));
    c.env_remove("TBCAL_OUT_DIR");
    c
}

fn config(source: &str, duration: f64, extra: &str) -> String {
    format!(
        r#"seed = 11
{extra}
[source]
{source}

[detector1]
id = "d1"
eta = 0.4
pulse = {{ shape = "rectangular", width = 1e-8 }}
gain = {{ kind = "deterministic", mean = 1.0 }}

[detector2]
id = "d2"
eta = 0.6
pulse = {{ shape = "rectangular", width = 1e-8 }}
gain = {{ kind = "deterministic", mean = 1.0 }}

[acquisition]
dt = 1e-9
duration = {duration}
n_segments = 20
tau_max = 5e-8

[[estimators]]
kind = "integrated_spdc"

[[estimators]]
kind = "ratio_spdc"
excess_noise = 1.0
q1_mean = 1.0
"#
    )
}

const SPONTANEOUS: &str = "mode = \"spontaneous\"\nmean_flux = 5e8\ncoherence_time = 2e-12";

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn simulate(cfg: &Path, out: &Path, threads: usize) -> Output {
    let o = run(tbcal()
        .args(["--threads", &threads.to_string(), "simulate"])
        .arg(cfg)
        .arg("--out-dir")
        .arg(out));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    o
}

#[test]
fn simulate_writes_traces_matching_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", &config(SPONTANEOUS, 0.002, ""));
    let out = tmp.path().join("out");
    let o = simulate(&cfg, &out, 0);
    let stdout = String::from_utf8(o.stdout).unwrap();
    let hash_line = stdout.lines().next().unwrap();
    assert!(hash_line.starts_with("# config_hash = "));
    let hash = hash_line.trim_start_matches("# config_hash = ");

    for (name, id) in [("trace1.tbt", "d1"), ("trace2.tbt", "d2")] {
        let t = read_trace(&out.join(name)).unwrap();
        assert_eq!(t.dt, 1e-9);
        assert_eq!(t.len(), 2_000_000);
        assert_eq!(t.meta.detector_id, id);
        assert_eq!(t.meta.rng_seed, 11);
        assert_eq!(t.meta.config_hash, hash);
    }
    assert!(!out.join("unpumped1.tbt").exists());
    assert!(out.join("config.resolved.toml").exists());
}

#[test]
fn simulate_is_byte_identical_across_runs_and_threads() {
    let tmp = tempfile::tempdir().unwrap();
    let text = config(SPONTANEOUS, 0.001, "unpumped_run = true");
    let cfg = write_config(tmp.path(), "run.toml", &text);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    simulate(&cfg, &a, 1);
    simulate(&cfg, &b, 3);
    for name in ["trace1.tbt", "trace2.tbt", "unpumped1.tbt", "unpumped2.tbt"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn strong_gain_exits_with_regime_code() {
    let tmp = tempfile::tempdir().unwrap();
    let source = "mode = \"spontaneous\"\ngain = 1.0\ncoherence_time = 2e-12";
    let cfg = write_config(tmp.path(), "run.toml", &config(source, 0.001, ""));
    let o = run(tbcal().arg("simulate").arg(&cfg).arg("--out-dir").arg(tmp.path()));
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    assert!(!tmp.path().join("trace1.tbt").exists());
}

#[test]
fn configuration_errors_are_located() {
    let tmp = tempfile::tempdir().unwrap();
    let broken = write_config(tmp.path(), "broken.toml", "seed = 1\n[source\nmode = 1\n");
    let o = run(tbcal().arg("validate-config").arg(&broken));
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("broken.toml") && stderr(&o).contains("line 2"), "{}", stderr(&o));

    let coarse = config(SPONTANEOUS, 0.001, "").replace("dt = 1e-9", "dt = 4e-9");
    let p = write_config(tmp.path(), "coarse.toml", &coarse);
    let o = run(tbcal().arg("validate-config").arg(&p));
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("detector1"), "{}", stderr(&o));

    let o = run(tbcal().arg("validate-config").arg(tmp.path().join("missing.toml")));
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("missing.toml"));

    let o = run(tbcal().arg("simulate"));
    assert_eq!(code(&o), 2);
}

#[test]
fn validate_config_hash_ignores_key_order() {
    let tmp = tempfile::tempdir().unwrap();
    let a = write_config(tmp.path(), "a.toml", &config(SPONTANEOUS, 0.001, ""));
    let shuffled = config(
        "coherence_time = 2e-12\nmean_flux = 500000000.0\nmode = \"spontaneous\"",
        0.001,
        "",
    )
    .replace(
        "dt = 1e-9\nduration = 0.001\nn_segments = 20\ntau_max = 5e-8",
        "tau_max = 5e-8\nn_segments = 20\nduration = 0.001\ndt = 1e-9",
    );
    let b = write_config(tmp.path(), "b.toml", &shuffled);
    let first_line = |p: &Path| {
        let o = run(tbcal().arg("validate-config").arg(p));
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        String::from_utf8(o.stdout).unwrap().lines().next().unwrap().to_string()
    };
    assert_eq!(first_line(&a), first_line(&b));
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn outcome<'a>(r: &'a Value, name: &str) -> &'a Value {
    r["outcomes"]
        .as_array()
        .unwrap()
        .iter()
        .find(|o| o["estimator"] == name)
        .unwrap()
}

#[test]
fn calibrate_recovers_the_efficiency() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", &config(SPONTANEOUS, 0.01, "unpumped_run = true"));
    let sim = tmp.path().join("sim");
    simulate(&cfg, &sim, 0);

    let cal = tmp.path().join("cal");
    let o = run(tbcal()
        .arg("calibrate")
        .arg("--trace1")
        .arg(sim.join("trace1.tbt"))
        .arg("--trace2")
        .arg(sim.join("trace2.tbt"))
        .arg("--unpumped1")
        .arg(sim.join("unpumped1.tbt"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out-dir")
        .arg(&cal));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = report(&cal);
    for name in ["integrated_spdc", "ratio_spdc"] {
        let rep = &outcome(&r, name)["report"];
        let eta_q = rep["eta_q"].as_f64().unwrap();
        let sigma = rep["stat_uncertainty"].as_f64().unwrap() * eta_q;
        assert!((eta_q - 0.6).abs() <= 3.0 * sigma, "{name}: {eta_q} +/- {sigma}");
    }
    assert!(outcome(&r, "ratio_spdc")["report"]["warnings"]
        .as_array()
        .unwrap()
        .is_empty());
    for f in ["cross.csv", "cross.json", "auto1.csv", "auto1.json", "auto1_unpumped.csv"] {
        assert!(cal.join(f).exists(), "{f}");
    }
    let header = fs::read_to_string(cal.join("cross.csv")).unwrap();
    assert!(header.starts_with("lag_seconds,value,stderr\n"));
}

#[test]
fn ratio_without_unpumped_trace_warns() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", &config(SPONTANEOUS, 0.002, ""));
    let sim = tmp.path().join("sim");
    simulate(&cfg, &sim, 0);
    let o = run(tbcal()
        .arg("calibrate")
        .arg("--trace1")
        .arg(sim.join("trace1.tbt"))
        .arg("--trace2")
        .arg(sim.join("trace2.tbt"))
        .args(["--estimator", "ratio-spdc", "--out-dir"])
        .arg(tmp.path().join("cal")));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("without background subtraction"));
    let r = report(&tmp.path().join("cal"));
    let warnings = outcome(&r, "ratio_spdc")["report"]["warnings"].to_string();
    assert!(warnings.contains("background subtraction skipped"), "{warnings}");
}

#[test]
fn external_csv_traces_give_the_same_result() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", &config(SPONTANEOUS, 0.002, ""));
    let sim = tmp.path().join("sim");
    simulate(&cfg, &sim, 0);
    // Bare `time,value` files with no metadata line, as another tool would
    // write them.
    for k in [1, 2] {
        let t = read_trace(&sim.join(format!("trace{k}.tbt"))).unwrap();
        let mut csv = String::from("time,value\n");
        for (i, v) in t.samples.iter().enumerate() {
            csv.push_str(&format!("{},{v}\n", t.t0 + i as f64 * t.dt));
        }
        fs::write(sim.join(format!("ext{k}.csv")), csv).unwrap();
        // The documented CSV form with metadata must round-trip exactly.
        let with_meta = sim.join(format!("meta{k}.csv"));
        write_trace(&with_meta, &t).unwrap();
        assert_eq!(read_trace(&with_meta).unwrap(), t);
    }
    let calibrate = |t1: &str, t2: &str, out: &str| {
        let o = run(tbcal()
            .arg("calibrate")
            .arg("--trace1")
            .arg(sim.join(t1))
            .arg("--trace2")
            .arg(sim.join(t2))
            .arg("--out-dir")
            .arg(tmp.path().join(out)));
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        outcome(&report(&tmp.path().join(out)), "integrated_spdc")["report"]["eta_q"]
            .as_f64()
            .unwrap()
    };
    let binary = calibrate("trace1.tbt", "trace2.tbt", "bin");
    let external = calibrate("ext1.csv", "ext2.csv", "ext");
    let documented = calibrate("meta1.csv", "meta2.csv", "meta");
    assert_eq!(binary, documented);
    assert!((binary - external).abs() <= 1e-9 * binary.abs(), "{binary} vs {external}");
}

#[test]
fn damaged_trace_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", &config(SPONTANEOUS, 0.001, ""));
    let sim = tmp.path().join("sim");
    simulate(&cfg, &sim, 0);
    let bytes = fs::read(sim.join("trace2.tbt")).unwrap();
    fs::write(sim.join("cut.tbt"), &bytes[..bytes.len() / 2]).unwrap();
    let o = run(tbcal()
        .arg("calibrate")
        .arg("--trace1")
        .arg(sim.join("trace1.tbt"))
        .arg("--trace2")
        .arg(sim.join("cut.tbt"))
        .arg("--out-dir")
        .arg(tmp.path()));
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("truncated"));
}

#[test]
fn sweep_needs_four_durations() {
    let tmp = tempfile::tempdir().unwrap();
    let extra = "[sweep]\ndurations = [0.001]\nrepetitions = 30\nestimator = { kind = \"integrated_spdc\" }\n";
    let text = format!("{}\n{extra}", config(SPONTANEOUS, 0.001, ""));
    let cfg = write_config(tmp.path(), "sweep.toml", &text);
    let o = run(tbcal().arg("sweep").arg(&cfg).arg("--out-dir").arg(tmp.path()));
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("at least 4"));
}

fn sweep_footer(source: &str, estimator: &str) -> Value {
    let tmp = tempfile::tempdir().unwrap();
    let extra = format!(
        "[sweep]\ndurations = [2e-4, 5e-4, 1e-3, 2e-3]\nrepetitions = 30\nestimator = {{ {estimator} }}\n"
    );
    let text = format!("{}\n{extra}", config(source, 2e-4, "").replace("n_segments = 20", "n_segments = 4"));
    let cfg = write_config(tmp.path(), "sweep.toml", &text);
    let o = run(tbcal().arg("sweep").arg(&cfg).arg("--out-dir").arg(tmp.path()));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(tmp.path().join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "T,sigma_empirical,sigma_predicted,mean_estimate,repetitions");
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 5);
    let footer = csv.lines().last().unwrap().trim_start_matches("# ");
    serde_json::from_str(footer).unwrap()
}

#[test]
fn spontaneous_sweep_slope_is_near_minus_half() {
    let f = sweep_footer(SPONTANEOUS, "kind = \"ratio_spdc\", excess_noise = 1.0, q1_mean = 1.0");
    let slope = f["slope_fit"].as_f64().unwrap();
    // Thirty runs per point leave about 0.08 of scatter on the fitted slope.
    assert!((slope + 0.5).abs() < 0.25, "{f}");
}

#[test]
fn stimulated_sweep_has_the_same_contract() {
    let source = "mode = \"stimulated\"\nseed_flux = 1e9\ngain = 0.01\ncoherence_time = 2e-12";
    let f = sweep_footer(source, "kind = \"integrated_stimulated\"");
    assert!(f["slope_fit"].as_f64().unwrap().is_finite());
    assert!((f["truth"].as_f64().unwrap() - 0.6).abs() < 1e-12);
    // Arm 2 sees (1 + V) phi photons/s.
    assert!((f["photons_per_response"].as_f64().unwrap() - 0.6 * 1.01e9 * 1e-8).abs() < 1e-9);
}

#[test]
fn predict_dumps_the_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", &config(SPONTANEOUS, 0.01, ""));
    let o = run(tbcal().arg("predict").arg(&cfg).arg("--curves").env("TBCAL_OUT_DIR", tmp.path().join("env")));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let cross = v["prediction"]["integral_cross"].as_f64().unwrap();
    // eta1 eta2 F (1 + V)
    assert!((cross / (0.24 * 5e8 * 1.001) - 1.0).abs() < 1e-12);
    assert_eq!(v["regime"], "II");
    assert!(tmp.path().join("env").join("prediction.csv").exists());
}
