//! `tbcal`: simulate twin-beam detector traces and calibrate detectors from
//! their current correlations.
//!
//! Exit status: 0 success, 1 I/O failure, 2 usage error, 3 invalid
//! configuration, 4 invalid or mismatched data, 5 unsupported regime,
//! 6 degenerate estimator denominator.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use tbcal_core::calibrator::{Calibrator, Regime, SystematicBudget};
use tbcal_core::config::RunConfig;
use tbcal_core::frontend::CurrentTrace;
use tbcal_core::io::{read_trace, write_correlation, write_events, write_trace};
use tbcal_core::oracle::{predict, predicted_relative_uncertainty};
use tbcal_core::pipeline::{run_estimators, simulate_run, Acquisition, Analysis, EstimatorSpec};
use tbcal_core::source::{generate, SourceMode};
use tbcal_core::sweep::{run_uncertainty_sweep, sweep_csv};
use tbcal_core::Error;

/// Writes to stdout; a closed pipe (as with `| head`) is not an error.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

/// Environment variable overriding the output directory.
const OUT_DIR_ENV: &str = "TBCAL_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "tbcal", version, about = "Absolute calibration of analog photodetectors with twin beams")]
struct Cli {
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Output directory. Overrides $TBCAL_OUT_DIR and the config's `output.dir`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate both detector traces (and the unpumped pair when configured).
    Simulate { config: PathBuf },
    /// Correlate two traces and run the estimators.
    Calibrate(CalibrateArgs),
    /// Repeat the pipeline over measurement times and fit the scaling.
    Sweep { config: PathBuf },
    /// Dump the analytic prediction for a configuration.
    Predict {
        config: PathBuf,
        /// Also write the sampled covariance curves as `prediction.csv`.
        #[arg(long)]
        curves: bool,
    },
    /// Check a configuration and print its resolved form and hash.
    ValidateConfig { config: PathBuf },
}

#[derive(Debug, clap::Args)]
struct CalibrateArgs {
    /// Detector 1 trace (binary, or CSV with a `.csv` extension).
    #[arg(long)]
    trace1: PathBuf,
    #[arg(long)]
    trace2: PathBuf,
    /// Detector 1 trace recorded with the pump off, for background removal.
    #[arg(long)]
    unpumped1: Option<PathBuf>,
    /// Take estimators, acquisition and calibration settings from this file;
    /// the flags below are then ignored.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Estimators to run.
    #[arg(long = "estimator", value_enum, default_values_t = [EstimatorArg::IntegratedSpdc])]
    estimators: Vec<EstimatorArg>,
    /// Excess noise factor M of detector 1 (ratio estimators).
    #[arg(long, default_value_t = 1.0)]
    excess_noise: f64,
    /// Mean charge of detector 1 (ratio estimators).
    #[arg(long, default_value_t = 1.0)]
    q1_mean: f64,
    /// Lag at which the ratio is evaluated, seconds.
    #[arg(long, default_value_t = 0.0)]
    tau_eval: f64,
    /// Also report the ratio of lag sums over |tau| <= this, seconds.
    #[arg(long)]
    average_half_width: Option<f64>,
    /// Mean charge of detector 2, to report the bare efficiency.
    #[arg(long)]
    q2_mean: Option<f64>,
    #[arg(long, default_value_t = 20)]
    n_segments: usize,
    /// Largest correlation lag, seconds.
    #[arg(long, default_value_t = 5e-8)]
    tau_max: f64,
    #[arg(long, value_enum, default_value_t = RegimeArg::Ii)]
    regime: RegimeArg,
    /// Fractional optical loss inside the crystal.
    #[arg(long, default_value_t = 0.0)]
    crystal_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EstimatorArg {
    RatioSpdc,
    IntegratedSpdc,
    RatioStimulated,
    IntegratedStimulated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RegimeArg {
    I,
    Ii,
    Iii,
}

#[derive(Debug)]
enum Failure {
    Core(Error),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

type Outcome = std::result::Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 1,
        Error::Config(_) => 3,
        Error::Data(_) => 4,
        Error::RegimeUnsupported(_) => 5,
        Error::DegenerateDenominator(_) => 6,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Simulate { config } => simulate(cli, config),
        Command::Calibrate(args) => calibrate(cli, args),
        Command::Sweep { config } => sweep(cli, config),
        Command::Predict { config, curves } => predict_cmd(cli, config, *curves),
        Command::ValidateConfig { config } => {
            let cfg = RunConfig::load(config)?;
            emit(&format!("# config_hash = {}\n{}", cfg.hash(), cfg.to_toml()?));
            Ok(())
        }
    }
}

/// Flag, then environment, then the configuration file.
fn output_dir(cli: &Cli, cfg: Option<&RunConfig>) -> std::io::Result<PathBuf> {
    let dir = cli
        .out_dir
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .or_else(|| cfg.map(|c| c.output.dir.clone()))
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn simulate(cli: &Cli, path: &Path) -> Outcome {
    let cfg = RunConfig::load(path)?;
    let hash = cfg.hash();
    let plan = cfg.plan()?;
    let dir = output_dir(cli, Some(&cfg))?;

    let ext = cfg.output.format.extension();
    let stamp = |mut t: CurrentTrace| {
        t.meta.config_hash = hash.clone();
        t
    };
    let run = simulate_run(&plan, cfg.unpumped_run)?;
    let mut written = vec![];
    let mut save = |name: &str, t: CurrentTrace| -> Outcome {
        let p = dir.join(format!("{name}.{ext}"));
        write_trace(&p, &stamp(t))?;
        written.push(p);
        Ok(())
    };
    save("trace1", run.trace1)?;
    save("trace2", run.trace2)?;
    if let Some((b1, b2)) = run.unpumped {
        save("unpumped1", b1)?;
        save("unpumped2", b2)?;
    }
    if cfg.output.write_events {
        let events = generate(&plan.source)?;
        let p = dir.join("events.tbe");
        let mut w = std::io::BufWriter::new(fs::File::create(&p)?);
        write_events(&mut w, &events)?;
        written.push(p);
    }
    let resolved = format!("# config_hash = {hash}\n{}", cfg.to_toml()?);
    fs::write(dir.join("config.resolved.toml"), &resolved)?;
    emit(&resolved);
    for p in written {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn estimator_from_args(kind: EstimatorArg, a: &CalibrateArgs) -> EstimatorSpec {
    match kind {
        EstimatorArg::IntegratedSpdc => EstimatorSpec::IntegratedSpdc,
        EstimatorArg::IntegratedStimulated => EstimatorSpec::IntegratedStimulated,
        EstimatorArg::RatioSpdc => EstimatorSpec::RatioSpdc {
            excess_noise: a.excess_noise,
            q1_mean: a.q1_mean,
            tau_eval: a.tau_eval,
            average_half_width: a.average_half_width,
        },
        EstimatorArg::RatioStimulated => EstimatorSpec::RatioStimulated {
            excess_noise: a.excess_noise,
            q1_mean: a.q1_mean,
            tau_eval: a.tau_eval,
            average_half_width: a.average_half_width,
        },
    }
}

fn calibrate(cli: &Cli, a: &CalibrateArgs) -> Outcome {
    let cfg = a.config.as_deref().map(RunConfig::load).transpose()?;
    let (cal, acq, specs) = match &cfg {
        Some(cfg) => {
            let plan = cfg.plan()?;
            if cfg.estimators.is_empty() {
                return Err(Failure::Usage(format!("{}: no [[estimators]] configured", cfg_path(a))));
            }
            (cfg.calibrator()?, plan.acquisition, cfg.estimators.clone())
        }
        None => {
            let regime = match a.regime {
                RegimeArg::I => Regime::I,
                RegimeArg::Ii => Regime::II,
                RegimeArg::Iii => Regime::III,
            };
            let mut cal = Calibrator::new(regime);
            cal.q2_mean = a.q2_mean;
            cal.budget = SystematicBudget {
                crystal_loss: a.crystal_loss,
                ..SystematicBudget::default()
            };
            cal.budget.validate()?;
            let acq = Acquisition {
                // Replaced by the traces' own step below.
                dt: 0.0,
                n_segments: a.n_segments,
                tau_max: a.tau_max,
            };
            let mut kinds = a.estimators.clone();
            kinds.dedup();
            (cal, acq, kinds.into_iter().map(|k| estimator_from_args(k, a)).collect())
        }
    };

    let t1 = read_trace(&a.trace1)?;
    let t2 = read_trace(&a.trace2)?;
    let bg = a.unpumped1.as_deref().map(read_trace).transpose()?;
    let acq = Acquisition { dt: t1.dt, ..acq };
    if specs.iter().any(EstimatorSpec::is_ratio) && bg.is_none() {
        eprintln!("warning: no unpumped trace given; ratio estimators run without background subtraction");
    }
    let analysis = Analysis::from_traces(&t1, &t2, bg.as_ref(), &acq)?;
    let outcomes = run_estimators(&analysis, &cal, &specs);

    let dir = output_dir(cli, cfg.as_ref())?;
    write_correlation(&dir, "cross", &analysis.cross)?;
    write_correlation(&dir, "auto1", &analysis.auto1)?;
    if let Some(b) = &analysis.auto1_background {
        write_correlation(&dir, "auto1_unpumped", b)?;
    }
    let traces: Vec<String> = [&t1, &t2]
        .into_iter()
        .chain(bg.as_ref())
        .map(|t| format!("{}@{}#{}", t.meta.detector_id, t.meta.config_hash, t.meta.rng_seed))
        .collect();
    let report = json!({
        "config_hash": cfg.as_ref().map(RunConfig::hash),
        "traces": traces,
        "outcomes": outcomes,
    });
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    fs::write(dir.join("report.json"), &text)?;
    emit(&text);
    for o in &outcomes {
        if let Some(e) = &o.error {
            eprintln!("warning: {} produced no estimate: {e}", o.estimator);
        }
    }
    Ok(())
}

fn cfg_path(a: &CalibrateArgs) -> String {
    a.config.as_deref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn sweep(cli: &Cli, path: &Path) -> Outcome {
    let cfg = RunConfig::load(path)?;
    let spec = cfg
        .sweep
        .clone()
        .ok_or_else(|| Error::Config(format!("{}: missing [sweep] section", path.display())))?;
    let plan = cfg.plan()?;
    let result = run_uncertainty_sweep(&plan, &spec, &cfg.calibrator()?)?;
    let dir = output_dir(cli, Some(&cfg))?;
    let csv = sweep_csv(&result);
    fs::write(dir.join("sweep.csv"), &csv)?;
    emit(&csv);
    Ok(())
}

fn predict_cmd(cli: &Cli, path: &Path, curves: bool) -> Outcome {
    let cfg = RunConfig::load(path)?;
    let plan = cfg.plan()?;
    let p = predict(&plan.source, &plan.detector1, &plan.detector2)?;
    let flux2 = match plan.source.mode {
        SourceMode::Spontaneous => plan.source.mean_flux,
        SourceMode::Stimulated => plan.source.arm_fluxes().1,
    };
    let tau_p = plan.detector2.pulse.width();
    let sigma = predicted_relative_uncertainty(plan.detector2.eta, flux2, tau_p, plan.source.duration)?;
    let out = json!({
        "config_hash": cfg.hash(),
        "regime": plan.regime(&cfg.thresholds()),
        "prediction": p,
        "eta_q_truth": plan.detector2.eta * plan.detector2.gain.mean(),
        "predicted_relative_uncertainty": sigma,
    });
    emit(&(serde_json::to_string_pretty(&out).expect("prediction serializes") + "\n"));
    if curves {
        let dir = output_dir(cli, Some(&cfg))?;
        let acq = plan.acquisition;
        let n = (acq.tau_max / acq.dt).round() as i64;
        let mut csv = String::from("lag_seconds,cross,auto1,auto2\n");
        for k in -n..=n {
            let tau = k as f64 * acq.dt;
            csv.push_str(&format!(
                "{tau},{},{},{}\n",
                p.sampled_cross(tau, acq.dt),
                p.sampled_auto1(tau, acq.dt),
                p.sampled_auto2(tau, acq.dt)
            ));
        }
        fs::write(dir.join("prediction.csv"), csv)?;
    }
    Ok(())
}
