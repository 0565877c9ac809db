//! Monte Carlo harness for the scaling of the statistical uncertainty with
//! measurement time.

use serde::{Deserialize, Serialize};

use crate::calibrator::Calibrator;
use crate::correlator::mean_stderr;
use crate::error::{Error, Result};
use crate::oracle::predicted_relative_uncertainty;
use crate::pipeline::{simulate_run, Analysis, EstimatorSpec, RunPlan};
use crate::rng::derive_seed;
use crate::source::SourceMode;

pub const MIN_DURATIONS: usize = 4;
pub const MIN_REPETITIONS: usize = 30;
/// Required span of the measurement times, as a ratio.
pub const MIN_DURATION_SPAN: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Measurement times, seconds.
    pub durations: Vec<f64>,
    pub repetitions: usize,
    /// Estimator applied to every repetition.
    pub estimator: EstimatorSpec,
    /// When false every repetition reuses the base seed (zero scatter).
    #[serde(default = "yes")]
    pub fresh_seeds: bool,
    /// Whether each repetition also records an unpumped run.
    #[serde(default)]
    pub unpumped_run: bool,
}

fn yes() -> bool {
    true
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.durations.len() < MIN_DURATIONS {
            return Err(Error::config(format!(
                "sweep needs at least {MIN_DURATIONS} measurement times, got {}",
                self.durations.len()
            )));
        }
        if self.durations.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::config("sweep durations must be finite and > 0"));
        }
        let lo = self.durations.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.durations.iter().cloned().fold(0.0, f64::max);
        if hi / lo < MIN_DURATION_SPAN * (1.0 - 1e-12) {
            return Err(Error::config(format!(
                "sweep durations must span at least a factor {MIN_DURATION_SPAN}, got {:.3}",
                hi / lo
            )));
        }
        if self.repetitions < MIN_REPETITIONS {
            return Err(Error::config(format!(
                "sweep needs at least {MIN_REPETITIONS} repetitions, got {}",
                self.repetitions
            )));
        }
        self.estimator.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub duration: f64,
    pub repetitions: usize,
    /// Mean of the estimates, charge units per photon.
    pub mean_estimate: f64,
    /// Sample standard deviation of `estimate / truth`.
    pub sigma_empirical: f64,
    pub sigma_predicted: f64,
}

/// Least-squares line through `(ln T, ln sigma)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub slope: f64,
    pub slope_stderr: f64,
    pub intercept: f64,
    /// Fitted sigma at T = 1 s.
    pub sigma_at_1s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub fit: ScalingFit,
    /// True `eta_2 <q_2>` of the configuration.
    pub truth: f64,
    /// `eta_2 F tau_p`, detected photons per response time.
    pub photons_per_response: f64,
}

/// Ordinary least squares `y = a + b x`; returns `(b, stderr(b), a)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let resid: f64 = x.iter().zip(y).map(|(u, v)| (v - a - b * u).powi(2)).sum();
    let se = if x.len() > 2 {
        (resid / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    (b, se, a)
}

pub fn fit_scaling(rows: &[SweepRow]) -> ScalingFit {
    let x: Vec<f64> = rows.iter().map(|r| r.duration.ln()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.sigma_empirical.ln()).collect();
    let (slope, slope_stderr, intercept) = linear_fit(&x, &y);
    ScalingFit {
        slope,
        slope_stderr,
        intercept,
        sigma_at_1s: intercept.exp(),
    }
}

/// Photon flux reaching detector 2.
fn arm2_flux(plan: &RunPlan) -> f64 {
    match plan.source.mode {
        SourceMode::Spontaneous => plan.source.mean_flux,
        SourceMode::Stimulated => plan.source.arm_fluxes().1,
    }
}

/// Estimates from `repetitions` independent runs of `plan` at duration `t`.
///
/// Repetitions run one after another; each run already parallelizes
/// internally, and full-length traces do not fit in memory many times over.
pub fn repeat_estimates(
    plan: &RunPlan,
    spec: &EstimatorSpec,
    cal: &Calibrator,
    repetitions: usize,
    fresh_seeds: bool,
    unpumped_run: bool,
    stream: u64,
) -> Result<Vec<f64>> {
    let base = plan.source.rng_seed;
    (0..repetitions)
        .map(|r| {
            let seed = if fresh_seeds {
                derive_seed(base, (stream << 32) | r as u64)
            } else {
                base
            };
            let p = plan.with_seed(seed);
            let run = simulate_run(&p, unpumped_run)?;
            let analysis = Analysis::from_run(&run, &p.acquisition)?;
            Ok(analysis.estimate(cal, spec)?.eta_q)
        })
        .collect()
}

/// Repeats the full pipeline at every duration and fits `ln sigma` against
/// `ln T`. Rows come back sorted by duration.
pub fn run_uncertainty_sweep(base: &RunPlan, spec: &SweepSpec, cal: &Calibrator) -> Result<SweepResult> {
    spec.validate()?;
    let truth = base.detector2.eta * base.detector2.gain.mean() / (1.0 - cal.budget.crystal_loss);
    let (eta2, flux, tau_p) = (base.detector2.eta, arm2_flux(base), base.detector2.pulse.width());
    let mut durations = spec.durations.clone();
    durations.sort_by(f64::total_cmp);

    let mut rows = Vec::with_capacity(durations.len());
    for (i, &t) in durations.iter().enumerate() {
        let mut plan = base.clone();
        plan.source.duration = t;
        plan.validate()?;
        let est = repeat_estimates(
            &plan,
            &spec.estimator,
            cal,
            spec.repetitions,
            spec.fresh_seeds,
            spec.unpumped_run,
            i as u64 + 1,
        )?;
        let rel: Vec<f64> = est.iter().map(|e| e / truth).collect();
        let (mean_rel, se) = mean_stderr(&rel);
        let sigma = se * (rel.len() as f64).sqrt();
        rows.push(SweepRow {
            duration: t,
            repetitions: spec.repetitions,
            mean_estimate: mean_rel * truth,
            sigma_empirical: sigma,
            sigma_predicted: predicted_relative_uncertainty(eta2, flux, tau_p, t)?,
        });
    }
    let fit = fit_scaling(&rows);
    Ok(SweepResult {
        rows,
        fit,
        truth,
        photons_per_response: eta2 * flux * tau_p,
    })
}

/// CSV table with a JSON footer line carrying the fit.
pub fn sweep_csv(result: &SweepResult) -> String {
    let mut out = String::from("T,sigma_empirical,sigma_predicted,mean_estimate,repetitions\n");
    for r in &result.rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.duration, r.sigma_empirical, r.sigma_predicted, r.mean_estimate, r.repetitions
        ));
    }
    let footer = serde_json::json!({
        "slope_fit": result.fit.slope,
        "slope_stderr": result.fit.slope_stderr,
        "sigma_at_1s": result.fit.sigma_at_1s,
        "truth": result.truth,
        "photons_per_response": result.photons_per_response,
    });
    out.push_str(&format!("# {footer}\n"));
    out
}
