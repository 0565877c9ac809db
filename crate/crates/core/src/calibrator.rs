//! Quantum-efficiency estimators built on current covariances.
//!
//! All estimators return `eta_2 <q_2>`, the mean charge delivered by
//! detector 2 per incident photon, in trace units. Statistical errors come
//! from the block scatter carried by the correlation records.

use serde::{Deserialize, Serialize};

use crate::correlator::{mean_covariance, mean_stderr, CorrelationRecord, RecordKind};
use crate::error::{Error, Result};

/// Boundary between the resolved-pulse and overlapping regimes, `F tau_p`.
pub const DEFAULT_OVERLAP_THRESHOLD: f64 = 0.1;
/// Gain above which the source counts as high-gain.
pub const DEFAULT_GAIN_THRESHOLD: f64 = 0.01;
/// Default uncertainty on the optical-loss correction.
pub const DEFAULT_LOSS_UNCERTAINTY: f64 = 2e-3;
/// A denominator within this many standard errors of zero is rejected.
pub const DENOMINATOR_SIGMAS: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// Pulses do not overlap on average.
    I,
    /// Overlapping pulses at low gain: the analog calibration regime.
    II,
    /// High gain, many photons per mode.
    III,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeThresholds {
    pub overlap: f64,
    pub gain: f64,
}

impl Default for RegimeThresholds {
    fn default() -> Self {
        RegimeThresholds {
            overlap: DEFAULT_OVERLAP_THRESHOLD,
            gain: DEFAULT_GAIN_THRESHOLD,
        }
    }
}

/// Regime from flux, response time and gain. High gain wins over overlap;
/// a mean occupancy `F tau_p` equal to the threshold still counts as
/// resolved.
pub fn classify_regime(flux: f64, tau_p: f64, gain: f64, th: &RegimeThresholds) -> Regime {
    if gain >= th.gain {
        Regime::III
    } else if flux * tau_p <= th.overlap * (1.0 + 1e-9) {
        Regime::I
    } else {
        Regime::II
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "RatioSPDC")]
    RatioSpdc,
    #[serde(rename = "IntegratedSPDC")]
    IntegratedSpdc,
    RatioStimulated,
    IntegratedStimulated,
}

impl EstimatorKind {
    /// Pairs per detected arm-1 photon in the cross term.
    fn prefactor(self) -> f64 {
        match self {
            EstimatorKind::RatioSpdc | EstimatorKind::IntegratedSpdc => 1.0,
            EstimatorKind::RatioStimulated | EstimatorKind::IntegratedStimulated => 0.5,
        }
    }

    fn stimulated(self) -> bool {
        matches!(self, EstimatorKind::RatioStimulated | EstimatorKind::IntegratedStimulated)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystematicTerm {
    pub name: String,
    /// Relative size.
    pub relative: f64,
}

/// Optical loss between crystal and detector, treated as a known
/// correction with its own uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystematicBudget {
    #[serde(default)]
    pub crystal_loss: f64,
    #[serde(default = "default_loss_uncertainty")]
    pub crystal_loss_uncertainty: f64,
}

fn default_loss_uncertainty() -> f64 {
    DEFAULT_LOSS_UNCERTAINTY
}

impl Default for SystematicBudget {
    fn default() -> Self {
        SystematicBudget {
            crystal_loss: 0.0,
            crystal_loss_uncertainty: DEFAULT_LOSS_UNCERTAINTY,
        }
    }
}

impl SystematicBudget {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.crystal_loss) {
            return Err(Error::config(format!(
                "crystal_loss must be in [0, 1), got {}",
                self.crystal_loss
            )));
        }
        if !(self.crystal_loss_uncertainty >= 0.0) {
            return Err(Error::config("crystal_loss_uncertainty must be >= 0"));
        }
        Ok(())
    }
}

/// Result of the lag-averaged ratio estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AveragedRatio {
    pub half_width: f64,
    pub eta_q: f64,
    pub stat_uncertainty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub estimator: EstimatorKind,
    /// `eta_2 <q_2>` after the loss correction, charge units per photon.
    pub eta_q: f64,
    /// Present only when `<q_2>` is known and the result lies in `(0, 1]`.
    pub eta: Option<f64>,
    /// Relative statistical uncertainty.
    pub stat_uncertainty: f64,
    pub systematic_terms: Vec<SystematicTerm>,
    /// Root-sum-square of the statistical and systematic terms, relative.
    pub total_uncertainty: f64,
    pub regime: Regime,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_eval: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lag_averaged: Option<AveragedRatio>,
    pub warnings: Vec<String>,
    pub inputs: Vec<String>,
    pub software_version: String,
}

impl CalibrationReport {
    /// Absolute statistical uncertainty on `eta_q`.
    pub fn stat_abs(&self) -> f64 {
        self.stat_uncertainty * self.eta_q.abs()
    }

    pub fn total_abs(&self) -> f64 {
        self.total_uncertainty * self.eta_q.abs()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Inputs to the ratio estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioOptions {
    /// Excess noise factor `<q_1^2>/<q_1>^2` of detector 1.
    pub excess_noise: f64,
    pub q1_mean: f64,
    /// Lag at which both records are read, seconds.
    #[serde(default)]
    pub tau_eval: f64,
    /// Half-width of the window for the lag-averaged variant; usually the
    /// pulse width.
    #[serde(default)]
    pub average_half_width: Option<f64>,
}

/// Mean current of arm 1 with its standard error, background removed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCurrent {
    pub value: f64,
    pub stderr: f64,
}

impl MeanCurrent {
    /// Arm-1 mean from the block means of a record, minus `offset` (the
    /// unpumped mean) with its own error.
    pub fn from_record(record: &CorrelationRecord, offset: f64, offset_stderr: f64) -> MeanCurrent {
        let blocks: Vec<f64> = record.block_means.iter().map(|m| m.0).collect();
        let (m, s) = if blocks.is_empty() {
            (record.means.0, 0.0)
        } else {
            mean_stderr(&blocks)
        };
        MeanCurrent {
            value: m - offset,
            stderr: s.hypot(offset_stderr),
        }
    }
}

/// Estimator context: regime, optional known mean charge, loss budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibrator {
    pub regime: Regime,
    #[serde(default)]
    pub q2_mean: Option<f64>,
    #[serde(default)]
    pub budget: SystematicBudget,
    #[serde(default)]
    pub provenance: Vec<String>,
}

impl Default for Calibrator {
    fn default() -> Self {
        Calibrator {
            regime: Regime::II,
            q2_mean: None,
            budget: SystematicBudget::default(),
            provenance: Vec::new(),
        }
    }
}

/// Relative error of `a / b` from block samples, including their covariance.
fn ratio_rel_error(a: f64, b: f64, a_blocks: &[f64], b_blocks: &[f64], a_se: f64, b_se: f64) -> f64 {
    let cov = if a_blocks.len() >= 2 && a_blocks.len() == b_blocks.len() {
        mean_covariance(a_blocks, b_blocks)
    } else {
        0.0
    };
    let r2 = (a_se / a).powi(2) + (b_se / b).powi(2) - 2.0 * cov / (a * b);
    r2.max(0.0).sqrt()
}

impl Calibrator {
    pub fn new(regime: Regime) -> Self {
        Calibrator {
            regime,
            ..Default::default()
        }
    }

    fn check_regime(&self, kind: EstimatorKind) -> Result<Vec<String>> {
        if self.regime == Regime::III && !kind.stimulated() {
            return Err(Error::RegimeUnsupported(
                "twin-beam analog calibration is not available in the high-gain regime".into(),
            ));
        }
        let mut warnings = Vec::new();
        if self.regime == Regime::I && !kind.stimulated() {
            warnings.push("regime I: pulses rarely overlap, photon counting is the natural method".into());
        }
        Ok(warnings)
    }

    fn finish(
        &self,
        estimator: EstimatorKind,
        raw: f64,
        stat: f64,
        mut warnings: Vec<String>,
        inputs: Vec<String>,
    ) -> CalibrationReport {
        let b = &self.budget;
        let eta_q = raw / (1.0 - b.crystal_loss);
        let systematic_terms = vec![SystematicTerm {
            name: "crystal_loss".into(),
            relative: b.crystal_loss_uncertainty,
        }];
        let total = systematic_terms
            .iter()
            .fold(stat * stat, |acc, t| acc + t.relative * t.relative)
            .sqrt();
        let eta = self.q2_mean.and_then(|q| {
            let e = eta_q / q;
            // Rounding may push an exact unit efficiency just above one.
            if e > 0.0 && e <= 1.0 + 1e-12 {
                Some(e.min(1.0))
            } else {
                warnings.push(format!("eta = {e} lies outside (0, 1]; omitted"));
                None
            }
        });
        let mut all_inputs = self.provenance.clone();
        all_inputs.extend(inputs);
        CalibrationReport {
            estimator,
            eta_q,
            eta,
            stat_uncertainty: stat,
            systematic_terms,
            total_uncertainty: total,
            regime: self.regime,
            tau_eval: None,
            lag_averaged: None,
            warnings,
            inputs: all_inputs,
            software_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    fn ratio(
        &self,
        kind: EstimatorKind,
        cross: &CorrelationRecord,
        auto1: &CorrelationRecord,
        opts: &RatioOptions,
    ) -> Result<CalibrationReport> {
        let warnings = self.check_regime(kind)?;
        if cross.kind != RecordKind::Cross || auto1.kind != RecordKind::Auto {
            return Err(Error::data("ratio estimators need a cross record and an auto record"));
        }
        if (cross.dt - auto1.dt).abs() > 1e-12 * cross.dt {
            return Err(Error::data("cross and auto records use different sample steps"));
        }
        if !(opts.excess_noise >= 1.0 && opts.q1_mean > 0.0) {
            return Err(Error::config("excess noise factor must be >= 1 and q1_mean > 0"));
        }
        let scale = kind.prefactor() * opts.excess_noise * opts.q1_mean;

        let ic = cross.lag_index(opts.tau_eval)?;
        let ia = auto1.lag_index(opts.tau_eval)?;
        let (c, a) = (cross.values[ic], auto1.values[ia]);
        let a_se = auto1.stderr[ia];
        if !(a > 0.0 && a > DENOMINATOR_SIGMAS * a_se) {
            return Err(Error::DegenerateDenominator(format!(
                "auto-covariance at lag {:e} s is {a:e} +/- {a_se:e}",
                opts.tau_eval
            )));
        }
        let stat = ratio_rel_error(
            c,
            a,
            &cross.block_column(ic),
            &auto1.block_column(ia),
            cross.stderr[ic],
            a_se,
        );
        let inputs = cross.sources.iter().chain(&auto1.sources).cloned().collect();
        let mut report = self.finish(kind, scale * c / a, stat, warnings, inputs);
        report.tau_eval = Some(cross.lags[ic]);

        if let Some(w) = opts.average_half_width {
            report.lag_averaged = Some(self.averaged_ratio(cross, auto1, w, scale)?);
        }
        Ok(report)
    }

    /// Ratio of lag sums over `|tau| <= w`, reusing the same lags in both
    /// records.
    fn averaged_ratio(&self, cross: &CorrelationRecord, auto1: &CorrelationRecord, w: f64, scale: f64) -> Result<AveragedRatio> {
        let mut wc = vec![0.0; cross.n_lags()];
        let mut wa = vec![0.0; auto1.n_lags()];
        for (i, &t) in cross.lags.iter().enumerate() {
            if t.abs() <= w * (1.0 + 1e-9) {
                wc[i] = 1.0;
                wa[auto1.lag_index(t)?] += 1.0;
            }
        }
        let sum = |r: &CorrelationRecord, w: &[f64]| r.values.iter().zip(w).map(|(v, w)| v * w).sum::<f64>();
        let (c, a) = (sum(cross, &wc), sum(auto1, &wa));
        if !(a > 0.0) {
            return Err(Error::DegenerateDenominator("lag-summed auto-covariance is not positive".into()));
        }
        let cb = cross.block_sums(&wc);
        let ab = auto1.block_sums(&wa);
        let quad = |r: &CorrelationRecord, w: &[f64]| {
            r.stderr.iter().zip(w).map(|(s, w)| (s * w).powi(2)).sum::<f64>().sqrt()
        };
        let c_se = if cb.len() >= 2 { mean_stderr(&cb).1 } else { quad(cross, &wc) };
        let a_se = if ab.len() >= 2 { mean_stderr(&ab).1 } else { quad(auto1, &wa) };
        Ok(AveragedRatio {
            half_width: w,
            eta_q: scale * c / a / (1.0 - self.budget.crystal_loss),
            stat_uncertainty: ratio_rel_error(c, a, &cb, &ab, c_se, a_se),
        })
    }

    fn integrated(&self, kind: EstimatorKind, cross: &CorrelationRecord, mean_i1: MeanCurrent) -> Result<CalibrationReport> {
        let mut warnings = self.check_regime(kind)?;
        if cross.kind != RecordKind::Cross {
            return Err(Error::data("integrated estimators need a cross record"));
        }
        if !(mean_i1.value > 0.0) {
            return Err(Error::DegenerateDenominator(format!(
                "mean arm-1 current is {:e}",
                mean_i1.value
            )));
        }
        let integral = cross.integrate();
        if !integral.decayed {
            warnings.push("WindowTooShort: cross-covariance has not decayed at the window edge".into());
        }
        let rel_i = if integral.value != 0.0 {
            integral.stderr / integral.value.abs()
        } else {
            f64::INFINITY
        };
        let stat = rel_i.hypot(mean_i1.stderr / mean_i1.value);
        let raw = kind.prefactor() * integral.value / mean_i1.value;
        Ok(self.finish(kind, raw, stat, warnings, cross.sources.clone()))
    }

    /// `M <q_1> C_12(tau) / C_11(tau)`.
    pub fn estimate_ratio_spdc(&self, cross: &CorrelationRecord, auto1: &CorrelationRecord, opts: &RatioOptions) -> Result<CalibrationReport> {
        self.ratio(EstimatorKind::RatioSpdc, cross, auto1, opts)
    }

    /// `(1/2) M <q_1> C_12(tau) / C_11(tau)`.
    pub fn estimate_ratio_stimulated(&self, cross: &CorrelationRecord, auto1: &CorrelationRecord, opts: &RatioOptions) -> Result<CalibrationReport> {
        self.ratio(EstimatorKind::RatioStimulated, cross, auto1, opts)
    }

    /// `∫ C_12 / <i_1>`; needs neither the gain statistics nor the pulse shape.
    pub fn estimate_integrated_spdc(&self, cross: &CorrelationRecord, mean_i1: MeanCurrent) -> Result<CalibrationReport> {
        self.integrated(EstimatorKind::IntegratedSpdc, cross, mean_i1)
    }

    /// `(1/2) ∫ C_12 / <i_1>`.
    pub fn estimate_integrated_stimulated(&self, cross: &CorrelationRecord, mean_i1: MeanCurrent) -> Result<CalibrationReport> {
        self.integrated(EstimatorKind::IntegratedStimulated, cross, mean_i1)
    }
}

fn same_grid(a: &CorrelationRecord, b: &CorrelationRecord) -> bool {
    a.kind == b.kind
        && (a.dt - b.dt).abs() <= 1e-12 * a.dt.abs()
        && a.lags.len() == b.lags.len()
        && a.lags.iter().zip(&b.lags).all(|(x, y)| (x - y).abs() <= 1e-9 * a.dt)
}

/// Removes a noise-only (unpumped) auto-covariance from a pumped one.
///
/// Values subtract lag by lag and errors add in quadrature. When both
/// records have the same number of blocks the per-block curves are
/// differenced too, so downstream estimators keep block-level errors.
pub fn subtract_background(pumped: &CorrelationRecord, unpumped: &CorrelationRecord) -> Result<CorrelationRecord> {
    if !same_grid(pumped, unpumped) {
        return Err(Error::data("background record uses a different lag grid"));
    }
    let mut out = pumped.clone();
    for i in 0..out.values.len() {
        out.values[i] = pumped.values[i] - unpumped.values[i];
        out.stderr[i] = pumped.stderr[i].hypot(unpumped.stderr[i]);
    }
    if pumped.block_values.len() == unpumped.block_values.len() {
        for (p, u) in out.block_values.iter_mut().zip(&unpumped.block_values) {
            for (x, y) in p.iter_mut().zip(u) {
                *x -= y;
            }
        }
    } else {
        out.block_values.clear();
    }
    out.sources.extend(unpumped.sources.iter().map(|s| format!("background:{s}")));
    Ok(out)
}
