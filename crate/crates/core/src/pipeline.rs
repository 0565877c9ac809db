//! End-to-end runs: photon generation, detection, correlation, estimation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrator::{
    classify_regime, subtract_background, CalibrationReport, Calibrator, MeanCurrent, RatioOptions, Regime,
    RegimeThresholds,
};
use crate::correlator::{autocovariance, covariance, mean_stderr, CorrelationRecord};
use crate::error::{Error, Result};
use crate::frontend::{thin, CurrentTrace, DetectorModel, TraceMeta, TraceSynthesizer};
use crate::rng::{self, derive_seed, Purpose};
use crate::source::{generate_chunk, ChunkPlan, SourceConfig, SourceMode};

/// Chunks generated in parallel before being deposited in order.
const CHUNK_BATCH: u64 = 16;

/// Seed index of the unpumped (background) acquisition.
const UNPUMPED_SEED_INDEX: u64 = 0x0b6d;

/// Sampling and correlation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Acquisition {
    /// Sample step, seconds.
    pub dt: f64,
    /// Number of blocks for error bars.
    pub n_segments: usize,
    /// Largest correlation lag, seconds.
    pub tau_max: f64,
}

/// Everything needed to simulate one pair of traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPlan {
    pub source: SourceConfig,
    pub detector1: DetectorModel,
    pub detector2: DetectorModel,
    pub acquisition: Acquisition,
}

impl RunPlan {
    /// Cross-field checks done before any generation.
    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        for (name, d) in [("detector1", &self.detector1), ("detector2", &self.detector2)] {
            d.validate().map_err(|e| prefix(name, e))?;
            d.check_dt(self.acquisition.dt).map_err(|e| prefix(name, e))?;
        }
        let acq = &self.acquisition;
        if acq.n_segments < 2 {
            return Err(Error::config("acquisition.n_segments must be >= 2"));
        }
        let widest = self.detector1.pulse.width().max(self.detector2.pulse.width());
        if acq.tau_max < 5.0 * widest * (1.0 - 1e-9) {
            return Err(Error::config(format!(
                "acquisition.tau_max = {:e} s must be >= 5 pulse widths ({:e} s)",
                acq.tau_max,
                5.0 * widest
            )));
        }
        let needed = crate::correlator::MIN_DURATION_FACTOR * acq.n_segments as f64 * acq.tau_max;
        if self.source.duration < needed * (1.0 - 1e-12) {
            return Err(Error::config(format!(
                "source.duration = {:e} s is shorter than 20 * n_segments * tau_max = {needed:e} s",
                self.source.duration
            )));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> RunPlan {
        RunPlan {
            source: self.source.with_seed(seed),
            ..self.clone()
        }
    }

    /// Widest response time of the two detectors.
    pub fn tau_p(&self) -> f64 {
        self.detector1.pulse.width().max(self.detector2.pulse.width())
    }

    pub fn regime(&self, th: &RegimeThresholds) -> Regime {
        let flux = match self.source.mode {
            SourceMode::Spontaneous => self.source.mean_flux,
            SourceMode::Stimulated => self.source.arm_fluxes().0,
        };
        classify_regime(flux, self.tau_p(), self.source.gain, th)
    }

    /// Plan of the matching background acquisition: pump off, fresh seed.
    pub fn unpumped(&self) -> RunPlan {
        let seed = derive_seed(self.source.rng_seed, UNPUMPED_SEED_INDEX);
        RunPlan {
            source: self.source.unpumped().with_seed(seed),
            ..self.clone()
        }
    }
}

fn prefix(name: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{name}: {m}")),
        other => other,
    }
}

/// Detected photon times of one generation chunk.
#[derive(Debug, Clone)]
struct DetectedChunk {
    index: u64,
    bounds: (f64, f64),
    arm1: Vec<f64>,
    arm2: Vec<f64>,
}

fn detect_chunk(source: &SourceConfig, plan: &ChunkPlan, index: u64, eta: (f64, f64)) -> Result<DetectedChunk> {
    let stream = generate_chunk(source, plan, index)?;
    let seed = source.rng_seed;
    let mut r1 = rng::substream(seed, Purpose::Thin, 1, index);
    let mut r2 = rng::substream(seed, Purpose::Thin, 2, index);
    Ok(DetectedChunk {
        index,
        bounds: plan.bounds(source, index),
        arm1: thin(&stream.arm1, eta.0, &mut r1)?,
        arm2: thin(&stream.arm2, eta.1, &mut r2)?,
    })
}

/// Runs `f` on every detected chunk in time order, generating batches of
/// chunks in parallel.
fn for_each_detected(
    source: &SourceConfig,
    eta: (f64, f64),
    mut f: impl FnMut(DetectedChunk) -> Result<()>,
) -> Result<()> {
    source.validate()?;
    let plan = source.chunk_plan();
    let mut start = 0;
    while start < plan.n_chunks {
        let end = (start + CHUNK_BATCH).min(plan.n_chunks);
        let batch: Vec<DetectedChunk> = (start..end)
            .into_par_iter()
            .map(|idx| detect_chunk(source, &plan, idx, eta))
            .collect::<Result<_>>()?;
        for chunk in batch {
            f(chunk)?;
        }
        start = end;
    }
    Ok(())
}

/// Photons that survived the efficiency thinning of both detectors. Several
/// detector models with these efficiencies can be fed the same photons.
#[derive(Debug, Clone)]
pub struct DetectedPhotons {
    source: SourceConfig,
    eta: (f64, f64),
    chunks: Vec<DetectedChunk>,
}

impl DetectedPhotons {
    pub fn counts(&self) -> (usize, usize) {
        self.chunks
            .iter()
            .fold((0, 0), |(a, b), c| (a + c.arm1.len(), b + c.arm2.len()))
    }

    pub fn source(&self) -> &SourceConfig {
        &self.source
    }
}

/// Generates and thins the photon stream of `source`.
pub fn detect(source: &SourceConfig, eta1: f64, eta2: f64) -> Result<DetectedPhotons> {
    let mut chunks = Vec::new();
    for_each_detected(source, (eta1, eta2), |c| {
        chunks.push(c);
        Ok(())
    })?;
    Ok(DetectedPhotons {
        source: source.clone(),
        eta: (eta1, eta2),
        chunks,
    })
}

struct PairSynth {
    s1: TraceSynthesizer,
    s2: TraceSynthesizer,
    seed: u64,
}

impl PairSynth {
    fn new(source: &SourceConfig, d1: &DetectorModel, d2: &DetectorModel, dt: f64) -> Result<Self> {
        let seed = source.rng_seed;
        Ok(PairSynth {
            s1: TraceSynthesizer::new(d1, dt, source.duration, seed, 1)?,
            s2: TraceSynthesizer::new(d2, dt, source.duration, seed, 2)?,
            seed,
        })
    }

    fn add(&mut self, c: &DetectedChunk) -> Result<()> {
        let (s1, s2) = (&mut self.s1, &mut self.s2);
        let (a, b) = rayon::join(
            || s1.add_chunk(c.index, c.bounds, &c.arm1),
            || s2.add_chunk(c.index, c.bounds, &c.arm2),
        );
        a.and(b)
    }

    fn finish(self, d1: &DetectorModel, d2: &DetectorModel) -> (CurrentTrace, CurrentTrace) {
        let seed = self.seed;
        let meta = |d: &DetectorModel| TraceMeta {
            rng_seed: seed,
            ..TraceMeta::new(d.id.clone())
        };
        let (s1, s2) = (self.s1, self.s2);
        rayon::join(|| s1.finish(meta(d1)), || s2.finish(meta(d2)))
    }
}

/// Synthesizes both traces from already detected photons. The detectors
/// must have the efficiencies the photons were thinned with.
pub fn synthesize_pair(photons: &DetectedPhotons, d1: &DetectorModel, d2: &DetectorModel, dt: f64) -> Result<(CurrentTrace, CurrentTrace)> {
    if d1.eta != photons.eta.0 || d2.eta != photons.eta.1 {
        return Err(Error::config(format!(
            "detector efficiencies ({}, {}) differ from the thinning efficiencies ({}, {})",
            d1.eta, d2.eta, photons.eta.0, photons.eta.1
        )));
    }
    let mut synth = PairSynth::new(&photons.source, d1, d2, dt)?;
    for c in &photons.chunks {
        synth.add(c)?;
    }
    Ok(synth.finish(d1, d2))
}

/// Simulates both detector traces for `source`, streaming the photon
/// stream chunk by chunk. All randomness derives from `source.rng_seed`.
pub fn simulate(source: &SourceConfig, d1: &DetectorModel, d2: &DetectorModel, dt: f64) -> Result<(CurrentTrace, CurrentTrace)> {
    let mut synth = PairSynth::new(source, d1, d2, dt)?;
    for_each_detected(source, (d1.eta, d2.eta), |c| synth.add(&c))?;
    Ok(synth.finish(d1, d2))
}

/// Traces of one acquisition plus, optionally, its unpumped companion.
#[derive(Debug, Clone)]
pub struct SimulatedRun {
    pub trace1: CurrentTrace,
    pub trace2: CurrentTrace,
    pub unpumped: Option<(CurrentTrace, CurrentTrace)>,
}

pub fn simulate_run(plan: &RunPlan, with_unpumped: bool) -> Result<SimulatedRun> {
    plan.validate()?;
    let dt = plan.acquisition.dt;
    let (trace1, trace2) = simulate(&plan.source, &plan.detector1, &plan.detector2, dt)?;
    let unpumped = if with_unpumped {
        let bg = plan.unpumped();
        Some(simulate(&bg.source, &bg.detector1, &bg.detector2, dt)?)
    } else {
        None
    };
    Ok(SimulatedRun {
        trace1,
        trace2,
        unpumped,
    })
}

/// Estimator selection with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EstimatorSpec {
    RatioSpdc {
        excess_noise: f64,
        q1_mean: f64,
        #[serde(default)]
        tau_eval: f64,
        #[serde(default)]
        average_half_width: Option<f64>,
    },
    IntegratedSpdc,
    RatioStimulated {
        excess_noise: f64,
        q1_mean: f64,
        #[serde(default)]
        tau_eval: f64,
        #[serde(default)]
        average_half_width: Option<f64>,
    },
    IntegratedStimulated,
}

impl EstimatorSpec {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorSpec::RatioSpdc { .. } => "ratio_spdc",
            EstimatorSpec::IntegratedSpdc => "integrated_spdc",
            EstimatorSpec::RatioStimulated { .. } => "ratio_stimulated",
            EstimatorSpec::IntegratedStimulated => "integrated_stimulated",
        }
    }

    pub fn is_ratio(&self) -> bool {
        matches!(self, EstimatorSpec::RatioSpdc { .. } | EstimatorSpec::RatioStimulated { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            EstimatorSpec::RatioSpdc { excess_noise, q1_mean, .. }
            | EstimatorSpec::RatioStimulated { excess_noise, q1_mean, .. } => {
                if !(excess_noise >= 1.0 && q1_mean > 0.0) {
                    return Err(Error::config(format!(
                        "estimator {}: excess_noise must be >= 1 and q1_mean > 0",
                        self.name()
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Correlations of one acquisition, background-corrected where possible.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub cross: CorrelationRecord,
    pub auto1: CorrelationRecord,
    /// Unpumped auto-covariance of arm 1, when available.
    pub auto1_background: Option<CorrelationRecord>,
    /// Arm-1 mean with the unpumped mean removed when available.
    pub mean_i1: MeanCurrent,
}

impl Analysis {
    pub fn from_traces(
        t1: &CurrentTrace,
        t2: &CurrentTrace,
        background1: Option<&CurrentTrace>,
        acq: &Acquisition,
    ) -> Result<Analysis> {
        let (cross, auto1) = rayon::join(
            || covariance(t1, t2, acq.tau_max, acq.n_segments),
            || autocovariance(t1, acq.tau_max, acq.n_segments),
        );
        let (cross, auto1) = (cross?, auto1?);
        let (auto1_background, offset) = match background1 {
            Some(bg) => {
                let rec = autocovariance(bg, acq.tau_max, acq.n_segments)?;
                let means: Vec<f64> = rec.block_means.iter().map(|m| m.0).collect();
                let (m, s) = mean_stderr(&means);
                (Some(rec), (m, s))
            }
            None => (None, (0.0, 0.0)),
        };
        let mean_i1 = MeanCurrent::from_record(&cross, offset.0, offset.1);
        Ok(Analysis {
            cross,
            auto1,
            auto1_background,
            mean_i1,
        })
    }

    pub fn from_run(run: &SimulatedRun, acq: &Acquisition) -> Result<Analysis> {
        Analysis::from_traces(&run.trace1, &run.trace2, run.unpumped.as_ref().map(|u| &u.0), acq)
    }

    /// Runs one estimator. Ratio estimators use the background-subtracted
    /// auto-covariance when an unpumped record exists and say so otherwise.
    pub fn estimate(&self, cal: &Calibrator, spec: &EstimatorSpec) -> Result<CalibrationReport> {
        spec.validate()?;
        match *spec {
            EstimatorSpec::IntegratedSpdc => cal.estimate_integrated_spdc(&self.cross, self.mean_i1),
            EstimatorSpec::IntegratedStimulated => cal.estimate_integrated_stimulated(&self.cross, self.mean_i1),
            EstimatorSpec::RatioSpdc {
                excess_noise,
                q1_mean,
                tau_eval,
                average_half_width,
            }
            | EstimatorSpec::RatioStimulated {
                excess_noise,
                q1_mean,
                tau_eval,
                average_half_width,
            } => {
                let opts = RatioOptions {
                    excess_noise,
                    q1_mean,
                    tau_eval,
                    average_half_width,
                };
                let (auto, note) = match &self.auto1_background {
                    Some(bg) => (subtract_background(&self.auto1, bg)?, None),
                    None => (
                        self.auto1.clone(),
                        Some("no unpumped run: background subtraction skipped".to_string()),
                    ),
                };
                let mut report = if matches!(spec, EstimatorSpec::RatioSpdc { .. }) {
                    cal.estimate_ratio_spdc(&self.cross, &auto, &opts)?
                } else {
                    cal.estimate_ratio_stimulated(&self.cross, &auto, &opts)?
                };
                report.warnings.extend(note);
                Ok(report)
            }
        }
    }
}

/// Outcome of one estimator: a report, or the reason none was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOutcome {
    pub estimator: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<CalibrationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Runs every estimator, turning estimator failures into outcome fields.
pub fn run_estimators(analysis: &Analysis, cal: &Calibrator, specs: &[EstimatorSpec]) -> Vec<EstimatorOutcome> {
    specs
        .iter()
        .map(|spec| match analysis.estimate(cal, spec) {
            Ok(r) => EstimatorOutcome {
                estimator: spec.name().into(),
                report: Some(r),
                error: None,
            },
            Err(e) => EstimatorOutcome {
                estimator: spec.name().into(),
                report: None,
                error: Some(e.to_string()),
            },
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::GainDistribution;
    use crate::pulse::PulseShape;

    fn plan(duration: f64) -> RunPlan {
        let det = |id: &str, eta: f64| {
            DetectorModel::new(
                id,
                eta,
                PulseShape::Rectangular { width: 10e-9 },
                GainDistribution::Deterministic { mean: 1.0 },
            )
        };
        RunPlan {
            source: SourceConfig::spontaneous(Some(5e8), Some(1e-3), 2e-12, duration, 3).unwrap(),
            detector1: det("d1", 0.4),
            detector2: det("d2", 0.6),
            acquisition: Acquisition {
                dt: 1e-9,
                n_segments: 4,
                tau_max: 50e-9,
            },
        }
    }

    #[test]
    fn cross_field_checks() {
        let mut p = plan(1e-3);
        assert!(p.validate().is_ok());
        p.acquisition.tau_max = 20e-9;
        assert!(matches!(p.validate(), Err(Error::Config(m)) if m.contains("tau_max")));
        let mut p = plan(1e-5);
        p.acquisition.n_segments = 20;
        assert!(matches!(p.validate(), Err(Error::Config(m)) if m.contains("duration")));
        let mut p = plan(1e-3);
        p.acquisition.dt = 2e-9;
        assert!(matches!(p.validate(), Err(Error::Config(m)) if m.starts_with("detector1")));
    }

    #[test]
    fn simulation_is_deterministic() {
        let p = plan(2e-4);
        let a = simulate_run(&p, true).unwrap();
        let b = simulate_run(&p, true).unwrap();
        assert_eq!(a.trace1.samples, b.trace1.samples);
        assert_eq!(a.trace2.samples, b.trace2.samples);
        let (u1, _) = a.unpumped.unwrap();
        assert!(u1.samples.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shared_photons_match_streaming_simulation() {
        let p = plan(2e-4);
        let photons = detect(&p.source, 0.4, 0.6).unwrap();
        let (a1, a2) = synthesize_pair(&photons, &p.detector1, &p.detector2, 1e-9).unwrap();
        let (b1, b2) = simulate(&p.source, &p.detector1, &p.detector2, 1e-9).unwrap();
        assert_eq!(a1.samples, b1.samples);
        assert_eq!(a2.samples, b2.samples);
        let mut wrong = p.detector2.clone();
        wrong.eta = 0.5;
        assert!(synthesize_pair(&photons, &p.detector1, &wrong, 1e-9).is_err());
    }

    #[test]
    fn mean_currents_are_plausible() {
        let p = plan(1e-3);
        let run = simulate_run(&p, false).unwrap();
        // 0.4 * 5e8 photons/s with unit charge.
        let m1 = run.trace1.mean();
        assert!((m1 / 2e8 - 1.0).abs() < 0.02, "{m1}");
        let m2 = run.trace2.mean();
        assert!((m2 / 3e8 - 1.0).abs() < 0.02, "{m2}");
    }

    #[test]
    fn estimator_failures_become_outcomes() {
        let p = plan(2e-4);
        let run = simulate_run(&p, false).unwrap();
        let an = Analysis::from_run(&run, &p.acquisition).unwrap();
        let specs = [
            EstimatorSpec::IntegratedSpdc,
            EstimatorSpec::RatioSpdc {
                excess_noise: 0.5,
                q1_mean: 1.0,
                tau_eval: 0.0,
                average_half_width: None,
            },
        ];
        let out = run_estimators(&an, &Calibrator::default(), &specs);
        assert!(out[0].report.is_some());
        assert!(out[1].error.is_some());
    }

    #[test]
    fn ratio_without_background_says_so() {
        let p = plan(2e-4);
        let run = simulate_run(&p, false).unwrap();
        let an = Analysis::from_run(&run, &p.acquisition).unwrap();
        let spec = EstimatorSpec::RatioSpdc {
            excess_noise: 1.0,
            q1_mean: 1.0,
            tau_eval: 0.0,
            average_half_width: Some(10e-9),
        };
        let r = an.estimate(&Calibrator::default(), &spec).unwrap();
        assert!(r.warnings.iter().any(|w| w.contains("subtraction skipped")));
    }
}
