//! Run configuration file: a TOML document resolved into a [`RunPlan`].
//!
//! ```toml
//! seed = 42
//! unpumped_run = true
//!
//! [source]
//! mode = "spontaneous"      # or "stimulated"
//! mean_flux = 5e8           # photons/s per arm; or give `gain`
//! coherence_time = 2e-12
//!
//! [detector1]
//! id = "d1"
//! eta = 0.4
//! pulse = { shape = "rectangular", width = 1e-8 }
//! gain = { kind = "deterministic", mean = 1.0 }
//!
//! [detector2]
//! id = "d2"
//! eta = 0.6
//! pulse = { shape = "gaussian", width = 1e-8 }
//! gain = { kind = "exponential", mean = 1.0 }
//!
//! [acquisition]
//! dt = 1e-9
//! duration = 0.01
//! n_segments = 20
//! tau_max = 5e-8
//!
//! [[estimators]]
//! kind = "integrated_spdc"
//! ```
//!
//! Parsed documents hash to a canonical digest independent of key order
//! and formatting.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibrator::{Calibrator, RegimeThresholds, SystematicBudget, DEFAULT_GAIN_THRESHOLD, DEFAULT_OVERLAP_THRESHOLD};
use crate::error::{Error, Result};
use crate::frontend::DetectorModel;
use crate::pipeline::{Acquisition, EstimatorSpec, RunPlan};
use crate::source::{SourceConfig, SourceMode};
use crate::sweep::SweepSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSection {
    pub mode: SourceMode,
    /// Photons/s per arm; spontaneous mode takes this or `gain`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_flux: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain: Option<f64>,
    pub coherence_time: f64,
    /// Seed beam, photons/s. Stimulated mode only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_flux: Option<f64>,
    #[serde(default)]
    pub spontaneous_background: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcquisitionSection {
    pub dt: f64,
    /// Measurement time T, seconds.
    pub duration: f64,
    pub n_segments: usize,
    pub tau_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    /// Known mean charge of detector 2; enables the bare efficiency.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q2_mean: Option<f64>,
    #[serde(default)]
    pub crystal_loss: f64,
    #[serde(default = "default_loss_uncertainty")]
    pub crystal_loss_uncertainty: f64,
    #[serde(default = "default_overlap")]
    pub overlap_threshold: f64,
    #[serde(default = "default_gain")]
    pub gain_threshold: f64,
}

fn default_loss_uncertainty() -> f64 {
    SystematicBudget::default().crystal_loss_uncertainty
}

fn default_overlap() -> f64 {
    DEFAULT_OVERLAP_THRESHOLD
}

fn default_gain() -> f64 {
    DEFAULT_GAIN_THRESHOLD
}

impl Default for CalibrationSection {
    fn default() -> Self {
        CalibrationSection {
            q2_mean: None,
            crystal_loss: 0.0,
            crystal_loss_uncertainty: default_loss_uncertainty(),
            overlap_threshold: DEFAULT_OVERLAP_THRESHOLD,
            gain_threshold: DEFAULT_GAIN_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceFormat {
    #[default]
    Binary,
    Csv,
}

impl TraceFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TraceFormat::Binary => "tbt",
            TraceFormat::Csv => "csv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default)]
    pub format: TraceFormat,
    /// Also dump the raw photon event streams.
    #[serde(default)]
    pub write_events: bool,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: default_dir(),
            format: TraceFormat::Binary,
            write_events: false,
        }
    }
}

/// Complete contents of a configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every random draw derives from it.
    pub seed: u64,
    #[serde(default)]
    pub unpumped_run: bool,
    pub source: SourceSection,
    pub detector1: DetectorModel,
    pub detector2: DetectorModel,
    pub acquisition: AcquisitionSection,
    #[serde(default)]
    pub estimators: Vec<EstimatorSpec>,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

impl RunConfig {
    /// Parses without validating.
    pub fn parse(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))
    }

    /// Parses and validates.
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg = RunConfig::parse(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, parses and validates a file; messages carry the path.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let cfg = RunConfig::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn source_config(&self) -> Result<SourceConfig> {
        let s = &self.source;
        let t = self.acquisition.duration;
        let mut cfg = match s.mode {
            SourceMode::Spontaneous => {
                if s.seed_flux.is_some() {
                    return Err(Error::config("source.seed_flux is only used in stimulated mode"));
                }
                SourceConfig::spontaneous(s.mean_flux, s.gain, s.coherence_time, t, self.seed)?
            }
            SourceMode::Stimulated => {
                let seed_flux = s
                    .seed_flux
                    .ok_or_else(|| Error::config("source.seed_flux is required in stimulated mode"))?;
                let gain = s
                    .gain
                    .ok_or_else(|| Error::config("source.gain is required in stimulated mode"))?;
                if s.mean_flux.is_some() {
                    return Err(Error::config(
                        "source.mean_flux is derived from gain / coherence_time in stimulated mode",
                    ));
                }
                SourceConfig::stimulated(seed_flux, gain, s.coherence_time, t, self.seed)?
            }
        };
        cfg.spontaneous_background = s.spontaneous_background;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Simulation plan after all cross-field checks.
    pub fn plan(&self) -> Result<RunPlan> {
        let a = &self.acquisition;
        let plan = RunPlan {
            source: self.source_config()?,
            detector1: self.detector1.clone(),
            detector2: self.detector2.clone(),
            acquisition: Acquisition {
                dt: a.dt,
                n_segments: a.n_segments,
                tau_max: a.tau_max,
            },
        };
        plan.validate()?;
        plan.source.check_regime()?;
        Ok(plan)
    }

    pub fn thresholds(&self) -> RegimeThresholds {
        RegimeThresholds {
            overlap: self.calibration.overlap_threshold,
            gain: self.calibration.gain_threshold,
        }
    }

    /// Calibrator for data produced by this configuration.
    pub fn calibrator(&self) -> Result<Calibrator> {
        let plan = self.plan()?;
        let mut cal = Calibrator::new(plan.regime(&self.thresholds()));
        cal.q2_mean = self.calibration.q2_mean;
        cal.budget = SystematicBudget {
            crystal_loss: self.calibration.crystal_loss,
            crystal_loss_uncertainty: self.calibration.crystal_loss_uncertainty,
        };
        cal.budget.validate()?;
        cal.provenance.push(format!("config@{}", self.hash()));
        Ok(cal)
    }

    pub fn validate(&self) -> Result<()> {
        self.plan()?;
        let c = &self.calibration;
        if !(c.overlap_threshold > 0.0 && c.gain_threshold > 0.0) {
            return Err(Error::config("calibration thresholds must be > 0"));
        }
        if let Some(q) = c.q2_mean {
            if !(q.is_finite() && q > 0.0) {
                return Err(Error::config(format!("calibration.q2_mean must be > 0, got {q}")));
            }
        }
        SystematicBudget {
            crystal_loss: c.crystal_loss,
            crystal_loss_uncertainty: c.crystal_loss_uncertainty,
        }
        .validate()?;
        for (i, e) in self.estimators.iter().enumerate() {
            e.validate().map_err(|err| match err {
                Error::Config(m) => Error::Config(format!("estimators[{i}]: {m}")),
                other => other,
            })?;
        }
        if let Some(s) = &self.sweep {
            s.validate().map_err(|err| match err {
                Error::Config(m) => Error::Config(format!("sweep: {m}")),
                other => other,
            })?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, output settings excluded so the
    /// same physics written to another directory keeps its digest.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let serde_json::Value::Object(map) = &mut value {
            map.remove("output");
        }
        // serde_json maps are ordered by key, so this text is canonical.
        let text = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// The fully resolved configuration, defaults included.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot render config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7

[source]
mode = "spontaneous"
mean_flux = 5e8
coherence_time = 2e-12

[detector1]
eta = 0.4
pulse = { shape = "rectangular", width = 1e-8 }
gain = { kind = "deterministic", mean = 1.0 }

[detector2]
eta = 0.6
pulse = { shape = "rectangular", width = 1e-8 }
gain = { kind = "deterministic", mean = 1.0 }

[acquisition]
dt = 1e-9
duration = 0.001
n_segments = 4
tau_max = 5e-8

[[estimators]]
kind = "integrated_spdc"
"#;

    const PERMUTED: &str = r#"
[acquisition]
tau_max = 5e-8
n_segments = 4
duration = 0.001
dt = 1e-9

[detector2]
gain = { mean = 1.0, kind = "deterministic" }
pulse = { width = 1e-8, shape = "rectangular" }
eta = 0.6

[[estimators]]
kind = "integrated_spdc"

[source]
coherence_time = 2e-12
mean_flux = 500000000.0
mode = "spontaneous"

[detector1]
gain = { mean = 1.0, kind = "deterministic" }
eta = 0.4
pulse = { shape = "rectangular", width = 1e-8 }
"#;

    #[test]
    fn minimal_config_resolves() {
        let cfg = RunConfig::from_toml_str(MINIMAL).unwrap();
        let plan = cfg.plan().unwrap();
        assert_eq!(plan.source.rng_seed, 7);
        assert!((plan.source.gain - 1e-3).abs() < 1e-15);
        assert_eq!(cfg.output.format, TraceFormat::Binary);
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn hash_ignores_key_order_and_formatting() {
        let a = RunConfig::from_toml_str(MINIMAL).unwrap();
        let mut b = RunConfig::from_toml_str(&format!("seed = 7\n{PERMUTED}")).unwrap();
        assert_eq!(a.hash(), b.hash());
        b.output.dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 8;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn resolved_toml_round_trips() {
        let a = RunConfig::from_toml_str(MINIMAL).unwrap();
        let b = RunConfig::from_toml_str(&a.to_toml().unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
    }

    fn err(text: &str) -> Error {
        RunConfig::from_toml_str(text).unwrap_err()
    }

    #[test]
    fn messages_name_the_field() {
        let coarse = MINIMAL.replace("dt = 1e-9", "dt = 5e-9");
        assert!(matches!(err(&coarse), Error::Config(m) if m.contains("detector1")));
        let short = MINIMAL.replace("duration = 0.001", "duration = 1e-6");
        assert!(matches!(err(&short), Error::Config(m) if m.contains("source.duration")));
        let typo = MINIMAL.replace("n_segments = 4", "n_segmants = 4");
        assert!(matches!(err(&typo), Error::Config(m) if m.contains("n_segmants") && m.contains("line")));
        let bad_est = MINIMAL.replace(
            "kind = \"integrated_spdc\"",
            "kind = \"ratio_spdc\"\nexcess_noise = 0.5\nq1_mean = 1.0",
        );
        assert!(matches!(err(&bad_est), Error::Config(m) if m.starts_with("estimators[0]")));
    }

    #[test]
    fn strong_gain_is_regime_error() {
        let text = MINIMAL.replace("mean_flux = 5e8", "gain = 1.5");
        assert!(matches!(err(&text), Error::RegimeUnsupported(_)));
    }

    #[test]
    fn stimulated_needs_seed_beam() {
        let text = MINIMAL.replace("mode = \"spontaneous\"\nmean_flux = 5e8", "mode = \"stimulated\"\ngain = 1e-3");
        assert!(matches!(err(&text), Error::Config(m) if m.contains("seed_flux")));
        let ok = text.replace("gain = 1e-3", "gain = 1e-3\nseed_flux = 1e9");
        let cfg = RunConfig::from_toml_str(&ok).unwrap();
        assert_eq!(cfg.plan().unwrap().source.seed_flux, 1e9);
    }

    #[test]
    fn sweep_section_is_checked() {
        let text = format!(
            "{MINIMAL}\n[sweep]\ndurations = [0.01]\nrepetitions = 30\nestimator = {{ kind = \"integrated_spdc\" }}\n"
        );
        assert!(matches!(err(&text), Error::Config(m) if m.starts_with("sweep")));
    }
}
