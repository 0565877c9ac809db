//! Absolute calibration of analog photodetectors from twin-beam correlations.

pub mod calibrator;
pub mod config;
pub mod correlator;
pub mod error;
pub mod frontend;
pub mod io;
pub mod oracle;
pub mod pipeline;
pub mod pulse;
pub mod rng;
pub mod sweep;
pub mod source;

pub use calibrator::{CalibrationReport, Calibrator, EstimatorKind, Regime, RegimeThresholds, SystematicBudget};
pub use config::RunConfig;
pub use correlator::{CorrelationRecord, RecordKind};
pub use error::{Error, Result};
pub use frontend::{CurrentTrace, DetectorModel, GainDistribution, TraceMeta};
pub use oracle::{predict, AnalyticPrediction};
pub use pipeline::{Acquisition, Analysis, EstimatorSpec, RunPlan};
pub use pulse::PulseShape;
pub use source::{PairEventStream, SourceConfig, SourceMode};
pub use sweep::{SweepResult, SweepSpec};
