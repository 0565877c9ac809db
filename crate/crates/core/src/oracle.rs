//! Closed-form predictions for mean currents and current covariances.
//!
//! Spontaneous source with per-arm flux `F`, gain `V` and bunching term
//! `Im = V F`:
//!
//! ```text
//! <i_k>          = eta_k <q_k> F
//! C_kk(tau)      = eta_k <q_k^2> F_kk(tau) (F + eta_k Im)
//! C_12(tau)      = eta_1 eta_2 <q_1><q_2> F_12(tau) (F + Im)
//! ```
//!
//! Stimulated source with seed flux `phi`:
//!
//! ```text
//! <i_1> = eta_1 <q_1> V phi          C_11 = eta_1 <q_1^2> F_11 V phi
//! <i_2> = eta_2 <q_2> (1 + V) phi    C_22 = eta_2 <q_2^2> F_22 (1 + V) phi
//!                                           + 2 eta_2^2 <q_2>^2 F_22 V phi
//!                                    C_12 = 2 eta_1 eta_2 <q_1><q_2> F_12 V phi
//! ```
//!
//! The last term of `C_22` is the seed photon and its stimulated clone
//! landing in arm 2 together; it is O(V) and usually dropped. With the
//! spontaneous background enabled the spontaneous terms are added on top.
//!
//! Dark and background events are independent Poisson processes and add
//! `<q^2> F_kk(tau) rate` to the auto-covariance and `<q> rate` to the mean.
//! White amplifier noise adds `rms^2 / dt` to the sampled variance only.

use serde::{Deserialize, Serialize};

use crate::calibrator::{classify_regime, Regime, RegimeThresholds};
use crate::error::{Error, Result};
use crate::frontend::DetectorModel;
use crate::pulse::{overlap, sampled_overlap, PulseShape};
use crate::source::{SourceConfig, SourceMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticPrediction {
    pub mode: SourceMode,
    pub mean_i1: f64,
    pub mean_i2: f64,
    /// Coefficient multiplying `F_11(tau)` in the auto-covariance of arm 1.
    pub auto1_weight: f64,
    pub auto2_weight: f64,
    /// Coefficient multiplying `F_12(tau)`; equals the lag integral of the
    /// cross-covariance.
    pub integral_cross: f64,
    /// White-noise variance per sample is `rms^2 / dt`.
    pub amplifier_rms: (f64, f64),
    pub pulses: (PulseShape, PulseShape),
}

impl AnalyticPrediction {
    pub fn auto1(&self, tau: f64) -> f64 {
        self.auto1_weight * overlap(&self.pulses.0, &self.pulses.0, tau)
    }

    pub fn auto2(&self, tau: f64) -> f64 {
        self.auto2_weight * overlap(&self.pulses.1, &self.pulses.1, tau)
    }

    pub fn cross(&self, tau: f64) -> f64 {
        self.integral_cross * overlap(&self.pulses.0, &self.pulses.1, tau)
    }

    /// Lag integral of the auto-covariance of arm `k` (1 or 2) excluding
    /// the amplifier term.
    pub fn integral_auto(&self, k: usize) -> f64 {
        if k == 1 {
            self.auto1_weight
        } else {
            self.auto2_weight
        }
    }

    fn white(&self, rms: f64, tau: f64, dt: f64) -> f64 {
        if (tau / dt).round() == 0.0 {
            rms * rms / dt
        } else {
            0.0
        }
    }

    /// Auto-covariance of bin-averaged samples `tau` apart.
    pub fn sampled_auto1(&self, tau: f64, dt: f64) -> f64 {
        self.auto1_weight * sampled_overlap(&self.pulses.0, &self.pulses.0, tau, dt)
            + self.white(self.amplifier_rms.0, tau, dt)
    }

    pub fn sampled_auto2(&self, tau: f64, dt: f64) -> f64 {
        self.auto2_weight * sampled_overlap(&self.pulses.1, &self.pulses.1, tau, dt)
            + self.white(self.amplifier_rms.1, tau, dt)
    }

    pub fn sampled_cross(&self, tau: f64, dt: f64) -> f64 {
        self.integral_cross * sampled_overlap(&self.pulses.0, &self.pulses.1, tau, dt)
    }
}

/// Builds the closed-form prediction for a source and two detectors.
///
/// Spontaneous sources must be below the high-gain regime; stimulated ones
/// must satisfy `V <= 0.01`.
pub fn predict(source: &SourceConfig, d1: &DetectorModel, d2: &DetectorModel) -> Result<AnalyticPrediction> {
    source.validate()?;
    d1.validate()?;
    d2.validate()?;
    let v = source.gain;
    let (q1, q2) = (d1.gain.mean(), d2.gain.mean());
    let (qq1, qq2) = (d1.gain.second_moment(), d2.gain.second_moment());
    let (e1, e2) = (d1.eta, d2.eta);
    let noise1 = d1.noise_event_rate();
    let noise2 = d2.noise_event_rate();

    let (mean_i1, mean_i2, a1, a2, cross) = match source.mode {
        SourceMode::Spontaneous => {
            let f = source.mean_flux;
            let tau_p = d1.pulse.width().max(d2.pulse.width());
            if classify_regime(f, tau_p, v, &RegimeThresholds::default()) == Regime::III {
                return Err(Error::RegimeUnsupported(format!(
                    "V = {v} is in the high-gain regime; closed forms need V < {}",
                    RegimeThresholds::default().gain
                )));
            }
            let im = v * f;
            (
                e1 * q1 * f,
                e2 * q2 * f,
                e1 * qq1 * (f + e1 * im),
                e2 * qq2 * (f + e2 * im),
                e1 * e2 * q1 * q2 * (f + im),
            )
        }
        SourceMode::Stimulated => {
            let phi = source.seed_flux;
            let (f, im) = if source.spontaneous_background {
                (source.mean_flux, v * source.mean_flux)
            } else {
                (0.0, 0.0)
            };
            (
                e1 * q1 * (v * phi + f),
                e2 * q2 * ((1.0 + v) * phi + f),
                e1 * qq1 * (v * phi + f + e1 * im),
                e2 * qq2 * ((1.0 + v) * phi + f + e2 * im) + 2.0 * e2 * e2 * q2 * q2 * v * phi,
                e1 * e2 * q1 * q2 * (2.0 * v * phi + f + im),
            )
        }
    };
    Ok(AnalyticPrediction {
        mode: source.mode,
        mean_i1: mean_i1 + q1 * noise1,
        mean_i2: mean_i2 + q2 * noise2,
        auto1_weight: a1 + qq1 * noise1,
        auto2_weight: a2 + qq2 * noise2,
        integral_cross: cross,
        amplifier_rms: (d1.amplifier_noise_rms, d2.amplifier_noise_rms),
        pulses: (d1.pulse, d2.pulse),
    })
}

/// Order-of-magnitude relative uncertainty of the efficiency estimate,
/// `sqrt(N) sqrt(tau_p / T)` with `N = eta F tau_p` detected photons per
/// response time.
pub fn predicted_relative_uncertainty(eta: f64, flux: f64, tau_p: f64, duration: f64) -> Result<f64> {
    if !(eta >= 0.0 && flux >= 0.0 && tau_p > 0.0) {
        return Err(Error::config("eta, flux and tau_p must be nonnegative (tau_p > 0)"));
    }
    if !(duration > tau_p) {
        return Err(Error::config(format!(
            "measurement time {duration:e} s must exceed the response time {tau_p:e} s"
        )));
    }
    let n = eta * flux * tau_p;
    Ok((n * tau_p / duration).sqrt())
}
