//! Detector impulse responses and their overlap functions.
//!
//! Every shape has unit area and a characteristic width `w` chosen so the
//! peak height is `1/w`:
//!
//! * rectangular: `1/w` on `[0, w)`
//! * one-sided exponential: `exp(-t/w)/w` for `t >= 0`
//! * Gaussian: centred on the event time with `sigma = w / sqrt(2 pi)`
//!
//! The overlap `F12(tau) = ∫ f1(t) f2(t + tau) dt` is available in closed
//! form for every pair of shapes, together with the version seen by a
//! sampler that averages the current over bins of width `dt`.

use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gaussian pulses are truncated at this many standard deviations when
/// synthesized; the retained mass is renormalized to one.
pub const GAUSSIAN_TRUNCATION: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum PulseShape {
    Rectangular { width: f64 },
    OneSidedExponential { width: f64 },
    Gaussian { width: f64 },
}

impl PulseShape {
    pub fn width(&self) -> f64 {
        match *self {
            PulseShape::Rectangular { width }
            | PulseShape::OneSidedExponential { width }
            | PulseShape::Gaussian { width } => width,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PulseShape::Rectangular { .. } => "rectangular",
            PulseShape::OneSidedExponential { .. } => "one_sided_exponential",
            PulseShape::Gaussian { .. } => "gaussian",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.width();
        if !(w.is_finite() && w > 0.0) {
            return Err(Error::config(format!(
                "pulse width must be finite and > 0, got {w}"
            )));
        }
        Ok(())
    }

    /// Standard deviation of the Gaussian shape.
    pub fn gaussian_sigma(width: f64) -> f64 {
        width / (2.0 * PI).sqrt()
    }

    /// Pulse height at its maximum.
    pub fn peak(&self) -> f64 {
        1.0 / self.width()
    }

    pub fn density(&self, t: f64) -> f64 {
        match *self {
            PulseShape::Rectangular { width } => {
                if (0.0..width).contains(&t) {
                    1.0 / width
                } else {
                    0.0
                }
            }
            PulseShape::OneSidedExponential { width } => {
                if t >= 0.0 {
                    (-t / width).exp() / width
                } else {
                    0.0
                }
            }
            PulseShape::Gaussian { width } => {
                let s = Self::gaussian_sigma(width);
                (-0.5 * (t / s).powi(2)).exp() / width
            }
        }
    }

    /// Cumulative area `∫_{-inf}^{t} f`.
    pub fn cdf(&self, t: f64) -> f64 {
        match *self {
            PulseShape::Rectangular { width } => (t / width).clamp(0.0, 1.0),
            PulseShape::OneSidedExponential { width } => {
                if t > 0.0 {
                    -(-t / width).exp_m1()
                } else {
                    0.0
                }
            }
            PulseShape::Gaussian { width } => normal_cdf(t / Self::gaussian_sigma(width)),
        }
    }

    /// Cumulative area of the pulse as synthesized (Gaussian truncated and
    /// renormalized, other shapes unchanged).
    pub fn synthesis_cdf(&self, t: f64) -> f64 {
        match *self {
            PulseShape::Gaussian { width } => {
                let s = Self::gaussian_sigma(width);
                let z = (t / s).clamp(-GAUSSIAN_TRUNCATION, GAUSSIAN_TRUNCATION);
                let lo = normal_cdf(-GAUSSIAN_TRUNCATION);
                let hi = normal_cdf(GAUSSIAN_TRUNCATION);
                (normal_cdf(z) - lo) / (hi - lo)
            }
            _ => self.cdf(t),
        }
    }

    /// Times, relative to the event, where the density has a kink or jump.
    fn kinks(&self) -> &'static [f64] {
        match self {
            PulseShape::Rectangular { .. } => &[0.0, 1.0],
            PulseShape::OneSidedExponential { .. } => &[0.0],
            PulseShape::Gaussian { .. } => &[],
        }
    }
}

/// `Φ(z)` of the standard normal.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// Scaled complementary error function `exp(x^2) erfc(x)` for `x >= 0`.
fn erfcx(x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    if x < 25.0 {
        (x * x).exp() * libm::erfc(x)
    } else {
        let inv2 = 1.0 / (x * x);
        (1.0 - 0.5 * inv2 + 0.75 * inv2 * inv2 - 1.875 * inv2 * inv2 * inv2) / (x * PI.sqrt())
    }
}

/// `∫ e(t) g(t + tau) dt` for `e` one-sided exponential of width `a` and
/// `g` a centred Gaussian of standard deviation `s`.
fn exp_gauss_overlap(a: f64, s: f64, tau: f64) -> f64 {
    let z = tau / s + s / a;
    if z >= 0.0 {
        0.5 * erfcx(z / SQRT_2) * (-0.5 * (tau / s).powi(2)).exp() / a
    } else {
        (tau / a + 0.5 * (s / a).powi(2)).exp() * 0.5 * libm::erfc(z / SQRT_2) / a
    }
}

/// Pulse overlap `F12(tau) = ∫ f1(t) f2(t + tau) dt`.
///
/// For `f1 == f2` this is the convolution of the response function with
/// itself; it integrates to one over `tau`.
pub fn overlap(f1: &PulseShape, f2: &PulseShape, tau: f64) -> f64 {
    use PulseShape::*;
    match (*f1, *f2) {
        (Rectangular { width: a }, _) => (f2.cdf(a + tau) - f2.cdf(tau)) / a,
        (_, Rectangular { width: b }) => (f1.cdf(b - tau) - f1.cdf(-tau)) / b,
        (OneSidedExponential { width: a }, OneSidedExponential { width: b }) => {
            if tau >= 0.0 {
                (-tau / b).exp() / (a + b)
            } else {
                (tau / a).exp() / (a + b)
            }
        }
        (Gaussian { width: wa }, Gaussian { width: wb }) => {
            let var = PulseShape::gaussian_sigma(wa).powi(2) + PulseShape::gaussian_sigma(wb).powi(2);
            (-0.5 * tau * tau / var).exp() / (2.0 * PI * var).sqrt()
        }
        (OneSidedExponential { width: a }, Gaussian { width: w }) => {
            exp_gauss_overlap(a, PulseShape::gaussian_sigma(w), tau)
        }
        (Gaussian { width: w }, OneSidedExponential { width: a }) => {
            exp_gauss_overlap(a, PulseShape::gaussian_sigma(w), -tau)
        }
    }
}

/// Lags where `overlap(f1, f2, .)` is not smooth.
fn overlap_kinks(f1: &PulseShape, f2: &PulseShape) -> Vec<f64> {
    let mut out = Vec::new();
    for k1 in f1.kinks() {
        for k2 in f2.kinks() {
            out.push(k2 * f2.width() - k1 * f1.width());
        }
    }
    out
}

const GL8_NODES: [f64; 4] = [
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL8_WEIGHTS: [f64; 4] = [
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

fn gauss_legendre<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut acc = 0.0;
    for (x, w) in GL8_NODES.iter().zip(GL8_WEIGHTS) {
        acc += w * (f(mid - half * x) + f(mid + half * x));
    }
    acc * half
}

/// Overlap as seen between two bin-averaged current samples `tau` apart.
///
/// Averaging both currents over bins of width `dt` smooths the overlap with
/// a unit-area triangle of half-width `dt`:
/// `∫ F12(tau + s) (dt - |s|) / dt^2 ds`.
pub fn sampled_overlap(f1: &PulseShape, f2: &PulseShape, tau: f64, dt: f64) -> f64 {
    let mut cuts: Vec<f64> = overlap_kinks(f1, f2)
        .into_iter()
        .map(|k| k - tau)
        .filter(|s| *s > -dt && *s < dt && *s != 0.0)
        .collect();
    cuts.extend([-dt, 0.0, dt]);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let integrand = |s: f64| overlap(f1, f2, tau + s) * (dt - s.abs()) / (dt * dt);
    let mut total = 0.0;
    for w in cuts.windows(2) {
        // Subdivide each smooth piece so the exponential and Gaussian
        // shapes are resolved well below the bin width.
        let pieces = 4;
        let h = (w[1] - w[0]) / pieces as f64;
        for p in 0..pieces {
            let a = w[0] + p as f64 * h;
            total += gauss_legendre(&integrand, a, a + h);
        }
    }
    total
}
