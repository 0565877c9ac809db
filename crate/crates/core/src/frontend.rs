//! Photon events to sampled photocurrent.
//!
//! A detector keeps each incident photon with probability `eta` (a beam
//! splitter in front of an ideal detector), turns each kept photon into a
//! charge `q` drawn from its gain distribution and spreads that charge over
//! time with a unit-area pulse. Dark events and uncorrelated background
//! light go through the same pulse and gain model; amplifier noise is added
//! as white Gaussian noise per sample.
//!
//! Samples are bin averages: `samples[m]` is the mean current over
//! `[t0 + m dt, t0 + (m + 1) dt)`, so a single charge `q` always integrates
//! to `q` regardless of pulse shape and sub-sample timing.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pulse::{PulseShape, GAUSSIAN_TRUNCATION};
use crate::rng::{self, Purpose};

/// Largest allowed sample step as a fraction of the pulse width.
pub const MAX_DT_FRACTION: f64 = 0.1;

/// Sub-sample timing resolution of tabulated Gaussian pulses.
const GAUSSIAN_PHASES: usize = 256;

/// Samples per amplifier-noise substream.
const NOISE_CHUNK: usize = 1 << 20;

/// Charge released per detection event, in charge units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GainDistribution {
    Deterministic { mean: f64 },
    Exponential { mean: f64 },
    Gamma { mean: f64, shape: f64 },
}

impl GainDistribution {
    pub fn mean(&self) -> f64 {
        match *self {
            GainDistribution::Deterministic { mean }
            | GainDistribution::Exponential { mean }
            | GainDistribution::Gamma { mean, .. } => mean,
        }
    }

    /// `<q^2> / <q>^2`.
    pub fn excess_noise_factor(&self) -> f64 {
        match *self {
            GainDistribution::Deterministic { .. } => 1.0,
            GainDistribution::Exponential { .. } => 2.0,
            GainDistribution::Gamma { shape, .. } => 1.0 + 1.0 / shape,
        }
    }

    pub fn second_moment(&self) -> f64 {
        self.excess_noise_factor() * self.mean().powi(2)
    }

    pub fn validate(&self) -> Result<()> {
        let mean = self.mean();
        if !(mean.is_finite() && mean > 0.0) {
            return Err(Error::config(format!("gain mean must be > 0, got {mean}")));
        }
        if let GainDistribution::Gamma { shape, .. } = *self {
            if !(shape.is_finite() && shape > 0.0) {
                return Err(Error::config(format!("gamma gain shape must be > 0, got {shape}")));
            }
        }
        Ok(())
    }

    pub fn sampler(&self) -> GainSampler {
        match *self {
            GainDistribution::Deterministic { mean } => GainSampler::Fixed(mean),
            GainDistribution::Exponential { mean } => {
                GainSampler::Exp(Exp::new(1.0 / mean).expect("validated mean"))
            }
            GainDistribution::Gamma { mean, shape } => {
                GainSampler::Gamma(Gamma::new(shape, mean / shape).expect("validated gamma"))
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum GainSampler {
    Fixed(f64),
    Exp(Exp<f64>),
    Gamma(Gamma<f64>),
}

impl Distribution<f64> for GainSampler {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            GainSampler::Fixed(q) => *q,
            GainSampler::Exp(d) => d.sample(rng),
            GainSampler::Gamma(d) => d.sample(rng),
        }
    }
}

fn default_id() -> String {
    "detector".to_string()
}

/// One analog detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorModel {
    #[serde(default = "default_id")]
    pub id: String,
    pub eta: f64,
    pub pulse: PulseShape,
    pub gain: GainDistribution,
    /// Internal (dark) events per second.
    #[serde(default)]
    pub dark_rate: f64,
    /// White amplifier noise level; per-sample standard deviation is
    /// `amplifier_noise_rms / sqrt(dt)`.
    #[serde(default)]
    pub amplifier_noise_rms: f64,
    /// Uncorrelated background light, photons per second before `eta`.
    #[serde(default)]
    pub background_flux: f64,
}

impl DetectorModel {
    /// Noise-free detector.
    pub fn new(id: impl Into<String>, eta: f64, pulse: PulseShape, gain: GainDistribution) -> Self {
        DetectorModel {
            id: id.into(),
            eta,
            pulse,
            gain,
            dark_rate: 0.0,
            amplifier_noise_rms: 0.0,
            background_flux: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::config(format!(
                "{}: eta must lie in [0, 1], got {}",
                self.id, self.eta
            )));
        }
        self.pulse.validate()?;
        self.gain.validate()?;
        for (name, v) in [
            ("dark_rate", self.dark_rate),
            ("amplifier_noise_rms", self.amplifier_noise_rms),
            ("background_flux", self.background_flux),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{}: {name} must be >= 0, got {v}", self.id)));
            }
        }
        Ok(())
    }

    pub fn check_dt(&self, dt: f64) -> Result<()> {
        let limit = self.pulse.width() * MAX_DT_FRACTION;
        if !(dt > 0.0 && dt <= limit * (1.0 + 1e-9)) {
            return Err(Error::config(format!(
                "{}: dt = {dt:e} s must be in (0, {limit:e}] (a tenth of the pulse width)",
                self.id
            )));
        }
        Ok(())
    }

    /// Mean rate of uncorrelated events (dark plus detected background).
    pub fn noise_event_rate(&self) -> f64 {
        self.dark_rate + self.eta * self.background_flux
    }
}

/// Mean photocurrent `eta <q> F` produced by an incident flux `F`.
pub fn mean_current_prediction(det: &DetectorModel, flux: f64) -> f64 {
    det.eta * det.gain.mean() * flux
}

/// Mean current including dark and background events.
pub fn mean_current_with_noise(det: &DetectorModel, flux: f64) -> f64 {
    mean_current_prediction(det, flux) + det.gain.mean() * det.noise_event_rate()
}

/// Keeps each event independently with probability `eta`.
pub fn thin<R: Rng + ?Sized>(events: &[f64], eta: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::config(format!("eta must lie in [0, 1], got {eta}")));
    }
    if eta == 1.0 {
        return Ok(events.to_vec());
    }
    if eta == 0.0 {
        return Ok(Vec::new());
    }
    Ok(events.iter().copied().filter(|_| rng.random::<f64>() < eta).collect())
}

/// Provenance attached to a trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub detector_id: String,
    pub units: String,
    pub rng_seed: u64,
    pub config_hash: String,
}

impl TraceMeta {
    pub fn new(detector_id: impl Into<String>) -> Self {
        TraceMeta {
            detector_id: detector_id.into(),
            units: CHARGE_UNITS_PER_SECOND.to_string(),
            rng_seed: 0,
            config_hash: String::new(),
        }
    }
}

pub const CHARGE_UNITS_PER_SECOND: &str = "charge_units/s";

/// Uniformly sampled photocurrent.
#[derive(Debug, Clone, PartialEq)]
pub struct CurrentTrace {
    pub dt: f64,
    pub t0: f64,
    pub samples: Vec<f64>,
    pub meta: TraceMeta,
}

impl CurrentTrace {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 * self.dt
    }

    pub fn mean(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    /// Total charge, `sum(samples) * dt`.
    pub fn charge(&self) -> f64 {
        self.samples.iter().sum::<f64>() * self.dt
    }

    /// Multiplies every sample by `g`.
    pub fn scaled(&self, g: f64) -> CurrentTrace {
        CurrentTrace {
            samples: self.samples.iter().map(|x| x * g).collect(),
            ..self.clone()
        }
    }
}

/// Spreads charges over bins according to the pulse shape.
enum Depositor {
    Rectangular {
        width: f64,
    },
    Exponential {
        width: f64,
        decay: f64,
        one_minus_decay: f64,
        carried: f64,
        pending: f64,
        bin: usize,
    },
    Gaussian {
        table: Vec<f64>,
        taps: usize,
        first: i64,
    },
}

impl Depositor {
    fn new(shape: &PulseShape, dt: f64) -> Self {
        match *shape {
            PulseShape::Rectangular { width } => Depositor::Rectangular { width },
            PulseShape::OneSidedExponential { width } => Depositor::Exponential {
                width,
                decay: (-dt / width).exp(),
                one_minus_decay: -(-dt / width).exp_m1(),
                carried: 0.0,
                pending: 0.0,
                bin: 0,
            },
            PulseShape::Gaussian { width } => {
                let half = GAUSSIAN_TRUNCATION * PulseShape::gaussian_sigma(width);
                let first = (-half / dt).floor() as i64;
                let last = ((dt + half) / dt).floor() as i64;
                let taps = (last - first + 1) as usize;
                let mut table = vec![0.0; GAUSSIAN_PHASES * taps];
                for p in 0..GAUSSIAN_PHASES {
                    let u = (p as f64 + 0.5) / GAUSSIAN_PHASES as f64 * dt;
                    let row = &mut table[p * taps..(p + 1) * taps];
                    for (k, tap) in row.iter_mut().enumerate() {
                        let j = first + k as i64;
                        let lo = j as f64 * dt - u;
                        *tap = (shape.synthesis_cdf(lo + dt) - shape.synthesis_cdf(lo)) / dt;
                    }
                    let area: f64 = row.iter().sum::<f64>() * dt;
                    row.iter_mut().for_each(|x| *x /= area);
                }
                Depositor::Gaussian { table, taps, first }
            }
        }
    }

    /// Adds charge `q` arriving at time `t`. Exponential pulses require
    /// calls in nondecreasing `t`.
    fn deposit(&mut self, samples: &mut [f64], dt: f64, t: f64, q: f64) {
        let n = samples.len();
        let x = t / dt;
        if !(x >= 0.0) {
            return;
        }
        // Truncation is floor for nonnegative values and avoids a libm call.
        let m0 = x as usize;
        match self {
            Depositor::Rectangular { width } => {
                if m0 >= n {
                    return;
                }
                let end = t + *width;
                let m1 = (end / dt) as usize;
                let scale = q / (*width * dt);
                if m1 == m0 {
                    samples[m0] += q / dt;
                    return;
                }
                // Partial first and last bins, full bins in between.
                samples[m0] += scale * ((m0 + 1) as f64 * dt - t);
                let full = scale * dt;
                let stop = m1.min(n);
                for s in &mut samples[m0 + 1..stop] {
                    *s += full;
                }
                if m1 < n {
                    samples[m1] += scale * (end - m1 as f64 * dt);
                }
            }
            Depositor::Exponential {
                width,
                decay,
                one_minus_decay,
                carried,
                pending,
                bin,
            } => {
                debug_assert!(m0 >= *bin, "exponential deposits must be time ordered");
                advance_exponential(samples, dt, *decay, *one_minus_decay, carried, pending, bin, m0.min(n));
                if m0 < n {
                    let rest = ((m0 + 1) as f64 * dt - t).max(0.0) / *width;
                    samples[m0] += -q * (-rest).exp_m1() / dt;
                    *pending += q * (-rest).exp();
                }
            }
            Depositor::Gaussian { table, taps, first } => {
                let u = t - m0 as f64 * dt;
                let phase = ((u / dt * GAUSSIAN_PHASES as f64) as usize).min(GAUSSIAN_PHASES - 1);
                let row = &table[phase * *taps..(phase + 1) * *taps];
                let start = m0 as i64 + *first;
                for (k, tap) in row.iter().enumerate() {
                    let idx = start + k as i64;
                    if idx >= 0 && (idx as usize) < n {
                        samples[idx as usize] += q * tap;
                    }
                }
            }
        }
    }

    fn finish(&mut self, samples: &mut [f64], dt: f64) {
        if let Depositor::Exponential {
            decay,
            one_minus_decay,
            carried,
            pending,
            bin,
            ..
        } = self
        {
            let n = samples.len();
            advance_exponential(samples, dt, *decay, *one_minus_decay, carried, pending, bin, n);
        }
    }
}

/// Runs the exponential recursion forward until `bin == target`.
#[allow(clippy::too_many_arguments)]
fn advance_exponential(
    samples: &mut [f64],
    dt: f64,
    decay: f64,
    one_minus_decay: f64,
    carried: &mut f64,
    pending: &mut f64,
    bin: &mut usize,
    target: usize,
) {
    while *bin < target {
        samples[*bin] += *carried * one_minus_decay / dt;
        *carried = *carried * decay + *pending;
        *pending = 0.0;
        *bin += 1;
    }
}

/// Builds one detector's trace from time-ordered chunks of incident photons.
///
/// Signal photons are thinned by the caller; this type draws their charges
/// and adds dark events, background light and amplifier noise, each from
/// its own substream of `(seed, detector lane, chunk)`.
pub struct TraceSynthesizer {
    det: DetectorModel,
    dt: f64,
    duration: f64,
    seed: u64,
    lane: u8,
    samples: Vec<f64>,
    depositor: Depositor,
    last_chunk_end: f64,
    merged: Vec<(f64, f64)>,
}

impl TraceSynthesizer {
    pub fn new(det: &DetectorModel, dt: f64, duration: f64, seed: u64, lane: u8) -> Result<Self> {
        det.validate()?;
        det.check_dt(dt)?;
        if !(duration.is_finite() && duration > 0.0) {
            return Err(Error::config(format!("trace duration must be > 0, got {duration}")));
        }
        let n = (duration / dt).round() as usize;
        if n == 0 {
            return Err(Error::config("trace duration is shorter than one sample"));
        }
        Ok(TraceSynthesizer {
            det: det.clone(),
            dt,
            duration,
            seed,
            lane,
            samples: vec![0.0; n],
            depositor: Depositor::new(&det.pulse, dt),
            last_chunk_end: 0.0,
            merged: Vec::new(),
        })
    }

    /// Adds chunk `index` covering `[start, end)`; `signal` holds the
    /// detected (already thinned) photon times, sorted, inside that range.
    pub fn add_chunk(&mut self, index: u64, (start, end): (f64, f64), signal: &[f64]) -> Result<()> {
        if start < self.last_chunk_end || end < start {
            return Err(Error::data("trace chunks must be added in time order"));
        }
        self.last_chunk_end = end;
        let gains = self.det.gain.sampler();

        let mut rng_sig = rng::substream(self.seed, Purpose::SignalGain, self.lane, index);
        let sig: Vec<(f64, f64)> = signal.iter().map(|&t| (t, gains.sample(&mut rng_sig))).collect();

        let dark = poisson_events(
            self.det.dark_rate,
            (start, end),
            &gains,
            &mut rng::substream(self.seed, Purpose::Dark, self.lane, index),
        );
        let background = poisson_events(
            self.det.eta * self.det.background_flux,
            (start, end),
            &gains,
            &mut rng::substream(self.seed, Purpose::Background, self.lane, index),
        );

        merge3(&sig, &dark, &background, &mut self.merged);
        for &(t, q) in &self.merged {
            self.depositor.deposit(&mut self.samples, self.dt, t, q);
        }
        Ok(())
    }

    pub fn finish(mut self, meta: TraceMeta) -> CurrentTrace {
        self.depositor.finish(&mut self.samples, self.dt);
        if self.det.amplifier_noise_rms > 0.0 {
            let sigma = self.det.amplifier_noise_rms / self.dt.sqrt();
            for (c, block) in self.samples.chunks_mut(NOISE_CHUNK).enumerate() {
                let mut rng = rng::substream(self.seed, Purpose::Amplifier, self.lane, c as u64);
                for s in block {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *s += sigma * z;
                }
            }
        }
        CurrentTrace {
            dt: self.dt,
            t0: 0.0,
            samples: self.samples,
            meta,
        }
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }
}

fn poisson_events(rate: f64, (start, end): (f64, f64), gains: &GainSampler, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    if rate <= 0.0 {
        return out;
    }
    let gaps = Exp::new(rate).expect("rate > 0");
    let mut t = start;
    loop {
        t += gaps.sample(rng);
        if t >= end {
            break;
        }
        out.push((t, gains.sample(rng)));
    }
    out
}

/// Merges three time-sorted event lists into `out`.
fn merge3(a: &[(f64, f64)], b: &[(f64, f64)], c: &[(f64, f64)], out: &mut Vec<(f64, f64)>) {
    out.clear();
    out.reserve(a.len() + b.len() + c.len());
    let (mut i, mut j, mut k) = (0, 0, 0);
    let key = |s: &[(f64, f64)], i: usize| s.get(i).map_or(f64::INFINITY, |e| e.0);
    while i < a.len() || j < b.len() || k < c.len() {
        let (ta, tb, tc) = (key(a, i), key(b, j), key(c, k));
        if ta <= tb && ta <= tc {
            out.push(a[i]);
            i += 1;
        } else if tb <= tc {
            out.push(b[j]);
            j += 1;
        } else {
            out.push(c[k]);
            k += 1;
        }
    }
}

/// Synthesizes a trace from detected photon times in one pass.
///
/// `kept` must be sorted and lie in `[0, duration)`. The noise sources are
/// drawn from substreams of `seed` for detector `lane`.
pub fn synthesize_trace(
    kept: &[f64],
    det: &DetectorModel,
    dt: f64,
    duration: f64,
    seed: u64,
    lane: u8,
) -> Result<CurrentTrace> {
    if kept.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::data("event times must be sorted"));
    }
    let mut synth = TraceSynthesizer::new(det, dt, duration, seed, lane)?;
    synth.add_chunk(0, (0.0, duration), kept)?;
    let mut meta = TraceMeta::new(det.id.clone());
    meta.rng_seed = seed;
    Ok(synth.finish(meta))
}
