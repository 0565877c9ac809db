//! Correlated twin-beam photon streams.
//!
//! Spontaneous mode divides the acquisition into slots one coherence time
//! wide; each slot holds a thermally distributed (geometric) number of
//! photon pairs with mean `V`. Stimulated mode injects a Poisson seed beam
//! into arm 2, and every seed photon triggers with probability `V` one
//! photon in arm 1 plus one extra photon in arm 2.
//!
//! Streams are generated in chunks of whole slots, each chunk with its own
//! random substream, so the output depends only on the configuration.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Geometric};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// Upper gain accepted by the stimulated generator.
pub const STIMULATED_MAX_GAIN: f64 = 0.01;

/// Tolerance on `|F tau_coh - V| / V` when both flux and gain are given.
pub const FLUX_GAIN_TOLERANCE: f64 = 1e-6;

/// Target number of photons per generation chunk.
const CHUNK_EVENTS: f64 = 65_536.0;

/// Largest slot count whose indices stay exact in `f64`.
const MAX_SLOTS: f64 = 9_007_199_254_740_992.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceMode {
    Spontaneous,
    Stimulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    pub mode: SourceMode,
    /// Pair rate per arm in photons/s (spontaneous emission).
    pub mean_flux: f64,
    /// Mean photon number per mode.
    pub gain: f64,
    /// Seconds.
    pub coherence_time: f64,
    /// Seed beam flux in photons/s (stimulated mode).
    pub seed_flux: f64,
    /// Acquisition length in seconds.
    pub duration: f64,
    pub rng_seed: u64,
    /// Adds the spontaneous pair stream on top of stimulated emission.
    #[serde(default)]
    pub spontaneous_background: bool,
}

impl SourceConfig {
    /// Spontaneous source from flux and/or gain. When only one is given the
    /// other follows from one temporal mode per coherence time.
    pub fn spontaneous(
        mean_flux: Option<f64>,
        gain: Option<f64>,
        coherence_time: f64,
        duration: f64,
        rng_seed: u64,
    ) -> Result<Self> {
        let (mean_flux, gain) = resolve_flux_gain(mean_flux, gain, coherence_time)?;
        let cfg = SourceConfig {
            mode: SourceMode::Spontaneous,
            mean_flux,
            gain,
            coherence_time,
            seed_flux: 0.0,
            duration,
            rng_seed,
            spontaneous_background: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn stimulated(
        seed_flux: f64,
        gain: f64,
        coherence_time: f64,
        duration: f64,
        rng_seed: u64,
    ) -> Result<Self> {
        if !(coherence_time > 0.0) {
            return Err(Error::config("coherence_time must be > 0"));
        }
        let cfg = SourceConfig {
            mode: SourceMode::Stimulated,
            mean_flux: gain / coherence_time,
            gain,
            coherence_time,
            seed_flux,
            duration,
            rng_seed,
            spontaneous_background: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_seed(&self, rng_seed: u64) -> Self {
        SourceConfig {
            rng_seed,
            ..self.clone()
        }
    }

    /// Same source with down-conversion switched off (pump blocked). In
    /// stimulated mode the seed beam still reaches arm 2.
    pub fn unpumped(&self) -> Self {
        SourceConfig {
            gain: 0.0,
            mean_flux: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(format!("source.{name} must be finite and >= 0, got {v}")))
            }
        };
        finite_nonneg("mean_flux", self.mean_flux)?;
        finite_nonneg("gain", self.gain)?;
        finite_nonneg("seed_flux", self.seed_flux)?;
        if !(self.coherence_time.is_finite() && self.coherence_time > 0.0) {
            return Err(Error::config(format!(
                "source.coherence_time must be > 0, got {}",
                self.coherence_time
            )));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(Error::config(format!(
                "source.duration must be > 0, got {}",
                self.duration
            )));
        }
        if self.mode == SourceMode::Spontaneous || self.spontaneous_background {
            check_flux_gain(self.mean_flux, self.gain, self.coherence_time)?;
        }
        if self.duration / self.coherence_time >= MAX_SLOTS {
            return Err(Error::config(format!(
                "duration / coherence_time = {:e} overflows the slot index",
                self.duration / self.coherence_time
            )));
        }
        Ok(())
    }

    /// Mean photon flux reaching each arm, photons/s.
    pub fn arm_fluxes(&self) -> (f64, f64) {
        let spont = if self.mode == SourceMode::Spontaneous || self.spontaneous_background {
            self.mean_flux
        } else {
            0.0
        };
        match self.mode {
            SourceMode::Spontaneous => (spont, spont),
            SourceMode::Stimulated => (
                self.gain * self.seed_flux + spont,
                (1.0 + self.gain) * self.seed_flux + spont,
            ),
        }
    }

    /// Rejects gains outside the regimes the source model covers.
    pub fn check_regime(&self) -> Result<()> {
        match self.mode {
            SourceMode::Spontaneous => {
                if self.gain >= 1.0 {
                    return Err(Error::RegimeUnsupported(format!(
                        "spontaneous gain V = {} >= 1 (strong-gain regime)",
                        self.gain
                    )));
                }
            }
            SourceMode::Stimulated => {
                if self.gain > STIMULATED_MAX_GAIN {
                    return Err(Error::RegimeUnsupported(format!(
                        "stimulated gain V = {} exceeds {STIMULATED_MAX_GAIN}",
                        self.gain
                    )));
                }
                if !(self.seed_flux > 0.0) {
                    return Err(Error::config(format!(
                        "stimulated mode needs seed_flux > 0, got {}",
                        self.seed_flux
                    )));
                }
                if self.spontaneous_background && self.gain >= 1.0 {
                    return Err(Error::RegimeUnsupported("spontaneous background with V >= 1".into()));
                }
            }
        }
        Ok(())
    }

    /// Splits the acquisition into generation chunks.
    pub fn chunk_plan(&self) -> ChunkPlan {
        let total_slots = (self.duration / self.coherence_time).floor() as u64;
        let (f1, f2) = self.arm_fluxes();
        let rate = (f1 + f2).max(1.0 / self.duration);
        let target = CHUNK_EVENTS / rate;
        let slots_per_chunk = ((target / self.coherence_time).floor() as u64).clamp(1, total_slots.max(1));
        let n_chunks = if total_slots == 0 {
            1
        } else {
            total_slots.div_ceil(slots_per_chunk)
        };
        ChunkPlan {
            total_slots,
            slots_per_chunk,
            n_chunks,
        }
    }
}

fn resolve_flux_gain(flux: Option<f64>, gain: Option<f64>, tau: f64) -> Result<(f64, f64)> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::config(format!("coherence_time must be > 0, got {tau}")));
    }
    match (flux, gain) {
        (Some(f), Some(v)) => {
            check_flux_gain(f, v, tau)?;
            Ok((f, v))
        }
        (Some(f), None) => Ok((f, f * tau)),
        (None, Some(v)) => Ok((v / tau, v)),
        (None, None) => Err(Error::config("spontaneous source needs mean_flux or gain")),
    }
}

fn check_flux_gain(flux: f64, gain: f64, tau: f64) -> Result<()> {
    let implied = flux * tau;
    let scale = gain.abs().max(implied.abs());
    if scale > 0.0 && (implied - gain).abs() > FLUX_GAIN_TOLERANCE * scale {
        return Err(Error::config(format!(
            "inconsistent source: mean_flux * coherence_time = {implied:e} but gain = {gain:e}"
        )));
    }
    Ok(())
}

/// Partition of the acquisition into chunks of whole coherence slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkPlan {
    pub total_slots: u64,
    pub slots_per_chunk: u64,
    pub n_chunks: u64,
}

impl ChunkPlan {
    /// `[start, end)` in seconds covered by chunk `index`; the last chunk
    /// extends to the end of the acquisition.
    pub fn bounds(&self, cfg: &SourceConfig, index: u64) -> (f64, f64) {
        let start = (index * self.slots_per_chunk) as f64 * cfg.coherence_time;
        let end = if index + 1 >= self.n_chunks {
            cfg.duration
        } else {
            ((index + 1) * self.slots_per_chunk) as f64 * cfg.coherence_time
        };
        (start, end)
    }

    fn slot_range(&self, index: u64) -> (u64, u64) {
        let start = index * self.slots_per_chunk;
        (start, (start + self.slots_per_chunk).min(self.total_slots))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairLink {
    pub arm1: usize,
    pub arm2: usize,
}

/// Photon arrival times in the two arms with pair bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct PairEventStream {
    pub mode: SourceMode,
    pub coherence_time: f64,
    pub duration: f64,
    pub arm1: Vec<f64>,
    pub arm2: Vec<f64>,
    pub links: Vec<PairLink>,
}

impl PairEventStream {
    pub fn empty(cfg: &SourceConfig) -> Self {
        PairEventStream {
            mode: cfg.mode,
            coherence_time: cfg.coherence_time,
            duration: cfg.duration,
            arm1: Vec::new(),
            arm2: Vec::new(),
            links: Vec::new(),
        }
    }

    /// Appends a later chunk.
    fn extend(&mut self, chunk: PairEventStream) {
        let off1 = self.arm1.len();
        let off2 = self.arm2.len();
        self.arm1.extend(chunk.arm1);
        self.arm2.extend(chunk.arm2);
        self.links.extend(chunk.links.into_iter().map(|l| PairLink {
            arm1: l.arm1 + off1,
            arm2: l.arm2 + off2,
        }));
    }

    /// Checks ordering, range and pair-timing invariants.
    pub fn check_invariants(&self) -> Result<()> {
        for (name, arm) in [("arm1", &self.arm1), ("arm2", &self.arm2)] {
            if arm.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::data(format!("{name} is not sorted")));
            }
            if arm.iter().any(|t| !(*t >= 0.0 && *t < self.duration)) {
                return Err(Error::data(format!("{name} has times outside [0, duration)")));
            }
        }
        for l in &self.links {
            let (Some(t1), Some(t2)) = (self.arm1.get(l.arm1), self.arm2.get(l.arm2)) else {
                return Err(Error::data("pair link out of range"));
            };
            if (t1 - t2).abs() > self.coherence_time * (1.0 + 1e-9) {
                return Err(Error::data(format!(
                    "linked pair separated by {:e} s > coherence time",
                    (t1 - t2).abs()
                )));
            }
        }
        Ok(())
    }
}

/// Spontaneous (thermal) twin-beam emission.
pub fn generate_spontaneous(cfg: &SourceConfig) -> Result<PairEventStream> {
    if cfg.mode != SourceMode::Spontaneous {
        return Err(Error::config("generate_spontaneous needs mode = spontaneous"));
    }
    generate(cfg)
}

/// Seeded (stimulated) emission.
pub fn generate_stimulated(cfg: &SourceConfig) -> Result<PairEventStream> {
    if cfg.mode != SourceMode::Stimulated {
        return Err(Error::config("generate_stimulated needs mode = stimulated"));
    }
    generate(cfg)
}

/// Generates the whole stream; chunks are produced in parallel and joined
/// in time order.
pub fn generate(cfg: &SourceConfig) -> Result<PairEventStream> {
    cfg.validate()?;
    cfg.check_regime()?;
    let plan = cfg.chunk_plan();
    let chunks: Vec<PairEventStream> = (0..plan.n_chunks)
        .into_par_iter()
        .map(|c| generate_chunk_unchecked(cfg, &plan, c))
        .collect();
    let mut out = PairEventStream::empty(cfg);
    for chunk in chunks {
        out.extend(chunk);
    }
    Ok(out)
}

/// Generates chunk `index` of `plan`. Times are absolute; links index into
/// the chunk's own arms.
pub fn generate_chunk(cfg: &SourceConfig, plan: &ChunkPlan, index: u64) -> Result<PairEventStream> {
    cfg.validate()?;
    cfg.check_regime()?;
    if index >= plan.n_chunks {
        return Err(Error::config(format!(
            "chunk {index} out of range (plan has {})",
            plan.n_chunks
        )));
    }
    Ok(generate_chunk_unchecked(cfg, plan, index))
}

fn generate_chunk_unchecked(cfg: &SourceConfig, plan: &ChunkPlan, index: u64) -> PairEventStream {
    let (start, end) = plan.bounds(cfg, index);
    let mut pairs = Vec::new();
    let mut singles = Vec::new();
    let spont = cfg.mode == SourceMode::Spontaneous || cfg.spontaneous_background;
    if spont && cfg.gain > 0.0 {
        let purpose = match cfg.mode {
            SourceMode::Spontaneous => Purpose::Source,
            SourceMode::Stimulated => Purpose::SpontaneousBackground,
        };
        let mut rng = rng::substream(cfg.rng_seed, purpose, 0, index);
        spontaneous_pairs(cfg, plan.slot_range(index), &mut rng, &mut pairs);
    }
    if cfg.mode == SourceMode::Stimulated && cfg.seed_flux > 0.0 {
        let mut rng = rng::substream(cfg.rng_seed, Purpose::Source, 1, index);
        stimulated_events(cfg, (start, end), &mut rng, &mut pairs, &mut singles);
    }
    assemble(cfg, pairs, singles)
}

fn spontaneous_pairs(cfg: &SourceConfig, (first, last): (u64, u64), rng: &mut ChaCha8Rng, out: &mut Vec<(f64, f64)>) {
    let v = cfg.gain;
    let tau = cfg.coherence_time;
    // P(slot non-empty) = V/(1+V); given non-empty, the count minus one is
    // again geometric with the same law.
    let occupied = v / (1.0 + v);
    // Inverse transform for the empty-slot run; far cheaper than rejection
    // sampling at small p.
    let log_empty = (-occupied).ln_1p();
    let extra = Geometric::new(1.0 - occupied).expect("0 < p <= 1");
    let mut slot = first;
    loop {
        let u = 1.0 - rng.random::<f64>();
        let gap = u.ln() / log_empty;
        if !(gap < (last - slot) as f64) {
            break;
        }
        slot = match slot.checked_add(gap as u64) {
            Some(s) if s < last => s,
            _ => break,
        };
        let n = 1 + extra.sample(rng);
        let base = slot as f64;
        let begin = out.len();
        for _ in 0..n {
            let u1: f64 = rng.random();
            let u2: f64 = rng.random();
            let t1 = (base + u1) * tau;
            // Partner offset uniform on [0, tau), wrapped inside the slot.
            let off = if u1 + u2 < 1.0 { u1 + u2 } else { u1 + u2 - 1.0 };
            let t2 = (base + off) * tau;
            if t1 < cfg.duration && t2 < cfg.duration {
                out.push((t1, t2));
            }
        }
        if out.len() - begin > 1 {
            out[begin..].sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        slot += 1;
    }
}

fn stimulated_events(
    cfg: &SourceConfig,
    (start, end): (f64, f64),
    rng: &mut ChaCha8Rng,
    pairs: &mut Vec<(f64, f64)>,
    seeds: &mut Vec<f64>,
) {
    let gaps = Exp::new(cfg.seed_flux).expect("seed_flux > 0");
    let tau = cfg.coherence_time;
    let jitter = |ts: f64, u: f64| {
        let t = ts + u * tau;
        if t < end {
            t
        } else {
            (ts - u * tau).max(start)
        }
    };
    let mut t = start;
    loop {
        t += gaps.sample(rng);
        if t >= end {
            break;
        }
        seeds.push(t);
        if cfg.gain > 0.0 && rng.random::<f64>() < cfg.gain {
            let j1: f64 = rng.random();
            let j2: f64 = rng.random();
            pairs.push((jitter(t, j1), jitter(t, j2)));
        }
    }
}

/// Counts of `times` in consecutive windows of width `window` starting at
/// zero. A trailing partial window is dropped.
pub fn window_counts(times: &[f64], window: f64, duration: f64) -> Vec<u32> {
    let n = (duration / window).floor() as usize;
    let mut counts = vec![0u32; n];
    for &t in times {
        let k = (t / window) as usize;
        if t >= 0.0 && k < n {
            counts[k] += 1;
        }
    }
    counts
}

/// Sorts both arms and rewrites links to sorted positions.
fn assemble(cfg: &SourceConfig, pairs: Vec<(f64, f64)>, singles2: Vec<f64>) -> PairEventStream {
    // Spontaneous chunks come out in slot order; both arms are then usually
    // sorted already and the links are the identity.
    // Within a multi-pair slot the partners may be out of order; they are
    // fixed up by a local sort that stays inside the slot.
    if singles2.is_empty() && pairs.windows(2).all(|w| w[0].0 <= w[1].0) {
        let arm1: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut i = 0;
        while i < pairs.len() {
            let mut j = i + 1;
            while j < pairs.len() && pairs[j].1 < pairs[j - 1].1.max(pairs[i].1) {
                j += 1;
            }
            if j - i > 1 {
                order[i..j].sort_by(|&a, &b| pairs[a].1.total_cmp(&pairs[b].1));
            }
            i = j;
        }
        if !order.windows(2).all(|w| pairs[w[0]].1 <= pairs[w[1]].1) {
            return assemble_sorted(cfg, pairs, singles2);
        }
        let arm2: Vec<f64> = order.iter().map(|&k| pairs[k].1).collect();
        let mut pos2 = vec![0usize; pairs.len()];
        for (pos, &k) in order.iter().enumerate() {
            pos2[k] = pos;
        }
        let links = (0..arm1.len()).map(|i| PairLink { arm1: i, arm2: pos2[i] }).collect();
        return PairEventStream {
            mode: cfg.mode,
            coherence_time: cfg.coherence_time,
            duration: cfg.duration,
            arm1,
            arm2,
            links,
        };
    }
    assemble_sorted(cfg, pairs, singles2)
}

fn assemble_sorted(cfg: &SourceConfig, pairs: Vec<(f64, f64)>, singles2: Vec<f64>) -> PairEventStream {
    let mut idx1: Vec<usize> = (0..pairs.len()).collect();
    idx1.sort_by(|&a, &b| pairs[a].0.total_cmp(&pairs[b].0));

    // Arm 2 holds the pair partners first, then the unlinked seed photons.
    let n2 = pairs.len() + singles2.len();
    let time2 = |i: usize| {
        if i < pairs.len() {
            pairs[i].1
        } else {
            singles2[i - pairs.len()]
        }
    };
    let mut idx2: Vec<usize> = (0..n2).collect();
    idx2.sort_by(|&a, &b| time2(a).total_cmp(&time2(b)));
    let mut pos2 = vec![0usize; pairs.len()];
    for (pos, &i) in idx2.iter().enumerate() {
        if i < pairs.len() {
            pos2[i] = pos;
        }
    }

    let arm1: Vec<f64> = idx1.iter().map(|&i| pairs[i].0).collect();
    let arm2: Vec<f64> = idx2.iter().map(|&i| time2(i)).collect();
    let links = idx1
        .iter()
        .enumerate()
        .map(|(p1, &i)| PairLink { arm1: p1, arm2: pos2[i] })
        .collect();
    PairEventStream {
        mode: cfg.mode,
        coherence_time: cfg.coherence_time,
        duration: cfg.duration,
        arm1,
        arm2,
        links,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gain_emits_nothing() {
        for t in [1e-6, 1e-3] {
            let cfg = SourceConfig::spontaneous(None, Some(0.0), 1e-12, t, 3).unwrap();
            let s = generate_spontaneous(&cfg).unwrap();
            assert!(s.arm1.is_empty() && s.arm2.is_empty() && s.links.is_empty());
        }
    }

    #[test]
    fn flux_and_gain_must_agree() {
        assert!(SourceConfig::spontaneous(Some(1e10), Some(1e-3), 1e-13, 1e-3, 0).is_ok());
        assert!(SourceConfig::spontaneous(Some(1e10), Some(1.00001e-3), 1e-13, 1e-3, 0).is_err());
        let only_flux = SourceConfig::spontaneous(Some(5e8), None, 2e-12, 1e-3, 0).unwrap();
        assert!((only_flux.gain - 1e-3).abs() < 1e-15);
        let only_gain = SourceConfig::spontaneous(None, Some(1e-3), 2e-12, 1e-3, 0).unwrap();
        assert!((only_gain.mean_flux - 5e8).abs() < 1e-3);
        assert!(matches!(
            SourceConfig::spontaneous(None, None, 1e-12, 1e-3, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rejects_strong_gain() {
        let cfg = SourceConfig::spontaneous(None, Some(1.0), 1e-9, 1e-6, 0).unwrap();
        assert!(matches!(generate_spontaneous(&cfg), Err(Error::RegimeUnsupported(_))));
        let cfg = SourceConfig::stimulated(1e9, 0.02, 1e-12, 1e-6, 0).unwrap();
        assert!(matches!(generate_stimulated(&cfg), Err(Error::RegimeUnsupported(_))));
    }

    #[test]
    fn stimulated_needs_seed() {
        let cfg = SourceConfig::stimulated(0.0, 0.001, 1e-12, 1e-6, 0).unwrap();
        assert!(matches!(generate_stimulated(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn slot_overflow_is_a_config_error() {
        let err = SourceConfig::spontaneous(None, Some(1e-3), 1e-18, 1e3, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn mode_mismatch_is_rejected() {
        let cfg = SourceConfig::stimulated(1e9, 0.001, 1e-12, 1e-6, 0).unwrap();
        assert!(generate_spontaneous(&cfg).is_err());
    }

    #[test]
    fn stimulated_mean_fluxes() {
        let cfg = SourceConfig::stimulated(1e12, 1e-3, 1e-13, 1.0, 0).unwrap();
        let (f1, f2) = cfg.arm_fluxes();
        assert!((f1 - 1e9).abs() < 1e-3);
        assert!((f2 - 1.001e12).abs() < 1.0);
    }

    #[test]
    fn spontaneous_stream_invariants_hold() {
        let cfg = SourceConfig::spontaneous(None, Some(0.2), 1e-9, 2e-3, 11).unwrap();
        let s = generate_spontaneous(&cfg).unwrap();
        s.check_invariants().unwrap();
        assert_eq!(s.links.len(), s.arm1.len());
        assert_eq!(s.arm1.len(), s.arm2.len());
    }

    #[test]
    fn stimulated_stream_invariants_hold() {
        let cfg = SourceConfig::stimulated(1e9, 0.01, 1e-12, 1e-3, 5).unwrap();
        let s = generate_stimulated(&cfg).unwrap();
        s.check_invariants().unwrap();
        assert_eq!(s.links.len(), s.arm1.len());
        assert!(s.arm2.len() > s.arm1.len());
    }

    #[test]
    fn chunks_tile_the_acquisition() {
        let cfg = SourceConfig::spontaneous(Some(5e8), Some(1e-3), 2e-12, 0.01, 1).unwrap();
        let plan = cfg.chunk_plan();
        let mut prev_end = 0.0;
        for c in 0..plan.n_chunks {
            let (a, b) = plan.bounds(&cfg, c);
            assert_eq!(a, prev_end);
            assert!(b > a);
            prev_end = b;
        }
        assert_eq!(prev_end, cfg.duration);
    }
}
