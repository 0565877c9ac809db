//! Auto- and cross-covariance of sampled currents versus lag.
//!
//! Traces are split into equal blocks. Each block is centred on its own
//! mean and the biased (`1/N`) lag products are accumulated directly in the
//! time domain; the record keeps the per-block curves so that any derived
//! quantity (lag integral, ratios) gets its error bar from block scatter.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::CurrentTrace;

/// Minimum ratio of trace duration to `n_segments * tau_max`.
pub const MIN_DURATION_FACTOR: f64 = 20.0;

/// Boundary values above this many standard errors flag an undecayed window.
pub const DECAY_SIGMAS: f64 = 2.0;

const TILE: usize = 4096;
const LANES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    /// Lags `0..=tau_max`; the function is even in the lag.
    Auto,
    /// Lags `-tau_max..=tau_max`.
    Cross,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRecord {
    pub kind: RecordKind,
    pub dt: f64,
    /// Seconds.
    pub lags: Vec<f64>,
    /// Covariance `<di_a(t) di_b(t + lag)>`, (charge units/s)^2.
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n_segments: usize,
    /// Whole-record means `(<i_a>, <i_b>)`.
    pub means: (f64, f64),
    /// Per-block covariance curves, `[segment][lag]`.
    pub block_values: Vec<Vec<f64>>,
    /// Per-block means `(<i_a>, <i_b>)`.
    pub block_means: Vec<(f64, f64)>,
    /// Detector ids and config hashes of the input traces.
    pub sources: Vec<String>,
}

/// Lag integral with its block-scatter standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagIntegral {
    pub value: f64,
    pub stderr: f64,
    /// False when the covariance has not decayed at the window edge.
    pub decayed: bool,
}

/// Mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Covariance of the means of two paired samples.
pub fn mean_covariance(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return 0.0;
    }
    let mx = xs[..n].iter().sum::<f64>() / n as f64;
    let my = ys[..n].iter().sum::<f64>() / n as f64;
    let c = xs[..n]
        .iter()
        .zip(&ys[..n])
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / (n - 1) as f64;
    c / n as f64
}

impl CorrelationRecord {
    pub fn n_lags(&self) -> usize {
        self.lags.len()
    }

    /// Index of the lag closest to `tau`, using `|tau|` for auto records.
    pub fn lag_index(&self, tau: f64) -> Result<usize> {
        let tau = match self.kind {
            RecordKind::Auto => tau.abs(),
            RecordKind::Cross => tau,
        };
        let first = self.lags.first().copied().unwrap_or(0.0);
        let k = ((tau - first) / self.dt).round();
        if !(k >= 0.0 && (k as usize) < self.lags.len()) {
            return Err(Error::data(format!("lag {tau:e} s outside the record")));
        }
        Ok(k as usize)
    }

    pub fn value_at(&self, tau: f64) -> Result<(f64, f64)> {
        let i = self.lag_index(tau)?;
        Ok((self.values[i], self.stderr[i]))
    }

    /// Per-block values at lag index `i`.
    pub fn block_column(&self, i: usize) -> Vec<f64> {
        self.block_values.iter().map(|b| b[i]).collect()
    }

    /// Trapezoid weights over the symmetric window `[-tau_max, tau_max]`.
    fn integral_weights(&self) -> Vec<f64> {
        let n = self.lags.len();
        let mut w = vec![self.dt; n];
        match self.kind {
            RecordKind::Cross => {
                if n > 0 {
                    w[0] *= 0.5;
                    w[n - 1] *= 0.5;
                }
                if n == 1 {
                    w[0] = 0.0;
                }
            }
            RecordKind::Auto => {
                // Even function: lag 0 once, interior twice, edge twice at half weight.
                for x in w.iter_mut().skip(1) {
                    *x *= 2.0;
                }
                if n > 1 {
                    w[n - 1] *= 0.5;
                } else {
                    w[0] = 0.0;
                }
            }
        }
        w
    }

    /// Weighted sum over lags of each block's curve.
    pub fn block_sums(&self, weights: &[f64]) -> Vec<f64> {
        self.block_values
            .iter()
            .map(|b| b.iter().zip(weights).map(|(v, w)| v * w).sum())
            .collect()
    }

    /// Lag integral over the recorded window.
    pub fn integrate(&self) -> LagIntegral {
        let w = self.integral_weights();
        let value = self.values.iter().zip(&w).map(|(v, w)| v * w).sum::<f64>();
        let stderr = if self.block_values.len() >= 2 {
            mean_stderr(&self.block_sums(&w)).1
        } else {
            self.stderr
                .iter()
                .zip(&w)
                .map(|(s, w)| (s * w).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let edge_ok = |i: usize| self.values[i].abs() <= DECAY_SIGMAS * self.stderr[i];
        let decayed = match (self.kind, self.lags.len()) {
            (_, 0) => true,
            (RecordKind::Cross, n) => edge_ok(0) && edge_ok(n - 1),
            (RecordKind::Auto, n) => edge_ok(n - 1),
        };
        LagIntegral {
            value,
            stderr,
            decayed,
        }
    }

    /// Lag integral as a free function.
    pub fn integral(record: &CorrelationRecord) -> LagIntegral {
        record.integrate()
    }

    /// Record with the lag axis reversed and arms swapped; only defined for
    /// cross records.
    pub fn swapped(&self) -> CorrelationRecord {
        let mut out = self.clone();
        if self.kind == RecordKind::Cross {
            out.values.reverse();
            out.stderr.reverse();
            for b in &mut out.block_values {
                b.reverse();
            }
            out.means = (self.means.1, self.means.0);
            out.block_means = self.block_means.iter().map(|&(a, b)| (b, a)).collect();
            out.sources.reverse();
        }
        out
    }

    /// Rebuilds `values` and `stderr` from `block_values`.
    pub(crate) fn refresh_from_blocks(&mut self) {
        for i in 0..self.lags.len() {
            let (m, s) = mean_stderr(&self.block_column(i));
            self.values[i] = m;
            self.stderr[i] = s;
        }
    }
}

/// Lane-parallel dot product accumulated into `acc`; lane `l` receives the
/// products at positions `== l (mod 8)`.
#[inline(always)]
fn dot_lanes(x: &[f64], y: &[f64], acc: &mut [f64; LANES]) {
    let n = x.len().min(y.len());
    let (x, y) = (&x[..n], &y[..n]);
    let mut xc = x.chunks_exact(LANES);
    let mut yc = y.chunks_exact(LANES);
    for (a, b) in (&mut xc).zip(&mut yc) {
        for l in 0..LANES {
            acc[l] += a[l] * b[l];
        }
    }
    for (l, (a, b)) in xc.remainder().iter().zip(yc.remainder()).enumerate() {
        acc[l] += a * b;
    }
}

#[inline(always)]
fn lag_products_impl(x: &[f64], y: &[f64], kmin: i64, kmax: i64, out: &mut [f64]) {
    let n = x.len();
    let n_lags = (kmax - kmin + 1) as usize;
    let mut acc = vec![[0.0f64; LANES]; n_lags];
    let mut j0 = 0;
    while j0 < n {
        for (li, k) in (kmin..=kmax).enumerate() {
            let ak = k.unsigned_abs() as usize;
            if ak >= n {
                continue;
            }
            let len = n - ak;
            if j0 >= len {
                continue;
            }
            let end = (j0 + TILE).min(len);
            let (xo, yo) = if k >= 0 { (0, ak) } else { (ak, 0) };
            dot_lanes(&x[xo + j0..xo + end], &y[yo + j0..yo + end], &mut acc[li]);
        }
        j0 += TILE;
    }
    for (o, a) in out.iter_mut().zip(&acc) {
        *o = ((a[0] + a[1]) + (a[2] + a[3])) + ((a[4] + a[5]) + (a[6] + a[7]));
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn lag_products_avx2(x: &[f64], y: &[f64], kmin: i64, kmax: i64, out: &mut [f64]) {
    lag_products_impl(x, y, kmin, kmax, out)
}

/// `out[k - kmin] = sum_j x[j] y[j + k]` over valid `j`, for `k` in
/// `kmin..=kmax`. The summation order depends only on the pair index, so
/// swapping `x` and `y` while negating the lag reproduces each value
/// bit for bit.
pub fn lag_products(x: &[f64], y: &[f64], kmin: i64, kmax: i64, out: &mut [f64]) {
    assert_eq!(x.len(), y.len());
    assert_eq!(out.len(), (kmax - kmin + 1) as usize);
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime. Lane order is
            // fixed in the source, so results match the baseline path.
            unsafe { lag_products_avx2(x, y, kmin, kmax, out) };
            return;
        }
    }
    lag_products_impl(x, y, kmin, kmax, out)
}

fn check_pair(a: &CurrentTrace, b: &CurrentTrace) -> Result<()> {
    if (a.dt - b.dt).abs() > 1e-12 * a.dt.abs().max(b.dt.abs()) {
        return Err(Error::data(format!("sample steps differ: {:e} vs {:e}", a.dt, b.dt)));
    }
    if (a.t0 - b.t0).abs() > 1e-6 * a.dt {
        return Err(Error::data(format!("traces are not aligned: t0 {:e} vs {:e}", a.t0, b.t0)));
    }
    if a.len() != b.len() {
        return Err(Error::data(format!("trace lengths differ: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

fn check_window(trace: &CurrentTrace, tau_max: f64, n_segments: usize) -> Result<i64> {
    if n_segments < 2 {
        return Err(Error::data("at least two segments are needed for error bars"));
    }
    if !(tau_max > 0.0) {
        return Err(Error::data(format!("tau_max must be > 0, got {tau_max}")));
    }
    let needed = MIN_DURATION_FACTOR * n_segments as f64 * tau_max;
    if trace.duration() < needed * (1.0 - 1e-12) {
        return Err(Error::data(format!(
            "trace of {:e} s is too short for {n_segments} segments at tau_max = {tau_max:e} s (need {needed:e} s)",
            trace.duration()
        )));
    }
    Ok(((tau_max / trace.dt).round() as i64).max(1))
}

fn centered(block: &[f64]) -> (f64, Vec<f64>) {
    let mean = block.iter().sum::<f64>() / block.len() as f64;
    (mean, block.iter().map(|x| x - mean).collect())
}

fn source_tag(t: &CurrentTrace) -> String {
    if t.meta.config_hash.is_empty() {
        t.meta.detector_id.clone()
    } else {
        format!("{}@{}", t.meta.detector_id, t.meta.config_hash)
    }
}

fn build(
    kind: RecordKind,
    a: &CurrentTrace,
    b: &CurrentTrace,
    kmax: i64,
    n_segments: usize,
) -> CorrelationRecord {
    let kmin = match kind {
        RecordKind::Auto => 0,
        RecordKind::Cross => -kmax,
    };
    let block_len = a.len() / n_segments;
    let per_block: Vec<(Vec<f64>, (f64, f64))> = (0..n_segments)
        .into_par_iter()
        .map(|s| {
            let range = s * block_len..(s + 1) * block_len;
            let (ma, xa) = centered(&a.samples[range.clone()]);
            let mut out = vec![0.0; (kmax - kmin + 1) as usize];
            let mb = match kind {
                RecordKind::Auto => {
                    lag_products(&xa, &xa, kmin, kmax, &mut out);
                    ma
                }
                RecordKind::Cross => {
                    let (mb, xb) = centered(&b.samples[range]);
                    lag_products(&xa, &xb, kmin, kmax, &mut out);
                    mb
                }
            };
            let norm = block_len as f64;
            out.iter_mut().for_each(|v| *v /= norm);
            (out, (ma, mb))
        })
        .collect();

    let (block_values, block_means): (Vec<_>, Vec<_>) = per_block.into_iter().unzip();
    let lags = (kmin..=kmax).map(|k| k as f64 * a.dt).collect::<Vec<_>>();
    let n_lags = lags.len();
    let mut sources = vec![source_tag(a)];
    if kind == RecordKind::Cross {
        sources.push(source_tag(b));
    }
    let mut rec = CorrelationRecord {
        kind,
        dt: a.dt,
        lags,
        values: vec![0.0; n_lags],
        stderr: vec![0.0; n_lags],
        n_segments,
        means: (a.mean(), b.mean()),
        block_values,
        block_means,
        sources,
    };
    rec.refresh_from_blocks();
    rec
}

/// Cross-covariance `<di_a(t) di_b(t + tau)>` for `|tau| <= tau_max`.
///
/// Requires equal sample steps, aligned starts, equal lengths and a trace at
/// least `20 * n_segments * tau_max` long.
pub fn covariance(a: &CurrentTrace, b: &CurrentTrace, tau_max: f64, n_segments: usize) -> Result<CorrelationRecord> {
    check_pair(a, b)?;
    let kmax = check_window(a, tau_max, n_segments)?;
    Ok(build(RecordKind::Cross, a, b, kmax, n_segments))
}

/// Auto-covariance for `0 <= tau <= tau_max`.
pub fn autocovariance(a: &CurrentTrace, tau_max: f64, n_segments: usize) -> Result<CorrelationRecord> {
    let kmax = check_window(a, tau_max, n_segments)?;
    Ok(build(RecordKind::Auto, a, a, kmax, n_segments))
}

/// Lag integral of a record (trapezoid rule over `[-tau_max, tau_max]`).
pub fn integrate(record: &CorrelationRecord) -> LagIntegral {
    record.integrate()
}
