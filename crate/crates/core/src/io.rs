//! File formats.
//!
//! Binary trace (all little-endian):
//!
//! ```text
//! b"TBCAL"  u16 version  f64 dt  u64 n_samples  f64 t0
//! str detector_id  str units  u64 rng_seed  str config_hash
//! n_samples x f64 (charge units / s)
//! ```
//!
//! where `str` is a `u16` byte length followed by UTF-8.
//!
//! CSV trace: optional first line `# {json metadata}`, then a `time,value`
//! header and one row per sample. Without metadata the step and start time
//! are inferred from the time column.
//!
//! Event file: `b"TBEVT"`, `u16` version, `f64` coherence time, `f64`
//! duration, `u8` mode (0 spontaneous, 1 stimulated), then each arm as a
//! `u64` count and `f64` times, then the links as a `u64` count and
//! `(u64, u64)` index pairs.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::correlator::CorrelationRecord;
use crate::error::{Error, Result};
use crate::frontend::{CurrentTrace, TraceMeta};
use crate::source::{PairEventStream, PairLink, SourceMode};

pub const TRACE_MAGIC: &[u8; 5] = b"TBCAL";
pub const TRACE_VERSION: u16 = 1;
pub const EVENT_MAGIC: &[u8; 5] = b"TBEVT";
pub const EVENT_VERSION: u16 = 1;

/// Relative tolerance on sample spacing when ingesting CSV traces.
const CSV_STEP_TOLERANCE: f64 = 1e-6;
const IO_BLOCK: usize = 1 << 16;

fn eof_as_data(e: io::Error, what: &str) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::data(format!("{what}: file is truncated"))
    } else {
        Error::Io(e)
    }
}

struct Le<R>(R);

impl<R: Read> Le<R> {
    fn bytes<const N: usize>(&mut self) -> io::Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b)?;
        Ok(b)
    }
    fn u8(&mut self) -> io::Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u16(&mut self) -> io::Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> io::Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> io::Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        let mut b = vec![0u8; n];
        self.0.read_exact(&mut b)?;
        String::from_utf8(b).map_err(|_| Error::data("header string is not UTF-8"))
    }
    fn f64s(&mut self, n: u64) -> io::Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n as usize);
        let mut buf = vec![0u8; IO_BLOCK * 8];
        let mut left = n as usize;
        while left > 0 {
            let k = left.min(IO_BLOCK);
            self.0.read_exact(&mut buf[..k * 8])?;
            out.extend(buf[..k * 8].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())));
            left -= k;
        }
        Ok(out)
    }
}

fn put_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::data("header string longer than 65535 bytes"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn put_f64s<W: Write>(w: &mut W, xs: &[f64]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(IO_BLOCK * 8);
    for block in xs.chunks(IO_BLOCK) {
        buf.clear();
        for x in block {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn write_trace_binary<W: Write>(w: &mut W, trace: &CurrentTrace) -> Result<()> {
    w.write_all(TRACE_MAGIC)?;
    w.write_all(&TRACE_VERSION.to_le_bytes())?;
    w.write_all(&trace.dt.to_le_bytes())?;
    w.write_all(&(trace.samples.len() as u64).to_le_bytes())?;
    w.write_all(&trace.t0.to_le_bytes())?;
    put_str(w, &trace.meta.detector_id)?;
    put_str(w, &trace.meta.units)?;
    w.write_all(&trace.meta.rng_seed.to_le_bytes())?;
    put_str(w, &trace.meta.config_hash)?;
    put_f64s(w, &trace.samples)?;
    Ok(())
}

pub fn read_trace_binary<R: Read>(r: R) -> Result<CurrentTrace> {
    let mut r = Le(r);
    let what = "trace";
    let magic: [u8; 5] = r.bytes().map_err(|e| eof_as_data(e, what))?;
    if &magic != TRACE_MAGIC {
        return Err(Error::data("not a trace file (bad magic)"));
    }
    let version = r.u16().map_err(|e| eof_as_data(e, what))?;
    if version != TRACE_VERSION {
        return Err(Error::data(format!(
            "trace format version {version} is not supported (expected {TRACE_VERSION})"
        )));
    }
    let header = (|| -> Result<_> {
        let dt = r.f64()?;
        let n = r.u64()?;
        let t0 = r.f64()?;
        let detector_id = r.string()?;
        let units = r.string()?;
        let rng_seed = r.u64()?;
        let config_hash = r.string()?;
        Ok((dt, n, t0, detector_id, units, rng_seed, config_hash))
    })()
    .map_err(|e| match e {
        Error::Io(e) => eof_as_data(e, what),
        other => other,
    })?;
    let (dt, n, t0, detector_id, units, rng_seed, config_hash) = header;
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::data(format!("trace header has invalid dt {dt}")));
    }
    let samples = r.f64s(n).map_err(|e| eof_as_data(e, what))?;
    let mut extra = [0u8; 1];
    if r.0.read(&mut extra)? != 0 {
        return Err(Error::data("trace file has trailing bytes"));
    }
    Ok(CurrentTrace {
        dt,
        t0,
        samples,
        meta: TraceMeta {
            detector_id,
            units,
            rng_seed,
            config_hash,
        },
    })
}

#[derive(Serialize, Deserialize)]
struct CsvMeta {
    dt: f64,
    t0: f64,
    #[serde(flatten)]
    meta: TraceMeta,
}

pub fn write_trace_csv<W: Write>(w: &mut W, trace: &CurrentTrace) -> Result<()> {
    let meta = CsvMeta {
        dt: trace.dt,
        t0: trace.t0,
        meta: trace.meta.clone(),
    };
    writeln!(w, "# {}", serde_json::to_string(&meta).expect("metadata serializes"))?;
    writeln!(w, "time,value")?;
    for (i, v) in trace.samples.iter().enumerate() {
        writeln!(w, "{},{}", trace.t0 + i as f64 * trace.dt, v)?;
    }
    Ok(())
}

/// Reads a CSV trace. `default_id` names the detector when the file has no
/// metadata line.
pub fn read_trace_csv<R: BufRead>(r: R, default_id: &str) -> Result<CurrentTrace> {
    let mut meta: Option<CsvMeta> = None;
    let mut times = Vec::new();
    let mut samples = Vec::new();
    let mut header_seen = false;
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let at = |msg: String| Error::data(format!("line {}: {msg}", lineno + 1));
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if let Some(json) = text.strip_prefix('#') {
            if !header_seen && meta.is_none() {
                meta = Some(serde_json::from_str(json.trim()).map_err(|e| at(format!("bad metadata: {e}")))?);
            }
            continue;
        }
        if !header_seen {
            if text.replace(' ', "") != "time,value" {
                return Err(at(format!("expected header 'time,value', found '{text}'")));
            }
            header_seen = true;
            continue;
        }
        let (t, v) = text.split_once(',').ok_or_else(|| at("expected two columns".into()))?;
        let t: f64 = t.trim().parse().map_err(|_| at(format!("bad time '{t}'")))?;
        let v: f64 = v.trim().parse().map_err(|_| at(format!("bad value '{v}'")))?;
        times.push(t);
        samples.push(v);
    }
    if samples.is_empty() {
        return Err(Error::data("CSV trace has no samples"));
    }
    let (dt, t0, meta) = match meta {
        Some(m) => (m.dt, m.t0, m.meta),
        None => {
            if times.len() < 2 {
                return Err(Error::data("CSV trace needs two rows to infer the sample step"));
            }
            let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
            (dt, times[0], TraceMeta::new(default_id))
        }
    };
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::data(format!("CSV trace has invalid sample step {dt}")));
    }
    for (i, &t) in times.iter().enumerate() {
        if (t - (t0 + i as f64 * dt)).abs() > CSV_STEP_TOLERANCE * dt {
            return Err(Error::data(format!("CSV trace is not uniformly sampled at row {}", i + 1)));
        }
    }
    Ok(CurrentTrace { dt, t0, samples, meta })
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Writes a trace, as CSV when the path ends in `.csv`, binary otherwise.
pub fn write_trace(path: &Path, trace: &CurrentTrace) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    if is_csv(path) {
        write_trace_csv(&mut w, trace)?;
    } else {
        write_trace_binary(&mut w, trace)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<CurrentTrace> {
    let r = BufReader::new(File::open(path)?);
    let tag = |e: Error| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    };
    if is_csv(path) {
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("detector");
        read_trace_csv(r, id).map_err(tag)
    } else {
        read_trace_binary(r).map_err(tag)
    }
}

pub fn write_events<W: Write>(w: &mut W, s: &PairEventStream) -> Result<()> {
    w.write_all(EVENT_MAGIC)?;
    w.write_all(&EVENT_VERSION.to_le_bytes())?;
    w.write_all(&s.coherence_time.to_le_bytes())?;
    w.write_all(&s.duration.to_le_bytes())?;
    w.write_all(&[match s.mode {
        SourceMode::Spontaneous => 0u8,
        SourceMode::Stimulated => 1u8,
    }])?;
    for arm in [&s.arm1, &s.arm2] {
        w.write_all(&(arm.len() as u64).to_le_bytes())?;
        put_f64s(w, arm)?;
    }
    w.write_all(&(s.links.len() as u64).to_le_bytes())?;
    for l in &s.links {
        w.write_all(&(l.arm1 as u64).to_le_bytes())?;
        w.write_all(&(l.arm2 as u64).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_events<R: Read>(r: R) -> Result<PairEventStream> {
    let mut r = Le(r);
    let body = (|| -> Result<PairEventStream> {
        let magic: [u8; 5] = r.bytes()?;
        if &magic != EVENT_MAGIC {
            return Err(Error::data("not an event file (bad magic)"));
        }
        let version = r.u16()?;
        if version != EVENT_VERSION {
            return Err(Error::data(format!("event format version {version} is not supported")));
        }
        let coherence_time = r.f64()?;
        let duration = r.f64()?;
        let mode = match r.u8()? {
            0 => SourceMode::Spontaneous,
            1 => SourceMode::Stimulated,
            m => return Err(Error::data(format!("unknown source mode tag {m}"))),
        };
        let n1 = r.u64()?;
        let arm1 = r.f64s(n1)?;
        let n2 = r.u64()?;
        let arm2 = r.f64s(n2)?;
        let nl = r.u64()?;
        let mut links = Vec::with_capacity(nl as usize);
        for _ in 0..nl {
            let a = r.u64()? as usize;
            let b = r.u64()? as usize;
            links.push(PairLink { arm1: a, arm2: b });
        }
        Ok(PairEventStream {
            mode,
            coherence_time,
            duration,
            arm1,
            arm2,
            links,
        })
    })();
    body.map_err(|e| match e {
        Error::Io(e) => eof_as_data(e, "event file"),
        other => other,
    })
}

/// Sidecar metadata written next to a correlation CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSidecar {
    pub kind: crate::correlator::RecordKind,
    pub dt: f64,
    pub n_segments: usize,
    pub n_lags: usize,
    pub means: (f64, f64),
    pub integral: f64,
    pub integral_stderr: f64,
    pub decayed: bool,
    pub sources: Vec<String>,
}

pub fn correlation_csv(record: &CorrelationRecord) -> String {
    let mut out = String::from("lag_seconds,value,stderr\n");
    for ((l, v), s) in record.lags.iter().zip(&record.values).zip(&record.stderr) {
        out.push_str(&format!("{l},{v},{s}\n"));
    }
    out
}

pub fn correlation_sidecar(record: &CorrelationRecord) -> CorrelationSidecar {
    let integral = record.integrate();
    CorrelationSidecar {
        kind: record.kind,
        dt: record.dt,
        n_segments: record.n_segments,
        n_lags: record.n_lags(),
        means: record.means,
        integral: integral.value,
        integral_stderr: integral.stderr,
        decayed: integral.decayed,
        sources: record.sources.clone(),
    }
}

/// Writes `<stem>.csv` and `<stem>.json` into `dir`.
pub fn write_correlation(dir: &Path, stem: &str, record: &CorrelationRecord) -> Result<()> {
    std::fs::write(dir.join(format!("{stem}.csv")), correlation_csv(record))?;
    let json = serde_json::to_string_pretty(&correlation_sidecar(record)).expect("sidecar serializes");
    std::fs::write(dir.join(format!("{stem}.json")), json + "\n")?;
    Ok(())
}
