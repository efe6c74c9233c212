//! The SCAR1 trace container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! 0   magic        "SCAR"
//! 4   version      u16 = 1
//! 6   flags        u16, bit0 = variable-length traces
//! 8   n_traces     u64
//! 16  trace_len    u64, 0 when variable-length
//! 24  dtype        u8, 0 = f32
//! 25  label_width  u8, 2 = u16
//! 26  reserved     6 zero bytes
//! 32  meta_len     u32, followed by meta_len bytes of UTF-8 JSON
//!     per trace:   [u64 length if variable] u16 label, samples
//! ```
//!
//! The JSON object always carries `n_classes`, `sample_rate_hz` and
//! `generator`. Per-trace session ids and metadata live there too
//! (`sessions`, `trace_meta`) so that a round trip is lossless.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde_json::{json, Map, Value};
use thiserror::Error;

use super::{Label, Trace, TraceSet, Violation};

pub const SCAR_MAGIC: [u8; 4] = *b"SCAR";
pub const SCAR_VERSION: u16 = 1;

const FLAG_VARIABLE: u16 = 1;
const DTYPE_F32: u8 = 0;
const LABEL_U16: u8 = 2;
const HEADER_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum ScarError {
    #[error("bad magic {0:02x?}, expected \"SCAR\"")]
    BadMagic([u8; 4]),
    #[error("unsupported SCAR version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported flags {0:#06x}")]
    UnsupportedFlags(u16),
    #[error("unsupported sample dtype {0}")]
    UnsupportedDtype(u8),
    #[error("unsupported label width {0}")]
    UnsupportedLabelWidth(u8),
    #[error("truncated payload: {what} needs {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        what: String,
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("metadata: {0}")]
    Metadata(String),
    #[error("invalid trace set: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Serializes `set` into SCAR1 bytes.
pub fn write_scar_bytes(set: &TraceSet) -> Result<Vec<u8>, ScarError> {
    let violations = set.validate();
    if !violations.is_empty() {
        return Err(ScarError::Invalid(violations));
    }
    if !set.sample_rate_hz().is_finite() {
        return Err(ScarError::Metadata("sample_rate_hz must be finite".into()));
    }
    let meta = serde_json::to_vec(&header_json(set)).map_err(|e| ScarError::Metadata(e.to_string()))?;
    let meta_len = u32::try_from(meta.len()).map_err(|_| ScarError::Metadata("metadata too large".into()))?;

    let variable = set.fixed_len().is_none();
    let payload: usize = set
        .traces()
        .iter()
        .map(|t| t.len() * 4 + 2 + if variable { 8 } else { 0 })
        .sum();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 + meta.len() + payload);
    out.extend_from_slice(&SCAR_MAGIC);
    out.extend_from_slice(&SCAR_VERSION.to_le_bytes());
    out.extend_from_slice(&(if variable { FLAG_VARIABLE } else { 0 }).to_le_bytes());
    out.extend_from_slice(&(set.len() as u64).to_le_bytes());
    out.extend_from_slice(&(set.fixed_len().unwrap_or(0) as u64).to_le_bytes());
    out.push(DTYPE_F32);
    out.push(LABEL_U16);
    out.extend_from_slice(&[0u8; 6]);
    out.extend_from_slice(&meta_len.to_le_bytes());
    out.extend_from_slice(&meta);
    for t in set.traces() {
        if variable {
            out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        }
        out.extend_from_slice(&t.label.to_le_bytes());
        for s in &t.samples {
            out.extend_from_slice(&s.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes `set` to `path`, returning the number of bytes written.
pub fn write_scar(set: &TraceSet, path: impl AsRef<Path>) -> Result<u64, ScarError> {
    let bytes = write_scar_bytes(set)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(bytes.len() as u64)
}

pub fn read_scar(path: impl AsRef<Path>) -> Result<TraceSet, ScarError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    read_scar_bytes(&bytes)
}

pub fn read_scar_bytes(bytes: &[u8]) -> Result<TraceSet, ScarError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take("magic", 4)?.try_into().unwrap();
    if magic != SCAR_MAGIC {
        return Err(ScarError::BadMagic(magic));
    }
    let version = cur.u16("version")?;
    if version != SCAR_VERSION {
        return Err(ScarError::UnsupportedVersion(version));
    }
    let flags = cur.u16("flags")?;
    if flags & !FLAG_VARIABLE != 0 {
        return Err(ScarError::UnsupportedFlags(flags));
    }
    let variable = flags & FLAG_VARIABLE != 0;
    let n_traces = cur.u64("n_traces")?;
    let trace_len = cur.u64("trace_len")?;
    let dtype = cur.take("dtype", 1)?[0];
    if dtype != DTYPE_F32 {
        return Err(ScarError::UnsupportedDtype(dtype));
    }
    let label_width = cur.take("label_width", 1)?[0];
    if label_width != LABEL_U16 {
        return Err(ScarError::UnsupportedLabelWidth(label_width));
    }
    cur.take("reserved", 6)?;
    let meta_len = cur.u32("meta_len")? as usize;
    let meta: Value =
        serde_json::from_slice(cur.take("metadata", meta_len)?).map_err(|e| ScarError::Metadata(e.to_string()))?;
    if variable && trace_len != 0 {
        return Err(ScarError::LengthMismatch(format!(
            "variable-length file declares trace_len {trace_len}"
        )));
    }
    let header = HeaderMeta::parse(&meta, n_traces)?;

    // A bogus n_traces must not trigger a huge allocation.
    let mut traces = Vec::with_capacity((n_traces as usize).min(bytes.len() / 2 + 1));
    for i in 0..n_traces as usize {
        let len = if variable {
            cur.u64(&format!("length of trace {i}"))?
        } else {
            trace_len
        };
        let label: Label = cur.u16(&format!("label of trace {i}"))?;
        let len =
            usize::try_from(len).map_err(|_| ScarError::LengthMismatch(format!("trace {i} length {len} overflows")))?;
        let raw = cur.take(&format!("samples of trace {i}"), len.saturating_mul(4))?;
        let samples = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        traces.push(Trace {
            samples,
            label,
            session_id: header.sessions.as_ref().map_or(0, |s| s[i]),
            meta: header.trace_meta.get(&i).cloned().unwrap_or_default(),
        });
    }
    if cur.pos != bytes.len() {
        return Err(ScarError::LengthMismatch(format!(
            "{} trailing bytes after {n_traces} traces",
            bytes.len() - cur.pos
        )));
    }

    let fixed_len = if variable { None } else { Some(trace_len as usize) };
    let mut set = TraceSet::from_parts(traces, header.n_classes, fixed_len)
        .with_generator(header.generator)
        .with_sample_rate(header.sample_rate_hz);
    set.meta = header.meta;
    let violations = set.validate();
    if !violations.is_empty() {
        return Err(ScarError::Invalid(violations));
    }
    Ok(set)
}

fn header_json(set: &TraceSet) -> Value {
    let mut obj = Map::new();
    obj.insert("n_classes".into(), json!(set.n_classes()));
    obj.insert("sample_rate_hz".into(), json!(set.sample_rate_hz()));
    obj.insert("generator".into(), json!(set.generator()));
    if !set.meta().is_empty() {
        obj.insert("meta".into(), json!(set.meta()));
    }
    if set.traces().iter().any(|t| t.session_id != 0) {
        let sessions: Vec<u32> = set.traces().iter().map(|t| t.session_id).collect();
        obj.insert("sessions".into(), json!(sessions));
    }
    let trace_meta: BTreeMap<String, &BTreeMap<String, String>> = set
        .traces()
        .iter()
        .enumerate()
        .filter(|(_, t)| !t.meta.is_empty())
        .map(|(i, t)| (i.to_string(), &t.meta))
        .collect();
    if !trace_meta.is_empty() {
        obj.insert("trace_meta".into(), json!(trace_meta));
    }
    Value::Object(obj)
}

struct HeaderMeta {
    n_classes: usize,
    sample_rate_hz: f64,
    generator: String,
    meta: BTreeMap<String, String>,
    sessions: Option<Vec<u32>>,
    trace_meta: BTreeMap<usize, BTreeMap<String, String>>,
}

impl HeaderMeta {
    fn parse(v: &Value, n_traces: u64) -> Result<Self, ScarError> {
        let missing = |k: &str| ScarError::Metadata(format!("missing or malformed key \"{k}\""));
        let n_classes = v
            .get("n_classes")
            .and_then(Value::as_u64)
            .ok_or_else(|| missing("n_classes"))? as usize;
        let sample_rate_hz = v
            .get("sample_rate_hz")
            .and_then(Value::as_f64)
            .ok_or_else(|| missing("sample_rate_hz"))?;
        let generator = v
            .get("generator")
            .and_then(Value::as_str)
            .ok_or_else(|| missing("generator"))?
            .to_string();
        let meta = match v.get("meta") {
            Some(m) => serde_json::from_value(m.clone()).map_err(|_| missing("meta"))?,
            None => BTreeMap::new(),
        };
        let sessions: Option<Vec<u32>> = match v.get("sessions") {
            Some(s) => Some(serde_json::from_value(s.clone()).map_err(|_| missing("sessions"))?),
            None => None,
        };
        if let Some(s) = &sessions {
            if s.len() as u64 != n_traces {
                return Err(ScarError::LengthMismatch(format!(
                    "{} session ids for {n_traces} traces",
                    s.len()
                )));
            }
        }
        let mut trace_meta = BTreeMap::new();
        if let Some(m) = v.get("trace_meta") {
            let raw: BTreeMap<String, BTreeMap<String, String>> =
                serde_json::from_value(m.clone()).map_err(|_| missing("trace_meta"))?;
            for (k, m) in raw {
                let i: usize = k.parse().map_err(|_| missing("trace_meta"))?;
                if i as u64 >= n_traces {
                    return Err(ScarError::LengthMismatch(format!(
                        "metadata for trace {i} but only {n_traces} traces"
                    )));
                }
                trace_meta.insert(i, m);
            }
        }
        Ok(Self {
            n_classes,
            sample_rate_hz,
            generator,
            meta,
            sessions,
            trace_meta,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, what: &str, n: usize) -> Result<&'a [u8], ScarError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(ScarError::Truncated {
                what: what.to_string(),
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, ScarError> {
        Ok(u16::from_le_bytes(self.take(what, 2)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, ScarError> {
        Ok(u32::from_le_bytes(self.take(what, 4)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ScarError> {
        Ok(u64::from_le_bytes(self.take(what, 8)?.try_into().unwrap()))
    }
}
