//! Execution trace containers.
//!
//! A trace is the ordered list of basic-block start addresses a program
//! executed. Two on-disk encodings are supported:
//!
//! * text: one address per line, `0x`-prefixed hex or decimal, `\n` terminated;
//! * binary: magic `RAGE`, version `u16` LE (= 1), count `u64` LE, then
//!   `count` little-endian `u64` addresses.
//!
//! Experiments are described by a [`CorpusManifest`], a JSON array of
//! `{path, role, label}` entries.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Basic-block start address. Treated as an opaque identifier.
pub type Address = u64;

pub const MAGIC: &[u8; 4] = b"RAGE";
pub const FORMAT_VERSION: u16 = 1;
/// Size of the binary trace header: magic + version + count.
pub const BINARY_HEADER_LEN: usize = 4 + 2 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceFormat {
    Text,
    Binary,
}

impl TraceFormat {
    /// Sniffs the container by its leading magic bytes.
    pub fn detect(bytes: &[u8]) -> TraceFormat {
        if bytes.starts_with(MAGIC) {
            TraceFormat::Binary
        } else {
            TraceFormat::Text
        }
    }
}

/// One execution: basic-block addresses in execution order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Trace {
    pub steps: Vec<Address>,
    pub source_id: String,
}

impl Trace {
    pub fn new(steps: Vec<Address>) -> Self {
        Trace {
            steps,
            source_id: String::new(),
        }
    }

    pub fn with_source(steps: Vec<Address>, source_id: impl Into<String>) -> Self {
        Trace {
            steps,
            source_id: source_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Trace> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        let mut trace = parse_trace(&bytes, TraceFormat::detect(&bytes))?;
        trace.source_id = path.display().to_string();
        Ok(trace)
    }

    pub fn write(&self, path: impl AsRef<Path>, format: TraceFormat) -> Result<()> {
        let bytes = write_trace(self, format)?;
        std::fs::write(path, bytes).map_err(|e| Error::Write(e.to_string()))
    }
}

pub fn parse_trace(bytes: &[u8], format: TraceFormat) -> Result<Trace> {
    match format {
        TraceFormat::Text => parse_text(bytes),
        TraceFormat::Binary => parse_binary(bytes),
    }
}

fn parse_text(bytes: &[u8]) -> Result<Trace> {
    if bytes.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let mut steps = Vec::with_capacity(bytes.len() / 8);
    let mut offset = 0;
    while offset < bytes.len() {
        let end = bytes[offset..]
            .iter()
            .position(|&b| b == b'\n')
            .map_or(bytes.len(), |p| offset + p);
        let mut line = &bytes[offset..end];
        if let [rest @ .., b'\r'] = line {
            line = rest;
        }
        steps.push(parse_address(line, offset)?);
        offset = end + 1;
    }
    Ok(Trace::new(steps))
}

fn parse_address(line: &[u8], offset: usize) -> Result<Address> {
    if line.is_empty() {
        return Err(Error::parse(offset, "blank line"));
    }
    let text =
        std::str::from_utf8(line).map_err(|_| Error::parse(offset, "line is not valid UTF-8"))?;
    let parsed = match text.strip_prefix("0x").or_else(|| text.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => text.parse::<u64>(),
    };
    parsed.map_err(|e| Error::parse(offset, format!("bad address {text:?}: {e}")))
}

fn parse_binary(bytes: &[u8]) -> Result<Trace> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::parse(0, "bad magic"));
    }
    if bytes.len() < BINARY_HEADER_LEN {
        return Err(Error::parse(bytes.len(), "truncated header"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::parse(4, format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
    if count == 0 {
        return Err(Error::EmptyTrace);
    }
    let body = &bytes[BINARY_HEADER_LEN..];
    let expected = count
        .checked_mul(8)
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| Error::parse(6, "record count overflows"))?;
    if body.len() < expected {
        let complete = body.len() / 8;
        return Err(Error::parse(
            BINARY_HEADER_LEN + complete * 8,
            format!("truncated record {complete} of {count}"),
        ));
    }
    if body.len() > expected {
        return Err(Error::parse(
            BINARY_HEADER_LEN + expected,
            "trailing bytes after last record",
        ));
    }
    let steps = body
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Trace::new(steps))
}

pub fn write_trace(trace: &Trace, format: TraceFormat) -> Result<Vec<u8>> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let out = match format {
        TraceFormat::Text => {
            let mut out = Vec::with_capacity(text_size(&trace.steps));
            for addr in &trace.steps {
                use std::io::Write;
                writeln!(out, "{addr:#x}").map_err(|e| Error::Write(e.to_string()))?;
            }
            out
        }
        TraceFormat::Binary => {
            let mut out = Vec::with_capacity(BINARY_HEADER_LEN + 8 * trace.len());
            out.extend_from_slice(MAGIC);
            out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
            out.extend_from_slice(&(trace.len() as u64).to_le_bytes());
            for addr in &trace.steps {
                out.extend_from_slice(&addr.to_le_bytes());
            }
            out
        }
    };
    Ok(out)
}

fn text_size(steps: &[Address]) -> usize {
    steps
        .iter()
        .map(|&a| {
            let hex_digits = if a == 0 {
                1
            } else {
                (64 - a.leading_zeros() as usize).div_ceil(4)
            };
            2 + hex_digits + 1
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStats {
    pub length: usize,
    pub unique_addresses: usize,
    pub byte_size_text: usize,
    pub byte_size_binary: usize,
}

pub fn trace_stats(trace: &Trace) -> TraceStats {
    let unique: HashSet<Address> = trace.steps.iter().copied().collect();
    TraceStats {
        length: trace.len(),
        unique_addresses: unique.len(),
        byte_size_text: text_size(&trace.steps),
        byte_size_binary: if trace.is_empty() {
            0
        } else {
            BINARY_HEADER_LEN + 8 * trace.len()
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Validation,
    Attest,
    Attack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Rop,
    Dop,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub role: Role,
    pub label: Label,
}

/// Corpus description for one experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn from_json(bytes: &[u8]) -> Result<CorpusManifest> {
        let manifest: CorpusManifest = serde_json::from_slice(bytes)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let train = self.with_role(Role::Train).count();
        if train != 1 {
            return Err(Error::parse(
                0,
                format!("manifest needs exactly one train entry, found {train}"),
            ));
        }
        if self.with_role(Role::Validation).next().is_none() {
            return Err(Error::parse(0, "manifest needs at least one validation entry"));
        }
        Ok(())
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.role == role)
    }

    pub fn train_entry(&self) -> Option<&ManifestEntry> {
        self.with_role(Role::Train).next()
    }
}
