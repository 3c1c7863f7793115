//! AGT1 little-endian dataset files and their JSON mirror.
//!
//! Binary layout: magic `AGT1`, version u32, p u32, session count u64, then
//! per session: participant id (u16 length + UTF-8), session id (u16 length +
//! UTF-8), label u8, n u32 and the row-major `p × n` f64 matrix. Only the
//! valid prefix of each sequence is stored.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SessionSample;
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::preprocess::BandSequence;

pub const MAGIC: &[u8; 4] = b"AGT1";
pub const FORMAT_VERSION: u32 = 1;

fn common_p(samples: &[SessionSample]) -> Result<usize> {
    let p = samples.first().map_or(0, |s| s.sequence.nodes());
    for (i, s) in samples.iter().enumerate() {
        if s.sequence.nodes() != p {
            return Err(at_record(i, Error::shape("dataset rows", &[p], &[s.sequence.nodes()])));
        }
        s.validate().map_err(|e| at_record(i, e))?;
    }
    Ok(p)
}

fn at_record(index: usize, err: Error) -> Error {
    Error::Parse {
        location: format!("record {}", index + 1),
        message: err.to_string(),
    }
}

fn id_bytes(id: &str) -> Result<&[u8]> {
    let b = id.as_bytes();
    if b.len() > u16::MAX as usize {
        return Err(Error::Param(format!("identifier of {} bytes exceeds the u16 length prefix", b.len())));
    }
    Ok(b)
}

pub fn write_agt1(samples: &[SessionSample]) -> Result<Vec<u8>> {
    let p = common_p(samples)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(p as u32).to_le_bytes());
    out.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    for s in samples {
        for id in [&s.participant_id, &s.session_id] {
            let b = id_bytes(id)?;
            out.extend_from_slice(&(b.len() as u16).to_le_bytes());
            out.extend_from_slice(b);
        }
        out.push(s.label);
        let seq = s.sequence.trimmed()?;
        out.extend_from_slice(&(seq.len() as u32).to_le_bytes());
        for v in seq.features.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(format!("unexpected end of file reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = u16::from_le_bytes(self.array(what)?) as usize;
        let start = self.pos;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Parse {
            location: format!("byte {start}"),
            message: format!("{what} is not valid UTF-8"),
        })
    }

    fn error(&self, message: String) -> Error {
        Error::Parse {
            location: format!("byte {}", self.pos),
            message,
        }
    }
}

pub fn read_agt1(bytes: &[u8]) -> Result<Vec<SessionSample>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Parse {
            location: "byte 0".into(),
            message: "missing AGT1 magic".into(),
        });
    }
    let version = u32::from_le_bytes(r.array("version")?);
    if version != FORMAT_VERSION {
        return Err(Error::Parse {
            location: "byte 4".into(),
            message: format!("unknown format version {version}"),
        });
    }
    let p = u32::from_le_bytes(r.array("p")?) as usize;
    let count = u64::from_le_bytes(r.array("session count")?);
    let mut samples = Vec::new();
    for i in 0..count {
        let record = |e: Error| match e {
            Error::Parse { location, message } => Error::Parse {
                location: format!("record {} ({location})", i + 1),
                message,
            },
            other => at_record(i as usize, other),
        };
        let participant_id = r.string("participant id").map_err(record)?;
        let session_id = r.string("session id").map_err(record)?;
        let label = r.array::<1>("label").map_err(record)?[0];
        let n = u32::from_le_bytes(r.array("n").map_err(record)?) as usize;
        let raw = r.take(p * n * 8, "feature matrix").map_err(record)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let sample = SessionSample {
            sequence: BandSequence::new(Tensor::new(vec![p, n], data)?).map_err(record)?,
            label,
            participant_id,
            session_id,
        };
        sample.validate().map_err(record)?;
        samples.push(sample);
    }
    if r.pos != bytes.len() {
        return Err(r.error(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(samples)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonDataset {
    format: String,
    version: u32,
    p: usize,
    sessions: Vec<JsonSession>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonSession {
    participant_id: String,
    session_id: String,
    label: u8,
    n: usize,
    /// `p` rows of `n` values.
    features: Vec<Vec<f64>>,
}

pub fn write_json(samples: &[SessionSample]) -> Result<String> {
    let p = common_p(samples)?;
    let sessions = samples
        .iter()
        .map(|s| {
            let seq = s.sequence.trimmed()?;
            let n = seq.len();
            Ok(JsonSession {
                participant_id: s.participant_id.clone(),
                session_id: s.session_id.clone(),
                label: s.label,
                n,
                features: (0..p).map(|r| seq.features.data()[r * n..(r + 1) * n].to_vec()).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let doc = JsonDataset {
        format: "AGT1".into(),
        version: FORMAT_VERSION,
        p,
        sessions,
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn read_json(text: &str) -> Result<Vec<SessionSample>> {
    let doc: JsonDataset = serde_json::from_str(text).map_err(|e| Error::Parse {
        location: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    if doc.format != "AGT1" || doc.version != FORMAT_VERSION {
        return Err(Error::Parse {
            location: "header".into(),
            message: format!("unknown format {} version {}", doc.format, doc.version),
        });
    }
    doc.sessions
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            if s.features.len() != doc.p {
                return Err(at_record(i, Error::shape("session rows", &[doc.p], &[s.features.len()])));
            }
            if let Some(row) = s.features.iter().find(|r| r.len() != s.n) {
                return Err(at_record(i, Error::shape("session columns", &[s.n], &[row.len()])));
            }
            let data = s.features.concat();
            let sample = SessionSample {
                sequence: BandSequence::new(Tensor::new(vec![doc.p, s.n], data)?).map_err(|e| at_record(i, e))?,
                label: s.label,
                participant_id: s.participant_id,
                session_id: s.session_id,
            };
            sample.validate().map_err(|e| at_record(i, e))?;
            Ok(sample)
        })
        .collect()
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// Reads AGT1, or its JSON mirror when the path ends in `.json`.
pub fn load_dataset(path: &Path) -> Result<Vec<SessionSample>> {
    if is_json(path) {
        read_json(&fs::read_to_string(path)?)
    } else {
        read_agt1(&fs::read(path)?)
    }
}

pub fn save_dataset(path: &Path, samples: &[SessionSample]) -> Result<()> {
    if is_json(path) {
        fs::write(path, write_json(samples)?)?;
    } else {
        fs::write(path, write_agt1(samples)?)?;
    }
    Ok(())
}
