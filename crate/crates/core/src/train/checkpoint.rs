//! Checkpoint container:
//!
//! ```text
//! magic    8 bytes   "LDCLCKPT"
//! version  u32 LE
//! hlen     u64 LE    length of the JSON header
//! header   hlen bytes of UTF-8 JSON
//! payload  the rest: f64 LE tensor data and u8 buffer images
//! ```
//!
//! The header holds the detector spec and its SHA-256 digest, the tensor
//! directory (name, shape, byte offset into the payload), the strategy state
//! and free-form run metadata, plus the payload length and SHA-256 digest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Annotation, ClassRange};
use crate::detector::{Architecture, Boundary, Detector, DetectorSpec, ParamStore};
use crate::error::{Error, Result};
use crate::strategy::{
    BufferEntry, BufferKind, Payload, ReplayBuffer, StrategyConfig, StrategyKind, StrategyState, Teacher,
};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LDCLCKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct TeacherHeader {
    spec: DetectorSpec,
    split: usize,
    upper_only: bool,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
enum PayloadHeader {
    Raw { offset: u64, len: u64 },
    Latent { offset: u64, len: u64 },
}

#[derive(Serialize, Deserialize)]
struct EntryHeader {
    task: usize,
    annotations: Vec<Annotation>,
    range: ClassRange,
    payload: PayloadHeader,
}

#[derive(Serialize, Deserialize)]
enum BufferKindHeader {
    Raw,
    Latent { split: usize, shape: [usize; 3] },
}

#[derive(Serialize, Deserialize)]
struct BufferHeader {
    capacity: usize,
    kind: BufferKindHeader,
    entries: Vec<EntryHeader>,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    kind: StrategyKind,
    alpha: f64,
    buffer_capacity: usize,
    freeze: usize,
    task: usize,
    old_range: ClassRange,
    new_range: ClassRange,
    teacher: Option<TeacherHeader>,
    buffer: Option<BufferHeader>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: DetectorSpec,
    spec_sha256: String,
    frozen: usize,
    split: usize,
    tensors: Vec<TensorEntry>,
    state: Option<StateHeader>,
    metadata: serde_json::Value,
    payload_len: u64,
    payload_sha256: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Detector,
    pub state: Option<StrategyState>,
    pub metadata: serde_json::Value,
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn spec_digest(spec: &DetectorSpec) -> String {
    hex_digest(serde_json::to_string(spec).expect("spec serializes").as_bytes())
}

#[derive(Default)]
struct PayloadWriter {
    bytes: Vec<u8>,
}

impl PayloadWriter {
    fn f64s(&mut self, data: &[f64]) -> u64 {
        let offset = self.bytes.len() as u64;
        for v in data {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        offset
    }

    fn raw(&mut self, data: &[u8]) -> u64 {
        let offset = self.bytes.len() as u64;
        self.bytes.extend_from_slice(data);
        offset
    }

    fn params(&mut self, params: &ParamStore) -> Vec<TensorEntry> {
        params
            .iter()
            .map(|(name, t)| TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), offset: self.f64s(t.data()) })
            .collect()
    }
}

struct PayloadReader<'a> {
    bytes: &'a [u8],
}

impl PayloadReader<'_> {
    fn slice(&self, offset: u64, len: u64) -> Result<&[u8]> {
        let (start, end) = (offset as usize, offset.checked_add(len).map(|e| e as usize));
        end.and_then(|end| self.bytes.get(start..end))
            .ok_or_else(|| Error::Checkpoint(format!("payload range {offset}+{len} out of bounds")))
    }

    fn f64s(&self, offset: u64, count: usize) -> Result<Vec<f64>> {
        let raw = self.slice(offset, count as u64 * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn params(&self, entries: &[TensorEntry]) -> Result<ParamStore> {
        let mut store = ParamStore::default();
        for e in entries {
            let n = e.shape.iter().product();
            store.insert(e.name.clone(), Tensor::new(&e.shape, self.f64s(e.offset, n)?)?);
        }
        Ok(store)
    }
}

pub fn save_checkpoint(
    path: &Path,
    model: &Detector,
    state: Option<&StrategyState>,
    metadata: serde_json::Value,
) -> Result<()> {
    let mut w = PayloadWriter::default();
    let tensors = w.params(model.params());
    let state = state.map(|s| {
        let teacher = s.teacher.as_ref().map(|t| TeacherHeader {
            spec: t.arch.spec().clone(),
            split: t.split.0,
            upper_only: t.upper_only,
            tensors: w.params(&t.params),
        });
        let buffer = s.buffer.as_ref().map(|b| BufferHeader {
            capacity: b.capacity,
            kind: match b.kind {
                BufferKind::Raw => BufferKindHeader::Raw,
                BufferKind::Latent { split, shape } => BufferKindHeader::Latent { split: split.0, shape },
            },
            entries: b
                .entries
                .iter()
                .map(|e| EntryHeader {
                    task: e.task,
                    annotations: e.annotations.clone(),
                    range: e.range,
                    payload: match &e.payload {
                        Payload::Raw(bytes) => PayloadHeader::Raw { offset: w.raw(bytes), len: bytes.len() as u64 },
                        Payload::Latent(v) => PayloadHeader::Latent { offset: w.f64s(v), len: v.len() as u64 },
                    },
                })
                .collect(),
        });
        StateHeader {
            kind: s.config.kind,
            alpha: s.config.alpha,
            buffer_capacity: s.config.buffer_capacity,
            freeze: s.config.freeze.0,
            task: s.task,
            old_range: s.old_range,
            new_range: s.new_range,
            teacher,
            buffer,
        }
    });
    let header = Header {
        spec: model.spec().clone(),
        spec_sha256: spec_digest(model.spec()),
        frozen: model.frozen_boundary().0,
        split: model.split_point().0,
        tensors,
        state,
        metadata,
        payload_len: w.bytes.len() as u64,
        payload_sha256: hex_digest(&w.bytes),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + w.bytes.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&w.bytes);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic or too short)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version} (expected {VERSION})")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let body = &bytes[20..];
    if hlen > body.len() as u64 {
        return Err(bad("truncated header"));
    }
    let (json, payload) = body.split_at(hlen as usize);
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if payload.len() as u64 != header.payload_len {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, header says {} (truncated or padded file)",
            payload.len(),
            header.payload_len
        )));
    }
    if hex_digest(payload) != header.payload_sha256 {
        return Err(bad("payload digest mismatch (corrupt file)"));
    }
    if spec_digest(&header.spec) != header.spec_sha256 {
        return Err(bad("detector spec digest mismatch"));
    }
    let r = PayloadReader { bytes: payload };
    let model = Detector::from_parts(
        header.spec.clone(),
        r.params(&header.tensors)?,
        Boundary(header.frozen),
        Boundary(header.split),
    )?;

    let state = match header.state {
        None => None,
        Some(s) => {
            let teacher = match s.teacher {
                None => None,
                Some(t) => {
                    let mut params = ParamStore::default();
                    for (n, v) in r.params(&t.tensors)?.iter() {
                        params.insert(n.to_string(), v.clone().with_requires_grad(false));
                    }
                    Some(Teacher {
                        arch: Architecture::new(t.spec)?,
                        params,
                        split: Boundary(t.split),
                        upper_only: t.upper_only,
                    })
                }
            };
            let buffer = match s.buffer {
                None => None,
                Some(b) => {
                    let kind = match b.kind {
                        BufferKindHeader::Raw => BufferKind::Raw,
                        BufferKindHeader::Latent { split, shape } => BufferKind::Latent { split: Boundary(split), shape },
                    };
                    let mut buffer = ReplayBuffer::new(b.capacity, kind)?;
                    for e in b.entries {
                        let payload = match e.payload {
                            PayloadHeader::Raw { offset, len } => Payload::Raw(r.slice(offset, len)?.to_vec()),
                            PayloadHeader::Latent { offset, len } => Payload::Latent(r.f64s(offset, len as usize)?),
                        };
                        buffer.entries.push(BufferEntry {
                            task: e.task,
                            payload,
                            annotations: e.annotations,
                            range: e.range,
                        });
                    }
                    Some(buffer)
                }
            };
            Some(StrategyState {
                config: StrategyConfig {
                    kind: s.kind,
                    alpha: s.alpha,
                    buffer_capacity: s.buffer_capacity,
                    freeze: Boundary(s.freeze),
                },
                task: s.task,
                teacher,
                buffer,
                old_range: s.old_range,
                new_range: s.new_range,
            })
        }
    };
    Ok(Checkpoint { model, state, metadata: header.metadata })
}
