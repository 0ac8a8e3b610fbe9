//! Single-file checkpoints: magic, version, a JSON header, then raw tensors.
//!
//! ```text
//! "LORASCK\0" | u32 version | u64 header_len | header JSON | payload
//! ```
//!
//! Integers are little-endian. The payload is the concatenation of every
//! tensor as row-major little-endian IEEE-754 values; the header indexes them
//! by name with dtype, shape, byte offset and length, and carries a SHA-256 of
//! the payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{ExpertState, LoraPair};
use crate::cascade::{Ledger, RunState, StageEvent};
use crate::error::{Error, Result};
use crate::eval::{write_atomic, MetricsRecord};
use crate::model::{Backbone, ModelConfig};
use crate::numkit::{DType, Matrix, RngPosition, Scalar};
use crate::optim::{AdamW, AdamWConfig};

use super::config::hex;

pub const MAGIC: &[u8; 8] = b"LORASCK\0";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: [usize; 2],
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub config: AdamWConfig,
    pub lr_multipliers: Vec<f64>,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub config_digest: String,
    /// Resolved configuration snapshot the run was started with.
    pub config: String,
    pub dtype: String,
    pub seed: u64,
    pub rng: RngPosition,
    /// Experts merged so far.
    pub epoch: usize,
    pub global_step: usize,
    pub expert_step: usize,
    pub last_lr: f64,
    pub model: ModelConfig,
    pub targets: Vec<String>,
    pub scaling: f64,
    pub optimizer: Option<OptimizerMeta>,
    pub has_ledger: bool,
    pub sigmas: Vec<Vec<f64>>,
    pub audit: Vec<f64>,
    pub trace: Vec<StageEvent>,
    pub metrics: Vec<MetricsRecord>,
    pub tensors: Vec<TensorEntry>,
    pub payload_sha256: String,
}

/// A loaded checkpoint: header metadata plus the reconstructed run state.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub header: Header,
    pub state: RunState<T>,
}

struct PayloadWriter {
    bytes: Vec<u8>,
    index: Vec<TensorEntry>,
}

impl PayloadWriter {
    fn put<T: Scalar>(&mut self, name: String, m: &Matrix<T>) {
        let offset = self.bytes.len() as u64;
        for &v in m.data() {
            v.write_le(&mut self.bytes);
        }
        self.index.push(TensorEntry {
            name,
            dtype: T::DTYPE.name().into(),
            shape: [m.rows(), m.cols()],
            offset,
            len: self.bytes.len() as u64 - offset,
        });
    }
}

/// Writes `state` atomically; `config` is the resolved snapshot and `seed` its run seed.
pub fn save_checkpoint<T: Scalar>(state: &RunState<T>, config: &str, seed: u64, path: &Path) -> Result<()> {
    let mut w = PayloadWriter {
        bytes: Vec::new(),
        index: Vec::new(),
    };
    for (name, m) in state.w0.params() {
        w.put(format!("w0/{name}"), m);
    }
    for (name, m) in state.backbone.params() {
        w.put(format!("backbone/{name}"), m);
    }
    for (name, m) in &state.clean {
        w.put(format!("clean/{name}"), m);
    }
    for (j, (s, f)) in state.experts.slow.iter().zip(&state.experts.fast).enumerate() {
        w.put(format!("slow/{j}/a"), s.a());
        w.put(format!("slow/{j}/b"), s.b());
        w.put(format!("fast/{j}/a"), f.a());
        w.put(format!("fast/{j}/b"), f.b());
    }
    if let Some(opt) = &state.optimizer {
        for (i, (m, v)) in opt.first_moments().iter().zip(opt.second_moments()).enumerate() {
            w.put(format!("opt/m/{i}"), m);
            w.put(format!("opt/v/{i}"), v);
        }
    }
    for (name, m) in &state.ledger.noise_sum {
        w.put(format!("ledger/noise/{name}"), m);
    }
    for (name, m) in &state.ledger.slow_sum {
        w.put(format!("ledger/slow/{name}"), m);
    }
    for (name, m) in &state.ledger.pending_noise {
        w.put(format!("ledger/pending/{name}"), m);
    }

    let root = crate::numkit::RngState::new(seed);
    let header = Header {
        version: VERSION,
        config_digest: hex(&Sha256::digest(config.as_bytes())),
        config: config.to_string(),
        dtype: T::DTYPE.name().into(),
        seed,
        rng: root.position(),
        epoch: state.experts.epoch,
        global_step: state.global_step,
        expert_step: state.expert_step,
        last_lr: state.last_lr,
        model: state.w0.config().clone(),
        targets: state.experts.targets().map(str::to_string).collect(),
        scaling: state.experts.slow.first().map_or(1.0, |p| p.scaling().to_f64_lossless()),
        optimizer: state.optimizer.as_ref().map(|o| OptimizerMeta {
            config: *o.config(),
            lr_multipliers: o.lr_multipliers().to_vec(),
            step: o.step_count(),
        }),
        has_ledger: !state.ledger.slow_sum.is_empty(),
        sigmas: state.ledger.sigmas.clone(),
        audit: state.ledger.audit.clone(),
        trace: state.trace.clone(),
        metrics: state.metrics.clone(),
        tensors: w.index,
        payload_sha256: hex(&Sha256::digest(&w.bytes)),
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::Schema(format!("checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(PREAMBLE + header_bytes.len() + w.bytes.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&w.bytes);
    write_atomic(path, &out)
}

fn integrity(offset: u64, msg: impl Into<String>) -> Error {
    Error::Integrity {
        offset,
        msg: msg.into(),
    }
}

/// Parses and verifies the header; returns it with the payload slice.
fn split_file(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < PREAMBLE {
        return Err(integrity(bytes.len() as u64, "file ends inside the preamble"));
    }
    if &bytes[..8] != MAGIC {
        return Err(integrity(0, "bad magic; not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let header_end = (PREAMBLE as u64).checked_add(header_len).filter(|&e| e <= bytes.len() as u64);
    let header_end = header_end.ok_or_else(|| integrity(12, format!("header length {header_len} runs past end of file")))?
        as usize;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| integrity(PREAMBLE as u64 + e.column() as u64, format!("header is not valid JSON: {e}")))?;
    if header.version != VERSION {
        return Err(Error::Version {
            found: header.version,
            expected: VERSION,
        });
    }
    let payload = &bytes[header_end..];
    let expected: u64 = header.tensors.iter().map(|t| t.len).sum();
    if payload.len() as u64 != expected {
        return Err(integrity(
            bytes.len() as u64,
            format!("payload is {} bytes, header promises {expected}", payload.len()),
        ));
    }
    if hex(&Sha256::digest(payload)) != header.payload_sha256 {
        return Err(integrity(header_end as u64, "payload checksum mismatch"));
    }
    Ok((header, payload))
}

/// Reads only the header (verifying the whole file).
pub fn read_header(path: &Path) -> Result<Header> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    split_file(&bytes).map(|(h, _)| h)
}

struct PayloadReader<'a> {
    payload: &'a [u8],
    base: u64,
    index: BTreeMap<&'a str, &'a TensorEntry>,
}

impl<'a> PayloadReader<'a> {
    fn get<T: Scalar>(&self, name: &str) -> Result<Matrix<T>> {
        let e = self.index.get(name).ok_or_else(|| integrity(self.base, format!("missing tensor `{name}`")))?;
        if e.dtype != T::DTYPE.name() {
            return Err(integrity(self.base + e.offset, format!("tensor `{name}` has dtype {}", e.dtype)));
        }
        let size = T::DTYPE.size();
        let count = e.shape[0] * e.shape[1];
        let end = e.offset.checked_add(e.len).filter(|&end| end <= self.payload.len() as u64);
        if end.is_none() || e.len != (count * size) as u64 {
            return Err(integrity(self.base + e.offset, format!("tensor `{name}` extent is inconsistent")));
        }
        let raw = &self.payload[e.offset as usize..(e.offset + e.len) as usize];
        let data: Vec<T> = raw.chunks_exact(size).map(T::read_le).collect();
        Matrix::from_vec(e.shape[0], e.shape[1], data)
            .map_err(|err| integrity(self.base + e.offset, format!("tensor `{name}`: {err}")))
    }

    fn prefixed<T: Scalar>(&self, prefix: &str) -> Result<BTreeMap<String, Matrix<T>>> {
        self.index
            .keys()
            .filter_map(|k| k.strip_prefix(prefix).map(|rest| (rest.to_string(), *k)))
            .map(|(rest, full)| Ok((rest, self.get(full)?)))
            .collect()
    }
}

/// Loads and fully reconstructs a run state; any inconsistency is an integrity error.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, payload) = split_file(&bytes)?;
    if header.dtype != T::DTYPE.name() {
        return Err(Error::Argument(format!(
            "checkpoint holds {} tensors, caller asked for {}",
            header.dtype,
            T::DTYPE.name()
        )));
    }
    let base = (bytes.len() - payload.len()) as u64;
    let r = PayloadReader {
        payload,
        base,
        index: header.tensors.iter().map(|t| (t.name.as_str(), t)).collect(),
    };
    let w0 = Backbone::from_parts(header.model.clone(), r.prefixed("w0/")?)?;
    let backbone = Backbone::from_parts(header.model.clone(), r.prefixed("backbone/")?)?;
    let scaling = T::from_f64_lossy(header.scaling);
    let mut slow = Vec::new();
    let mut fast = Vec::new();
    for (j, target) in header.targets.iter().enumerate() {
        slow.push(LoraPair::from_parts(
            target.as_str(),
            r.get(&format!("slow/{j}/a"))?,
            r.get(&format!("slow/{j}/b"))?,
            scaling,
        )?);
        fast.push(LoraPair::from_parts(
            target.as_str(),
            r.get(&format!("fast/{j}/a"))?,
            r.get(&format!("fast/{j}/b"))?,
            scaling,
        )?);
    }
    let optimizer = match &header.optimizer {
        Some(meta) => {
            let n = meta.lr_multipliers.len();
            let m = (0..n).map(|i| r.get(&format!("opt/m/{i}"))).collect::<Result<Vec<_>>>()?;
            let v = (0..n).map(|i| r.get(&format!("opt/v/{i}"))).collect::<Result<Vec<_>>>()?;
            Some(AdamW::from_parts(meta.config, m, v, meta.lr_multipliers.clone(), meta.step)?)
        }
        None => None,
    };
    let ledger = Ledger {
        noise_sum: r.prefixed("ledger/noise/")?,
        slow_sum: r.prefixed("ledger/slow/")?,
        pending_noise: r.prefixed("ledger/pending/")?,
        sigmas: header.sigmas.clone(),
        audit: header.audit.clone(),
    };
    let state = RunState {
        w0,
        backbone,
        clean: r.prefixed("clean/")?,
        experts: ExpertState {
            slow,
            fast,
            epoch: header.epoch,
        },
        optimizer,
        expert_step: header.expert_step,
        global_step: header.global_step,
        last_lr: header.last_lr,
        ledger,
        metrics: header.metrics.clone(),
        trace: header.trace.clone(),
    };
    Ok(Checkpoint { header, state })
}

/// Precision recorded in a checkpoint header.
pub fn checkpoint_dtype(header: &Header) -> Result<DType> {
    DType::parse(&header.dtype).ok_or_else(|| integrity(PREAMBLE as u64, format!("unknown dtype `{}`", header.dtype)))
}
