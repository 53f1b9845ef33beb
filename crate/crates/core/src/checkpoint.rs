//! Single-file checkpoints.
//!
//! ```text
//! magic "PQKC" | version u8 = 1 | manifest length u64 LE | manifest (JSON) | blobs
//! ```
//!
//! Every blob is a `PQKT` record. The manifest lists each blob's offset
//! (relative to the start of the blob region), length and CRC-32, next to the
//! per-layer metadata. Keys are sorted and floats written in shortest
//! round-trip form, so loading and re-saving reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{PqkError, Result};
use crate::format::{self, Record};
use crate::model::{ArchConfig, BatchNormLayer, BnParams, LayerKind, Model, Phase, PqkLayer};
use crate::optim::OptimizerState;
use crate::prune::Mask;
use crate::quant::{self, QuantSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PQKC";
pub const VERSION: u8 = 1;
const FORMAT_NAME: &str = "pqk-checkpoint";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct BlobRef {
    pub offset: u64,
    pub length: u64,
    pub crc32: u32,
}

/// Accumulates `PQKT` records into a blob region.
#[derive(Default)]
pub(crate) struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    pub fn push(&mut self, record: &Record) -> BlobRef {
        let enc = format::encode(record);
        let r = BlobRef {
            offset: self.bytes.len() as u64,
            length: enc.len() as u64,
            crc32: crc32fast::hash(&enc),
        };
        self.bytes.extend_from_slice(&enc);
        r
    }

    /// Serializes `magic | version | manifest | blobs`.
    pub fn finish<M: Serialize>(self, magic: &[u8; 4], version: u8, manifest: &M) -> Vec<u8> {
        let value = serde_json::to_value(manifest).expect("manifest serializes");
        let text = serde_json::to_vec(&value).expect("manifest serializes");
        let mut out = Vec::with_capacity(13 + text.len() + self.bytes.len());
        out.extend_from_slice(magic);
        out.push(version);
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(&text);
        out.extend_from_slice(&self.bytes);
        out
    }
}

/// Splits a container into its parsed manifest and blob region.
pub(crate) struct BlobReader<'a> {
    blobs: &'a [u8],
    base: u64,
    used: u64,
}

pub(crate) fn open_container<'a, M: for<'de> Deserialize<'de>>(
    bytes: &'a [u8],
    magic: &[u8; 4],
    version: u8,
) -> Result<(M, BlobReader<'a>)> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(PqkError::format(0, format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
    }
    match bytes.get(4) {
        Some(&v) if v == version => {}
        Some(&v) => return Err(PqkError::format(4, format!("unsupported version {v}"))),
        None => return Err(PqkError::format(4, "truncated header")),
    }
    let len = bytes
        .get(5..13)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
        .ok_or_else(|| PqkError::format(5, "truncated manifest length"))?;
    let end = 13u64
        .checked_add(len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| PqkError::format(5, format!("manifest length {len} exceeds the file")))?;
    let manifest = serde_json::from_slice(&bytes[13..end as usize])
        .map_err(|e| PqkError::format(13, format!("invalid manifest: {e}")))?;
    Ok((
        manifest,
        BlobReader {
            blobs: &bytes[end as usize..],
            base: end,
            used: 0,
        },
    ))
}

impl BlobReader<'_> {
    /// Checks range and checksum of a blob and decodes it.
    pub fn read(&mut self, r: &BlobRef, owner: &str) -> Result<Record> {
        let end = r
            .offset
            .checked_add(r.length)
            .filter(|&e| e <= self.blobs.len() as u64)
            .ok_or_else(|| PqkError::Corrupt(format!("{owner}: blob range exceeds the file")))?;
        let slice = &self.blobs[r.offset as usize..end as usize];
        if crc32fast::hash(slice) != r.crc32 {
            return Err(PqkError::Corrupt(format!("{owner}: checksum mismatch")));
        }
        self.used += r.length;
        format::decode_exact(slice, self.base + r.offset)
            .map_err(|e| PqkError::Corrupt(format!("{owner}: {e}")))
    }

    /// Fails if the blob region holds bytes no manifest entry accounted for.
    pub fn finish(self) -> Result<()> {
        if self.used != self.blobs.len() as u64 {
            return Err(PqkError::Corrupt(format!(
                "blob region has {} bytes, manifest accounts for {}",
                self.blobs.len(),
                self.used
            )));
        }
        Ok(())
    }
}

pub(crate) fn expect_f32(record: Record, shape: &[usize], owner: &str) -> Result<Tensor> {
    match record {
        Record::F32(t) if t.shape() == shape => Ok(t),
        other => Err(PqkError::Corrupt(format!(
            "{owner}: expected f32 {shape:?}, found {:?} {:?}",
            other.dtype(),
            other.shape()
        ))),
    }
}

pub(crate) fn expect_bits(record: Record, shape: &[usize], owner: &str) -> Result<Vec<bool>> {
    match record {
        Record::Bits { shape: s, bits } if s == shape => Ok(bits),
        other => Err(PqkError::Corrupt(format!(
            "{owner}: expected bit mask {shape:?}, found {:?} {:?}",
            other.dtype(),
            other.shape()
        ))),
    }
}

pub(crate) fn expect_i8(record: Record, shape: &[usize], owner: &str) -> Result<Vec<i8>> {
    match record {
        Record::I8 { shape: s, data } if s == shape => Ok(data),
        other => Err(PqkError::Corrupt(format!(
            "{owner}: expected i8 codes {shape:?}, found {:?} {:?}",
            other.dtype(),
            other.shape()
        ))),
    }
}

/// Batch-norm parameters as a `[4, C]` tensor: gamma, beta, running mean, running variance.
pub(crate) fn bn_to_tensor(p: &BnParams) -> Tensor {
    let c = p.gamma.numel();
    let mut data = Vec::with_capacity(4 * c);
    for t in [&p.gamma, &p.beta, &p.running_mean, &p.running_var] {
        data.extend_from_slice(t.data());
    }
    Tensor::from_parts(vec![4, c], data)
}

pub(crate) fn bn_from_tensor(t: &Tensor) -> BnParams {
    let c = t.shape()[1];
    let row = |i: usize| Tensor::from_parts(vec![c], t.data()[i * c..(i + 1) * c].to_vec());
    BnParams {
        gamma: row(0),
        beta: row(1),
        running_mean: row(2),
        running_var: row(3),
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerEntry {
    name: String,
    kind: LayerKind,
    shape: Vec<usize>,
    quant: QuantSpec,
    sparsity: f64,
    weight: BlobRef,
    mask: BlobRef,
    bias: Option<BlobRef>,
    codes: BlobRef,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NormEntry {
    name: String,
    channels: usize,
    student: BlobRef,
    teacher: Option<BlobRef>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BufferEntry {
    name: String,
    blob: BlobRef,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    phase: Phase,
    quantize: bool,
    arch: ArchConfig,
    config: TrainConfig,
    layers: Vec<LayerEntry>,
    norms: Vec<NormEntry>,
    optimizer_steps: u64,
    optimizer: Vec<BufferEntry>,
}

/// Everything a checkpoint holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
}

pub fn encode_checkpoint(model: &Model, opt: &OptimizerState, config: &TrainConfig) -> Result<Vec<u8>> {
    let mut blobs = BlobWriter::default();
    let mut layers = Vec::new();
    for l in model.layers() {
        let shape = l.weight().shape().to_vec();
        let codes = quant::quantize(l.weight(), l.quant())?;
        layers.push(LayerEntry {
            name: l.name().to_string(),
            kind: l.kind(),
            shape: shape.clone(),
            quant: *l.quant(),
            sparsity: l.mask().sparsity(),
            weight: blobs.push(&Record::F32(l.weight().clone())),
            mask: blobs.push(&Record::Bits {
                shape: shape.clone(),
                bits: l.mask().keep().to_vec(),
            }),
            bias: l.bias().map(|b| blobs.push(&Record::F32(b.clone()))),
            codes: blobs.push(&Record::I8 {
                shape,
                data: codes.into_codes(),
            }),
        });
    }
    let mut norms = Vec::new();
    for n in model.norms() {
        let student = n.params(crate::model::Path::Student).expect("student set always exists");
        norms.push(NormEntry {
            name: n.name().to_string(),
            channels: n.channels(),
            student: blobs.push(&Record::F32(bn_to_tensor(student))),
            teacher: n
                .params(crate::model::Path::Teacher)
                .map(|t| blobs.push(&Record::F32(bn_to_tensor(t)))),
        });
    }
    let mut optimizer = Vec::new();
    for (name, buf) in opt.buffers() {
        let t = Tensor::from_parts(vec![buf.len()], buf.clone());
        optimizer.push(BufferEntry {
            name: name.clone(),
            blob: blobs.push(&Record::F32(t)),
        });
    }
    let manifest = Manifest {
        format: FORMAT_NAME.to_string(),
        phase: model.phase(),
        quantize: model.quantize_enabled(),
        arch: model.arch().clone(),
        config: config.clone(),
        layers,
        norms,
        optimizer_steps: opt.steps(),
        optimizer,
    };
    Ok(blobs.finish(MAGIC, VERSION, &manifest))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (m, mut blobs): (Manifest, _) = open_container(bytes, MAGIC, VERSION)?;
    if m.format != FORMAT_NAME {
        return Err(PqkError::Corrupt(format!("unexpected format tag {:?}", m.format)));
    }
    let mut layers = Vec::with_capacity(m.layers.len());
    for e in &m.layers {
        let owner = format!("layer {}", e.name);
        e.quant.validate().map_err(|err| PqkError::Corrupt(format!("{owner}: {err}")))?;
        let w = expect_f32(blobs.read(&e.weight, &owner)?, &e.shape, &owner)?;
        let keep = expect_bits(blobs.read(&e.mask, &owner)?, &e.shape, &owner)?;
        let bias = match &e.bias {
            Some(r) => Some(expect_f32(blobs.read(r, &owner)?, &[e.shape[0]], &owner)?),
            None => None,
        };
        let codes = expect_i8(blobs.read(&e.codes, &owner)?, &e.shape, &owner)?;
        if quant::quantize(&w, &e.quant)?.codes() != codes.as_slice() {
            return Err(PqkError::Corrupt(format!("{owner}: stored codes disagree with the weights")));
        }
        let mut layer = PqkLayer::new(&e.name, e.kind, w, bias, e.quant);
        layer.set_mask(Mask::from_keep(e.shape.clone(), keep)?)?;
        layers.push(layer);
    }
    let mut norms = Vec::with_capacity(m.norms.len());
    for e in &m.norms {
        let owner = format!("norm {}", e.name);
        let shape = [4, e.channels];
        let student = bn_from_tensor(&expect_f32(blobs.read(&e.student, &owner)?, &shape, &owner)?);
        let teacher = match &e.teacher {
            Some(r) => Some(bn_from_tensor(&expect_f32(blobs.read(r, &owner)?, &shape, &owner)?)),
            None => None,
        };
        norms.push(BatchNormLayer::from_parts(&e.name, student, teacher));
    }
    let mut buffers = BTreeMap::new();
    for e in &m.optimizer {
        let owner = format!("optimizer buffer {}", e.name);
        match blobs.read(&e.blob, &owner)? {
            Record::F32(t) if t.rank() == 1 => {
                buffers.insert(e.name.clone(), t.into_data());
            }
            _ => return Err(PqkError::Corrupt(format!("{owner}: expected a 1-D f32 tensor"))),
        }
    }
    blobs.finish()?;
    if m.config.arch != m.arch {
        return Err(PqkError::Corrupt("config architecture differs from the stored model".into()));
    }
    let model = Model::from_parts(m.arch, layers, norms, m.phase, m.quantize)?;
    Ok(Checkpoint {
        model,
        optimizer: OptimizerState::from_parts(buffers, m.optimizer_steps),
        config: m.config,
    })
}

pub fn save_checkpoint(model: &Model, opt: &OptimizerState, config: &TrainConfig, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model, opt, config)?;
    std::fs::write(path, bytes).map_err(|e| PqkError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| PqkError::io(path, e))?;
    decode_checkpoint(&bytes)
}
