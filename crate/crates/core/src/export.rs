//! Deployment artifact of the quantized student.
//!
//! Same container layout as checkpoints under magic `PQKX`. Per layer it
//! stores the step size, the bit-packed mask, the `i8` codes of the kept
//! entries only (in flat order), and the bias; per norm the student
//! statistics. Logits of the source model on seeded probe inputs ride along
//! so the file can be verified on its own.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    bn_from_tensor, bn_to_tensor, expect_bits, expect_f32, expect_i8, open_container, BlobRef, BlobWriter,
};
use crate::error::{PqkError, Result};
use crate::format::Record;
use crate::model::{ArchConfig, BatchNormLayer, LayerKind, Model, Path as ForwardPath, Phase, PqkLayer};
use crate::prune::Mask;
use crate::quant::{self, QuantSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PQKX";
pub const VERSION: u8 = 1;
/// Largest absolute logit difference the verifier accepts.
pub const TOLERANCE: f32 = 1e-5;
const PROBES: usize = 8;
const PROBE_SEED: u64 = 0x5eed;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerEntry {
    name: String,
    kind: LayerKind,
    shape: Vec<usize>,
    bits: u32,
    step: f32,
    kept: usize,
    mask: BlobRef,
    codes: Option<BlobRef>,
    bias: Option<BlobRef>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NormEntry {
    name: String,
    channels: usize,
    student: BlobRef,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    arch: ArchConfig,
    layers: Vec<LayerEntry>,
    norms: Vec<NormEntry>,
    probe_seed: u64,
    probe_logits: BlobRef,
}

fn probe_inputs(arch: &ArchConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let mut shape = vec![PROBES];
    shape.extend_from_slice(&arch.input_shape);
    let n = shape.iter().product();
    Tensor::from_parts(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())
}

pub fn encode_export(model: &Model) -> Result<Vec<u8>> {
    if !model.quantize_enabled() {
        return Err(PqkError::config("export needs a model with quantization enabled"));
    }
    let mut blobs = BlobWriter::default();
    let mut layers = Vec::new();
    for l in model.layers() {
        let codes = quant::quantize(l.weight(), l.quant())?;
        let kept: Vec<i8> = codes
            .codes()
            .iter()
            .zip(l.mask().keep())
            .filter(|(_, &k)| k)
            .map(|(&c, _)| c)
            .collect();
        let shape = l.weight().shape().to_vec();
        layers.push(LayerEntry {
            name: l.name().to_string(),
            kind: l.kind(),
            shape: shape.clone(),
            bits: l.quant().bits,
            step: l.quant().step,
            kept: kept.len(),
            mask: blobs.push(&Record::Bits {
                shape,
                bits: l.mask().keep().to_vec(),
            }),
            codes: (!kept.is_empty()).then(|| {
                blobs.push(&Record::I8 {
                    shape: vec![kept.len()],
                    data: kept,
                })
            }),
            bias: l.bias().map(|b| blobs.push(&Record::F32(b.clone()))),
        });
    }
    let norms = model
        .norms()
        .iter()
        .map(|n| NormEntry {
            name: n.name().to_string(),
            channels: n.channels(),
            student: blobs.push(&Record::F32(bn_to_tensor(
                n.params(ForwardPath::Student).expect("student set always exists"),
            ))),
        })
        .collect();
    let logits = model.logits(&probe_inputs(model.arch(), PROBE_SEED), ForwardPath::Student)?;
    let manifest = Manifest {
        arch: model.arch().clone(),
        layers,
        norms,
        probe_seed: PROBE_SEED,
        probe_logits: blobs.push(&Record::F32(logits)),
    };
    Ok(blobs.finish(MAGIC, VERSION, &manifest))
}

pub fn export_quantized(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode_export(model)?;
    std::fs::write(path, bytes).map_err(|e| PqkError::io(path, e))
}

/// A reloaded artifact: an inference-only student and the stored probe logits.
#[derive(Debug, Clone)]
pub struct Exported {
    pub model: Model,
    probe_seed: u64,
    probe_logits: Tensor,
}

pub fn decode_export(bytes: &[u8]) -> Result<Exported> {
    let (m, mut blobs): (Manifest, _) = open_container(bytes, MAGIC, VERSION)?;
    let mut layers = Vec::with_capacity(m.layers.len());
    for e in &m.layers {
        let owner = format!("layer {}", e.name);
        let spec = QuantSpec::new(e.bits, e.step).map_err(|err| PqkError::Corrupt(format!("{owner}: {err}")))?;
        let keep = expect_bits(blobs.read(&e.mask, &owner)?, &e.shape, &owner)?;
        let count = keep.iter().filter(|&&k| k).count();
        if count != e.kept {
            return Err(PqkError::Corrupt(format!("{owner}: mask keeps {count} entries, manifest says {}", e.kept)));
        }
        let kept = match &e.codes {
            Some(r) => expect_i8(blobs.read(r, &owner)?, &[e.kept], &owner)?,
            None if e.kept == 0 => Vec::new(),
            None => return Err(PqkError::Corrupt(format!("{owner}: codes missing"))),
        };
        let q = spec.max_code();
        if kept.iter().any(|&c| (c as i32).abs() > q) {
            return Err(PqkError::Corrupt(format!("{owner}: code outside the {}-bit range", e.bits)));
        }
        let mut codes = kept.into_iter();
        let w: Vec<f32> = keep
            .iter()
            .map(|&k| if k { codes.next().expect("count checked") as f32 * e.step } else { 0.0 })
            .collect();
        let bias = match &e.bias {
            Some(r) => Some(expect_f32(blobs.read(r, &owner)?, &[e.shape[0]], &owner)?),
            None => None,
        };
        let w = Tensor::new(e.shape.clone(), w).map_err(|err| PqkError::Corrupt(format!("{owner}: {err}")))?;
        let mut layer = PqkLayer::new(&e.name, e.kind, w, bias, QuantSpec { trainable: false, ..spec });
        layer.set_mask(Mask::from_keep(e.shape.clone(), keep)?)?;
        layers.push(layer);
    }
    let mut norms = Vec::with_capacity(m.norms.len());
    for e in &m.norms {
        let owner = format!("norm {}", e.name);
        let t = expect_f32(blobs.read(&e.student, &owner)?, &[4, e.channels], &owner)?;
        norms.push(BatchNormLayer::from_parts(&e.name, bn_from_tensor(&t), None));
    }
    let probe_logits = match blobs.read(&m.probe_logits, "probe logits")? {
        Record::F32(t) => t,
        _ => return Err(PqkError::Corrupt("probe logits: expected f32".into())),
    };
    blobs.finish()?;
    let model = Model::from_parts(m.arch, layers, norms, Phase::Finetune, true)?;
    Ok(Exported {
        model,
        probe_seed: m.probe_seed,
        probe_logits,
    })
}

pub fn load_export(path: &Path) -> Result<Exported> {
    let bytes = std::fs::read(path).map_err(|e| PqkError::io(path, e))?;
    decode_export(&bytes)
}

impl Exported {
    /// Largest absolute difference between the reloaded model's probe logits
    /// and the stored ones.
    pub fn probe_error(&self) -> Result<f32> {
        let z = self
            .model
            .logits(&probe_inputs(self.model.arch(), self.probe_seed), ForwardPath::Student)?;
        if z.shape() != self.probe_logits.shape() {
            return Err(PqkError::Corrupt("probe logits have the wrong shape".into()));
        }
        Ok(z.data()
            .iter()
            .zip(self.probe_logits.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }
}

/// Reloads an exported file and checks it reproduces the stored probe logits
/// within [`TOLERANCE`]. Returns the largest deviation.
pub fn verify_export(path: &Path) -> Result<f32> {
    let err = load_export(path)?.probe_error()?;
    if !(err <= TOLERANCE) {
        return Err(PqkError::Numeric(format!(
            "exported model deviates from the source by {err} (tolerance {TOLERANCE})"
        )));
    }
    Ok(err)
}
