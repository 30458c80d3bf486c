//! Binary checkpoints: `LGCKPT1\0`, a length-prefixed JSON header, then a
//! table of named little-endian f64 tensors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{build_model_with, ArchSpec, Model, ModelKind, VariantConfig};
use crate::tensor::{AdamConfig, AdamState, Tensor};

pub const MAGIC: &[u8; 8] = b"LGCKPT1\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs_completed: usize,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    kind: ModelKind,
    arch: ArchSpec,
    variant: VariantConfig,
    meta: TrainMeta,
    adam: Option<(AdamConfig, u64)>,
    tensor_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: TrainMeta,
    pub adam: Option<AdamState>,
}

fn named_tensors(ck: &Checkpoint) -> Vec<(String, Vec<usize>, &[f64])> {
    let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
    for p in &ck.model.params {
        out.push((p.name.clone(), p.tensor.shape().to_vec(), p.tensor.data()));
    }
    for b in &ck.model.bn {
        let c = b.stats.mean.len();
        out.push((format!("{}.running_mean", b.name), vec![c], &b.stats.mean));
        out.push((format!("{}.running_var", b.name), vec![c], &b.stats.var));
    }
    if let Some(a) = &ck.adam {
        for (p, (m, v)) in ck.model.params.iter().zip(a.m.iter().zip(&a.v)) {
            out.push((format!("adam.m.{}", p.name), p.tensor.shape().to_vec(), m));
            out.push((format!("adam.v.{}", p.name), p.tensor.shape().to_vec(), v));
        }
    }
    out
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let tensors = named_tensors(ck);
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: ck.model.kind,
        arch: ck.model.spec.clone(),
        variant: ck.model.variant.clone(),
        meta: ck.meta.clone(),
        adam: ck.adam.as_ref().map(|a| (a.config, a.t)),
        tensor_count: tensors.len() as u64,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(64 + json.len() + tensors.iter().map(|t| t.2.len() * 8 + 64).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (name, shape, data) in tensors {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
        for d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    raw: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let left = self.raw.len() - self.pos;
        if n > left {
            return Err(Error::Checkpoint {
                field,
                detail: format!("truncated: expected {n} bytes at offset {}, found {left}", self.pos),
            });
        }
        let s = &self.raw[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, field: &'static str, max: usize) -> Result<usize> {
        let v = self.u64(field)?;
        if v > max as u64 {
            return Err(Error::Checkpoint {
                field,
                detail: format!("value {v} exceeds {max}"),
            });
        }
        Ok(v as usize)
    }
}

pub fn decode_checkpoint(raw: &[u8]) -> Result<Checkpoint> {
    let bad = |field, detail: String| Error::Checkpoint { field, detail };
    let mut r = Reader { raw, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic != MAGIC {
        return Err(bad("magic", format!("expected {:?}, found {:?}", MAGIC, magic)));
    }
    let hlen = r.len("header length", raw.len())?;
    let header: Header = serde_json::from_slice(r.take(hlen, "header")?).map_err(|e| bad("header", e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(
            "version",
            format!("expected {FORMAT_VERSION}, found {}", header.format_version),
        ));
    }
    let mut model = build_model_with(header.kind, &header.arch, header.variant.clone(), 0)
        .map_err(|e| bad("header", format!("embedded architecture is invalid: {e}")))?;
    let adam_count = if header.adam.is_some() { 2 * model.params.len() } else { 0 };
    let expected = model.params.len() + 2 * model.bn.len() + adam_count;
    if header.tensor_count != expected as u64 {
        return Err(bad(
            "tensor count",
            format!("expected {expected}, found {}", header.tensor_count),
        ));
    }
    let mut read = |want_name: &str, want_shape: &[usize]| -> Result<Vec<f64>> {
        let n = r.len("tensor name length", 4096)?;
        let name = std::str::from_utf8(r.take(n, "tensor name")?).map_err(|e| bad("tensor name", e.to_string()))?;
        if name != want_name {
            return Err(bad("tensor name", format!("expected {want_name}, found {name}")));
        }
        let rank = r.len("tensor rank", 8)?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.len("tensor dims", 1 << 32)?);
        }
        if shape != want_shape {
            return Err(bad(
                "tensor shape",
                format!("{name}: architecture expects {want_shape:?}, found {shape:?}"),
            ));
        }
        let count: usize = shape.iter().product();
        let bytes = r.take(count * 8, "payload")?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    };
    for p in &mut model.params {
        let data = read(&p.name, p.tensor.shape())?;
        p.tensor = Tensor::new(p.tensor.shape(), data)?;
    }
    for b in &mut model.bn {
        let c = b.stats.mean.len();
        b.stats.mean = read(&format!("{}.running_mean", b.name), &[c])?;
        b.stats.var = read(&format!("{}.running_var", b.name), &[c])?;
    }
    let adam = match header.adam {
        Some((config, t)) => {
            let (mut m, mut v) = (Vec::new(), Vec::new());
            for p in &model.params {
                m.push(read(&format!("adam.m.{}", p.name), p.tensor.shape())?);
                v.push(read(&format!("adam.v.{}", p.name), p.tensor.shape())?);
            }
            Some(AdamState { config, t, m, v })
        }
        None => None,
    };
    if r.pos != raw.len() {
        return Err(bad("payload", format!("{} trailing bytes", raw.len() - r.pos)));
    }
    Ok(Checkpoint {
        model,
        meta: header.meta,
        adam,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let raw = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: "run `latent-gate train` first".into(),
            }
        } else {
            Error::io(path, e)
        }
    })?;
    decode_checkpoint(&raw)
}

/// Loads a checkpoint and insists on a particular model kind and latent size.
pub fn load_checkpoint_expecting(path: &Path, kind: Option<ModelKind>, latent_dim: Option<usize>) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if let Some(k) = kind.filter(|&k| k != ck.model.kind) {
        return Err(Error::ArchMismatch(format!(
            "checkpoint holds {} but {} was requested",
            ck.model.kind.name(),
            k.name()
        )));
    }
    if let Some(d) = latent_dim.filter(|&d| d != ck.model.latent_dim()) {
        return Err(Error::ArchMismatch(format!(
            "checkpoint has latent dimension {} but {d} was requested",
            ck.model.latent_dim()
        )));
    }
    Ok(ck)
}
