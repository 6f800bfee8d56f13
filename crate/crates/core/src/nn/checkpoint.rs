//! Versioned binary checkpoint container.
//!
//! Layout: the magic `DENCCKPT`, a little-endian `u32` format version, a
//! `u64` header length, a JSON header (schedule, architecture, step, config
//! and tensor directory), then every tensor's values as little-endian `f64`,
//! followed by the first and second optimizer moments in the same order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::model::{Architecture, DiffEncModel};
use crate::nn::params::{OptimizerState, ParamStore, Tensor};
use crate::schedule::LogLinearSchedule;

const MAGIC: &[u8; 8] = b"DENCCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    schedule: LogLinearSchedule,
    architecture: Architecture,
    step: u64,
    config_hash: Option<String>,
    /// The run configuration the checkpoint was produced with, as text.
    config: Option<String>,
    tensors: Vec<TensorEntry>,
}

/// A model together with the provenance stored next to it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: DiffEncModel,
    pub config_hash: Option<String>,
    pub config: Option<String>,
}

pub fn encode(model: &DiffEncModel, config_hash: Option<&str>, config: Option<&str>) -> Result<Vec<u8>> {
    let header = Header {
        format_version: FORMAT_VERSION,
        schedule: model.schedule,
        architecture: model.arch.clone(),
        step: model.params.optimizer.step,
        config_hash: config_hash.map(str::to_string),
        config: config.map(str::to_string),
        tensors: model
            .params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(24 + json.len() + 24 * model.params.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.params.iter() {
        push_f64s(&mut out, &t.data);
    }
    for m in &model.params.optimizer.first_moment {
        push_f64s(&mut out, m);
    }
    for v in &model.params.optimizer.second_moment {
        push_f64s(&mut out, v);
    }
    Ok(out)
}

fn push_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Parse {
            offset: self.bytes.len(),
            msg: format!("checkpoint truncated while reading {what}"),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: "not a diffenc checkpoint".into(),
        });
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(r.take(8, "header length")?.try_into().expect("8 bytes")) as usize;
    let header_offset = r.pos;
    let header: Header = serde_json::from_slice(r.take(hlen, "header")?).map_err(|e| Error::Parse {
        offset: header_offset,
        msg: format!("invalid checkpoint header: {e}"),
    })?;
    let schedule = LogLinearSchedule::new(header.schedule.lambda_max, header.schedule.lambda_min)?;

    let mut named = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let data = r.f64s(n, &e.name)?;
        named.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    let sizes: Vec<usize> = named.iter().map(|(_, t)| t.len()).collect();
    let mut first = Vec::with_capacity(sizes.len());
    for &n in &sizes {
        first.push(r.f64s(n, "first moments")?);
    }
    let mut second = Vec::with_capacity(sizes.len());
    for &n in &sizes {
        second.push(r.f64s(n, "second moments")?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse {
            offset: r.pos,
            msg: "trailing bytes after checkpoint payload".into(),
        });
    }
    let params = ParamStore::from_named(
        named,
        OptimizerState {
            step: header.step,
            first_moment: first,
            second_moment: second,
        },
    )?;
    let model = DiffEncModel::from_params(header.architecture, schedule, params)?;
    Ok(Checkpoint {
        model,
        config_hash: header.config_hash,
        config: header.config,
    })
}

pub fn save(path: &Path, model: &DiffEncModel, config_hash: Option<&str>, config: Option<&str>) -> Result<()> {
    crate::io::write_atomic(path, &encode(model, config_hash, config)?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderKind;
    use crate::nn::optim::{optimizer_step, AdamConfig};
    use crate::nn::tape::Gradients;

    fn model() -> DiffEncModel {
        let arch = Architecture {
            dim: 2,
            encoder: EncoderKind::Trainable,
            denoiser_hidden: vec![8],
            encoder_hidden: vec![4],
            n_freq: 2,
        };
        let mut m = DiffEncModel::new(arch, LogLinearSchedule::new(10.0, -4.0).unwrap(), 7).unwrap();
        let grads = Gradients {
            grads: m.params.iter().map(|(_, t)| t.data.iter().map(|v| v * 0.1 + 1e-3).collect()).collect(),
            unused: vec![],
        };
        optimizer_step(&mut m.params, &grads, &AdamConfig::default()).unwrap();
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let bytes = encode(&m, Some("h"), Some("seed = 1")).unwrap();
        let c = decode(&bytes).unwrap();
        assert_eq!(c.model.params, m.params);
        assert_eq!(c.model.arch, m.arch);
        assert_eq!(c.model.schedule, m.schedule);
        assert_eq!(c.config_hash.as_deref(), Some("h"));
        assert_eq!(encode(&c.model, Some("h"), Some("seed = 1")).unwrap(), bytes);
    }

    #[test]
    fn corrupt_input_rejected() {
        let bytes = encode(&model(), None, None).unwrap();
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Parse { offset: 0, .. })));
        let mut v2 = bytes;
        v2[8] = 9;
        assert!(matches!(decode(&v2), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = model();
        save(&p, &m, None, None).unwrap();
        assert_eq!(load(&p).unwrap().model.params, m.params);
    }
}
