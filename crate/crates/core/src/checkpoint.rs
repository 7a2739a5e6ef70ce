//! Checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! "BCK1"                       magic
//! u32 version                  currently 1
//! u32 header_len, header       UTF-8 JSON, see `Header`
//! u32 tensor_count
//! per tensor:
//!   u32 name_len, name         UTF-8
//!   u32 rank, rank x u32 dims
//!   prod(dims) x f64           row-major
//! ```
//!
//! Tensor names: the model parameters as in
//! [`parameter_names`](crate::model::parameter_names), then optionally
//! `norm.mean`, `norm.std`, and per parameter `opt.first.<name>` /
//! `opt.second.<name>`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clstm::ClstmParams;
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::{parameter_names, BiClstmModel, ModelConfig};
use crate::nn::DenseParams;
use crate::tensor::Tensor;
use crate::train::{OptimizerKind, OptimizerState};

pub const MAGIC: &[u8; 4] = b"BCK1";
pub const VERSION: u32 = 1;

/// Everything persisted between runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: BiClstmModel,
    pub norm: Option<NormStats>,
    pub optimizer: Option<OptimizerState>,
    /// Free-form provenance, e.g. the effective run configuration.
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    optimizer: Option<OptimizerHeader>,
    meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    kind: OptimizerKind,
    step: u64,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Argument(format!("{v} does not fit the u32 header field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank())?;
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.config().clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                kind: o.kind,
                step: o.step,
            }),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let names = parameter_names();
        let mut tensors: Vec<(String, &Tensor)> = names.iter().cloned().zip(self.model.tensors()).collect();
        let norm_tensors;
        if let Some(norm) = &self.norm {
            norm_tensors = [Tensor::vector(norm.mean.clone()), Tensor::vector(norm.std.clone())];
            tensors.push(("norm.mean".into(), &norm_tensors[0]));
            tensors.push(("norm.std".into(), &norm_tensors[1]));
        }
        if let Some(opt) = &self.optimizer {
            for (prefix, moments) in [("first", &opt.first), ("second", &opt.second)] {
                if !moments.is_empty() && moments.len() != names.len() {
                    return Err(Error::Shape(format!(
                        "optimizer has {} {prefix} moments for {} parameters",
                        moments.len(),
                        names.len()
                    )));
                }
                for (name, t) in names.iter().zip(moments) {
                    tensors.push((format!("opt.{prefix}.{name}"), t));
                }
            }
        }

        let mut out = Vec::from(*MAGIC);
        put_u32(&mut out, VERSION as usize)?;
        put_u32(&mut out, json.len())?;
        out.extend_from_slice(&json);
        put_u32(&mut out, tensors.len())?;
        for (name, t) in tensors {
            put_tensor(&mut out, &name, t)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return r.fail(0, "bad magic, expected \"BCK1\"");
        }
        let version_at = r.pos;
        let version = r.u32()?;
        if version != VERSION {
            return r.fail(version_at, &format!("unsupported checkpoint version {version}"));
        }
        let json_len = r.u32()? as usize;
        let json_at = r.pos;
        let header: Header = serde_json::from_slice(r.take(json_len, "header")?).map_err(|e| Error::Parse {
            offset: json_at as u64,
            message: format!("invalid header json: {e}"),
        })?;
        let count = r.u32()? as usize;
        let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name_at = r.pos;
            let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
                .or_else(|_| r.fail(name_at, "tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let dims_at = r.pos;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .map_or_else(|| r.fail(dims_at, &format!("tensor {name} dimensions overflow")), Ok)?;
            let data = r
                .take(len, &format!("tensor {name}"))?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return r.fail(r.pos, "trailing bytes after last tensor");
        }

        let mut take = |name: &str| -> Result<Tensor> {
            match tensors.iter().position(|(n, _)| n == name) {
                Some(i) => Ok(tensors.swap_remove(i).1),
                None => Err(Error::Parse {
                    offset: 0,
                    message: format!("checkpoint is missing tensor {name}"),
                }),
            }
        };
        let names = parameter_names();
        let mut params: Vec<Tensor> = names.iter().map(|n| take(n)).collect::<Result<_>>()?;
        let head_bias = params.pop().unwrap();
        let head_weights = params.pop().unwrap();
        let backward = clstm_from(params.split_off(12));
        let forward = clstm_from(params);
        let model = BiClstmModel::from_parts(
            header.model,
            forward,
            backward,
            DenseParams::new(head_weights, head_bias)?,
        )?;

        let norm = match (take("norm.mean"), take("norm.std")) {
            (Ok(mean), Ok(std)) => Some(NormStats {
                mean: mean.into_data(),
                std: std.into_data(),
            }),
            _ => None,
        };
        let optimizer = match header.optimizer {
            Some(h) => {
                let first = names
                    .iter()
                    .map(|n| take(&format!("opt.first.{n}")))
                    .collect::<Result<_>>()?;
                let second = match h.kind {
                    OptimizerKind::Adam => names
                        .iter()
                        .map(|n| take(&format!("opt.second.{n}")))
                        .collect::<Result<_>>()?,
                    OptimizerKind::SgdMomentum => Vec::new(),
                };
                Some(OptimizerState {
                    kind: h.kind,
                    step: h.step,
                    first,
                    second,
                })
            }
            None => None,
        };
        if let Some((name, _)) = tensors.first() {
            return Err(Error::Parse {
                offset: 0,
                message: format!("unexpected tensor {name}"),
            });
        }
        Ok(Checkpoint {
            model,
            norm,
            optimizer,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn clstm_from(t: Vec<Tensor>) -> ClstmParams {
    let [w_hf, w_xf, w_hi, w_xi, w_hc, w_xc, w_ho, w_xo, b_f, b_i, b_c, b_o]: [Tensor; 12] =
        t.try_into().expect("twelve cell tensors");
    ClstmParams {
        w_hf,
        w_xf,
        w_hi,
        w_xi,
        w_hc,
        w_xc,
        w_ho,
        w_xo,
        b_f,
        b_i,
        b_c,
        b_o,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, offset: usize, message: &str) -> Result<T> {
        Err(Error::Parse {
            offset: offset as u64,
            message: message.to_string(),
        })
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return self.fail(self.pos, &format!("truncated {what}"));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, "u32 field")?.try_into().unwrap()))
    }
}
