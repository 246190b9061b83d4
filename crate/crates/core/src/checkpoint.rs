//! Head checkpoints.
//!
//! Layout: magic `BAYH0001`, kind byte (0 deterministic, 1 variational),
//! u32 LE layer count, u32 LE dims (`count + 1` values), parameter blocks as
//! f32 LE in [`ParamSet::blocks`] order, then a u32 LE byte length followed by
//! a JSON metadata trailer.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{
    DenseLayer, DeterministicHead, Head, HeadKind, ParamSet, VariationalDenseLayer,
    VariationalHead,
};
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BAYH0001";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub best_val_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub head: Head,
    pub meta: CheckpointMeta,
}

fn kind_byte(kind: HeadKind) -> u8 {
    match kind {
        HeadKind::Deterministic => 0,
        HeadKind::Variational => 1,
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut meta = ckpt.meta.clone();
    let blocks: Vec<&[f64]> = match &ckpt.head {
        Head::Variational(h) => {
            let (m, s) = h.prior();
            meta.prior_mean = Some(m);
            meta.prior_sigma = Some(s);
            h.blocks()
        }
        Head::Deterministic(h) => {
            meta.dropout = Some(h.dropout());
            h.blocks()
        }
    };
    let dims = ckpt.head.dims();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.push(kind_byte(ckpt.head.kind()));
    buf.extend_from_slice(&((dims.len() - 1) as u32).to_le_bytes());
    for d in &dims {
        buf.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for b in blocks {
        for &v in b {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let json = serde_json::to_vec(&meta)?;
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    Ok(buf)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Length(format!(
                "checkpoint truncated while reading {what}: need {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 4, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Matrix> {
        Matrix::from_vec(rows, cols, self.floats(rows * cols, what)?)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "expected checkpoint magic BAYH0001, found {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let kind = match r.take(1, "kind")?[0] {
        0 => HeadKind::Deterministic,
        1 => HeadKind::Variational,
        other => return Err(Error::Format(format!("unknown head kind byte {other}"))),
    };
    let count = r.u32("layer count")?;
    if count == 0 || count > 64 {
        return Err(Error::Format(format!("implausible layer count {count}")));
    }
    let dims = (0..=count)
        .map(|_| r.u32("dims"))
        .collect::<Result<Vec<_>>>()?;

    // The trailer length sits at the end of the parameter section, so parse
    // parameters first and then check the metadata.
    let head = match kind {
        HeadKind::Variational => {
            let mut layers = Vec::with_capacity(count);
            for w in dims.windows(2) {
                let weight_mu = r.matrix(w[0], w[1], "weight_mu")?;
                let weight_rho = r.matrix(w[0], w[1], "weight_rho")?;
                let bias_mu = r.floats(w[1], "bias_mu")?;
                let bias_rho = r.floats(w[1], "bias_rho")?;
                layers.push(VariationalDenseLayer {
                    weight_mu,
                    weight_rho,
                    bias_mu,
                    bias_rho,
                    prior_mean: 0.0,
                    prior_sigma: 1.0,
                });
            }
            Head::Variational(VariationalHead::from_layers(layers)?)
        }
        HeadKind::Deterministic => {
            let mut layers = Vec::with_capacity(count);
            for w in dims.windows(2) {
                let weight = r.matrix(w[0], w[1], "weight")?;
                let bias = r.floats(w[1], "bias")?;
                layers.push(DenseLayer { weight, bias });
            }
            Head::Deterministic(DeterministicHead::from_layers(layers, 0.0)?)
        }
    };
    let json_len = r.u32("metadata length")?;
    let json = r.take(json_len, "metadata")?;
    if r.pos != bytes.len() {
        return Err(Error::Length(format!(
            "{} trailing bytes after checkpoint metadata",
            bytes.len() - r.pos
        )));
    }
    let meta: CheckpointMeta = serde_json::from_slice(json)?;
    let head = match head {
        Head::Variational(mut h) => {
            let prior_mean = meta.prior_mean.unwrap_or(0.0);
            let prior_sigma = meta.prior_sigma.unwrap_or(1.0);
            for l in h.layers_mut() {
                l.prior_mean = prior_mean;
                l.prior_sigma = prior_sigma;
            }
            Head::Variational(h)
        }
        Head::Deterministic(mut h) => {
            h.set_dropout(meta.dropout.unwrap_or(0.0))?;
            Head::Deterministic(h)
        }
    };
    Ok(Checkpoint { head, meta })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

pub fn load_variational(path: &Path) -> Result<(VariationalHead, CheckpointMeta)> {
    match load_checkpoint(path)? {
        Checkpoint {
            head: Head::Variational(h),
            meta,
        } => Ok((h, meta)),
        Checkpoint { head, .. } => Err(Error::KindTag {
            expected: HeadKind::Variational.as_str(),
            found: head.kind().as_str(),
        }),
    }
}

pub fn load_deterministic(path: &Path) -> Result<(DeterministicHead, CheckpointMeta)> {
    match load_checkpoint(path)? {
        Checkpoint {
            head: Head::Deterministic(h),
            meta,
        } => Ok((h, meta)),
        Checkpoint { head, .. } => Err(Error::KindTag {
            expected: HeadKind::Deterministic.as_str(),
            found: head.kind().as_str(),
        }),
    }
}
