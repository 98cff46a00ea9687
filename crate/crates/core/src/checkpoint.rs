//! Model files: the bytes `FFCK`, a little-endian `u32` header length, a JSON
//! header, then every weight and bias as little-endian `f64` in layer order
//! (weights row-major, then biases; the classic head comes last).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::ClassicModel;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::nn::{DenseLayer, MlpNetwork};
use crate::report::write_atomic;

const MAGIC: &[u8; 4] = b"FFCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Consumes label-linked inputs and votes with goodness.
    LinkedMlp,
    /// Raw inputs, linear label head.
    Classic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model_kind: ModelKind,
    /// All layer widths including the input; for classic models the last
    /// entry is the head.
    pub layer_dims: Vec<usize>,
    pub normalize: bool,
    pub config_hash: String,
    /// Zero-based layers that vote at inference; linked models only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inference_mask: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Linked(MlpNetwork),
    Classic(ClassicModel),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Linked(_) => ModelKind::LinkedMlp,
            Model::Classic(_) => ModelKind::Classic,
        }
    }

    fn layer_dims(&self) -> Vec<usize> {
        match self {
            Model::Linked(net) => net.layer_dims(),
            Model::Classic(m) => m.dims(),
        }
    }

    fn normalize(&self) -> bool {
        match self {
            Model::Linked(_) => true,
            Model::Classic(m) => m.normalize,
        }
    }

    fn layers(&self) -> Vec<&DenseLayer> {
        match self {
            Model::Linked(net) => net.layers().iter().collect(),
            Model::Classic(m) => m.body.layers().iter().chain(std::iter::once(&m.head)).collect(),
        }
    }
}

pub fn to_bytes(model: &Model, config_hash: &str, inference_mask: Option<&[usize]>) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        model_kind: model.kind(),
        layer_dims: model.layer_dims(),
        normalize: model.normalize(),
        config_hash: config_hash.to_string(),
        inference_mask: inference_mask.map(<[usize]>::to_vec),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for layer in model.layers() {
        for v in layer.weights.data().iter().chain(layer.biases.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(path: &Path, model: &Model, config_hash: &str, inference_mask: Option<&[usize]>) -> Result<()> {
    write_atomic(path, &to_bytes(model, config_hash, inference_mask)?)
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, Model)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Format { msg, .. } => Error::format(path, msg),
        other => other,
    })
}

pub fn from_bytes(bytes: &[u8]) -> Result<(CheckpointHeader, Model)> {
    let bad = |msg: String| Error::format("<checkpoint>", msg);
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)".into()));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let json = bytes
        .get(8..8 + header_len)
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| bad(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "format version {} not supported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let min_dims = match header.model_kind {
        ModelKind::LinkedMlp => 2,
        ModelKind::Classic => 3,
    };
    if header.layer_dims.len() < min_dims || header.layer_dims.contains(&0) {
        return Err(bad(format!("invalid layer_dims {:?}", header.layer_dims)));
    }
    let payload = &bytes[8 + header_len..];
    let expected: usize = header.layer_dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum();
    if payload.len() != expected * 8 {
        return Err(bad(format!(
            "payload holds {} bytes, expected {} for layer_dims {:?}",
            payload.len(),
            expected * 8,
            header.layer_dims
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };
    let mut layers = Vec::with_capacity(header.layer_dims.len() - 1);
    for w in header.layer_dims.windows(2) {
        let weights = DenseMatrix::from_vec(w[0], w[1], take(w[0] * w[1]))?;
        let biases = DenseMatrix::from_vec(1, w[1], take(w[1]))?;
        layers.push(DenseLayer::new(weights, biases)?);
    }
    let depth = header.layer_dims.len() - 1;
    match (&header.inference_mask, header.model_kind) {
        (Some(_), ModelKind::Classic) => {
            return Err(bad("classic models take no inference mask".into()));
        }
        (Some(mask), ModelKind::LinkedMlp) if mask.is_empty() || mask.iter().any(|&l| l >= depth) => {
            return Err(bad(format!("inference mask {mask:?} invalid for depth {depth}")));
        }
        _ => {}
    }
    let model = match header.model_kind {
        ModelKind::LinkedMlp => {
            if !header.normalize {
                return Err(bad("linked networks are always normalized".into()));
            }
            Model::Linked(MlpNetwork::new(layers)?)
        }
        ModelKind::Classic => {
            let head = layers.pop().expect("at least two layers");
            Model::Classic(ClassicModel::new(MlpNetwork::new(layers)?, head, header.normalize)?)
        }
    };
    Ok((header, model))
}
