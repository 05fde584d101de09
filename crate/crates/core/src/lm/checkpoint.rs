//! Binary tensor files.
//!
//! Layout: the ASCII magic `PROMPTLAB1\n`, a little-endian `u32` byte length,
//! that many bytes of UTF-8 JSON metadata, then every declared tensor as
//! little-endian IEEE-754 `f64` values in row-major order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::LanguageModel;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

pub const MAGIC: &[u8] = b"PROMPTLAB1\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    Model,
    SoftPrompt,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub format_version: u32,
    pub kind: PayloadKind,
    pub config: Option<ModelConfig>,
    #[serde(default)]
    pub frozen: bool,
    pub tensors: Vec<TensorEntry>,
}

/// Serializes named tensors (values widened to `f64`).
pub fn encode<S: Scalar>(
    kind: PayloadKind,
    config: Option<&ModelConfig>,
    frozen: bool,
    tensors: &[(String, &Tensor<S>)],
) -> Result<Vec<u8>> {
    let meta = Metadata {
        format_version: FORMAT_VERSION,
        kind,
        config: config.cloned(),
        frozen,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&meta)?;
    let len = u32::try_from(json.len())
        .map_err(|_| Error::Format("metadata larger than 4 GiB".into()))?;
    let payload: usize = tensors.iter().map(|(_, t)| t.numel() * 8).sum();
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for &x in t.data() {
            out.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
        }
    }
    Ok(out)
}

pub type NamedTensors<S> = Vec<(String, Tensor<S>)>;

/// Parses a tensor file produced by [`encode`].
pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<(Metadata, NamedTensors<S>)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("missing PROMPTLAB1 magic".into()));
    }
    let mut pos = MAGIC.len();
    let len_bytes: [u8; 4] = bytes
        .get(pos..pos + 4)
        .and_then(|s| s.try_into().ok())
        .ok_or_else(|| Error::Corruption("truncated metadata length".into()))?;
    let len = u32::from_le_bytes(len_bytes) as usize;
    pos += 4;
    let json = bytes
        .get(pos..pos + len)
        .ok_or_else(|| Error::Corruption("truncated metadata".into()))?;
    pos += len;
    let probe: serde_json::Value = serde_json::from_slice(json)
        .map_err(|e| Error::Format(format!("metadata is not JSON: {e}")))?;
    let version = probe
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Format("metadata lacks format_version".into()))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(Error::Version {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            expected: FORMAT_VERSION,
        });
    }
    let meta: Metadata =
        serde_json::from_value(probe).map_err(|e| Error::Format(format!("bad metadata: {e}")))?;
    let mut tensors = Vec::with_capacity(meta.tensors.len());
    for (i, entry) in meta.tensors.iter().enumerate() {
        let n: usize = entry.shape.iter().product();
        let end = pos + n * 8;
        let chunk = bytes.get(pos..end).ok_or_else(|| {
            Error::Corruption(format!(
                "tensor {} of {} ({}) is truncated",
                i + 1,
                meta.tensors.len(),
                entry.name
            ))
        })?;
        let data = chunk
            .chunks_exact(8)
            .map(|b| S::lit(f64::from_le_bytes(b.try_into().expect("8-byte chunk"))))
            .collect();
        tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
        pos = end;
    }
    if pos != bytes.len() {
        return Err(Error::Corruption(format!(
            "{} trailing bytes after declared tensors",
            bytes.len() - pos
        )));
    }
    Ok((meta, tensors))
}

pub fn save_checkpoint<S: Scalar>(model: &LanguageModel<S>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(
        PayloadKind::Model,
        Some(&model.config),
        model.is_frozen(),
        &model.named_params(),
    )?;
    let path = path.as_ref();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a model; the frozen flag is restored from the file.
pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<LanguageModel<S>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}

pub fn model_from_bytes<S: Scalar>(bytes: &[u8]) -> Result<LanguageModel<S>> {
    let (meta, tensors) = decode::<S>(bytes)?;
    if meta.kind != PayloadKind::Model {
        return Err(Error::Format("file does not hold a model".into()));
    }
    let config = meta
        .config
        .ok_or_else(|| Error::Format("model file without config".into()))?;
    let mut model = LanguageModel::<S>::zeros(config)?;
    let expected = model.named_params().len();
    if tensors.len() != expected {
        return Err(Error::Corruption(format!(
            "expected {expected} tensors, file declares {}",
            tensors.len()
        )));
    }
    let mut source = tensors.into_iter();
    let mut failure = None;
    model.for_each_param_mut(|name, slot| {
        let (found, t) = source.next().expect("count checked");
        if failure.is_some() {
            return;
        }
        if found != name || t.shape() != slot.shape() {
            failure = Some(Error::Corruption(format!(
                "tensor {found} {:?} does not match expected {name} {:?}",
                t.shape(),
                slot.shape()
            )));
            return;
        }
        *slot = t;
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if meta.frozen {
        model.freeze();
    }
    Ok(model)
}
