//! The MATF container: magic, version, a JSON header and raw f64 payloads.
//!
//! Layout: `b"MATF"`, `u32` LE version, `u64` LE header length, UTF-8 JSON
//! header, then every tensor's elements as little-endian `f64` in header
//! order. Tensor offsets are byte offsets from the start of the payload.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{LayerConfig, MatDecoderModel, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MATF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: Option<ModelConfig>,
    pub layer_caps: Option<LayerConfig>,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub extras: serde_json::Value,
}

/// A decoded container.
#[derive(Debug, Clone)]
pub struct Container {
    pub model: Option<ModelConfig>,
    pub layer_caps: Option<LayerConfig>,
    pub tensors: Vec<(String, Tensor)>,
    pub extras: serde_json::Value,
}

pub fn write_container<W: Write>(
    mut w: W,
    model: Option<(&ModelConfig, &LayerConfig)>,
    tensors: &[(String, &Tensor)],
    extras: &serde_json::Value,
) -> Result<()> {
    let mut offset = 0u64;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
            offset += 8 * t.numel() as u64;
            e
        })
        .collect();
    let header = Header {
        model: model.map(|(m, _)| m.clone()),
        layer_caps: model.map(|(_, c)| c.clone()),
        tensors: entries,
        extras: extras.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::new();
    for (_, t) in tensors {
        buf.clear();
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated container while reading {what}")),
        _ => Error::Io(e),
    })
}

pub fn read_container<R: Read>(mut r: R) -> Result<Container> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format("not a MATF container".into()));
    }
    let mut b4 = [0u8; 4];
    read_exact(&mut r, &mut b4, "version")?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported MATF version {version}")));
    }
    let mut b8 = [0u8; 8];
    read_exact(&mut r, &mut b8, "header length")?;
    let len = usize::try_from(u64::from_le_bytes(b8)).map_err(|_| Error::Format("header too large".into()))?;
    let mut json = vec![0u8; len];
    read_exact(&mut r, &mut json, "header")?;
    let header: Header = serde_json::from_slice(&json)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let numel: usize = e.shape.iter().product();
        let start = usize::try_from(e.offset).map_err(|_| Error::Format("offset too large".into()))?;
        let end = start + 8 * numel;
        let bytes = payload
            .get(start..end)
            .ok_or_else(|| Error::Format(format!("payload of {} is truncated", e.name)))?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        tensors.push((e.name.clone(), Tensor::new(&e.shape, data)?));
    }
    Ok(Container { model: header.model, layer_caps: header.layer_caps, tensors, extras: header.extras })
}

pub fn model_to_bytes(model: &MatDecoderModel, extras: &serde_json::Value) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_container(&mut buf, Some((model.config(), model.layer_caps())), &model.named_tensors(), extras)?;
    Ok(buf)
}

pub fn model_from_container(c: Container) -> Result<(MatDecoderModel, serde_json::Value)> {
    let config = c.model.ok_or_else(|| Error::Format("container holds no model".into()))?;
    let caps = c.layer_caps.unwrap_or_else(|| config.full());
    Ok((MatDecoderModel::from_tensors(config, caps, c.tensors)?, c.extras))
}

pub fn save_model(path: &Path, model: &MatDecoderModel, extras: &serde_json::Value) -> Result<()> {
    std::fs::write(path, model_to_bytes(model, extras)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(MatDecoderModel, serde_json::Value)> {
    let file = std::fs::File::open(path)?;
    model_from_container(read_container(std::io::BufReader::new(file))?)
}

/// Hex SHA-256 of a model's serialized form.
pub fn model_fingerprint(model: &MatDecoderModel) -> String {
    let bytes = model_to_bytes(model, &serde_json::Value::Null).expect("writing to memory cannot fail");
    let digest = Sha256::digest(&bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
