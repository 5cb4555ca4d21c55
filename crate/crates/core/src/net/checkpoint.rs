//! Binary parameter container.
//!
//! Layout: 8-byte magic, `u32` format version, `u32` header length, a JSON
//! header with the network config and per-layer shapes, then every layer's
//! weights followed by its biases as little-endian `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{LayerParams, Network, NetworkConfig};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CWNETCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct LayerShape {
    weight: [usize; 4],
    bias: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    layers: Vec<LayerShape>,
}

pub fn to_bytes(network: &Network) -> Result<Vec<u8>> {
    let header = Header {
        config: network.config().clone(),
        layers: network
            .layers()
            .iter()
            .map(|l| LayerShape {
                weight: l.weight.shape(),
                bias: l.bias.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * network.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for l in network.layers() {
        for &v in l.weight.data().iter().chain(&l.bias) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
    let bad = |msg: String| Error::Checkpoint(msg);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < header_len {
        return Err(bad("header extends past end of file".into()));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])
        .map_err(|e| bad(format!("unreadable header: {e}")))?;
    let mut payload = body[header_len..].chunks_exact(4);
    let expected: usize = header
        .layers
        .iter()
        .map(|l| l.weight.iter().product::<usize>() + l.bias)
        .sum();
    if payload.len() != expected || !payload.remainder().is_empty() {
        return Err(bad(format!(
            "payload holds {} bytes, header describes {} values",
            body.len() - header_len,
            expected
        )));
    }
    let mut next = |n: usize| -> Vec<f64> {
        payload
            .by_ref()
            .take(n)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect()
    };
    let mut layers = Vec::with_capacity(header.layers.len());
    for shape in &header.layers {
        let weight = Tensor::new(shape.weight, next(shape.weight.iter().product()))?;
        let bias = next(shape.bias);
        if weight.data().iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(bad("non-finite parameter".into()));
        }
        layers.push(LayerParams { weight, bias });
    }
    Network::from_layers(header.config, layers).map_err(|e| bad(e.to_string()))
}

pub fn save(network: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, to_bytes(network)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
