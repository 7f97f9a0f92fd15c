//! Checkpoint container.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "ADVDCKPT"
//! 8       4     format version, u32 little-endian
//! 12      8     manifest length L in bytes, u64 little-endian
//! 20      L     manifest, UTF-8 JSON
//! 20+L    8·N   array payload, f64 little-endian, arrays in manifest order
//! end-32  32    SHA-256 of every preceding byte
//! ```
//!
//! The manifest is `{"kind": ..., "dtype": "f64le", "arrays": [{"name", "shape"}], "meta": ...}`.
//! Files are written to a temporary sibling and renamed into place, so an
//! interrupted write never replaces the previous file.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{NamedTensor, Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ADVDCKPT";
pub const VERSION: u32 = 1;
const HEADER: usize = 20;
const DIGEST: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub dtype: String,
    pub arrays: Vec<ArrayEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Writes named tensors plus free-form metadata atomically.
pub fn write_container(path: &Path, kind: &str, meta: serde_json::Value, arrays: &[&NamedTensor]) -> Result<()> {
    let manifest = Manifest {
        kind: kind.to_string(),
        dtype: "f64le".into(),
        arrays: arrays
            .iter()
            .map(|a| ArrayEntry {
                name: a.name.clone(),
                shape: a.value.shape().to_vec(),
            })
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&manifest)?;
    let n: usize = arrays.iter().map(|a| a.value.len()).sum();
    let mut buf = Vec::with_capacity(HEADER + json.len() + 8 * n + DIGEST);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for a in arrays {
        for v in a.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    write_atomic(path, &buf)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn read_container(path: &Path) -> Result<(Manifest, Vec<NamedTensor>)> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    parse_container(&bytes)
}

pub fn parse_container(bytes: &[u8]) -> Result<(Manifest, Vec<NamedTensor>)> {
    let corrupt = |m: &str| Error::CheckpointCorrupt(m.to_string());
    if bytes.len() < HEADER + DIGEST || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let payload_start = HEADER
        .checked_add(mlen)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| corrupt("manifest length out of range"))?;
    let manifest: Manifest = serde_json::from_slice(&body[HEADER..payload_start])
        .map_err(|e| Error::CheckpointCorrupt(format!("manifest: {e}")))?;
    if manifest.dtype != "f64le" {
        return Err(corrupt("unsupported dtype"));
    }
    let mut chunks = body[payload_start..].chunks_exact(8);
    if chunks.remainder().len() != 0 {
        return Err(corrupt("payload is not a whole number of values"));
    }
    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for a in &manifest.arrays {
        let n: usize = a.shape.iter().product();
        let data: Vec<f64> = chunks
            .by_ref()
            .take(n)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.len() != n {
            return Err(corrupt("payload shorter than manifest"));
        }
        arrays.push(NamedTensor {
            name: a.name.clone(),
            value: Tensor::new(a.shape.clone(), data)?,
        });
    }
    if chunks.next().is_some() {
        return Err(corrupt("payload longer than manifest"));
    }
    Ok((manifest, arrays))
}

const PARAM_PREFIX: &str = "param/";
const BUFFER_PREFIX: &str = "buffer/";

pub(crate) fn network_arrays(net: &Network, scope: &str) -> Vec<NamedTensor> {
    net.params()
        .iter()
        .map(|p| (PARAM_PREFIX, p))
        .chain(net.buffers().iter().map(|b| (BUFFER_PREFIX, b)))
        .map(|(prefix, t)| NamedTensor {
            name: format!("{scope}{prefix}{}", t.name),
            value: t.value.clone(),
        })
        .collect()
}

/// Rebuilds a network from its spec and the arrays stored under `scope`.
pub(crate) fn network_from_arrays(spec: &NetworkSpec, arrays: &[NamedTensor], scope: &str) -> Result<Network> {
    let mut net = match spec {
        NetworkSpec::Generator(s) => super::build_generator(s)?,
        NetworkSpec::PairDiscriminator(s) => super::build_pair_discriminator(s)?,
        NetworkSpec::DepthDiscriminator(s) => super::build_depth_discriminator(s)?,
    };
    let pick = |prefix: &str| -> Vec<NamedTensor> {
        let full = format!("{scope}{prefix}");
        arrays
            .iter()
            .filter_map(|a| {
                a.name.strip_prefix(&full).map(|n| NamedTensor {
                    name: n.to_string(),
                    value: a.value.clone(),
                })
            })
            .collect()
    };
    net.load_state(pick(PARAM_PREFIX), pick(BUFFER_PREFIX))?;
    Ok(net)
}

pub fn save_network(path: &Path, net: &Network) -> Result<()> {
    let arrays = network_arrays(net, "");
    let refs: Vec<&NamedTensor> = arrays.iter().collect();
    let meta = serde_json::json!({ "spec": net.spec() });
    write_container(path, "network", meta, &refs)
}

/// Loads a network file, or the generator of a training-state file.
pub fn load_network(path: &Path) -> Result<Network> {
    let (m, arrays) = read_container(path)?;
    let (spec_key, scope) = match m.kind.as_str() {
        "network" => ("spec", ""),
        "train_state" => ("generator_spec", "g/"),
        other => return Err(Error::CheckpointCorrupt(format!("unknown checkpoint kind '{other}'"))),
    };
    let spec: NetworkSpec = serde_json::from_value(m.meta[spec_key].clone())
        .map_err(|e| Error::CheckpointCorrupt(format!("spec: {e}")))?;
    network_from_arrays(&spec, &arrays, scope)
}
