//! Checkpoint archives: a JSON header plus raw little-endian f64 blobs.
//!
//! Layout: 8-byte magic, u32 header length, header JSON, then for every
//! parameter in visit order its value, first moment, and second moment.
//! Values are written bit-exactly, so save -> load -> generate reproduces
//! the pre-save stream byte for byte.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Parameterized;

pub const MAGIC: &[u8; 8] = b"BPACKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Model family: "bulk", "transfer", or "classifier".
    pub kind: String,
    /// Hash of the run configuration that produced this checkpoint.
    pub config_hash: String,
    /// Kind-specific training state (stage, step, optimizer, rng, ...).
    pub state: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Serialize a model's parameters and training state.
pub fn save(
    path: &Path,
    kind: &str,
    config_hash: &str,
    state: &serde_json::Value,
    model: &mut dyn Parameterized,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    model.visit_params("", &mut |name, p| {
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
        });
        for arr in [&p.value, &p.m, &p.v] {
            for &v in arr.iter() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
    });
    let header = CheckpointHeader {
        kind: kind.to_string(),
        config_hash: config_hash.to_string(),
        state: state.clone(),
        params: entries,
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| Error::Serde(e.to_string()))?;

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    w.write_all(MAGIC).map_err(|e| Error::io(path, e))?;
    w.write_all(&(header_json.len() as u32).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    w.write_all(&header_json).map_err(|e| Error::io(path, e))?;
    w.write_all(&blob).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// A loaded archive, not yet bound to a model.
#[derive(Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    blob: Vec<u8>,
    path: PathBuf,
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut file = std::fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingInput(format!("checkpoint not found: {}", path.display()))
        } else {
            Error::io(path, e)
        }
    })?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| bad(path, "truncated before magic"))?;
    if &magic != MAGIC {
        return Err(bad(path, "bad magic (not a checkpoint archive)"));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)
        .map_err(|_| bad(path, "truncated header length"))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json)
        .map_err(|_| bad(path, "truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)
        .map_err(|e| bad(path, format!("header parse: {e}")))?;
    let mut blob = Vec::new();
    file.read_to_end(&mut blob).map_err(|e| Error::io(path, e))?;

    let expected: usize = header
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>() * 3 * 8)
        .sum();
    if blob.len() != expected {
        return Err(bad(
            path,
            format!("blob is {} bytes, header implies {expected}", blob.len()),
        ));
    }
    Ok(Checkpoint {
        header,
        blob,
        path: path.to_path_buf(),
    })
}

impl Checkpoint {
    pub fn state<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.header.state.clone())
            .map_err(|e| bad(&self.path, format!("state parse: {e}")))
    }

    /// Copy parameters (and moments) into `model`. The model's visit order
    /// must match the archive exactly: same names, same shapes.
    pub fn restore(&self, model: &mut dyn Parameterized) -> Result<()> {
        let mut idx = 0usize;
        let mut offset = 0usize;
        let mut failure: Option<Error> = None;
        model.visit_params("", &mut |name, p| {
            if failure.is_some() {
                return;
            }
            let Some(entry) = self.header.params.get(idx) else {
                failure = Some(bad(&self.path, format!("model has extra parameter {name}")));
                return;
            };
            if entry.name != name || entry.shape != p.value.shape() {
                failure = Some(bad(
                    &self.path,
                    format!(
                        "parameter mismatch at #{idx}: archive has {} {:?}, model wants {} {:?}",
                        entry.name,
                        entry.shape,
                        name,
                        p.value.shape()
                    ),
                ));
                return;
            }
            let n = p.numel();
            for arr_idx in 0..3 {
                let dst = match arr_idx {
                    0 => &mut p.value,
                    1 => &mut p.m,
                    _ => &mut p.v,
                };
                for (i, slot) in dst.iter_mut().enumerate() {
                    let at = offset + (arr_idx * n + i) * 8;
                    *slot = f64::from_le_bytes(self.blob[at..at + 8].try_into().unwrap());
                }
            }
            offset += n * 3 * 8;
            idx += 1;
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if idx != self.header.params.len() {
            return Err(bad(
                &self.path,
                format!(
                    "archive has {} parameters, model consumed {idx}",
                    self.header.params.len()
                ),
            ));
        }
        Ok(())
    }
}
