//! `PNET` checkpoint files.
//!
//! | bytes | content                                        |
//! |-------|------------------------------------------------|
//! | 4     | magic `PNET`                                   |
//! | 4     | u32 LE format version (1)                      |
//! | 4     | u32 LE descriptor length L                     |
//! | L     | UTF-8 descriptor ([`ArchDescriptor::to_text`]) |
//! | 4·P   | f32 LE parameters in descriptor order          |

use std::fs;
use std::path::Path;

use super::{ArchDescriptor, ModelError, ModelParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PNET";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(params: &ModelParams) -> Vec<u8> {
    let text = params.descriptor.to_text();
    let mut out = Vec::with_capacity(12 + text.len() + 4 * params.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for t in &params.tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ModelParams, ModelError> {
    let need = |expected: usize| {
        if bytes.len() < expected {
            Err(ModelError::Truncated {
                expected,
                found: bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(4)?;
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(ModelError::BadMagic);
    }
    need(12)?;
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Version(version));
    }
    let text_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    need(12 + text_len)?;
    let text = std::str::from_utf8(&bytes[12..12 + text_len])
        .map_err(|_| ModelError::Descriptor("descriptor is not UTF-8".into()))?;
    let descriptor = ArchDescriptor::from_text(text)?;

    let shapes = descriptor.param_shapes();
    let total: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let body = 12 + text_len;
    need(body + 4 * total)?;
    if bytes.len() > body + 4 * total {
        return Err(ModelError::Length(format!(
            "{} bytes beyond the declared {} parameters",
            bytes.len() - body - 4 * total,
            total
        )));
    }
    let mut values = bytes[body..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let mut names = Vec::with_capacity(shapes.len());
    let mut tensors = Vec::with_capacity(shapes.len());
    for (name, shape) in shapes {
        let n = shape.iter().product();
        let data: Vec<f32> = values.by_ref().take(n).collect();
        tensors.push(Tensor::new(shape, data)?);
        names.push(name);
    }
    Ok(ModelParams {
        descriptor,
        names,
        tensors,
    })
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    fs::write(path, write_checkpoint(params)).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_checkpoint(&bytes)
}
