//! Model checkpoints: a binary container with a version tag, the
//! serialized config, and one record per state tensor (name, shape, raw
//! little-endian f32 data). Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{GitConfig, GitModel};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"GITREID\0";
const VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn write_bytes(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    write_u32(w, bytes.len() as u32)?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_bytes(r: &mut impl Read) -> Result<Vec<u8>> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Writes the model config and full state to `path`.
pub fn save_checkpoint(model: &GitModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_bytes(&mut w, model.config.to_kv().as_bytes())?;

    let state = model.named_state();
    write_u32(&mut w, state.len() as u32)?;
    for (name, tensor) in state {
        write_bytes(&mut w, name.as_bytes())?;
        write_u32(&mut w, tensor.ndim() as u32)?;
        for &d in tensor.shape() {
            write_u32(&mut w, d as u32)?;
        }
        let mut raw = Vec::with_capacity(tensor.numel() * 4);
        for v in tensor.data() {
            raw.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&raw)?;
    }
    w.flush()?;
    Ok(())
}

/// Reconstructs a model from a checkpoint. Version or shape mismatches are
/// explicit errors naming the offending tensor.
pub fn load_checkpoint(path: &Path) -> Result<GitModel> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {})",
            version, VERSION
        )));
    }
    let config_text = String::from_utf8(read_bytes(&mut r)?)
        .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
    let config = GitConfig::from_kv(&config_text)?;

    let mut model = GitModel::init(config, 0)?;
    let count = read_u32(&mut r)? as usize;

    let mut loaded: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name = String::from_utf8(read_bytes(&mut r)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        loaded.push((name, shape, data));
    }

    {
        let mut state = model.named_state_mut();
        if loaded.len() != state.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                loaded.len(),
                state.len()
            )));
        }
        for ((name, shape, data), (expect_name, slot)) in loaded.into_iter().zip(state.iter_mut())
        {
            if name != *expect_name {
                return Err(Error::Checkpoint(format!(
                    "unexpected tensor '{}' (expected '{}')",
                    name, expect_name
                )));
            }
            if shape != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}': shape {:?} does not match model shape {:?}",
                    name,
                    shape,
                    slot.shape()
                )));
            }
            let keep_grad = slot.requires_grad();
            let mut t = Tensor::from_vec(&shape, data)?;
            if keep_grad {
                t = t.requiring_grad();
            }
            **slot = t;
        }
    }
    Ok(model)
}
