//! The TNSR binary tensor container and the checkpoint file built on it.
//!
//! Layout: bytes 0-3 magic `TNSR`; byte 4 version (1); byte 5 dtype code
//! (0 = f32 little-endian, 1 = u8); bytes 6-7 ndim as u16 LE; then ndim
//! u32 LE dims; then the raw row-major payload.
//!
//! A checkpoint file is a sequence of records, each
//! `[u32 LE name length][UTF-8 name][TNSR blob]`, written in sorted name
//! order so identical parameters produce identical bytes.

use std::fs;
use std::path::Path;

use gazedec_core::params::ParamSet;
use gazedec_core::Tensor;

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u8 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

/// Either payload kind the container can carry.
pub enum TnsrData {
    F32(Tensor),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

fn encode_header(out: &mut Vec<u8>, dtype: u8, shape: &[usize]) {
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype);
    out.extend_from_slice(&(shape.len() as u16).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.shape().len() + 4 * t.len());
    encode_header(&mut out, DTYPE_F32, t.shape());
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_u8(shape: &[usize], data: &[u8]) -> CliResult<Vec<u8>> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(CliError::data(format!(
            "u8 tensor: shape {shape:?} needs {n} bytes, got {}",
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(8 + 4 * shape.len() + data.len());
    encode_header(&mut out, DTYPE_U8, shape);
    out.extend_from_slice(data);
    Ok(out)
}

/// Decode one container, consuming exactly `bytes`; trailing bytes are an
/// error (use [`decode_prefix`] for streams).
pub fn decode(bytes: &[u8]) -> CliResult<TnsrData> {
    let (data, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(CliError::data(format!(
            "TNSR: {} trailing bytes",
            bytes.len() - used
        )));
    }
    Ok(data)
}

/// Decode a container at the start of `bytes`; returns it and the bytes
/// consumed.
pub fn decode_prefix(bytes: &[u8]) -> CliResult<(TnsrData, usize)> {
    if bytes.len() < 8 {
        return Err(CliError::data("TNSR: truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(CliError::data("TNSR: bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(CliError::data(format!("TNSR: unsupported version {}", bytes[4])));
    }
    let dtype = bytes[5];
    let ndim = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let dims_end = 8 + 4 * ndim;
    if bytes.len() < dims_end {
        return Err(CliError::data("TNSR: truncated dims"));
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let off = 8 + 4 * i;
        shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let count: usize = shape.iter().product();
    match dtype {
        DTYPE_F32 => {
            let end = dims_end + 4 * count;
            if bytes.len() < end {
                return Err(CliError::data("TNSR: truncated f32 payload"));
            }
            let mut data = Vec::with_capacity(count);
            for i in 0..count {
                let off = dims_end + 4 * i;
                data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
            }
            let t = Tensor::from_vec(&shape, data).map_err(CliError::from)?;
            Ok((TnsrData::F32(t), end))
        }
        DTYPE_U8 => {
            let end = dims_end + count;
            if bytes.len() < end {
                return Err(CliError::data("TNSR: truncated u8 payload"));
            }
            Ok((
                TnsrData::U8 {
                    shape,
                    data: bytes[dims_end..end].to_vec(),
                },
                end,
            ))
        }
        other => Err(CliError::data(format!("TNSR: unknown dtype {other}"))),
    }
}

pub fn decode_f32(bytes: &[u8]) -> CliResult<Tensor> {
    match decode(bytes)? {
        TnsrData::F32(t) => Ok(t),
        TnsrData::U8 { .. } => Err(CliError::data("TNSR: expected f32 payload, found u8")),
    }
}

pub fn write_tensor(path: &Path, t: &Tensor) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> CliResult<Tensor> {
    let bytes =
        fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    decode_f32(&bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub fn encode_checkpoint<'a>(tensors: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, tensor) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&encode_tensor(tensor));
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> CliResult<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    let mut off = 0usize;
    while off < bytes.len() {
        if bytes.len() - off < 4 {
            return Err(CliError::data("checkpoint: truncated record header"));
        }
        let name_len = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        if bytes.len() - off < name_len {
            return Err(CliError::data("checkpoint: truncated name"));
        }
        let name = std::str::from_utf8(&bytes[off..off + name_len])
            .map_err(|_| CliError::data("checkpoint: name is not UTF-8"))?
            .to_string();
        off += name_len;
        let (data, used) = decode_prefix(&bytes[off..])?;
        off += used;
        match data {
            TnsrData::F32(t) => out.push((name, t)),
            TnsrData::U8 { .. } => {
                return Err(CliError::data("checkpoint: u8 tensors not expected"))
            }
        }
    }
    Ok(out)
}

/// Write a parameter set as a checkpoint (sorted name order).
pub fn write_checkpoint(path: &Path, params: &ParamSet) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, encode_checkpoint(params.iter()))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> CliResult<Vec<(String, Tensor)>> {
    let bytes =
        fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}
