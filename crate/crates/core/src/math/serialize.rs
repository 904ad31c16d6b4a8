//! Versioned binary container for named tensors plus a JSON header.
//!
//! Layout (little-endian):
//!   magic `LWMB`, u32 version, u32 header length, header bytes (JSON),
//!   u32 tensor count, then per tensor: u16 name length, name bytes,
//!   u8 ndim, u64 dims..., f64 payload. A SHA-256 of everything above is
//!   appended and verified on load. Files are written to a temp path and
//!   renamed so readers never observe partial writes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::IxDyn;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::Arr;

const MAGIC: &[u8; 4] = b"LWMB";
const VERSION: u32 = 1;

pub fn write_container(
    path: &Path,
    header_json: &serde_json::Value,
    tensors: &[(String, &Arr)],
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let header = serde_json::to_vec(header_json).expect("serializable header");
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, arr) in tensors {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(arr.ndim() as u8);
        for d in arr.shape() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for x in arr.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest: [u8; 32] = Sha256::digest(&buf).into();

    let tmp = path.with_extension("tmp");
    {
        let mut f = BufWriter::new(File::create(&tmp).map_err(|e| Error::io(&tmp, e))?);
        f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&digest).map_err(|e| Error::io(&tmp, e))?;
        f.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<(serde_json::Value, Vec<(String, Arr)>)> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
        .read_to_end(&mut raw)
        .map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: &str| Error::Corrupt { path: path.to_path_buf(), reason: reason.into() };
    if raw.len() < 44 || &raw[0..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let body_len = raw.len() - 32;
    let digest: [u8; 32] = Sha256::digest(&raw[..body_len]).into();
    if digest != raw[body_len..] {
        return Err(corrupt("checksum mismatch"));
    }
    let mut pos = 4;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > body_len {
            return Err(Error::Corrupt { path: path.to_path_buf(), reason: "truncated".into() });
        }
        let s = &raw[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let header: serde_json::Value =
        serde_json::from_slice(take(&mut pos, hlen)?).map_err(|_| corrupt("bad header json"))?;
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, nlen)?.to_vec())
            .map_err(|_| corrupt("bad tensor name"))?;
        let ndim = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = take(&mut pos, n * 8)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Arr::from_shape_vec(IxDyn(&shape), data).unwrap()));
    }
    Ok((header, tensors))
}
