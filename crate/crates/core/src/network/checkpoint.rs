//! Binary checkpoint format.
//!
//! ```text
//! "DPLY" | version: u32
//! repeated: name_len: u32 | name | tag: u8 | shape: 4 × u32 | payload
//! crc32 of every record byte: u32
//! ```
//!
//! All integers and floats are little-endian. Tag 0 is an f32 parameter,
//! tag 2 an f32 buffer, tag 1 raw bytes (shape `(len, 1, 1, 1)`). The network
//! config travels as the byte record `meta.config` in `key = value` form.

use std::path::Path;

use super::{Model, NetworkConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

const MAGIC: &[u8; 4] = b"DPLY";
const TAG_PARAM: u8 = 0;
const TAG_BYTES: u8 = 1;
const TAG_BUFFER: u8 = 2;
const META_CONFIG: &str = "meta.config";

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, tag: u8, dims: [usize; 4], payload: &[u8]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(tag);
    for d in dims {
        put_u32(out, d as u32);
    }
    out.extend_from_slice(payload);
}

fn f32_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn encode_checkpoint(cfg: &NetworkConfig, store: &ParamStore<f32>) -> Vec<u8> {
    let mut body = Vec::new();
    let meta = cfg.to_kv();
    put_record(
        &mut body,
        META_CONFIG,
        TAG_BYTES,
        [meta.len(), 1, 1, 1],
        meta.as_bytes(),
    );
    for (name, t) in store.params() {
        put_record(&mut body, name, TAG_PARAM, t.shape().dims(), &f32_bytes(t));
    }
    for (name, t) in store.buffers() {
        put_record(&mut body, name, TAG_BUFFER, t.shape().dims(), &f32_bytes(t));
    }
    let mut out = Vec::with_capacity(body.len() + 12);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    out.extend_from_slice(&body);
    put_u32(&mut out, crc32fast::hash(&body));
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(NetworkConfig, ParamStore<f32>)> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let body = &bytes[8..bytes.len() - 4];
    let tail = &bytes[bytes.len() - 4..];
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    if crc32fast::hash(body) != stored {
        return Err(Error::Format("checkpoint CRC mismatch".into()));
    }

    let mut r = Reader { buf: body, pos: 0 };
    let mut cfg = None;
    let mut store = ParamStore::new();
    while r.pos < body.len() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?
            .to_string();
        let tag = r.take(1)?[0];
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let shape = Shape::from(dims);
        match tag {
            TAG_BYTES => {
                let payload = r.take(shape.numel())?;
                if name == META_CONFIG {
                    let text =
                        std::str::from_utf8(payload).map_err(|_| Error::Format("config record is not UTF-8".into()))?;
                    cfg = Some(NetworkConfig::from_kv(text)?);
                }
            }
            TAG_PARAM | TAG_BUFFER => {
                let raw = r.take(shape.numel() * 4)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                let t = Tensor::from_vec(shape, data)?;
                if tag == TAG_PARAM {
                    store.insert_param(name, t)?;
                } else {
                    store.insert_buffer(name, t)?;
                }
            }
            other => return Err(Error::Format(format!("unknown record tag {other} for {name}"))),
        }
    }
    let cfg = cfg.ok_or_else(|| Error::Format(format!("checkpoint has no {META_CONFIG} record")))?;
    Model::new(cfg.clone())?.check_state(&store)?;
    Ok((cfg, store))
}

pub fn save_checkpoint(path: impl AsRef<Path>, cfg: &NetworkConfig, store: &ParamStore<f32>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(cfg, store)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(NetworkConfig, ParamStore<f32>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
