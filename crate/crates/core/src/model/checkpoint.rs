//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "CDCKPT\0\0"
//! version    u32      currently 1
//! config     u32 length + UTF-8 JSON of the model config
//! count      u32      number of arrays
//! per array, in name order:
//!   name     u32 length + UTF-8 bytes (e.g. "backbone.s0.down.w")
//!   rank     u32
//!   dims     rank x u64
//!   data     prod(dims) x f64
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use super::{Model, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"CDCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_bytes(buf: &mut Vec<u8>, b: &[u8]) {
    put_u32(buf, b.len());
    buf.extend_from_slice(b);
}

pub fn encode(model: &Model) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(model.config()).expect("config serializes");
    put_bytes(&mut buf, &cfg);
    put_u32(&mut buf, model.params().len());
    for (name, t) in model.params().iter() {
        put_bytes(&mut buf, name.as_bytes());
        put_u32(&mut buf, t.shape().len());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> std::io::Result<[u8; N]> {
        let mut b = [0u8; N];
        self.cur.read_exact(&mut b)?;
        Ok(b)
    }

    fn u32(&mut self) -> std::io::Result<usize> {
        Ok(u32::from_le_bytes(self.take()?) as usize)
    }

    fn bytes(&mut self) -> std::io::Result<Vec<u8>> {
        let n = self.u32()?;
        let remaining = self.cur.get_ref().len() as u64 - self.cur.position();
        if n as u64 > remaining {
            return Err(std::io::ErrorKind::UnexpectedEof.into());
        }
        let mut b = vec![0u8; n];
        self.cur.read_exact(&mut b)?;
        Ok(b)
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Model> {
    let bad = |m: String| Error::format(path, m);
    let truncated = |_| bad("truncated checkpoint".into());
    let mut r = Reader { cur: Cursor::new(bytes) };
    if r.take::<8>().map_err(truncated)? != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32().map_err(truncated)?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let cfg_bytes = r.bytes().map_err(truncated)?;
    let config: ModelConfig =
        serde_json::from_slice(&cfg_bytes).map_err(|e| bad(format!("config: {e}")))?;
    let count = r.u32().map_err(truncated)?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = String::from_utf8(r.bytes().map_err(truncated)?).map_err(|_| bad("non-UTF-8 name".into()))?;
        let rank = r.u32().map_err(truncated)?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(r.take().map_err(truncated)?) as usize);
        }
        let n: usize = shape.iter().product();
        let remaining = (bytes.len() as u64 - r.cur.position()) / 8;
        if n as u64 > remaining {
            return Err(bad(format!("array `{name}` is truncated")));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(r.take().map_err(truncated)?));
        }
        params.insert(name, Tensor::from_vec(&shape, data));
    }
    if r.cur.position() != bytes.len() as u64 {
        return Err(bad("trailing bytes after the last array".into()));
    }
    Model::from_parts(config, params).map_err(|e| bad(e.to_string()))
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
