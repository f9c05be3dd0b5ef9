//! Binary weight files. Layout, all little-endian after the magic:
//!
//! ```text
//! magic          8 bytes  "IVMETRC1"
//! name length    u32      preset name, utf-8
//! name bytes     ...
//! input shape    3 x u32  (H, W, C)
//! embedding dim  u32
//! seed           u64
//! per state tensor, in trunk order:
//!   rank         u32
//!   extents      rank x u32
//!   data         numel x f32
//! ```
//!
//! The payload is exactly 4 bytes per trunk parameter, tracked batch-norm
//! statistics included; the classifier head is training-only state and is
//! not serialized. Loading rebuilds the preset from the header and then
//! overwrites every tensor, so a truncated or oversized file yields an error
//! and no model.

use crate::error::{Error, Result};
use crate::models::{ModelSpec, ModelState, PresetName};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const WEIGHTS_MAGIC: &[u8; 8] = b"IVMETRC1";

pub fn save_weights(model: &ModelState<f32>, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(WEIGHTS_MAGIC)?;
    let name = model.spec.name.as_bytes();
    out.write_all(&(name.len() as u32).to_le_bytes())?;
    out.write_all(name)?;
    let (h, w, c) = model.spec.input_shape;
    for dim in [h, w, c, model.spec.embedding_dim] {
        out.write_all(&(dim as u32).to_le_bytes())?;
    }
    out.write_all(&model.seed.to_le_bytes())?;
    for tensor in model.state_tensors() {
        out.write_all(&(tensor.rank() as u32).to_le_bytes())?;
        for &ext in tensor.shape() {
            out.write_all(&(ext as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|_| Error::Truncated(format!("weight file ended inside {}", what)))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.exact(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(f32::from_le_bytes(b))
    }
}

pub fn load_weights(path: &Path) -> Result<ModelState<f32>> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
    };
    let mut magic = [0u8; 8];
    r.exact(&mut magic, "magic")?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::Format(format!(
            "bad weight file magic {:02x?}",
            magic
        )));
    }
    let name_len = r.u32("name length")? as usize;
    if name_len > 256 {
        return Err(Error::Format(format!(
            "implausible preset name length {}",
            name_len
        )));
    }
    let mut name_bytes = vec![0u8; name_len];
    r.exact(&mut name_bytes, "preset name")?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| Error::Format("preset name is not utf-8".into()))?;
    let preset = PresetName::parse(&name)
        .map_err(|_| Error::Format(format!("weight file names unknown preset '{}'", name)))?;

    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let c = r.u32("channels")? as usize;
    let embedding_dim = r.u32("embedding dim")? as usize;
    let seed = r.u64("seed")?;

    let spec = ModelSpec::preset_with_embedding(preset, (h, w, c), embedding_dim);
    let mut model = ModelState::<f32>::build(spec, seed)?;
    for tensor in model.state_tensors_mut() {
        let rank = r.u32("tensor rank")? as usize;
        if rank != tensor.rank() {
            return Err(Error::Format(format!(
                "tensor rank {} does not match expected {:?}",
                rank,
                tensor.shape()
            )));
        }
        for &expected in tensor.shape() {
            let ext = r.u32("tensor extent")? as usize;
            if ext != expected {
                return Err(Error::Format(format!(
                    "tensor extent {} does not match expected {:?}",
                    ext,
                    tensor.shape()
                )));
            }
        }
        for v in tensor.data_mut() {
            *v = r.f32("tensor data")?;
        }
    }
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing)? != 0 {
        return Err(Error::Format(
            "weight file has trailing bytes after the last tensor".into(),
        ));
    }
    Ok(model)
}
