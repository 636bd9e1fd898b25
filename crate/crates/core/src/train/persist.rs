//! Binary model container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "SQLBMODL" | u32 version
//! u32 len | config JSON
//! u32 len | vocabulary JSON
//! u32 count | count × (u32 len | name | u8 trainable | u32 rank | rank × u32 dim | f32 data)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::config::ModelConfig;
use super::model::Model;
use crate::autodiff::{Real, Tensor};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SQLBMODL";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Corrupt(format!("value {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) -> Result<()> {
    put_u32(out, b.len())?;
    out.extend_from_slice(b);
    Ok(())
}

/// Serializes a model; equal models give equal bytes.
pub fn encode_model<T: Real>(model: &Model<T>) -> Result<Vec<u8>> {
    let json = |e: serde_json::Error| Error::Corrupt(e.to_string());
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_bytes(&mut out, &serde_json::to_vec(model.config()).map_err(json)?)?;
    put_bytes(&mut out, &serde_json::to_vec(&model.vocab).map_err(json)?)?;
    put_u32(&mut out, model.params.len())?;
    for (_, p) in model.params.iter() {
        put_bytes(&mut out, p.name.as_bytes())?;
        out.push(u8::from(p.trainable));
        put_u32(&mut out, p.tensor.shape().len())?;
        for &d in p.tensor.shape() {
            put_u32(&mut out, d)?;
        }
        for &v in p.tensor.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Truncated(what));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("four bytes")))
    }

    fn bytes(&mut self, what: &'static str) -> Result<&'a [u8]> {
        let n = self.u32(what)? as usize;
        self.take(n, what)
    }
}

/// Parses a container and rebuilds the model it describes. Parameter names,
/// order, and shapes must match what the stored config assembles.
pub fn decode_model(bytes: &[u8]) -> Result<Model<f32>> {
    let mut r = Reader { buf: bytes };
    if r.take(MAGIC.len(), "header")? != MAGIC {
        return Err(Error::Corrupt("not a model file (bad magic)".into()));
    }
    let version = r.u32("header")?;
    if version != FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let config: ModelConfig = serde_json::from_slice(r.bytes("config")?)
        .map_err(|e| Error::Corrupt(format!("config: {e}")))?;
    let vocab: Vocabulary = serde_json::from_slice(r.bytes("vocabulary")?)
        .map_err(|e| Error::Corrupt(format!("vocabulary: {e}")))?;

    let count = r.u32("parameter table")? as usize;
    let mut stored = Vec::with_capacity(count);
    for _ in 0..count {
        let name = String::from_utf8(r.bytes("parameter name")?.to_vec())
            .map_err(|_| Error::Corrupt("parameter name is not UTF-8".into()))?;
        let trainable = match r.take(1, "parameter flags")?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::Corrupt(format!("`{name}`: bad trainable flag {b}"))),
        };
        let rank = r.u32("parameter shape")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("parameter shape").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4).map(|b| (n, b)))
            .ok_or_else(|| Error::Corrupt(format!("`{name}`: shape {shape:?} overflows")))?;
        let data = r
            .take(numel.1, "parameter data")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Corrupt(format!("`{name}`: {e}")))?;
        stored.push((name, trainable, tensor));
    }
    if !r.buf.is_empty() {
        return Err(Error::Corrupt(format!("{} trailing bytes", r.buf.len())));
    }

    let mut model = Model::<f32>::assemble(&config, &vocab, None)?;
    if stored.len() != model.params.len() {
        return Err(Error::ParamMismatch(format!(
            "file has {} parameters, configuration defines {}",
            stored.len(),
            model.params.len()
        )));
    }
    let ids: Vec<_> = model.params.ids().collect();
    for (id, (name, trainable, tensor)) in ids.into_iter().zip(stored) {
        let p = model.params.get_mut(id);
        if p.name != name {
            return Err(Error::ParamMismatch(format!(
                "expected `{}`, found `{name}`",
                p.name
            )));
        }
        if p.tensor.shape() != tensor.shape() {
            return Err(Error::ParamMismatch(format!(
                "`{name}` has shape {:?}, expected {:?}",
                tensor.shape(),
                p.tensor.shape()
            )));
        }
        p.tensor = tensor;
        p.trainable = trainable;
    }
    Ok(model)
}

/// Writes through a temporary sibling and renames, so a failed save never
/// leaves a partial file at `path`.
pub fn save_model<T: Real>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_model(model)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}
