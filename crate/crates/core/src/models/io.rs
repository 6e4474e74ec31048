//! Binary model persistence.
//!
//! Layout (all integers little-endian):
//! magic "ILAM" | u32 version = 1 | u16 arch-id length + UTF-8 arch id |
//! u32 num_classes | f32 width_multiplier | u32 record count P |
//! P records of { u16 name length, UTF-8 name, u8 rank, rank x u32 dims,
//! raw f32 values }.
//!
//! Records cover trainable parameters first, then buffers (running
//! statistics and the normalization constants), in canonical build order.

use std::collections::HashMap;
use std::path::Path;

use crate::scalar::Scalar;

use super::{build_model, ModelError, ModelHandle, ModelSpec, Normalization};
use super::ArchId;

pub const MODEL_MAGIC: &[u8; 4] = b"ILAM";
pub const MODEL_VERSION: u32 = 1;

fn fmt_err(offset: u64, detail: impl Into<String>) -> ModelError {
    ModelError::Format { offset, detail: detail.into() }
}

/// Serialize a frozen model. Values are stored as f32 regardless of the
/// in-memory scalar type.
pub fn save_model<S: Scalar>(model: &ModelHandle<S>, path: &Path) -> Result<(), ModelError> {
    if !model.frozen() {
        return Err(ModelError::NotFrozen("save_model requires a frozen model".into()));
    }
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    let arch = model.spec().arch.as_str().as_bytes();
    out.extend_from_slice(&(arch.len() as u16).to_le_bytes());
    out.extend_from_slice(arch);
    out.extend_from_slice(&(model.spec().num_classes as u32).to_le_bytes());
    out.extend_from_slice(&model.spec().width_multiplier.to_le_bytes());

    let records: Vec<(&str, &[usize], Vec<f32>)> = model
        .params()
        .iter()
        .map(|p| (p.name.as_str(), p.tensor.shape(), p.tensor.values().iter().map(|v| v.to_f32_stored()).collect()))
        .chain(model.buffers().iter().map(|b| {
            (b.name.as_str(), b.tensor.shape(), b.tensor.values().iter().map(|v| v.to_f32_stored()).collect())
        }))
        .collect();
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, shape, values) in records {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.data.len() {
            return Err(fmt_err(self.pos as u64, format!("truncated file while reading {what}")));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32, ModelError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8, ModelError> {
        Ok(self.take(1, what)?[0])
    }

    fn str(&mut self, len: usize, what: &str) -> Result<&'a str, ModelError> {
        let at = self.pos as u64;
        std::str::from_utf8(self.take(len, what)?)
            .map_err(|_| fmt_err(at, format!("invalid UTF-8 in {what}")))
    }
}

/// Deserialize a model; the result is frozen. Any structural defect is a
/// format error carrying the byte offset where parsing failed.
pub fn load_model<S: Scalar>(path: &Path) -> Result<ModelHandle<S>, ModelError> {
    let data = std::fs::read(path)?;
    let mut r = Reader { data: &data, pos: 0 };

    let magic = r.take(4, "magic")?;
    if magic != MODEL_MAGIC {
        return Err(fmt_err(0, format!("bad magic {magic:02x?}, expected {MODEL_MAGIC:02x?}")));
    }
    let version_at = r.pos as u64;
    let version = r.u32("version")?;
    if version != MODEL_VERSION {
        return Err(fmt_err(version_at, format!("unsupported version {version}")));
    }
    let arch_len = r.u16("arch id length")? as usize;
    let arch_at = r.pos as u64;
    let arch_str = r.str(arch_len, "arch id")?.to_string();
    let arch = ArchId::parse(&arch_str).map_err(|_| fmt_err(arch_at, format!("unknown arch '{arch_str}'")))?;
    let num_classes = r.u32("num_classes")? as usize;
    let width_multiplier = r.f32("width_multiplier")?;
    let record_count = r.u32("record count")? as usize;

    struct RawRecord {
        offset: u64,
        shape: Vec<usize>,
        values: Vec<f32>,
    }
    let mut records: HashMap<String, RawRecord> = HashMap::with_capacity(record_count);
    for _ in 0..record_count {
        let rec_at = r.pos as u64;
        let name_len = r.u16("record name length")? as usize;
        let name = r.str(name_len, "record name")?.to_string();
        let rank = r.u8("record rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("record dim")? as usize);
        }
        let count: usize = shape.iter().product();
        if count == 0 {
            return Err(fmt_err(rec_at, format!("record '{name}' has empty shape {shape:?}")));
        }
        let bytes = r.take(count * 4, "record values")?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if records.insert(name.clone(), RawRecord { offset: rec_at, shape, values }).is_some() {
            return Err(fmt_err(rec_at, format!("duplicate record '{name}'")));
        }
    }
    if r.pos != data.len() {
        return Err(fmt_err(r.pos as u64, format!("{} trailing bytes", data.len() - r.pos)));
    }

    let norm = {
        let mean = records
            .get("normalize.mean")
            .ok_or_else(|| fmt_err(data.len() as u64, "missing record 'normalize.mean'"))?;
        let std = records
            .get("normalize.std")
            .ok_or_else(|| fmt_err(data.len() as u64, "missing record 'normalize.std'"))?;
        if mean.values.len() != 3 || std.values.len() != 3 {
            return Err(fmt_err(mean.offset, "normalization records must have 3 channels"));
        }
        Normalization {
            mean: [mean.values[0], mean.values[1], mean.values[2]],
            std: [std.values[0], std.values[1], std.values[2]],
        }
    };

    let spec = ModelSpec { arch, num_classes, width_multiplier, normalization: norm };
    let mut model = build_model::<S>(&spec, 0)
        .map_err(|e| fmt_err(arch_at, format!("cannot instantiate '{arch_str}': {e}")))?;

    let mut consumed = 0usize;
    {
        let expect: Vec<(String, Vec<usize>)> = model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.tensor.shape().to_vec()))
            .chain(model.buffers().iter().map(|b| (b.name.clone(), b.tensor.shape().to_vec())))
            .collect();
        for (name, shape) in &expect {
            let rec = records
                .get(name)
                .ok_or_else(|| fmt_err(data.len() as u64, format!("missing record '{name}'")))?;
            if &rec.shape != shape {
                return Err(fmt_err(
                    rec.offset,
                    format!("record '{name}' has shape {:?}, expected {shape:?}", rec.shape),
                ));
            }
            consumed += 1;
        }
    }
    if consumed != records.len() {
        let expected: std::collections::HashSet<String> = model
            .params()
            .iter()
            .map(|p| p.name.clone())
            .chain(model.buffers().iter().map(|b| b.name.clone()))
            .collect();
        let stray = records.keys().find(|k| !expected.contains(*k)).cloned().unwrap_or_default();
        let off = records.get(&stray).map(|r| r.offset).unwrap_or(0);
        return Err(fmt_err(off, format!("unexpected record '{stray}'")));
    }

    let n_params = model.params().len();
    for i in 0..n_params {
        let name = model.params()[i].name.clone();
        let rec = &records[&name];
        let vals: Vec<S> = rec.values.iter().map(|&v| S::from_f32_stored(v)).collect();
        let shape = model.params()[i].tensor.shape().to_vec();
        model.params_mut().expect("unfrozen during load")[i].tensor =
            crate::engine::Tensor::new(shape, vals).expect("validated shape").with_grad(true);
    }
    let n_buffers = model.buffers().len();
    for i in 0..n_buffers {
        let name = model.buffers()[i].name.clone();
        let rec = &records[&name];
        let vals: Vec<S> = rec.values.iter().map(|&v| S::from_f32_stored(v)).collect();
        let shape = model.buffers()[i].tensor.shape().to_vec();
        model.buffers_mut().expect("unfrozen during load")[i].tensor =
            crate::engine::Tensor::new(shape, vals).expect("validated shape");
    }
    model.freeze();
    Ok(model)
}
