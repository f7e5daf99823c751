//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "C3DA"                      4-byte magic
//! u32 version
//! u32 len, [u8; len]          hyperparameter record (JSON)
//! u32 count, then per array:
//!     u16 len, name (UTF-8)
//!     u8  dtype               1 = f32, 2 = f64
//!     u8  ndim, u64 dims[ndim]
//!     data                    product(dims) values
//! u32 count, then per counter:
//!     u16 len, name, u64 value
//! ```
//!
//! Trainable tensors are written as f32 when every value is exactly
//! representable (always the case after single-precision training) and as f64
//! otherwise. Feature maps and advisor states are always f64.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::{Model, ModelConfig};
use crate::advisor::AdvisorState;
use crate::error::{Error, Result};
use crate::kernel_attention::RandomFeatureMap;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"C3DA";
pub const CHECKPOINT_VERSION: u32 = 1;

const F32: u8 = 1;
const F64: u8 = 2;

struct Array {
    dims: Vec<usize>,
    data: Vec<f64>,
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode(model)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn put_array(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f64], allow_f32: bool) {
    put_name(out, name);
    let f32_exact = allow_f32 && data.iter().all(|&x| (x as f32 as f64).to_bits() == x.to_bits());
    out.push(if f32_exact { F32 } else { F64 });
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in data {
        if f32_exact {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        } else {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

pub(crate) fn encode(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let record = serde_json::to_vec(&model.config)?;
    out.extend_from_slice(&(record.len() as u32).to_le_bytes());
    out.extend_from_slice(&record);

    let tensors = model.weights.tensors();
    let maps: Vec<(String, &RandomFeatureMap)> = model
        .kal_feature_map()
        .map(|m| ("features.kal".to_string(), m))
        .into_iter()
        .chain(model.feature_maps().iter().enumerate().map(|(i, m)| (format!("features.block.{i}"), m)))
        .collect();
    let count = tensors.len() + maps.len() + model.advisors().len();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (name, data) in &tensors {
        put_array(&mut out, name, &[data.len()], data, true);
    }
    for (name, m) in &maps {
        let p = m.projections();
        put_array(&mut out, name, &[p.nrows(), p.ncols()], p.as_slice().unwrap(), false);
    }
    for (i, a) in model.advisors().iter().enumerate() {
        let s = a.matrix().as_standard_layout();
        put_array(&mut out, &format!("advisor.{i}"), &[s.nrows(), s.ncols()], s.as_slice().unwrap(), false);
    }

    let counters: Vec<(String, u64)> = model
        .advisors()
        .iter()
        .enumerate()
        .map(|(i, a)| (format!("advisor.{i}.update_count"), a.update_count()))
        .chain(maps.iter().map(|(n, m)| (format!("{n}.seed"), m.seed())))
        .collect();
    out.extend_from_slice(&(counters.len() as u32).to_le_bytes());
    for (name, v) in counters {
        put_name(&mut out, &name);
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u16("name length")? as usize;
        let at = self.pos;
        let raw = self.take(len, "name")?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err_at(at, "name is not UTF-8"))
    }

    fn err_at(&self, offset: usize, msg: &str) -> Error {
        Error::Checkpoint {
            offset: offset as u64,
            msg: msg.to_string(),
        }
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(r.err_at(0, "bad magic"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = r.u32("record length")? as usize;
    let at = r.pos;
    let record = r.take(len, "hyperparameter record")?;
    let config: ModelConfig = serde_json::from_slice(record)
        .map_err(|e| r.err_at(at, &format!("bad hyperparameter record: {e}")))?;

    let mut arrays = HashMap::new();
    let count = r.u32("array count")?;
    for _ in 0..count {
        let name = r.name()?;
        let at = r.pos;
        let dtype = r.u8("dtype")?;
        let ndim = r.u8("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u64("dimension")? as usize);
        }
        let n: usize = dims.iter().product();
        let data = match dtype {
            F32 => r
                .take(n.checked_mul(4).ok_or_else(|| r.err_at(at, "array too large"))?, &name)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            F64 => r
                .take(n.checked_mul(8).ok_or_else(|| r.err_at(at, "array too large"))?, &name)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            other => return Err(r.err_at(at, &format!("unknown dtype {other}"))),
        };
        arrays.insert(name, Array { dims, data });
    }
    let mut counters = HashMap::new();
    let count = r.u32("counter count")?;
    for _ in 0..count {
        let name = r.name()?;
        counters.insert(name, r.u64("counter")?);
    }
    if r.pos != bytes.len() {
        return Err(r.err_at(r.pos, "trailing bytes"));
    }

    let end = r.pos;
    let missing = |name: &str| Error::Checkpoint {
        offset: end as u64,
        msg: format!("missing entry {name}"),
    };
    let mut model = Model::new(config)?;
    let (weights, maps, kal_map, advisors) = model.parts_mut();
    for (name, slot) in weights.tensors_mut() {
        let a = arrays.get(&name).ok_or_else(|| missing(&name))?;
        if a.data.len() != slot.len() {
            return Err(Error::Checkpoint {
                offset: end as u64,
                msg: format!("{name}: expected {} values, found {}", slot.len(), a.data.len()),
            });
        }
        slot.copy_from_slice(&a.data);
    }
    let load_map = |name: &str| -> Result<RandomFeatureMap> {
        let a = arrays.get(name).ok_or_else(|| missing(name))?;
        let seed = *counters.get(&format!("{name}.seed")).ok_or_else(|| missing(name))?;
        let m = to_matrix(a, name, end)?;
        RandomFeatureMap::from_projections(m, seed)
    };
    if kal_map.is_some() {
        *kal_map = Some(load_map("features.kal")?);
    }
    for (i, m) in maps.iter_mut().enumerate() {
        *m = load_map(&format!("features.block.{i}"))?;
    }
    for (i, adv) in advisors.iter_mut().enumerate() {
        let name = format!("advisor.{i}");
        let s = to_matrix(arrays.get(&name).ok_or_else(|| missing(&name))?, &name, end)?;
        let count_name = format!("{name}.update_count");
        let count = *counters.get(&count_name).ok_or_else(|| missing(&count_name))?;
        *adv = AdvisorState::from_parts(s, count, adv.alpha, adv.beta)?;
    }
    Ok(model)
}

fn to_matrix(a: &Array, name: &str, offset: usize) -> Result<Array2<f64>> {
    match a.dims.as_slice() {
        &[r, c] => Ok(Array2::from_shape_vec((r, c), a.data.clone()).expect("length checked by reader")),
        _ => Err(Error::Checkpoint {
            offset: offset as u64,
            msg: format!("{name}: expected a matrix"),
        }),
    }
}
