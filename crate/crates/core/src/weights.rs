//! `EPW1` weight files.
//!
//! Layout, all little-endian: magic `EPW1`, version `u32`, record count
//! `u32`, then per record: name length `u16`, UTF-8 name, dtype `u8`
//! (0 = f32, 1 = f64), rank `u8`, dims as `u32`, row-major values.
//! Trailing unit dims are dropped on write and restored on read.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, ParamStore, Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"EPW1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LoadMode {
    /// File and model must hold exactly the same names.
    Strict,
    /// Load whatever matches; names starting with `from` are renamed to
    /// start with `to` first.
    Transfer { remap: Option<(String, String)> },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    pub skipped: Vec<String>,
}

fn stored_dims(s: Shape) -> Vec<u32> {
    let mut dims: Vec<u32> = s.dims().iter().map(|&d| d as u32).collect();
    while dims.len() > 1 && *dims.last().unwrap() == 1 {
        dims.pop();
    }
    dims
}

pub fn encode<'a, T: Element>(
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Result<Vec<u8>> {
    let items: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(items.len() as u32).to_le_bytes());
    for (name, t) in items {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| Error::WeightFormat(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(bytes);
        out.push(T::DTYPE);
        let dims = stored_dims(t.shape());
        out.push(dims.len() as u8);
        for d in dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.reserve(t.len() * T::BYTES);
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::WeightFormat(format!("truncated at byte {} (wanted {n} more)", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn read_values<T: Element, S: Element>(raw: &[u8]) -> Vec<T> {
    raw.chunks_exact(S::BYTES)
        .map(|c| T::of(S::read_le(c).f64()))
        .collect()
}

pub fn decode<T: Element>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::WeightFormat("bad magic (expected EPW1)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::WeightFormat(format!(
            "unsupported version {version}"
        )));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::WeightFormat("record name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        let rank = r.u8()? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::WeightFormat(format!("{name}: rank {rank}")));
        }
        let mut dims = [1usize; 4];
        for d in dims.iter_mut().take(rank) {
            *d = r.u32()? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let n = shape.numel();
        let data = match dtype {
            0 => read_values::<T, f32>(r.take(n * 4)?),
            1 => read_values::<T, f64>(r.take(n * 8)?),
            t => {
                return Err(Error::WeightFormat(format!(
                    "{name}: unknown dtype tag {t}"
                )))
            }
        };
        let t = Tensor::from_vec(shape, data)
            .map_err(|e| Error::WeightFormat(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::WeightFormat(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn save_tensors<'a, T: Element>(
    path: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Result<()> {
    fs::write(path, encode(tensors)?)?;
    Ok(())
}

pub fn read_tensors<T: Element>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    decode(&fs::read(path)?)
}

/// Write every parameter, including running statistics.
pub fn save_weights<T: Element>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    save_tensors(path, store.iter().map(|p| (p.name.as_str(), &p.value)))
}

pub fn load_weights<T: Element>(
    store: &mut ParamStore<T>,
    path: &Path,
    mode: &LoadMode,
) -> Result<LoadReport> {
    let records = read_tensors::<T>(path)?;
    apply_records(store, records, mode)
}

pub fn apply_records<T: Element>(
    store: &mut ParamStore<T>,
    records: Vec<(String, Tensor<T>)>,
    mode: &LoadMode,
) -> Result<LoadReport> {
    if *mode == LoadMode::Strict {
        let have: BTreeSet<&str> = store.names().collect();
        let file: BTreeSet<&str> = records.iter().map(|(n, _)| n.as_str()).collect();
        let missing: Vec<String> = have.difference(&file).map(|s| s.to_string()).collect();
        let unexpected: Vec<String> = file.difference(&have).map(|s| s.to_string()).collect();
        if !missing.is_empty() || !unexpected.is_empty() {
            return Err(Error::WeightNames {
                missing,
                unexpected,
            });
        }
    }
    let mut report = LoadReport::default();
    for (name, t) in records {
        let target = match mode {
            LoadMode::Transfer {
                remap: Some((from, to)),
            } if name.starts_with(from.as_str()) => format!("{to}{}", &name[from.len()..]),
            _ => name.clone(),
        };
        match store.get_mut(&target) {
            Some(p) if p.value.shape() == t.shape() => {
                let grad = p.value.requires_grad;
                p.value = t.with_requires_grad(grad);
                report.loaded.push(target);
            }
            Some(p) if *mode == LoadMode::Strict => {
                return Err(Error::WeightFormat(format!(
                    "{name}: file shape {} but model expects {}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            _ => report.skipped.push(name),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vector_rank_is_one() {
        assert_eq!(stored_dims(Shape::vector(30)), vec![30]);
        assert_eq!(stored_dims(Shape::new(16, 40, 1, 1)), vec![16, 40]);
        assert_eq!(stored_dims(Shape::new(1, 1, 1, 1)), vec![1]);
    }

    #[test]
    fn bad_magic_and_truncation() {
        assert!(matches!(
            decode::<f32>(b"EPW2\x01\0\0\0\0\0\0\0"),
            Err(Error::WeightFormat(_))
        ));
        let t = Tensor::<f32>::full(Shape::vector(3), 1.5);
        let bytes = encode([("a", &t)]).unwrap();
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let back = decode::<f64>(&bytes).unwrap();
        assert_eq!(back[0].1.data(), &[1.5, 1.5, 1.5]);
    }
}
