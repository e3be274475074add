//! Binary containers.
//!
//! Parameter container (`ATSN`), all integers little-endian:
//!
//! ```text
//! magic "ATSN" | version u32 | section
//! section := kind [u8; 4]
//!            meta    u32 byte length, UTF-8
//!            config  u32 count, u64 × count
//!            tensors u32 count, per tensor: rank u32, dims u64 × rank,
//!                    row-major f32 values
//!            children u32 count, section × count
//! ```
//!
//! Embedding cache (`ATSE`): magic, version u32, count u64, dim u32,
//! count × dim f32 values, then one label byte per row (255 = unlabeled).

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, ArrayViewD};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const PARAM_MAGIC: [u8; 4] = *b"ATSN";
pub const PARAM_VERSION: u32 = 1;
pub const EMBED_MAGIC: [u8; 4] = *b"ATSE";
pub const EMBED_VERSION: u32 = 1;
pub const UNLABELED: u8 = 255;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

impl TensorData {
    pub fn from_view<T: Scalar>(view: ArrayViewD<'_, T>) -> Self {
        TensorData {
            dims: view.shape().to_vec(),
            values: view.iter().map(|v| v.as_f32()).collect(),
        }
    }

    pub fn into_array2<T: Scalar>(self) -> Result<Array2<T>> {
        let [r, c] = self.dims[..] else {
            return Err(Error::Format(format!("expected rank-2 tensor, got dims {:?}", self.dims)));
        };
        Array2::from_shape_vec((r, c), self.values.into_iter().map(|v| T::of(v as f64)).collect())
            .map_err(|e| Error::Format(e.to_string()))
    }

    pub fn into_array1<T: Scalar>(self) -> Result<Array1<T>> {
        if self.dims.len() != 1 {
            return Err(Error::Format(format!("expected rank-1 tensor, got dims {:?}", self.dims)));
        }
        Ok(self.values.into_iter().map(|v| T::of(v as f64)).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub kind: [u8; 4],
    pub meta: String,
    pub config: Vec<u64>,
    pub tensors: Vec<TensorData>,
    pub children: Vec<Section>,
}

impl Section {
    pub fn new(kind: [u8; 4]) -> Self {
        Section {
            kind,
            meta: String::new(),
            config: Vec::new(),
            tensors: Vec::new(),
            children: Vec::new(),
        }
    }

    pub fn kind_str(&self) -> String {
        String::from_utf8_lossy(&self.kind).into_owned()
    }

    pub fn expect_kind(&self, kind: [u8; 4]) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!(
                "expected section `{}`, found `{}`",
                String::from_utf8_lossy(&kind),
                self.kind_str()
            )));
        }
        Ok(())
    }

    pub fn config_at(&self, i: usize) -> Result<u64> {
        self.config
            .get(i)
            .copied()
            .ok_or_else(|| Error::Format(format!("section `{}` config too short", self.kind_str())))
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.kind);
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        for v in &self.config {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.children.len() as u32).to_le_bytes());
        for c in &self.children {
            c.write(out);
        }
    }

    fn read(r: &mut Reader<'_>) -> Result<Self> {
        let kind: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| Error::Format("section meta is not UTF-8".into()))?;
        let n_config = r.u32()? as usize;
        let config = (0..n_config).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let n_tensors = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n_tensors.min(1024));
        for _ in 0..n_tensors {
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("tensor rank {rank} unsupported")));
            }
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
            let bytes = r.take(count.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let values = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(TensorData { dims, values });
        }
        let n_children = r.u32()? as usize;
        let children = (0..n_children).map(|_| Section::read(r)).collect::<Result<Vec<_>>>()?;
        Ok(Section {
            kind,
            meta,
            config,
            tensors,
            children,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&PARAM_MAGIC);
        out.extend_from_slice(&PARAM_VERSION.to_le_bytes());
        self.write(&mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(4).map_err(|_| Error::Format("file too short for a header".into()))?;
        let version = r.u32().ok();
        if magic != PARAM_MAGIC || version != Some(PARAM_VERSION) {
            return Err(Error::Format(format!(
                "found magic {:?} version {}; expected \"ATSN\" version {PARAM_VERSION}",
                String::from_utf8_lossy(magic),
                version.map_or("<missing>".to_string(), |v| v.to_string()),
            )));
        }
        let section = Section::read(&mut r)?;
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after parameter section".into()));
        }
        Ok(section)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Materialised tweet embeddings with optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    pub values: Array2<f32>,
    /// 0/1, or [`UNLABELED`].
    pub labels: Vec<u8>,
}

impl EmbeddingCache {
    pub fn new(values: Array2<f32>, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != values.nrows() {
            return Err(Error::Dimension {
                expected: values.nrows(),
                got: labels.len(),
            });
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1 && l != UNLABELED) {
            return Err(Error::invalid(format!("label byte {bad} is not 0, 1 or 255")));
        }
        Ok(EmbeddingCache { values, labels })
    }

    pub fn count(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        self.values.view()
    }

    pub fn select(&self, rows: &[usize]) -> EmbeddingCache {
        EmbeddingCache {
            values: self.values.select(ndarray::Axis(0), rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.values.len() * 4 + self.labels.len());
        out.extend_from_slice(&EMBED_MAGIC);
        out.extend_from_slice(&EMBED_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.count() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for v in self.values.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.labels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(4).map_err(|_| Error::Format("file too short for a header".into()))?;
        let version = r.u32().ok();
        if magic != EMBED_MAGIC || version != Some(EMBED_VERSION) {
            return Err(Error::Format(format!(
                "found magic {:?} version {}; expected \"ATSE\" version {EMBED_VERSION}",
                String::from_utf8_lossy(magic),
                version.map_or("<missing>".to_string(), |v| v.to_string()),
            )));
        }
        let count = r.u64()? as usize;
        let dim = r.u32()? as usize;
        let n = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("embedding cache size overflows".into()))?;
        let values: Vec<f32> = r
            .take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let labels = r.take(count)?.to_vec();
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after embedding cache".into()));
        }
        let values = Array2::from_shape_vec((count, dim), values).map_err(|e| Error::Format(e.to_string()))?;
        Self::new(values, labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bad_magic_reports_what_was_found() {
        let err = Section::from_bytes(b"NOPE\x01\0\0\0").unwrap_err();
        assert!(err.to_string().contains("NOPE"), "{err}");
        let mut ok = Section::new(*b"TEST").to_bytes();
        ok[4] = 9;
        assert!(Section::from_bytes(&ok).unwrap_err().to_string().contains("version 9"));
    }

    #[test]
    fn truncated_section_errors() {
        let mut s = Section::new(*b"TEST");
        s.tensors.push(TensorData {
            dims: vec![2, 2],
            values: vec![1.0, 2.0, 3.0, 4.0],
        });
        let bytes = s.to_bytes();
        assert!(Section::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert_eq!(Section::from_bytes(&bytes).unwrap(), s);
    }

    #[test]
    fn embedding_header_layout() {
        let cache = EmbeddingCache::new(Array2::from_elem((2, 3), 0.5), vec![1, UNLABELED]).unwrap();
        let bytes = cache.to_bytes();
        assert_eq!(&bytes[..4], b"ATSE");
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 20 + 2 * 3 * 4 + 2);
        assert_eq!(&bytes[bytes.len() - 2..], &[1, 255]);
        assert!(EmbeddingCache::new(Array2::zeros((1, 1)), vec![7]).is_err());
    }

    proptest! {
        #[test]
        fn embedding_cache_round_trip_is_bit_exact(
            bits in proptest::collection::vec(any::<u32>(), 0..60),
            dim in 1usize..6,
        ) {
            let rows = bits.len() / dim;
            let values: Vec<f32> = bits[..rows * dim].iter().map(|&b| {
                let v = f32::from_bits(b);
                if v.is_finite() { v } else { 0.0 }
            }).collect();
            let labels: Vec<u8> = (0..rows).map(|i| [0, 1, UNLABELED][i % 3]).collect();
            let cache = EmbeddingCache::new(Array2::from_shape_vec((rows, dim), values).unwrap(), labels).unwrap();
            let back = EmbeddingCache::from_bytes(&cache.to_bytes()).unwrap();
            prop_assert_eq!(back.labels, cache.labels.clone());
            for (a, b) in back.values.iter().zip(cache.values.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
