//! Binary embedding store.
//!
//! Layout (all integers and floats little-endian):
//! `"DIALEMB1"` | u32 dims | u32 count | count × (u16 id length, id bytes) |
//! count × dims × f32.

use std::collections::HashMap;

use super::EmbedError;

pub const STORE_MAGIC: &[u8; 8] = b"DIALEMB1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingStore {
    dims: usize,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    payload: Vec<f32>,
}

impl EmbeddingStore {
    pub fn empty(dims: usize) -> Self {
        Self {
            dims,
            ..Default::default()
        }
    }

    /// Builds a store from `(id, vector)` pairs, keeping their order.
    pub fn from_pairs<I, S>(dims: usize, pairs: I) -> Result<Self, EmbedError>
    where
        I: IntoIterator<Item = (S, Vec<f32>)>,
        S: Into<String>,
    {
        let mut store = Self::empty(dims);
        for (id, v) in pairs {
            store.insert(id.into(), &v)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, id: String, vector: &[f32]) -> Result<(), EmbedError> {
        if vector.len() != self.dims {
            return Err(EmbedError::DimsMismatch {
                expected: self.dims,
                found: vector.len(),
            });
        }
        if id.len() > u16::MAX as usize {
            return Err(EmbedError::CorruptStore(format!(
                "id of {} bytes exceeds the u16 length prefix",
                id.len()
            )));
        }
        if self.index.contains_key(&id) {
            return Err(EmbedError::DuplicateId(id));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.payload.extend_from_slice(vector);
        Ok(())
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Result<&[f32], EmbedError> {
        let slot = *self
            .index
            .get(id)
            .ok_or_else(|| EmbedError::NotFound(id.to_owned()))?;
        Ok(self.row(slot))
    }

    pub fn row(&self, slot: usize) -> &[f32] {
        &self.payload[slot * self.dims..(slot + 1) * self.dims]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), self.row(i)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let id_bytes: usize = self.ids.iter().map(|s| 2 + s.len()).sum();
        let mut out = Vec::with_capacity(16 + id_bytes + self.payload.len() * 4);
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&(self.dims as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for x in &self.payload {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmbedError> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != STORE_MAGIC {
            return Err(EmbedError::CorruptStore("bad magic".into()));
        }
        let dims = cur.u32()? as usize;
        let count = cur.u32()? as usize;
        let mut store = Self::empty(dims);
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = cur.u16()? as usize;
            let raw = cur.take(len)?;
            let id = std::str::from_utf8(raw)
                .map_err(|_| EmbedError::CorruptStore("id is not UTF-8".into()))?;
            ids.push(id.to_owned());
        }
        let expected = count
            .checked_mul(dims)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| EmbedError::CorruptStore("header overflows".into()))?;
        let rest = &bytes[cur.pos..];
        if rest.len() != expected {
            return Err(EmbedError::CorruptStore(format!(
                "payload is {} bytes, header implies {expected}",
                rest.len()
            )));
        }
        store.payload = rest
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        for (slot, id) in ids.into_iter().enumerate() {
            if store.index.insert(id.clone(), slot).is_some() {
                return Err(EmbedError::CorruptStore(format!("duplicate id {id:?}")));
            }
            store.ids.push(id);
        }
        Ok(store)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EmbedError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| EmbedError::CorruptStore("truncated header".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, EmbedError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, EmbedError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Serializes `vectors` in the given order.
pub fn store_write<S: AsRef<str>>(vectors: &[(S, Vec<f32>)], dims: usize) -> Result<Vec<u8>, EmbedError> {
    let store = EmbeddingStore::from_pairs(
        dims,
        vectors.iter().map(|(id, v)| (id.as_ref().to_owned(), v.clone())),
    )?;
    Ok(store.to_bytes())
}

pub fn store_read(bytes: &[u8]) -> Result<EmbeddingStore, EmbedError> {
    EmbeddingStore::from_bytes(bytes)
}
