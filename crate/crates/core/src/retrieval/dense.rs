use super::{io_err, RankedList, RetrievalError};
use crate::corpus::ItemRecord;
use crate::encoder::EncoderModel;
use rayon::prelude::*;
use std::collections::HashSet;
use std::path::Path;

pub const INDEX_MAGIC: &[u8; 8] = b"NDRIDX01";

/// Item embeddings for exact nearest-neighbor search. Vectors are stored at
/// `f32` precision so an index read from disk equals the one that was built.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    pub item_ids: Vec<String>,
    /// `n x dim`, row-major.
    pub vectors: Vec<f64>,
    pub dim: usize,
    pub model_fingerprint: u64,
}

impl DenseIndex {
    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }
}

/// Embeds `name + " " + snippet` for every item.
pub fn build_index(model: &EncoderModel, items: &[ItemRecord]) -> Result<DenseIndex, RetrievalError> {
    if items.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    let rows: Vec<Vec<f64>> = items.par_iter().map(|it| model.embed_text(&it.text()).0).collect();
    Ok(DenseIndex {
        item_ids: items.iter().map(|it| it.item_id.clone()).collect(),
        vectors: rows.into_iter().flatten().map(|v| f64::from(v as f32)).collect(),
        dim: model.dim(),
        model_fingerprint: model.fingerprint(),
    })
}

/// An index paired with the encoder it was built with.
pub struct DenseRetriever<'a> {
    index: &'a DenseIndex,
    model: &'a EncoderModel,
}

impl<'a> DenseRetriever<'a> {
    /// Fails unless `model` is the encoder the index was built with.
    pub fn new(index: &'a DenseIndex, model: &'a EncoderModel) -> Result<Self, RetrievalError> {
        let fp = model.fingerprint();
        if fp != index.model_fingerprint {
            return Err(RetrievalError::FingerprintMismatch {
                index: index.model_fingerprint,
                model: fp,
            });
        }
        Ok(Self { index, model })
    }

    pub fn model(&self) -> &EncoderModel {
        self.model
    }

    pub fn index(&self) -> &DenseIndex {
        self.index
    }

    /// `(item_id, distance)` for the `k` nearest items, ties by item id.
    /// With `allowed`, only those items are considered.
    pub fn nearest(&self, query: &str, k: usize, allowed: Option<&HashSet<&str>>) -> Vec<(String, f64)> {
        let q = self.model.embed_text(query).0;
        let mut scored: Vec<(usize, f64)> = (0..self.index.len())
            .filter(|&i| allowed.is_none_or(|a| a.contains(self.index.item_ids[i].as_str())))
            .map(|i| (i, crate::encoder::l2(&q, self.index.row(i))))
            .collect();
        scored.sort_by(|a, b| {
            a.1.total_cmp(&b.1)
                .then_with(|| self.index.item_ids[a.0].cmp(&self.index.item_ids[b.0]))
        });
        scored.truncate(k);
        scored
            .into_iter()
            .map(|(i, d)| (self.index.item_ids[i].clone(), d))
            .collect()
    }

    pub fn topk(&self, query_id: &str, query: &str, k: usize, allowed: Option<&HashSet<&str>>) -> RankedList {
        RankedList::from_ordered(query_id, "bienc", self.nearest(query, k, allowed))
    }
}

/// Exact brute-force top-`k` by ascending L2 distance.
pub fn retrieve_topk(
    index: &DenseIndex,
    model: &EncoderModel,
    query_id: &str,
    query: &str,
    k: usize,
) -> Result<RankedList, RetrievalError> {
    Ok(DenseRetriever::new(index, model)?.topk(query_id, query, k, None))
}

pub fn write_index(path: &Path, index: &DenseIndex) -> Result<(), RetrievalError> {
    let mut buf = Vec::with_capacity(32 + index.vectors.len() * 4);
    buf.extend_from_slice(INDEX_MAGIC);
    buf.extend_from_slice(&(index.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(index.dim as u64).to_le_bytes());
    buf.extend_from_slice(&index.model_fingerprint.to_le_bytes());
    for &v in &index.vectors {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for id in &index.item_ids {
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
    }
    std::fs::write(path, buf).map_err(io_err(path))
}

pub fn read_index(path: &Path) -> Result<DenseIndex, RetrievalError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let bad = |m: &str| RetrievalError::BadIndexFile(format!("{}: {m}", path.display()));
    if bytes.len() < 32 || &bytes[..8] != INDEX_MAGIC {
        return Err(bad("missing NDRIDX01 header"));
    }
    let u = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let (n, dim, fp) = (u(8) as usize, u(16) as usize, u(24));
    let mut off = 32;
    let vend = off + n * dim * 4;
    if bytes.len() < vend {
        return Err(bad("truncated vectors"));
    }
    let vectors = bytes[off..vend]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    off = vend;
    let mut item_ids = Vec::with_capacity(n);
    for _ in 0..n {
        if bytes.len() < off + 4 {
            return Err(bad("truncated item table"));
        }
        let len = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        let s = bytes.get(off..off + len).ok_or_else(|| bad("truncated item id"))?;
        item_ids.push(String::from_utf8(s.to_vec()).map_err(|_| bad("item id is not UTF-8"))?);
        off += len;
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(DenseIndex {
        item_ids,
        vectors,
        dim,
        model_fingerprint: fp,
    })
}
