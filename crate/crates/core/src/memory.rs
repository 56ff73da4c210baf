//! Long-term memory repository.
//!
//! Each entry keeps a prompt embedding, one compressed cache per model
//! layer, and the latent clip produced for that prompt. Retrieval ranks
//! entries by cosine similarity of embeddings; ties go to the older entry.
//! Values are rounded to `f32` on append, the precision they are stored at
//! on disk, so a repository reloaded from a file behaves exactly like the
//! in-memory one.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{dim_err, Error, Result};
use crate::narrative::PromptEmbedding;
use crate::numerics::io::{self, ByteReader};
use crate::numerics::{cosine, Tensor};
use crate::sparse_cache::SparseLayerKV;

pub const REPO_MAGIC: &[u8; 7] = b"EGOLCD\x01";

/// Default number of entries retrieved per query.
pub const DEFAULT_TOP_M: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RepoConfig {
    pub embed_dim: usize,
    pub layer_count: usize,
    /// Oldest entries are evicted beyond this count. `None` keeps everything.
    pub max_entries: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry {
    pub entry_id: u64,
    pub embedding: PromptEmbedding,
    pub per_layer_kv: Vec<SparseLayerKV>,
    pub anchor_clip: Tensor,
}

/// Entry ids with their similarity scores, best first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RetrievalSet {
    pub ids: Vec<u64>,
    pub scores: Vec<f64>,
}

impl RetrievalSet {
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryRepository {
    config: RepoConfig,
    entries: Vec<MemoryEntry>,
}

impl MemoryRepository {
    pub fn new(config: RepoConfig) -> Result<Self> {
        if config.embed_dim == 0 || config.layer_count == 0 {
            return Err(Error::Config("repository needs positive embedding width and layer count".into()));
        }
        if config.max_entries == Some(0) {
            return Err(Error::Config("max_entries must be at least 1".into()));
        }
        Ok(Self { config, entries: Vec::new() })
    }

    pub fn config(&self) -> &RepoConfig {
        &self.config
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&MemoryEntry> {
        self.entries
            .binary_search_by_key(&id, |e| e.entry_id)
            .ok()
            .map(|i| &self.entries[i])
    }

    /// Cosine score of `query` against every entry, in storage order.
    pub fn relevance(&self, query: &PromptEmbedding) -> Result<Vec<(u64, f64)>> {
        if query.dim() != self.config.embed_dim {
            return dim_err(format!(
                "query width {} vs repository width {}",
                query.dim(),
                self.config.embed_dim
            ));
        }
        self.entries
            .iter()
            .map(|e| Ok((e.entry_id, cosine(&query.vector, &e.embedding.vector)?)))
            .collect()
    }

    /// The `m` most similar entries; lower id wins a tie.
    pub fn retrieve_top_m(&self, query: &PromptEmbedding, m: usize) -> Result<RetrievalSet> {
        let mut scored = self.relevance(query)?;
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(m);
        Ok(RetrievalSet {
            ids: scored.iter().map(|s| s.0).collect(),
            scores: scored.iter().map(|s| s.1).collect(),
        })
    }

    fn check_entry(&self, embedding: &PromptEmbedding, kv: &[SparseLayerKV], anchor: &Tensor) -> Result<()> {
        if embedding.dim() != self.config.embed_dim {
            return dim_err(format!("embedding width {} vs {}", embedding.dim(), self.config.embed_dim));
        }
        if kv.len() != self.config.layer_count {
            return dim_err(format!("{} layer caches for a {}-layer repository", kv.len(), self.config.layer_count));
        }
        if anchor.rank() != 4 {
            return dim_err(format!("anchor clip must be [C, T, H, W], got {:?}", anchor.shape()));
        }
        if let Some(first) = self.entries.first() {
            let (a, b) = (first.anchor_clip.shape(), anchor.shape());
            if a[0] != b[0] || a[2] != b[2] || a[3] != b[3] {
                return dim_err(format!("anchor clip {b:?} does not match stored clips {a:?}"));
            }
            for (l, (x, y)) in first.per_layer_kv.iter().zip(kv).enumerate() {
                if x.heads() != y.heads() || x.key_dim() != y.key_dim() || x.value_dim() != y.value_dim() {
                    return dim_err(format!("layer {l} cache layout differs from stored entries"));
                }
            }
        }
        Ok(())
    }

    /// Append an entry and return its id (previous maximum plus one).
    pub fn append(
        &mut self,
        embedding: PromptEmbedding,
        per_layer_kv: Vec<SparseLayerKV>,
        anchor_clip: Tensor,
    ) -> Result<u64> {
        self.check_entry(&embedding, &per_layer_kv, &anchor_clip)?;
        let entry_id = self.entries.last().map_or(0, |e| e.entry_id + 1);
        let embedding = PromptEmbedding {
            vector: embedding.vector.iter().map(|&v| v as f32 as f64).collect(),
            source_index: embedding.source_index,
        };
        self.entries.push(MemoryEntry {
            entry_id,
            embedding,
            per_layer_kv: per_layer_kv.iter().map(SparseLayerKV::round_to_f32).collect(),
            anchor_clip: anchor_clip.round_to_f32(),
        });
        if let Some(cap) = self.config.max_entries {
            if self.entries.len() > cap {
                let drop = self.entries.len() - cap;
                self.entries.drain(..drop);
            }
        }
        Ok(entry_id)
    }

    /// Retrieved caches grouped by layer, in retrieval order.
    pub fn layer_caches(&self, set: &RetrievalSet) -> Result<Vec<Vec<SparseLayerKV>>> {
        let entries = set
            .ids
            .iter()
            .map(|&id| self.get(id).ok_or_else(|| Error::Config(format!("no entry with id {id}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok((0..self.config.layer_count)
            .map(|l| entries.iter().map(|e| e.per_layer_kv[l].clone()).collect())
            .collect())
    }

    /// Anchor clips of the retrieved entries, in retrieval order.
    pub fn anchor_clips(&self, set: &RetrievalSet) -> Result<Vec<Tensor>> {
        set.ids
            .iter()
            .map(|&id| {
                self.get(id)
                    .map(|e| e.anchor_clip.clone())
                    .ok_or_else(|| Error::Config(format!("no entry with id {id}")))
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = REPO_MAGIC.to_vec();
        io::put_len(&mut buf, self.config.embed_dim)?;
        io::put_len(&mut buf, self.config.layer_count)?;
        io::put_len(&mut buf, self.entries.len())?;
        io::put_len(&mut buf, self.config.max_entries.unwrap_or(0))?;
        for e in &self.entries {
            let mut body = Vec::new();
            io::put_u64(&mut body, e.entry_id);
            io::put_u64(&mut body, e.embedding.source_index as u64);
            io::put_len(&mut body, e.embedding.dim())?;
            for &v in &e.embedding.vector {
                io::put_f32(&mut body, v);
            }
            for kv in &e.per_layer_kv {
                write_sparse(&mut body, kv)?;
            }
            io::write_tensor(&mut body, &e.anchor_clip)?;
            io::put_len(&mut buf, body.len())?;
            buf.extend_from_slice(&body);
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(REPO_MAGIC)?;
        let embed_dim = r.len()?;
        let layer_count = r.len()?;
        let count = r.len()?;
        let cap = r.len()?;
        let config = RepoConfig {
            embed_dim,
            layer_count,
            max_entries: (cap > 0).then_some(cap),
        };
        let mut repo = Self::new(config).map_err(|e| Error::Corrupt { offset: 7, msg: e.to_string() })?;
        for _ in 0..count {
            let len = r.len()?;
            let start = r.offset();
            let body = r.bytes(len)?;
            let mut er = ByteReader::new(body);
            let fix = |e: Error| match e {
                Error::Corrupt { offset, msg } => Error::Corrupt { offset: start + offset, msg },
                other => other,
            };
            let entry = read_entry(&mut er, &config).map_err(fix)?;
            if !er.is_at_end() {
                return Err(Error::Corrupt { offset: start + er.offset(), msg: "trailing bytes in entry".into() });
            }
            if repo.entries.last().is_some_and(|l| l.entry_id >= entry.entry_id) {
                return Err(Error::Corrupt { offset: start, msg: "entry ids not increasing".into() });
            }
            repo.check_entry(&entry.embedding, &entry.per_layer_kv, &entry.anchor_clip)
                .map_err(|e| Error::Corrupt { offset: start, msg: e.to_string() })?;
            repo.entries.push(entry);
        }
        if !r.is_at_end() {
            return r.corrupt("trailing bytes after last entry");
        }
        Ok(repo)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn summary(&self) -> RepoSummary {
        let mut per_layer = vec![BTreeMap::new(); self.config.layer_count];
        for e in &self.entries {
            for (l, kv) in e.per_layer_kv.iter().enumerate() {
                *per_layer[l].entry(kv.len()).or_insert(0) += 1;
            }
        }
        RepoSummary {
            entry_count: self.entries.len(),
            retained_histogram: per_layer,
            embedding_norms: self
                .entries
                .iter()
                .map(|e| (e.entry_id, e.embedding.vector.iter().map(|v| v * v).sum::<f64>().sqrt()))
                .collect(),
        }
    }
}

/// What `inspect-repo` reports.
#[derive(Clone, Debug, PartialEq)]
pub struct RepoSummary {
    pub entry_count: usize,
    /// Per layer: retained-token count → number of entries.
    pub retained_histogram: Vec<BTreeMap<usize, usize>>,
    pub embedding_norms: Vec<(u64, f64)>,
}

/// Standalone encoding of one sparse layer cache.
pub fn sparse_to_bytes(kv: &SparseLayerKV) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_sparse(&mut buf, kv)?;
    Ok(buf)
}

pub fn sparse_from_bytes(bytes: &[u8]) -> Result<SparseLayerKV> {
    let mut r = ByteReader::new(bytes);
    let kv = read_sparse(&mut r)?;
    if !r.is_at_end() {
        return r.corrupt("trailing bytes after the cache");
    }
    Ok(kv)
}

pub(crate) fn write_sparse(buf: &mut Vec<u8>, kv: &SparseLayerKV) -> Result<()> {
    io::put_len(buf, kv.origin_length())?;
    io::put_len(buf, kv.len())?;
    for &i in kv.retained_indices() {
        io::put_len(buf, i)?;
    }
    io::write_tensor(buf, kv.keys())?;
    io::write_tensor(buf, kv.values())
}

pub(crate) fn read_sparse(r: &mut ByteReader<'_>) -> Result<SparseLayerKV> {
    let at = r.offset();
    let origin = r.len()?;
    let n = r.len()?;
    if n.saturating_mul(4) > r.remaining() {
        return r.corrupt(format!("truncated index list of {n} entries"));
    }
    let idx = (0..n).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
    let k = r.tensor()?;
    let v = r.tensor()?;
    SparseLayerKV::from_parts(idx, k, v, origin).map_err(|e| Error::Corrupt { offset: at, msg: e.to_string() })
}

fn read_entry(r: &mut ByteReader<'_>, cfg: &RepoConfig) -> Result<MemoryEntry> {
    let entry_id = r.u64()?;
    let source_index = r.u64()? as usize;
    let dim = r.len()?;
    if dim != cfg.embed_dim {
        return r.corrupt(format!("embedding width {dim} vs header {}", cfg.embed_dim));
    }
    let vector = (0..dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    let per_layer_kv = (0..cfg.layer_count)
        .map(|_| read_sparse(r))
        .collect::<Result<Vec<_>>>()?;
    let anchor_clip = r.tensor()?;
    Ok(MemoryEntry {
        entry_id,
        embedding: PromptEmbedding { vector, source_index },
        per_layer_kv,
        anchor_clip,
    })
}

/// Concatenate retrieved caches ahead of the local keys and values along the
/// token axis: retrieval order first, stored-token order within each cache,
/// then the local tokens. Local rows are copied unchanged.
pub fn fuse_kv(
    local_k: &Tensor,
    local_v: &Tensor,
    retrieved: &[SparseLayerKV],
) -> Result<(Tensor, Tensor)> {
    let (ks, vs) = (local_k.shape(), local_v.shape());
    if ks.len() != 3 || vs.len() != 3 || ks[0] != vs[0] || ks[1] != vs[1] {
        return dim_err(format!("local keys {ks:?} and values {vs:?} are not a token cache"));
    }
    if retrieved.is_empty() {
        return Ok((local_k.clone(), local_v.clone()));
    }
    let mut tokens = ks[0];
    for (i, c) in retrieved.iter().enumerate() {
        if c.heads() != ks[1] || c.key_dim() != ks[2] || c.value_dim() != vs[2] {
            return dim_err(format!(
                "retrieved cache {i} is [{}, {}, {}/{}], local is [{}, {}, {}/{}]",
                c.len(), c.heads(), c.key_dim(), c.value_dim(), ks[0], ks[1], ks[2], vs[2]
            ));
        }
        tokens += c.len();
    }
    let mut kd = Vec::with_capacity(tokens * ks[1] * ks[2]);
    let mut vd = Vec::with_capacity(tokens * vs[1] * vs[2]);
    for c in retrieved {
        kd.extend_from_slice(c.keys().data());
        vd.extend_from_slice(c.values().data());
    }
    kd.extend_from_slice(local_k.data());
    vd.extend_from_slice(local_v.data());
    Ok((
        Tensor::from_parts(vec![tokens, ks[1], ks[2]], kd),
        Tensor::from_parts(vec![tokens, vs[1], vs[2]], vd),
    ))
}
