use super::trace::TraceRecord;
use crate::error::{Error, Result};
use crate::memory::{MemoryRepository, RetrievalSet};
use crate::model::ToyDiT;
use crate::narrative::{NarrativeSegment, PromptEmbedder, PromptEmbedding};
use crate::numerics::Tensor;
use crate::sparse_cache::{compress_layer, select_probes, CompressionConfig, LayerKV, SparseLayerKV};
use serde::{Deserialize, Serialize};

/// One step of the memory path, in the order it ran.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum MemoryEvent {
    Embed { segment: usize },
    Retrieve { ids: Vec<u64> },
    Gather { layer: usize, tokens: usize },
    Compress { layer: usize, origin: usize, retained: usize },
    Append { id: u64 },
}

/// Ordered record of memory-path operations, plus the per-clip or
/// per-step lines destined for the trace file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CallTrace {
    pub events: Vec<MemoryEvent>,
    pub records: Vec<TraceRecord>,
}

impl CallTrace {
    pub fn push(&mut self, e: MemoryEvent) {
        self.events.push(e);
    }

    /// The operation sequence with its inputs, leaving out how many tokens
    /// compression happened to keep (that depends on the clip content).
    pub fn signature(&self) -> Vec<String> {
        self.events
            .iter()
            .map(|e| match e {
                MemoryEvent::Embed { segment } => format!("embed {segment}"),
                MemoryEvent::Retrieve { ids } => format!("retrieve {ids:?}"),
                MemoryEvent::Gather { layer, tokens } => format!("gather {layer} {tokens}"),
                MemoryEvent::Compress { layer, origin, .. } => format!("compress {layer} {origin}"),
                MemoryEvent::Append { id } => format!("append {id}"),
            })
            .collect()
    }
}

/// What a segment pulled out of the repository.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Recall {
    pub embedding: PromptEmbedding,
    pub set: RetrievalSet,
    /// Per layer, one cache per retrieved entry (retrieval order). Empty
    /// when nothing was retrieved.
    pub caches: Vec<Vec<SparseLayerKV>>,
    pub anchors: Vec<Tensor>,
}

/// Model and repository must agree on depth and embedding width.
pub fn check_compat(model: &ToyDiT, repo: &MemoryRepository) -> Result<()> {
    let (m, r) = (&model.config, repo.config());
    if m.layer_count != r.layer_count {
        return Err(Error::Config(format!(
            "model has {} layers but the repository stores {}",
            m.layer_count, r.layer_count
        )));
    }
    if m.embed_dim != r.embed_dim {
        return Err(Error::Config(format!(
            "model embeds prompts at width {} but the repository uses {}",
            m.embed_dim, r.embed_dim
        )));
    }
    Ok(())
}

/// Embed a segment, retrieve its top-`m` entries and gather their caches.
/// Training and generation both come through here.
pub fn recall(
    repo: &MemoryRepository,
    embedder: &dyn PromptEmbedder,
    segment: &NarrativeSegment,
    top_m: usize,
    trace: &mut CallTrace,
) -> Result<Recall> {
    let embedding = embedder.embed_segment(segment)?;
    trace.push(MemoryEvent::Embed { segment: segment.index });
    if repo.is_empty() || top_m == 0 {
        trace.push(MemoryEvent::Retrieve { ids: Vec::new() });
        return Ok(Recall { embedding, ..Default::default() });
    }
    let set = repo.retrieve_top_m(&embedding, top_m)?;
    trace.push(MemoryEvent::Retrieve { ids: set.ids.clone() });
    let caches = repo.layer_caches(&set)?;
    for (layer, c) in caches.iter().enumerate() {
        trace.push(MemoryEvent::Gather { layer, tokens: c.iter().map(SparseLayerKV::len).sum() });
    }
    let anchors = repo.anchor_clips(&set)?;
    Ok(Recall { embedding, set, caches, anchors })
}

/// Outcome of writing a clip back to memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Consolidated {
    pub entry_id: u64,
    pub local_kv: Vec<LayerKV>,
    pub sparse: Vec<SparseLayerKV>,
}

impl Consolidated {
    pub fn retained_ratios(&self) -> Vec<f64> {
        self.sparse.iter().map(SparseLayerKV::retained_ratio).collect()
    }
}

/// Capture the clean clip's local K/V, compress each layer with its most
/// recent queries as probes, and append the entry.
pub fn consolidate(
    repo: &mut MemoryRepository,
    model: &ToyDiT,
    clip: &Tensor,
    recall: &Recall,
    compression: &CompressionConfig,
    trace: &mut CallTrace,
) -> Result<Consolidated> {
    let out = model.forward(clip, 0.0, &recall.embedding, &recall.caches)?;
    let mut local_kv = Vec::with_capacity(out.layers.len());
    let mut sparse = Vec::with_capacity(out.layers.len());
    for (layer, cap) in out.layers.into_iter().enumerate() {
        let probes = select_probes(&cap.q, compression.probe_count, compression.probe_strategy)?;
        let kv = LayerKV::new(cap.k, cap.v)?;
        let (s, _) = compress_layer(layer, &kv, &probes, compression.tau, compression.mode)?;
        trace.push(MemoryEvent::Compress { layer, origin: kv.len(), retained: s.len() });
        local_kv.push(kv);
        sparse.push(s);
    }
    let entry_id = repo.append(recall.embedding.clone(), sparse.clone(), clip.clone())?;
    trace.push(MemoryEvent::Append { id: entry_id });
    Ok(Consolidated { entry_id, local_kv, sparse })
}
