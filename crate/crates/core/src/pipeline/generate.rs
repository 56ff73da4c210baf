use super::memory_path::{check_compat, consolidate, recall, CallTrace};
use super::trace::TraceRecord;
use super::{cfg_combine, copy_frames, decode_clip, zero_leading_frames};
use crate::error::{Error, Result};
use crate::flow::{rf_sample_step, FlowSchedule};
use crate::memory::{MemoryRepository, RetrievalSet};
use crate::model::ToyDiT;
use crate::narrative::{NarrativeScript, PromptEmbedder, PromptEmbedding};
use crate::numerics::{gaussian, Rng, Tensor};
use crate::sparse_cache::{CompressionConfig, LayerKV};
use serde::{Deserialize, Serialize};

pub const DEFAULT_NEGATIVE_PROMPT: &str =
    "blurry, smeared, flickering, distorted hands, warped objects, oversaturated, low detail, frozen frame";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    /// Clips to generate; `None` means one per script segment.
    pub clips: Option<usize>,
    pub schedule: FlowSchedule,
    /// Frames carried over from the previous clip's tail and held fixed.
    pub prefix_frames: usize,
    pub top_m: usize,
    pub compression: CompressionConfig,
    pub seed: u64,
    pub negative_prompt: String,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            clips: None,
            schedule: FlowSchedule::default(),
            prefix_frames: 9,
            top_m: crate::memory::DEFAULT_TOP_M,
            compression: CompressionConfig::default(),
            seed: 0,
            negative_prompt: DEFAULT_NEGATIVE_PROMPT.to_string(),
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self, frames: usize) -> Result<()> {
        self.schedule.validate()?;
        if self.prefix_frames >= frames {
            return Err(Error::Config(format!(
                "{} prefix frames leave nothing to generate in a {frames}-frame clip",
                self.prefix_frames
            )));
        }
        if !(self.compression.tau > 0.0 && self.compression.tau <= 1.0) {
            return Err(Error::Config(format!("tau {} outside (0, 1]", self.compression.tau)));
        }
        if self.compression.probe_count == 0 {
            return Err(Error::Config("probe_count must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipResult {
    pub clip: Tensor,
    pub prompt_index: usize,
    pub retrieval: RetrievalSet,
    pub local_kv: Vec<LayerKV>,
    pub entry_id: u64,
    pub retained_ratios: Vec<f64>,
}

/// Generate one clip per segment, each conditioned on the previous clip's
/// tail, the segment prompt and the retrieved memory, and write every clip
/// back to `repo`.
pub fn generate_video(
    script: &NarrativeScript,
    model: &ToyDiT,
    repo: &mut MemoryRepository,
    embedder: &dyn PromptEmbedder,
    cfg: &GenerationConfig,
    trace: &mut CallTrace,
) -> Result<Vec<ClipResult>> {
    let latent = model.config.latent;
    cfg.validate(latent[1])?;
    check_compat(model, repo)?;
    if script.is_empty() {
        return Err(Error::Config("script has no segments".into()));
    }
    let count = cfg.clips.unwrap_or(script.len());
    if count == 0 || count > script.len() {
        return Err(Error::Config(format!("{count} clips requested from a {}-segment script", script.len())));
    }
    let config = serde_json::to_value(cfg).map_err(|e| Error::State(e.to_string()))?;
    trace.records.push(TraceRecord::Config { config });
    let negative = PromptEmbedding { vector: embedder.embed(&cfg.negative_prompt)?, source_index: usize::MAX };
    let grid_len = cfg.schedule.sample_steps;
    let grid = cfg.schedule.grid();
    let frames = latent[1];
    let mut rng = Rng::new(cfg.seed);
    let mut results: Vec<ClipResult> = Vec::with_capacity(count);

    for (t, segment) in script.segments().iter().take(count).enumerate() {
        let memory = recall(repo, embedder, segment, cfg.top_m, trace)?;
        let mut z = gaussian(&mut rng, &latent);
        let prefix = if t > 0 { cfg.prefix_frames } else { 0 };
        if let Some(prev) = results.last().filter(|_| prefix > 0) {
            copy_frames(&mut z, 0, &prev.clip, frames - prefix, prefix)?;
        }
        for k in 0..grid_len {
            let s = grid[k];
            let v_c = model.forward(&z, s, &memory.embedding, &memory.caches)?.velocity;
            let v_u = model.forward(&z, s, &negative, &[])?.velocity;
            let mut v = cfg_combine(&v_c, &v_u, cfg.schedule.guidance_scale)?;
            zero_leading_frames(&mut v, prefix)?;
            z = rf_sample_step(&z, &v, k, &cfg.schedule)?;
        }
        let clip = decode_clip(&z);
        let stored = consolidate(repo, model, &clip, &memory, &cfg.compression, trace)?;
        let retained_ratios = stored.retained_ratios();
        log::debug!("clip {t}: retrieved {:?}, retained {:?}", memory.set.ids, retained_ratios);
        trace.records.push(TraceRecord::Clip {
            index: t,
            retrieval_ids: memory.set.ids.clone(),
            retained_ratios: retained_ratios.clone(),
        });
        results.push(ClipResult {
            clip,
            prompt_index: segment.index,
            retrieval: memory.set,
            local_kv: stored.local_kv,
            entry_id: stored.entry_id,
            retained_ratios,
        });
    }
    Ok(results)
}
