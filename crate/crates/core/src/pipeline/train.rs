use super::memory_path::{check_compat, consolidate, recall, CallTrace, Recall};
use super::trace::TraceRecord;
use crate::error::{Error, Result};
use crate::flow::{memory_target, noise_clip, objective, rf_target, semantic_anchor, FlowSchedule, LossBreakdown, LossWeights};
use crate::memory::MemoryRepository;
use crate::model::{GradRecorder, ModelConfig, ToyDiT, TrainMode};
use crate::narrative::{NarrativeSegment, PromptEmbedder, PromptEmbedding};
use crate::numerics::{gaussian, Rng, Tensor};
use crate::par;
use crate::sparse_cache::{CompressionConfig, SparseLayerKV};
use serde::{Deserialize, Serialize};

/// A prompt segment paired with its ground-truth latent clip. Examples
/// sharing a `video` id are consecutive clips of one video, in order.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub video: usize,
    pub segment: NarrativeSegment,
    pub clip: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub p_video: f64,
    pub p_text: f64,
    pub p_kv: f64,
    pub weights: LossWeights,
    /// When false the memory term is never formed at all, regardless of γ.
    pub memory_term: bool,
    pub schedule: FlowSchedule,
    pub prefix_frames: usize,
    pub top_m: usize,
    pub compression: CompressionConfig,
    pub mode: TrainMode,
    /// Write every example, encoded by the final model, into the caller's
    /// repository once training ends.
    pub consolidate: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 1,
            learning_rate: 1e-5,
            warmup_steps: 200,
            weight_decay: 1e-4,
            ema_decay: 0.99,
            p_video: 0.2,
            p_text: 0.1,
            p_kv: 0.1,
            weights: LossWeights::default(),
            memory_term: true,
            schedule: FlowSchedule::default(),
            prefix_frames: 9,
            top_m: crate::memory::DEFAULT_TOP_M,
            compression: CompressionConfig::default(),
            mode: TrainMode::Full,
            consolidate: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_video", self.p_video), ("p_text", self.p_text), ("p_kv", self.p_kv)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("EMA decay {} outside [0, 1)", self.ema_decay)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay {} must be ≥ 0", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        self.weights.validate()?;
        self.schedule.validate()
    }

    /// Linear warmup to the base rate.
    pub fn rate_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            return self.learning_rate;
        }
        self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl AdamW {
    pub fn new(model: &ToyDiT, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = model.tensors().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: zeros.clone(), v: zeros, t: 0 }
    }

    /// One update; tensors for which `trainable(name)` is false stay put.
    pub fn step(&mut self, model: &mut ToyDiT, grads: &ToyDiT, lr: f64, trainable: impl Fn(&str) -> bool) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let params = model.tensors_mut();
        let gs = grads.tensors();
        for (i, ((name, p), (_, g))) in params.into_iter().zip(gs).enumerate() {
            if !trainable(&name) {
                continue;
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, (pk, gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                *pk -= lr * (update + wd * *pk);
            }
        }
    }
}

fn ema_update(ema: &mut ToyDiT, model: &ToyDiT, decay: f64) {
    for ((_, e), (_, p)) in ema.tensors_mut().into_iter().zip(model.tensors()) {
        for (a, b) in e.data_mut().iter_mut().zip(p.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ToyDiT,
    pub ema: ToyDiT,
    /// Batch-mean losses, one per step.
    pub losses: Vec<LossBreakdown>,
    pub trace: CallTrace,
}

impl TrainOutcome {
    /// Mean total loss over the first and last `window` steps.
    pub fn smoothed_ends(&self, window: usize) -> (f64, f64) {
        let w = window.clamp(1, self.losses.len().max(1));
        let mean = |s: &[LossBreakdown]| s.iter().map(|l| l.total).sum::<f64>() / s.len().max(1) as f64;
        (mean(&self.losses[..w.min(self.losses.len())]), mean(&self.losses[self.losses.len().saturating_sub(w)..]))
    }
}

/// Random choices for one batch member, drawn in a fixed order.
struct Draw {
    example: usize,
    drop_text: bool,
    drop_video: bool,
    drop_kv: bool,
    s: f64,
    eps: Tensor,
}

fn example_grad(
    model: &ToyDiT,
    ex: &Example,
    memory: &Recall,
    d: &Draw,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, ToyDiT)> {
    let frames = ex.clip.shape()[1];
    let x0 = &ex.clip;
    let mut xs = noise_clip(x0, &d.eps, d.s)?;
    let prefix = if d.drop_video { 0 } else { cfg.prefix_frames.min(frames) };
    let mask: Option<Vec<bool>> = (prefix > 0).then(|| (0..frames).map(|f| f >= prefix).collect());
    if prefix > 0 {
        super::copy_frames(&mut xs, 0, x0, 0, prefix)?;
    }
    let prompt = if d.drop_text { PromptEmbedding::dropped(memory.embedding.dim()) } else { memory.embedding.clone() };
    let retrieved: &[Vec<_>] = if d.drop_kv { &[] } else { &memory.caches };
    let mut rec = GradRecorder::new();
    let v_pred = rec.forward(model, &xs, d.s, &prompt, retrieved)?.velocity;
    let target = rf_target(x0, &d.eps)?;
    let mem_target = if cfg.memory_term && !d.drop_kv && !memory.anchors.is_empty() {
        Some(memory_target(&d.eps, &semantic_anchor(&memory.anchors, frames)?)?)
    } else {
        None
    };
    let (loss, dv) = objective(&v_pred, &target, mem_target.as_ref(), cfg.weights, mask.as_deref())?;
    let grads = rec.backward(model, &dv, cfg.mode)?;
    Ok((loss, grads))
}

type Stored = (PromptEmbedding, Vec<SparseLayerKV>, Tensor);

/// The memory an example sees: the caller's repository followed by the
/// latest stored form of every earlier clip of the same video.
fn history_repo(base: &MemoryRepository, dataset: &[Example], stored: &[Option<Stored>], i: usize) -> Result<MemoryRepository> {
    let mut repo = base.clone();
    for (j, ex) in dataset.iter().enumerate().take(i) {
        if ex.video != dataset[i].video {
            continue;
        }
        if let Some((e, kv, clip)) = &stored[j] {
            repo.append(e.clone(), kv.clone(), clip.clone())?;
        }
    }
    Ok(repo)
}

/// Encode example `i` with `model` against its history and keep the result.
fn refresh(
    model: &ToyDiT,
    base: &MemoryRepository,
    dataset: &[Example],
    stored: &mut [Option<Stored>],
    i: usize,
    embedder: &dyn PromptEmbedder,
    cfg: &TrainConfig,
    trace: &mut CallTrace,
) -> Result<Vec<f64>> {
    let mut repo = history_repo(base, dataset, stored, i)?;
    let memory = recall(&repo, embedder, &dataset[i].segment, cfg.top_m, trace)?;
    let c = consolidate(&mut repo, model, &dataset[i].clip, &memory, &cfg.compression, trace)?;
    let ratios = c.retained_ratios();
    stored[i] = Some((memory.embedding, c.sparse, dataset[i].clip.clone()));
    Ok(ratios)
}

/// Train on `dataset` for `cfg.steps` steps.
///
/// Each step recalls the example's memory (earlier clips of its video,
/// on top of `repo`) through the same path generation uses, takes one
/// optimizer step, and re-encodes the example into memory with the updated
/// model. With `cfg.consolidate`, the examples are finally appended to
/// `repo`.
pub fn train_toy(
    dataset: &[Example],
    model: ToyDiT,
    repo: &mut MemoryRepository,
    embedder: &dyn PromptEmbedder,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Config("training needs at least one example".into()));
    }
    cfg.validate()?;
    check_compat(&model, repo)?;
    for ex in dataset {
        if ex.clip.shape() != model.config.latent {
            return Err(Error::Config(format!(
                "example clip {:?} does not match the model latent {:?}",
                ex.clip.shape(),
                model.config.latent
            )));
        }
    }
    let mut trace = CallTrace::default();
    let config = serde_json::to_value(cfg).map_err(|e| Error::State(e.to_string()))?;
    trace.records.push(TraceRecord::Config { config });
    let base = repo.clone();
    let mut stored: Vec<Option<Stored>> = vec![None; dataset.len()];
    let mut scratch = CallTrace::default();
    for i in 0..dataset.len() {
        refresh(&model, &base, dataset, &mut stored, i, embedder, cfg, &mut scratch)?;
    }

    let mut rng = Rng::new(cfg.seed);
    let mut model = model;
    let mut ema = model.clone();
    let mut opt = AdamW::new(&model, cfg.weight_decay);
    let lora_only = cfg.mode == TrainMode::LoraOnly;
    let trainable = |name: &str| !lora_only || name.contains("lora_");
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let draws: Vec<Draw> = (0..cfg.batch_size)
            .map(|_| Draw {
                example: rng.below(dataset.len()),
                drop_text: rng.bernoulli(cfg.p_text),
                drop_video: rng.bernoulli(cfg.p_video),
                drop_kv: rng.bernoulli(cfg.p_kv),
                s: cfg.schedule.training_time(&mut rng),
                eps: gaussian(&mut rng, &model.config.latent),
            })
            .collect();
        let recalls = draws
            .iter()
            .map(|d| {
                let memory = history_repo(&base, dataset, &stored, d.example)?;
                recall(&memory, embedder, &dataset[d.example].segment, cfg.top_m, &mut trace)
            })
            .collect::<Result<Vec<_>>>()?;
        let results = par::map_range(draws.len(), |i| {
            example_grad(&model, &dataset[draws[i].example], &recalls[i], &draws[i], cfg)
        });
        let mut total = model.zeros_like();
        let mut loss = LossBreakdown::default();
        let scale = 1.0 / draws.len() as f64;
        for r in results {
            let (l, g) = r?;
            for ((_, acc), (_, gt)) in total.tensors_mut().into_iter().zip(g.tensors()) {
                acc.axpy(scale, gt)?;
            }
            loss.rf += l.rf * scale;
            loss.mae += l.mae * scale;
            loss.mem += l.mem * scale;
            loss.total += l.total * scale;
        }
        opt.step(&mut model, &total, cfg.rate_at(step), trainable);
        ema_update(&mut ema, &model, cfg.ema_decay);

        let mut retained = Vec::new();
        for (d, memory) in draws.iter().zip(&recalls) {
            let i = d.example;
            let mut history = history_repo(&base, dataset, &stored, i)?;
            let c = consolidate(&mut history, &model, &dataset[i].clip, memory, &cfg.compression, &mut trace)?;
            retained.extend(c.retained_ratios());
            stored[i] = Some((memory.embedding.clone(), c.sparse, dataset[i].clip.clone()));
        }
        log::debug!("step {step}: loss {:.6}", loss.total);
        trace.records.push(TraceRecord::Step {
            index: step,
            retrieval_ids: recalls.iter().flat_map(|r| r.set.ids.iter().copied()).collect(),
            losses: loss,
            retained_ratios: retained,
        });
        losses.push(loss);
    }

    if cfg.consolidate {
        let mut finals: Vec<Option<Stored>> = vec![None; dataset.len()];
        for i in 0..dataset.len() {
            refresh(&ema, &base, dataset, &mut finals, i, embedder, cfg, &mut scratch)?;
        }
        for (e, kv, clip) in finals.into_iter().flatten() {
            repo.append(e, kv, clip)?;
        }
    }
    Ok(TrainOutcome { model, ema, losses, trace })
}

const SCENE_PROMPTS: [&str; 6] = [
    "walking along a tiled corridor toward a bright window",
    "rinsing a ceramic mug at the kitchen sink",
    "slicing carrots on a wooden board",
    "folding a striped towel on the bed",
    "watering potted herbs on the balcony",
    "sorting letters on a cluttered desk",
];

/// A continuous synthetic first-person scene cut into `count` clips.
/// Each clip is a sum of drifting gratings whose pattern is tied to its
/// prompt, so prompts carry information about content.
pub fn synthetic_dataset(config: &ModelConfig, count: usize, seed: u64) -> Vec<Example> {
    let [c, t, h, w] = config.latent;
    let mut rng = Rng::new(seed);
    let scenes: Vec<Vec<[f64; 5]>> = (0..SCENE_PROMPTS.len())
        .map(|_| {
            (0..3)
                .map(|_| {
                    [
                        1.0 + rng.below(3) as f64,
                        rng.below(3) as f64,
                        rng.uniform() * std::f64::consts::TAU,
                        0.15 * (rng.uniform() - 0.5),
                        0.5 + 0.5 * rng.uniform(),
                    ]
                })
                .collect()
        })
        .collect();
    (0..count)
        .map(|i| {
            let scene = &scenes[i % SCENE_PROMPTS.len()];
            let mut data = Vec::with_capacity(c * t * h * w);
            for ci in 0..c {
                for ti in 0..t {
                    let frame = (i * t + ti) as f64;
                    for y in 0..h {
                        for x in 0..w {
                            let mut v = 0.0;
                            for [kx, ky, phase, speed, amp] in scene {
                                let arg = std::f64::consts::TAU * (kx * x as f64 / w as f64 + ky * y as f64 / h as f64)
                                    + phase
                                    + 0.9 * ci as f64
                                    + speed * frame;
                                v += amp * arg.sin();
                            }
                            data.push(v);
                        }
                    }
                }
            }
            let start = 5 * i as u64;
            Example {
                video: 0,
                segment: NarrativeSegment {
                    index: i,
                    start,
                    end: start + 5,
                    prompt: SCENE_PROMPTS[i % SCENE_PROMPTS.len()].to_string(),
                },
                clip: Tensor::from_parts(vec![c, t, h, w], data),
            }
        })
        .collect()
}
