use super::block::{add_row_bias, column_sums, rms_norm, rms_norm_backward, BlockTape, DualMemoryBlock};
use super::ModelConfig;
use crate::error::{dim_err, Error, Result};
use crate::narrative::PromptEmbedding;
use crate::numerics::{clip_dims, gaussian, matmul, matmul_nt, matmul_tn, Rng, Tensor};
use crate::sparse_cache::SparseLayerKV;

/// Which parameters receive gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TrainMode {
    #[default]
    Full,
    /// Base weights frozen; only adapter `A`/`B` tensors move.
    LoraOnly,
}

/// Local attention inputs captured from one layer, each `[T × H × d_k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCapture {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DitOutput {
    /// Same shape as the input latent.
    pub velocity: Tensor,
    pub layers: Vec<LayerCapture>,
}

/// Frame-token denoiser: each latent frame becomes one token.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDiT {
    pub config: ModelConfig,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub time_w: Tensor,
    pub time_b: Tensor,
    pub prompt_w: Tensor,
    pub blocks: Vec<DualMemoryBlock>,
    pub norm_out: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

#[derive(Clone, Debug)]
pub(crate) struct DitTape {
    dims: [usize; 4],
    patches: Tensor,
    time_emb: Vec<f64>,
    prompt: Vec<f64>,
    blocks: Vec<BlockTape>,
    h: Tensor,
    inv_rms: Vec<f64>,
    hn: Tensor,
}

/// Sinusoidal features of `value` at width `dim`.
pub fn sinusoid(value: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[i] = (value * freq).sin();
        out[half + i] = (value * freq).cos();
    }
    out
}

/// Timestep features for `s ∈ [0, 1]`.
pub fn timestep_embedding(s: f64, dim: usize) -> Vec<f64> {
    sinusoid(s * 1000.0, dim)
}

fn patchify(x: &Tensor) -> Result<(Tensor, [usize; 4])> {
    let dims = clip_dims(x)?;
    let [c, t, h, w] = dims;
    let hw = h * w;
    let p = c * hw;
    let mut out = vec![0.0; t * p];
    for ci in 0..c {
        for ti in 0..t {
            out[ti * p + ci * hw..][..hw].copy_from_slice(&x.data()[(ci * t + ti) * hw..][..hw]);
        }
    }
    Ok((Tensor::new(vec![t, p], out)?, dims))
}

fn unpatchify(tokens: &Tensor, dims: [usize; 4]) -> Tensor {
    let [c, t, h, w] = dims;
    let hw = h * w;
    let p = c * hw;
    let mut out = vec![0.0; tokens.len()];
    for ci in 0..c {
        for ti in 0..t {
            out[(ci * t + ti) * hw..][..hw].copy_from_slice(&tokens.data()[ti * p + ci * hw..][..hw]);
        }
    }
    Tensor::from_parts(dims.to_vec(), out)
}

fn outer_acc(acc: &mut Tensor, left: &[f64], right: &[f64]) {
    let n = right.len();
    for (row, l) in acc.data_mut().chunks_mut(n).zip(left) {
        for (a, r) in row.iter_mut().zip(right) {
            *a += l * r;
        }
    }
}

fn mat_vec(w: &Tensor, v: &[f64]) -> Vec<f64> {
    let n = v.len();
    w.data().chunks(n).map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

impl ToyDiT {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let d = config.hidden();
        let p = config.patch_len();
        let e = config.embed_dim;
        let mut model = Self::zeros(config)?;
        model.patch_w = gaussian(&mut rng, &[d, p]).scale(1.0 / (p as f64).sqrt());
        model.time_w = gaussian(&mut rng, &[d, d]).scale(1.0 / (d as f64).sqrt());
        model.prompt_w = Tensor::zeros(&[d, e]);
        model.blocks = (0..config.layer_count)
            .map(|_| {
                DualMemoryBlock::init(
                    &mut rng,
                    config.heads,
                    config.head_dim,
                    config.ffn_hidden,
                    config.lora_rank,
                    config.lora_alpha,
                )
            })
            .collect();
        model.norm_out = Tensor::filled(&[d], 1.0);
        model.out_w = gaussian(&mut rng, &[p, d]).scale(1.0 / (d as f64).sqrt());
        Ok(model)
    }

    /// Every parameter zero, including norm gains.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden();
        let p = config.patch_len();
        Ok(Self {
            config,
            patch_w: Tensor::zeros(&[d, p]),
            patch_b: Tensor::zeros(&[d]),
            time_w: Tensor::zeros(&[d, d]),
            time_b: Tensor::zeros(&[d]),
            prompt_w: Tensor::zeros(&[d, config.embed_dim]),
            blocks: (0..config.layer_count)
                .map(|_| {
                    DualMemoryBlock::zeros(
                        config.heads,
                        config.head_dim,
                        config.ffn_hidden,
                        config.lora_rank,
                        config.lora_alpha,
                    )
                })
                .collect(),
            norm_out: Tensor::zeros(&[d]),
            out_w: Tensor::zeros(&[p, d]),
            out_b: Tensor::zeros(&[p]),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// Conditioning vector added to every token: projected timestep
    /// features plus the projected prompt.
    pub fn conditioning(&self, s: f64, prompt: &PromptEmbedding) -> Result<Vec<f64>> {
        if prompt.dim() != self.config.embed_dim {
            return dim_err(format!("prompt of width {} for a {}-wide model", prompt.dim(), self.config.embed_dim));
        }
        let temb = timestep_embedding(s, self.config.hidden());
        let mut c = mat_vec(&self.time_w, &temb);
        for ((v, b), p) in c.iter_mut().zip(self.time_b.data()).zip(mat_vec(&self.prompt_w, &prompt.vector)) {
            *v += b + p;
        }
        Ok(c)
    }

    pub fn forward(
        &self,
        x: &Tensor,
        s: f64,
        prompt: &PromptEmbedding,
        retrieved: &[Vec<SparseLayerKV>],
    ) -> Result<DitOutput> {
        Ok(self.forward_recorded(x, s, prompt, retrieved)?.0)
    }

    pub(crate) fn forward_recorded(
        &self,
        x: &Tensor,
        s: f64,
        prompt: &PromptEmbedding,
        retrieved: &[Vec<SparseLayerKV>],
    ) -> Result<(DitOutput, DitTape)> {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Range(format!("timestep {s} outside [0, 1]")));
        }
        if !retrieved.is_empty() && retrieved.len() != self.blocks.len() {
            return Err(Error::Config(format!(
                "{} layers of retrieved caches for a {}-layer model",
                retrieved.len(),
                self.blocks.len()
            )));
        }
        let (patches, dims) = patchify(x)?;
        let [c, _, hh, ww] = dims;
        if c * hh * ww != self.config.patch_len() {
            return dim_err(format!(
                "latent frame [{c} × {hh} × {ww}] does not match the model's {:?}",
                self.config.latent
            ));
        }
        let d = self.config.hidden();
        let mut h = matmul_nt(&patches, &self.patch_w)?;
        add_row_bias(&mut h, &self.patch_b);
        let cond = self.conditioning(s, prompt)?;
        for (ti, row) in h.data_mut().chunks_mut(d).enumerate() {
            for ((v, p), cv) in row.iter_mut().zip(sinusoid(ti as f64, d)).zip(&cond) {
                *v += p + cv;
            }
        }
        let mut tapes = Vec::with_capacity(self.blocks.len());
        let mut layers = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let r: &[SparseLayerKV] = retrieved.get(l).map(Vec::as_slice).unwrap_or(&[]);
            let (o, tape) = block.forward_recorded(&h, r, true)?;
            h = o.out;
            layers.push(LayerCapture { q: o.q_local, k: o.k_local, v: o.v_local });
            tapes.push(tape);
        }
        let (hn, inv_rms) = rms_norm(&h, &self.norm_out)?;
        let mut y = matmul_nt(&hn, &self.out_w)?;
        add_row_bias(&mut y, &self.out_b);
        let velocity = unpatchify(&y, dims);
        let tape = DitTape {
            dims,
            patches,
            time_emb: timestep_embedding(s, d),
            prompt: prompt.vector.clone(),
            blocks: tapes,
            h,
            inv_rms,
            hn,
        };
        Ok((DitOutput { velocity, layers }, tape))
    }

    pub(crate) fn backward(&self, tape: &DitTape, dvel: &Tensor, mode: TrainMode) -> Result<ToyDiT> {
        if dvel.shape() != tape.dims {
            return dim_err(format!("velocity gradient {:?} for a {:?} forward", dvel.shape(), tape.dims));
        }
        let mut g = self.zeros_like();
        let (dy, _) = patchify(dvel)?;
        g.out_w.axpy(1.0, &matmul_tn(&dy, &tape.hn)?)?;
        g.out_b.axpy(1.0, &column_sums(&dy))?;
        let dhn = matmul(&dy, &self.out_w)?;
        let mut dh = rms_norm_backward(&tape.h, &tape.inv_rms, &self.norm_out, &dhn, &mut g.norm_out)?;
        for (l, block) in self.blocks.iter().enumerate().rev() {
            dh = block.backward(&tape.blocks[l], &dh, &mut g.blocks[l])?;
        }
        g.patch_w.axpy(1.0, &matmul_tn(&dh, &tape.patches)?)?;
        let dcond = column_sums(&dh);
        g.patch_b.axpy(1.0, &dcond)?;
        g.time_b.axpy(1.0, &dcond)?;
        outer_acc(&mut g.time_w, dcond.data(), &tape.time_emb);
        outer_acc(&mut g.prompt_w, dcond.data(), &tape.prompt);
        if mode == TrainMode::LoraOnly {
            for (name, t) in g.tensors_mut() {
                if !name.contains("lora_") {
                    t.data_mut().iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        Ok(g)
    }

    /// Parameters in a fixed order with stable names.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch.weight".into(), &self.patch_w),
            ("patch.bias".into(), &self.patch_b),
            ("time.weight".into(), &self.time_w),
            ("time.bias".into(), &self.time_b),
            ("prompt.weight".into(), &self.prompt_w),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.extend(b.tensors().into_iter().map(|(n, t)| (format!("blocks.{l}.{n}"), t)));
        }
        out.push(("norm_out".into(), &self.norm_out));
        out.push(("out.weight".into(), &self.out_w));
        out.push(("out.bias".into(), &self.out_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("patch.weight".into(), &mut self.patch_w),
            ("patch.bias".into(), &mut self.patch_b),
            ("time.weight".into(), &mut self.time_w),
            ("time.bias".into(), &mut self.time_b),
            ("prompt.weight".into(), &mut self.prompt_w),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.tensors_mut().into_iter().map(|(n, t)| (format!("blocks.{l}.{n}"), t)));
        }
        out.push(("norm_out".into(), &mut self.norm_out));
        out.push(("out.weight".into(), &mut self.out_w));
        out.push(("out.bias".into(), &mut self.out_b));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Holds at most one recorded forward; `backward` consumes it.
#[derive(Debug, Default)]
pub struct GradRecorder {
    tape: Option<DitTape>,
}

impl GradRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn has_record(&self) -> bool {
        self.tape.is_some()
    }

    pub fn forward(
        &mut self,
        model: &ToyDiT,
        x: &Tensor,
        s: f64,
        prompt: &PromptEmbedding,
        retrieved: &[Vec<SparseLayerKV>],
    ) -> Result<DitOutput> {
        let (out, tape) = model.forward_recorded(x, s, prompt, retrieved)?;
        self.tape = Some(tape);
        Ok(out)
    }

    /// Parameter gradients of `⟨dvel, velocity⟩`, shaped like `model`.
    pub fn backward(&mut self, model: &ToyDiT, dvel: &Tensor, mode: TrainMode) -> Result<ToyDiT> {
        let tape = self
            .tape
            .take()
            .ok_or_else(|| Error::State("backward called without a recorded forward".into()))?;
        model.backward(&tape, dvel, mode)
    }
}
