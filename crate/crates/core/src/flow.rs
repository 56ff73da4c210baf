//! Rectified-flow noising, the shifted Euler sampler, and the training
//! objective: flow-matching loss, MAE, and the anchor-based memory loss.

use crate::error::{dim_err, Error, Result};
use crate::numerics::{resample_temporal, Rng, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSchedule {
    pub total_steps: usize,
    pub sample_steps: usize,
    pub guidance_scale: f64,
    pub shift: f64,
}

impl Default for FlowSchedule {
    fn default() -> Self {
        Self { total_steps: 1000, sample_steps: 20, guidance_scale: 5.0, shift: 5.0 }
    }
}

impl FlowSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.sample_steps == 0 {
            return Err(Error::Config("step counts must be positive".into()));
        }
        if self.sample_steps > self.total_steps {
            return Err(Error::Config(format!(
                "{} sampling steps exceed the {}-step discretization",
                self.sample_steps, self.total_steps
            )));
        }
        if !(self.guidance_scale.is_finite() && self.guidance_scale >= 0.0) {
            return Err(Error::Config(format!("guidance scale {} must be ≥ 0", self.guidance_scale)));
        }
        if !(self.shift.is_finite() && self.shift > 0.0) {
            return Err(Error::Config(format!("shift {} must be > 0", self.shift)));
        }
        Ok(())
    }

    /// Sampling times `s_0 = 1 > … > s_K = 0`, warped by the shift.
    pub fn grid(&self) -> Vec<f64> {
        let k = self.sample_steps;
        (0..=k)
            .map(|i| {
                let u = 1.0 - i as f64 / k as f64;
                self.shift * u / (1.0 + (self.shift - 1.0) * u)
            })
            .collect()
    }

    /// A training time drawn from the discrete schedule, in `(0, 1]`.
    pub fn training_time(&self, rng: &mut Rng) -> f64 {
        (1 + rng.below(self.total_steps)) as f64 / self.total_steps as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_mae: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_mae: 0.1, gamma: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_mae", self.lambda_mae), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} = {v} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rf: f64,
    pub mae: f64,
    pub mem: f64,
    pub total: f64,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// `(1 − s)·x0 + s·ε`.
pub fn noise_clip(x0: &Tensor, eps: &Tensor, s: f64) -> Result<Tensor> {
    same_shape(x0, eps, "noise_clip")?;
    x0.zip_map(eps, |a, e| (1.0 - s) * a + s * e)
}

/// `ε − x0`.
pub fn rf_target(x0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    eps.sub(x0)
}

/// Mean of the retrieved clips after resampling each to `frames`.
pub fn semantic_anchor(clips: &[Tensor], frames: usize) -> Result<Tensor> {
    let (first, rest) = clips.split_first().ok_or(Error::EmptyRetrieval)?;
    let mut acc = resample_temporal(first, frames)?;
    for c in rest {
        acc.axpy(1.0, &resample_temporal(c, frames)?)?;
    }
    Ok(acc.scale(1.0 / clips.len() as f64))
}

/// `ε − anchor`.
pub fn memory_target(eps: &Tensor, anchor: &Tensor) -> Result<Tensor> {
    same_shape(eps, anchor, "memory_target")?;
    eps.sub(anchor)
}

/// Element-mean squared error.
pub fn memory_loss(v_pred: &Tensor, target: &Tensor) -> Result<f64> {
    mse(v_pred, target)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b, "mse")?;
    let n = a.len().max(1) as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// Element-mean absolute error.
pub fn mae(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b, "mae")?;
    let n = a.len().max(1) as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

pub fn total_loss(rf: f64, mae: f64, mem: f64, weights: LossWeights) -> LossBreakdown {
    LossBreakdown { rf, mae, mem, total: rf + weights.lambda_mae * mae + weights.gamma * mem }
}

/// Euler step `k` of the shifted grid: `z − (s_k − s_{k+1})·v`.
pub fn rf_sample_step(z: &Tensor, v_pred: &Tensor, step: usize, schedule: &FlowSchedule) -> Result<Tensor> {
    if step >= schedule.sample_steps {
        return Err(Error::Range(format!("step {step} outside 0..{}", schedule.sample_steps)));
    }
    same_shape(z, v_pred, "rf_sample_step")?;
    let grid = schedule.grid();
    let ds = grid[step] - grid[step + 1];
    z.zip_map(v_pred, |a, v| a - ds * v)
}

/// Loss terms and `∂total/∂v_pred` for one example. Elements in frames with
/// `frame_mask[t] == false` are excluded from every term. The memory term is
/// present only when `mem_target` is given and `γ > 0` contributes to the
/// gradient.
pub fn objective(
    v_pred: &Tensor,
    rf_target: &Tensor,
    mem_target: Option<&Tensor>,
    weights: LossWeights,
    frame_mask: Option<&[bool]>,
) -> Result<(LossBreakdown, Tensor)> {
    same_shape(v_pred, rf_target, "objective")?;
    if let Some(m) = mem_target {
        same_shape(v_pred, m, "objective")?;
    }
    let counted = element_mask(v_pred, frame_mask)?;
    let n = counted.iter().filter(|&&c| c).count().max(1) as f64;
    let mut grad = vec![0.0; v_pred.len()];
    let (mut rf, mut abs, mut mem) = (0.0, 0.0, 0.0);
    for i in 0..v_pred.len() {
        if !counted[i] {
            continue;
        }
        let d = v_pred.data()[i] - rf_target.data()[i];
        rf += d * d;
        abs += d.abs();
        let mut g = 2.0 * d + weights.lambda_mae * sign(d);
        if let Some(m) = mem_target {
            let dm = v_pred.data()[i] - m.data()[i];
            mem += dm * dm;
            if weights.gamma != 0.0 {
                g += weights.gamma * 2.0 * dm;
            }
        }
        grad[i] = g / n;
    }
    let breakdown = total_loss(rf / n, abs / n, mem / n, weights);
    Ok((breakdown, Tensor::new(v_pred.shape().to_vec(), grad)?))
}

fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn element_mask(clip: &Tensor, frame_mask: Option<&[bool]>) -> Result<Vec<bool>> {
    let Some(fm) = frame_mask else {
        return Ok(vec![true; clip.len()]);
    };
    let [c, t, h, w] = crate::numerics::clip_dims(clip)?;
    if fm.len() != t {
        return dim_err(format!("frame mask of length {} for {t} frames", fm.len()));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(clip.len());
    for _ in 0..c {
        for &keep in fm {
            out.extend(std::iter::repeat_n(keep, hw));
        }
    }
    Ok(out)
}
