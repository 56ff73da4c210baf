use crate::error::{dim_err, Result};
use crate::numerics::{gaussian, matmul_nt, matmul_tn, Rng, Tensor};

/// Low-rank adapter: contributes `(α / r) · B · A · x`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoRAAdapter {
    /// `[r × d_in]`
    pub a: Tensor,
    /// `[d_out × r]`
    pub b: Tensor,
    pub alpha: f64,
}

impl LoRAAdapter {
    /// Gaussian `A`, zero `B`: the adapter starts out contributing nothing.
    pub fn init(rng: &mut Rng, d_in: usize, d_out: usize, rank: usize, alpha: f64) -> Self {
        let a = gaussian(rng, &[rank, d_in]).scale(1.0 / (d_in as f64).sqrt());
        Self { a, b: Tensor::zeros(&[d_out, rank]), alpha }
    }

    pub fn zeros(d_in: usize, d_out: usize, rank: usize, alpha: f64) -> Self {
        Self { a: Tensor::zeros(&[rank, d_in]), b: Tensor::zeros(&[d_out, rank]), alpha }
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }
}

/// A base weight `[d_out × d_in]` with its adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub weight: Tensor,
    pub lora: LoRAAdapter,
}

/// Intermediate kept for the backward pass: `x · Aᵀ`.
#[derive(Clone, Debug)]
pub(crate) struct ProjectionTape {
    xa: Option<Tensor>,
}

impl Projection {
    pub fn init(rng: &mut Rng, d_in: usize, d_out: usize, rank: usize, alpha: f64) -> Self {
        let weight = gaussian(rng, &[d_out, d_in]).scale(1.0 / (d_in as f64).sqrt());
        Self { weight, lora: LoRAAdapter::init(rng, d_in, d_out, rank, alpha) }
    }

    pub fn zeros(d_in: usize, d_out: usize, rank: usize, alpha: f64) -> Self {
        Self { weight: Tensor::zeros(&[d_out, d_in]), lora: LoRAAdapter::zeros(d_in, d_out, rank, alpha) }
    }

    pub(crate) fn forward(&self, x: &Tensor, use_lora: bool) -> Result<(Tensor, ProjectionTape)> {
        let mut y = matmul_nt(x, &self.weight)?;
        if !use_lora {
            return Ok((y, ProjectionTape { xa: None }));
        }
        let xa = matmul_nt(x, &self.lora.a)?;
        let delta = matmul_nt(&xa, &self.lora.b)?;
        y.axpy(self.lora.scale(), &delta)?;
        Ok((y, ProjectionTape { xa: Some(xa) }))
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
    pub(crate) fn backward(
        &self,
        x: &Tensor,
        tape: &ProjectionTape,
        dy: &Tensor,
        grad: &mut Projection,
    ) -> Result<Tensor> {
        grad.weight.axpy(1.0, &matmul_tn(dy, x)?)?;
        let mut dx = crate::numerics::matmul(dy, &self.weight)?;
        if let Some(xa) = &tape.xa {
            let s = self.lora.scale();
            grad.lora.b.axpy(s, &matmul_tn(dy, xa)?)?;
            let dxa = crate::numerics::matmul(dy, &self.lora.b)?.scale(s);
            grad.lora.a.axpy(1.0, &matmul_tn(&dxa, x)?)?;
            dx.axpy(1.0, &crate::numerics::matmul(&dxa, &self.lora.a)?)?;
        }
        Ok(dx)
    }
}

/// `W · x + (α / r) · B · A · x` for token rows `x` `[n × d_in]`.
pub fn lora_project(x: &Tensor, weight: &Tensor, adapter: &LoRAAdapter) -> Result<Tensor> {
    let (_, d_in) = x.dims2()?;
    let (d_out, w_in) = weight.dims2()?;
    let (r, a_in) = adapter.a.dims2()?;
    let (b_out, b_r) = adapter.b.dims2()?;
    if w_in != d_in || a_in != d_in || b_out != d_out || b_r != r {
        return dim_err(format!(
            "projection shapes disagree: x [_, {d_in}], W [{d_out}, {w_in}], A [{r}, {a_in}], B [{b_out}, {b_r}]"
        ));
    }
    let p = Projection { weight: weight.clone(), lora: adapter.clone() };
    Ok(p.forward(x, true)?.0)
}
