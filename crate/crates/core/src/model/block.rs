use super::lora::{Projection, ProjectionTape};
use crate::error::{dim_err, Result};
use crate::memory::fuse_kv;
use crate::numerics::{dot, gaussian, matmul, matmul_nt, matmul_tn, softmax_in_place, Rng, Tensor};
use crate::par;
use crate::sparse_cache::SparseLayerKV;

const RMS_EPS: f64 = 1e-5;

/// Pre-norm transformer block whose attention reads the retrieved long-term
/// cache ahead of the local tokens, with adapters on every projection.
#[derive(Clone, Debug, PartialEq)]
pub struct DualMemoryBlock {
    pub heads: usize,
    pub head_dim: usize,
    pub norm1: Tensor,
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
    pub o: Projection,
    pub norm2: Tensor,
    pub ff1_w: Tensor,
    pub ff1_b: Tensor,
    pub ff2_w: Tensor,
    pub ff2_b: Tensor,
}

/// Block output plus the local (pre-fusion) projections, each
/// `[T × heads × head_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockOutput {
    pub out: Tensor,
    pub q_local: Tensor,
    pub k_local: Tensor,
    pub v_local: Tensor,
}

#[derive(Clone, Debug)]
pub(crate) struct BlockTape {
    x: Tensor,
    n1: Tensor,
    inv_rms1: Vec<f64>,
    tq: ProjectionTape,
    tk: ProjectionTape,
    tv: ProjectionTape,
    q: Tensor,
    kf: Tensor,
    vf: Tensor,
    probs: Vec<Vec<f64>>,
    retrieved_tokens: usize,
    attn: Tensor,
    to: ProjectionTape,
    x1: Tensor,
    n2: Tensor,
    inv_rms2: Vec<f64>,
    pre: Tensor,
    act: Tensor,
}

pub(crate) fn rms_norm(x: &Tensor, gain: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (t, d) = x.dims2()?;
    if gain.len() != d {
        return dim_err(format!("norm gain of width {} for {d}-wide tokens", gain.len()));
    }
    let mut out = x.data().to_vec();
    let mut inv = Vec::with_capacity(t);
    for row in out.chunks_mut(d) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + RMS_EPS).sqrt();
        for (v, g) in row.iter_mut().zip(gain.data()) {
            *v *= r * g;
        }
        inv.push(r);
    }
    Ok((Tensor::new(vec![t, d], out)?, inv))
}

pub(crate) fn rms_norm_backward(
    x: &Tensor,
    inv: &[f64],
    gain: &Tensor,
    dy: &Tensor,
    dgain: &mut Tensor,
) -> Result<Tensor> {
    let (_, d) = x.dims2()?;
    let mut dx = vec![0.0; x.len()];
    let g = gain.data();
    let dg = dgain.data_mut();
    for (i, ((xr, dyr), dxr)) in x.data().chunks(d).zip(dy.data().chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
        let r = inv[i];
        let mut proj = 0.0;
        for c in 0..d {
            let xhat = xr[c] * r;
            dg[c] += dyr[c] * xhat;
            proj += dyr[c] * g[c] * xhat;
        }
        proj /= d as f64;
        for c in 0..d {
            dxr[c] = r * (dyr[c] * g[c] - xr[c] * r * proj);
        }
    }
    Tensor::new(x.shape().to_vec(), dx)
}

pub(crate) fn add_row_bias(x: &mut Tensor, b: &Tensor) {
    let d = b.len();
    for row in x.data_mut().chunks_mut(d) {
        for (v, bb) in row.iter_mut().zip(b.data()) {
            *v += bb;
        }
    }
}

pub(crate) fn column_sums(x: &Tensor) -> Tensor {
    let d = x.shape()[x.rank() - 1];
    let mut s = vec![0.0; d];
    for row in x.data().chunks(d) {
        for (a, v) in s.iter_mut().zip(row) {
            *a += v;
        }
    }
    Tensor::from_parts(vec![d], s)
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn silu_grad(v: f64) -> f64 {
    let s = 1.0 / (1.0 + (-v).exp());
    s * (1.0 + v * (1.0 - s))
}

impl DualMemoryBlock {
    pub fn init(rng: &mut Rng, heads: usize, head_dim: usize, ffn: usize, rank: usize, alpha: f64) -> Self {
        let d = heads * head_dim;
        Self {
            heads,
            head_dim,
            norm1: Tensor::filled(&[d], 1.0),
            q: Projection::init(rng, d, d, rank, alpha),
            k: Projection::init(rng, d, d, rank, alpha),
            v: Projection::init(rng, d, d, rank, alpha),
            o: Projection::init(rng, d, d, rank, alpha),
            norm2: Tensor::filled(&[d], 1.0),
            ff1_w: gaussian(rng, &[ffn, d]).scale(1.0 / (d as f64).sqrt()),
            ff1_b: Tensor::zeros(&[ffn]),
            ff2_w: gaussian(rng, &[d, ffn]).scale(1.0 / (ffn as f64).sqrt()),
            ff2_b: Tensor::zeros(&[d]),
        }
    }

    pub fn zeros(heads: usize, head_dim: usize, ffn: usize, rank: usize, alpha: f64) -> Self {
        let d = heads * head_dim;
        Self {
            heads,
            head_dim,
            norm1: Tensor::zeros(&[d]),
            q: Projection::zeros(d, d, rank, alpha),
            k: Projection::zeros(d, d, rank, alpha),
            v: Projection::zeros(d, d, rank, alpha),
            o: Projection::zeros(d, d, rank, alpha),
            norm2: Tensor::zeros(&[d]),
            ff1_w: Tensor::zeros(&[ffn, d]),
            ff1_b: Tensor::zeros(&[ffn]),
            ff2_w: Tensor::zeros(&[d, ffn]),
            ff2_b: Tensor::zeros(&[d]),
        }
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Forward over `x` `[T × width]` with optional retrieved caches for
    /// this layer. Returns the block output and the local Q/K/V.
    pub fn forward(&self, x: &Tensor, retrieved: &[SparseLayerKV]) -> Result<BlockOutput> {
        Ok(self.forward_recorded(x, retrieved, true)?.0)
    }

    /// The same block with every adapter switched off.
    pub fn forward_base(&self, x: &Tensor, retrieved: &[SparseLayerKV]) -> Result<BlockOutput> {
        Ok(self.forward_recorded(x, retrieved, false)?.0)
    }

    pub(crate) fn forward_recorded(
        &self,
        x: &Tensor,
        retrieved: &[SparseLayerKV],
        use_lora: bool,
    ) -> Result<(BlockOutput, BlockTape)> {
        let (t, d) = x.dims2()?;
        if d != self.width() {
            return dim_err(format!("block width {} got {d}-wide tokens", self.width()));
        }
        if t == 0 {
            return dim_err("block input has no tokens");
        }
        let (h, dk) = (self.heads, self.head_dim);
        let (n1, inv_rms1) = rms_norm(x, &self.norm1)?;
        let (q, tq) = self.q.forward(&n1, use_lora)?;
        let (k, tk) = self.k.forward(&n1, use_lora)?;
        let (v, tv) = self.v.forward(&n1, use_lora)?;
        let k_local = k.reshape(vec![t, h, dk])?;
        let v_local = v.reshape(vec![t, h, dk])?;
        let (kf, vf) = fuse_kv(&k_local, &v_local, retrieved)?;
        let n = kf.shape()[0];
        let retrieved_tokens = n - t;
        let scale = 1.0 / (dk as f64).sqrt();

        let per_head: Vec<(Vec<f64>, Vec<f64>)> = par::map_range(h, |head| {
            let mut probs = vec![0.0; t * n];
            let mut out = vec![0.0; t * dk];
            for i in 0..t {
                let qi = &q.data()[i * d + head * dk..][..dk];
                let row = &mut probs[i * n..(i + 1) * n];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(qi, &kf.data()[(j * h + head) * dk..][..dk]) * scale;
                }
                softmax_in_place(row, None);
                let oi = &mut out[i * dk..(i + 1) * dk];
                for (j, &a) in row.iter().enumerate() {
                    for (o, &vv) in oi.iter_mut().zip(&vf.data()[(j * h + head) * dk..][..dk]) {
                        *o += a * vv;
                    }
                }
            }
            (probs, out)
        });
        let mut attn = vec![0.0; t * d];
        let mut probs = Vec::with_capacity(h);
        for (head, (p, o)) in per_head.into_iter().enumerate() {
            for i in 0..t {
                attn[i * d + head * dk..][..dk].copy_from_slice(&o[i * dk..(i + 1) * dk]);
            }
            probs.push(p);
        }
        let attn = Tensor::new(vec![t, d], attn)?;
        let (proj, to) = self.o.forward(&attn, use_lora)?;
        let x1 = x.add(&proj)?;

        let (n2, inv_rms2) = rms_norm(&x1, &self.norm2)?;
        let mut pre = matmul_nt(&n2, &self.ff1_w)?;
        add_row_bias(&mut pre, &self.ff1_b);
        let act = pre.map(silu);
        let mut ff = matmul_nt(&act, &self.ff2_w)?;
        add_row_bias(&mut ff, &self.ff2_b);
        let out = x1.add(&ff)?;

        let q_local = q.clone().reshape(vec![t, h, dk])?;
        let output = BlockOutput { out, q_local, k_local, v_local };
        let tape = BlockTape {
            x: x.clone(),
            n1,
            inv_rms1,
            tq,
            tk,
            tv,
            q,
            kf,
            vf,
            probs,
            retrieved_tokens,
            attn,
            to,
            x1,
            n2,
            inv_rms2,
            pre,
            act,
        };
        Ok((output, tape))
    }

    /// Backward through one recorded forward. Accumulates into `grad` and
    /// returns `∂L/∂x`. Retrieved caches are constants.
    pub(crate) fn backward(&self, tape: &BlockTape, dout: &Tensor, grad: &mut DualMemoryBlock) -> Result<Tensor> {
        let (t, d) = tape.x.dims2()?;
        let (h, dk) = (self.heads, self.head_dim);
        let n = tape.kf.shape()[0];
        let r0 = tape.retrieved_tokens;

        // feed-forward branch
        grad.ff2_w.axpy(1.0, &matmul_tn(dout, &tape.act)?)?;
        grad.ff2_b.axpy(1.0, &column_sums(dout))?;
        let dact = matmul(dout, &self.ff2_w)?;
        let dpre = dact.zip_map(&tape.pre, |g, p| g * silu_grad(p))?;
        grad.ff1_w.axpy(1.0, &matmul_tn(&dpre, &tape.n2)?)?;
        grad.ff1_b.axpy(1.0, &column_sums(&dpre))?;
        let dn2 = matmul(&dpre, &self.ff1_w)?;
        let mut dx1 = dout.clone();
        dx1.axpy(1.0, &rms_norm_backward(&tape.x1, &tape.inv_rms2, &self.norm2, &dn2, &mut grad.norm2)?)?;

        // attention branch
        let dattn = self.o.backward(&tape.attn, &tape.to, &dx1, &mut grad.o)?;
        let scale = 1.0 / (dk as f64).sqrt();
        let per_head: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = par::map_range(h, |head| {
            let probs = &tape.probs[head];
            let (kf, vf, q) = (tape.kf.data(), tape.vf.data(), tape.q.data());
            let mut dq = vec![0.0; t * dk];
            let mut dkl = vec![0.0; t * dk];
            let mut dvl = vec![0.0; t * dk];
            let mut da = vec![0.0; n];
            for i in 0..t {
                let doi = &dattn.data()[i * d + head * dk..][..dk];
                let ai = &probs[i * n..(i + 1) * n];
                for (j, g) in da.iter_mut().enumerate() {
                    *g = dot(doi, &vf[(j * h + head) * dk..][..dk]);
                }
                let inner: f64 = ai.iter().zip(&da).map(|(a, g)| a * g).sum();
                let qi = &q[i * d + head * dk..][..dk];
                let dqi = &mut dq[i * dk..(i + 1) * dk];
                for j in 0..n {
                    let ds = ai[j] * (da[j] - inner) * scale;
                    let kj = &kf[(j * h + head) * dk..][..dk];
                    for c in 0..dk {
                        dqi[c] += ds * kj[c];
                    }
                    if j >= r0 {
                        let l = j - r0;
                        for c in 0..dk {
                            dkl[l * dk + c] += ds * qi[c];
                            dvl[l * dk + c] += ai[j] * doi[c];
                        }
                    }
                }
            }
            (dq, dkl, dvl)
        });
        let mut dq = vec![0.0; t * d];
        let mut dkk = vec![0.0; t * d];
        let mut dvv = vec![0.0; t * d];
        for (head, (a, b, c)) in per_head.into_iter().enumerate() {
            for i in 0..t {
                let at = i * d + head * dk;
                dq[at..at + dk].copy_from_slice(&a[i * dk..(i + 1) * dk]);
                dkk[at..at + dk].copy_from_slice(&b[i * dk..(i + 1) * dk]);
                dvv[at..at + dk].copy_from_slice(&c[i * dk..(i + 1) * dk]);
            }
        }
        let dq = Tensor::new(vec![t, d], dq)?;
        let dkk = Tensor::new(vec![t, d], dkk)?;
        let dvv = Tensor::new(vec![t, d], dvv)?;
        let mut dn1 = self.q.backward(&tape.n1, &tape.tq, &dq, &mut grad.q)?;
        dn1.axpy(1.0, &self.k.backward(&tape.n1, &tape.tk, &dkk, &mut grad.k)?)?;
        dn1.axpy(1.0, &self.v.backward(&tape.n1, &tape.tv, &dvv, &mut grad.v)?)?;
        let mut dx = dx1;
        dx.axpy(1.0, &rms_norm_backward(&tape.x, &tape.inv_rms1, &self.norm1, &dn1, &mut grad.norm1)?)?;
        Ok(dx)
    }

    pub(crate) fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("norm1", &self.norm1),
            ("q.weight", &self.q.weight),
            ("q.lora_a", &self.q.lora.a),
            ("q.lora_b", &self.q.lora.b),
            ("k.weight", &self.k.weight),
            ("k.lora_a", &self.k.lora.a),
            ("k.lora_b", &self.k.lora.b),
            ("v.weight", &self.v.weight),
            ("v.lora_a", &self.v.lora.a),
            ("v.lora_b", &self.v.lora.b),
            ("o.weight", &self.o.weight),
            ("o.lora_a", &self.o.lora.a),
            ("o.lora_b", &self.o.lora.b),
            ("norm2", &self.norm2),
            ("ff1.weight", &self.ff1_w),
            ("ff1.bias", &self.ff1_b),
            ("ff2.weight", &self.ff2_w),
            ("ff2.bias", &self.ff2_b),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("norm1", &mut self.norm1),
            ("q.weight", &mut self.q.weight),
            ("q.lora_a", &mut self.q.lora.a),
            ("q.lora_b", &mut self.q.lora.b),
            ("k.weight", &mut self.k.weight),
            ("k.lora_a", &mut self.k.lora.a),
            ("k.lora_b", &mut self.k.lora.b),
            ("v.weight", &mut self.v.weight),
            ("v.lora_a", &mut self.v.lora.a),
            ("v.lora_b", &mut self.v.lora.b),
            ("o.weight", &mut self.o.weight),
            ("o.lora_a", &mut self.o.lora.a),
            ("o.lora_b", &mut self.o.lora.b),
            ("norm2", &mut self.norm2),
            ("ff1.weight", &mut self.ff1_w),
            ("ff1.bias", &mut self.ff1_b),
            ("ff2.weight", &mut self.ff2_w),
            ("ff2.bias", &mut self.ff2_b),
        ]
    }
}
