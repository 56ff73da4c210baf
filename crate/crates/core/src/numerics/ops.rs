use super::Tensor;
use crate::error::{dim_err, Error, Result};
use crate::par;

/// Work size (multiply-adds) below which matrix products stay single-threaded.
const PAR_MATMUL_WORK: usize = 1 << 15;

/// Standard matrix product `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return dim_err(format!("matmul inner axes differ: {m}x{k} · {k2}x{n}"));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    let row = |i: usize, dst: &mut [f64]| {
        for (p, &aip) in ad[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (d, &bpj) in dst.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *d += aip * bpj;
            }
        }
    };
    run_rows(&mut out, m, n, m * n * k, row);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return dim_err(format!("matmul_nt inner axes differ: {m}x{k} · ({n}x{k2})ᵀ"));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    let row = |i: usize, dst: &mut [f64]| {
        let ai = &ad[i * k..(i + 1) * k];
        for (j, d) in dst.iter_mut().enumerate() {
            *d = dot(ai, &bd[j * k..(j + 1) * k]);
        }
    };
    run_rows(&mut out, m, n, m * n * k, row);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return dim_err(format!("matmul_tn inner axes differ: ({k}x{m})ᵀ · {k2}x{n}"));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    let row = |i: usize, dst: &mut [f64]| {
        for p in 0..k {
            let api = ad[p * m + i];
            if api == 0.0 {
                continue;
            }
            for (d, &bpj) in dst.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *d += api * bpj;
            }
        }
    };
    run_rows(&mut out, m, n, m * n * k, row);
    Ok(Tensor::from_parts(vec![m, n], out))
}

fn run_rows<F>(out: &mut [f64], m: usize, n: usize, work: usize, row: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if n == 0 || m == 0 {
        return;
    }
    if work >= PAR_MATMUL_WORK {
        par::for_each_chunk_mut(out, n, row);
    } else {
        out.chunks_mut(n).enumerate().for_each(|(i, d)| row(i, d));
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Which entries of a score matrix may receive attention.
///
/// Equivalent to an additive mask of `0` (allowed) and `−∞` (blocked).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return dim_err("mask length does not match its shape");
        }
        Ok(Self { rows, cols, allowed })
    }

    /// Parse an additive mask whose entries are `0` or `−∞`.
    pub fn from_additive(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        let allowed = values
            .iter()
            .map(|&v| {
                if v == 0.0 {
                    Ok(true)
                } else if v == f64::NEG_INFINITY {
                    Ok(false)
                } else {
                    Err(Error::Range(format!("mask entry {v} is neither 0 nor -inf")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows, cols, allowed)
    }

    /// Row `i` may attend columns `0..=limit[i]`.
    pub fn causal_prefix(limits: &[usize], cols: usize) -> Self {
        let allowed = limits
            .iter()
            .flat_map(|&lim| (0..cols).map(move |j| j <= lim))
            .collect();
        Self { rows: limits.len(), cols, allowed }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.cols..(i + 1) * self.cols]
    }
}

/// Numerically stable in-place softmax over one row. Blocked entries become
/// exactly zero. Returns `false` when every entry is blocked.
pub fn softmax_in_place(row: &mut [f64], allowed: Option<&[bool]>) -> bool {
    let ok = |j: usize| allowed.is_none_or(|a| a[j]);
    let max = row
        .iter()
        .enumerate()
        .filter(|(j, _)| ok(*j))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut total = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if ok(j) {
            *v = (*v - max).exp();
            total += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= total;
    }
    true
}

/// Row-wise softmax with an optional mask.
pub fn softmax_rows(x: &Tensor, mask: Option<&AttentionMask>) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    if let Some(mk) = mask {
        if mk.shape() != (m, n) {
            return dim_err(format!("mask {:?} does not match scores {m}x{n}", mk.shape()));
        }
    }
    let mut out = x.data().to_vec();
    for (i, row) in out.chunks_mut(n.max(1)).enumerate().take(m) {
        if !softmax_in_place(row, mask.map(|mk| mk.row(i))) {
            return Err(Error::DegenerateRow { row: i });
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Cosine similarity, clamped into `[−1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return dim_err(format!("cosine of vectors with lengths {} and {}", a.len(), b.len()));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Resample a `[C × T × H × W]` clip to `target` frames by piecewise-linear
/// interpolation along time. First and last frames map onto each other
/// exactly.
pub fn resample_temporal(clip: &Tensor, target: usize) -> Result<Tensor> {
    let [c, t, h, w] = clip_dims(clip)?;
    if t == 0 || target == 0 {
        return dim_err("temporal resampling needs at least one frame on each side");
    }
    let plane = h * w;
    let src = clip.data();
    let mut out = vec![0.0; c * target * plane];
    for k in 0..target {
        let pos = if target == 1 {
            0.0
        } else {
            (k * (t - 1)) as f64 / (target - 1) as f64
        };
        let lo = (pos.floor() as usize).min(t - 1);
        let hi = (lo + 1).min(t - 1);
        let frac = pos - lo as f64;
        for ch in 0..c {
            let dst = &mut out[(ch * target + k) * plane..][..plane];
            let a = &src[(ch * t + lo) * plane..][..plane];
            if frac == 0.0 {
                dst.copy_from_slice(a);
            } else {
                let b = &src[(ch * t + hi) * plane..][..plane];
                for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
                    *d = x + frac * (y - x);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, target, h, w], out))
}

/// Axis lengths of a `[C × T × H × W]` clip.
pub fn clip_dims(clip: &Tensor) -> Result<[usize; 4]> {
    match clip.shape() {
        &[c, t, h, w] => Ok([c, t, h, w]),
        s => dim_err(format!("expected a [C, T, H, W] clip, got shape {s:?}")),
    }
}
