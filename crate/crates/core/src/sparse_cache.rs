//! Probe-based sparse KV compression and attention over the compressed cache.
//!
//! Probe queries score every cached token by the attention mass they send to
//! it (summed over probes and heads). Scores are divided by `L − p + 1`
//! (1-based position `p`), so the newest token is divided by 1 and the oldest
//! by `L`. Tokens are then kept greedily in descending score order until a
//! `τ` fraction of the total score mass is covered.
//!
//! Token indices are 0-based throughout this crate.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{dot, softmax_in_place, AttentionMask, Tensor};
use crate::par;

/// Keys `[L × H × d_k]` and values `[L × H × d_v]` for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerKV {
    k: Tensor,
    v: Tensor,
}

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[a, b, c] => Ok((a, b, c)),
        s => dim_err(format!("{what} must be [tokens, heads, dim], got {s:?}")),
    }
}

impl LayerKV {
    pub fn new(k: Tensor, v: Tensor) -> Result<Self> {
        let (lk, hk, _) = dims3(&k, "keys")?;
        let (lv, hv, _) = dims3(&v, "values")?;
        if lk != lv || hk != hv {
            return dim_err(format!("keys {:?} and values {:?} disagree", k.shape(), v.shape()));
        }
        if lk == 0 {
            return dim_err("a layer cache needs at least one token");
        }
        Ok(Self { k, v })
    }

    pub fn keys(&self) -> &Tensor {
        &self.k
    }

    pub fn values(&self) -> &Tensor {
        &self.v
    }

    pub fn len(&self) -> usize {
        self.k.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn heads(&self) -> usize {
        self.k.shape()[1]
    }

    pub fn key_dim(&self) -> usize {
        self.k.shape()[2]
    }

    pub fn value_dim(&self) -> usize {
        self.v.shape()[2]
    }

    pub fn into_parts(self) -> (Tensor, Tensor) {
        (self.k, self.v)
    }
}

/// Probe queries `[|P| × H × d_k]` plus, optionally, the token position each
/// probe was taken from.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSet {
    queries: Tensor,
    positions: Option<Vec<usize>>,
}

impl ProbeSet {
    pub fn new(queries: Tensor, positions: Option<Vec<usize>>) -> Result<Self> {
        let (p, _, _) = dims3(&queries, "probe queries")?;
        if p == 0 {
            return dim_err("probe set is empty");
        }
        if let Some(pos) = &positions {
            if pos.len() != p {
                return dim_err(format!("{} positions for {p} probes", pos.len()));
            }
        }
        Ok(Self { queries, positions })
    }

    pub fn queries(&self) -> &Tensor {
        &self.queries
    }

    pub fn positions(&self) -> Option<&[usize]> {
        self.positions.as_deref()
    }

    pub fn len(&self) -> usize {
        self.queries.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Lower-triangular mask from the probes' source positions: a probe taken
    /// at position `p` sees tokens `0..=p`. `None` without positions.
    pub fn causal_mask(&self, tokens: usize) -> Option<AttentionMask> {
        self.positions
            .as_ref()
            .map(|pos| AttentionMask::causal_prefix(pos, tokens))
    }
}

/// Where probe queries are taken from within a segment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeStrategy {
    /// The last `n` token queries.
    #[default]
    Recent,
    /// `n` queries spread evenly across the segment, ending at the last token.
    Stride,
}

/// Pick probes out of the segment's own queries `[L × H × d_k]`.
pub fn select_probes(queries: &Tensor, count: usize, strategy: ProbeStrategy) -> Result<ProbeSet> {
    let (l, h, d) = dims3(queries, "queries")?;
    if l == 0 || count == 0 {
        return dim_err("need at least one query and one probe");
    }
    let n = count.min(l);
    let positions: Vec<usize> = match strategy {
        ProbeStrategy::Recent => (l - n..l).collect(),
        ProbeStrategy::Stride => (1..=n).map(|i| i * l / n - 1).collect(),
    };
    let row = h * d;
    let data = positions
        .iter()
        .flat_map(|&p| queries.data()[p * row..(p + 1) * row].iter().copied())
        .collect();
    ProbeSet::new(Tensor::from_parts(vec![n, h, d], data), Some(positions))
}

/// Probe attention weights `A[i, p, h]`, shaped `[|P| × L × H]`. Each
/// `(i, h)` slice sums to one over tokens.
pub fn probe_attention(
    probes: &ProbeSet,
    kv: &LayerKV,
    mask: Option<&AttentionMask>,
) -> Result<Tensor> {
    let (np, hp, dp) = dims3(&probes.queries, "probe queries")?;
    let (l, h, d) = (kv.len(), kv.heads(), kv.key_dim());
    if hp != h || dp != d {
        return dim_err(format!("probes [{np}, {hp}, {dp}] vs keys [{l}, {h}, {d}]"));
    }
    if let Some(m) = mask {
        if m.shape() != (np, l) {
            return dim_err(format!("mask {:?} vs probes x tokens ({np}, {l})", m.shape()));
        }
    }
    let scale = 1.0 / (d as f64).sqrt();
    let (qd, kd) = (probes.queries.data(), kv.k.data());
    let per_probe: Vec<Result<Vec<f64>>> = par::map_range(np, |i| {
        let mut block = vec![0.0; l * h];
        let mut row = vec![0.0; l];
        for head in 0..h {
            let q = &qd[(i * h + head) * d..][..d];
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot(q, &kd[(j * h + head) * d..][..d]) * scale;
            }
            if !softmax_in_place(&mut row, mask.map(|m| m.row(i))) {
                return Err(Error::DegenerateRow { row: i });
            }
            for (j, &a) in row.iter().enumerate() {
                block[j * h + head] = a;
            }
        }
        Ok(block)
    });
    let mut data = Vec::with_capacity(np * l * h);
    for b in per_probe {
        data.extend(b?);
    }
    Ok(Tensor::from_parts(vec![np, l, h], data))
}

/// Raw importance `σ_p = Σ_i Σ_h A[i, p, h]`.
pub fn importance_scores(weights: &Tensor) -> Result<Vec<f64>> {
    let (np, l, h) = dims3(weights, "attention weights")?;
    let w = weights.data();
    let mut sigma = vec![0.0; l];
    for i in 0..np {
        for (p, s) in sigma.iter_mut().enumerate() {
            *s += w[(i * l + p) * h..][..h].iter().sum::<f64>();
        }
    }
    Ok(sigma)
}

/// Position-normalized importance `σ̃_p = σ_p / (L − p + 1)` for 1-based `p`.
pub fn normalize_importance(raw: &[f64]) -> Vec<f64> {
    let l = raw.len();
    raw.iter()
        .enumerate()
        .map(|(i, &s)| s / (l - i) as f64)
        .collect()
}

/// Which scores drive the cumulative-mass cut-off.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThresholdMode {
    /// Sort and accumulate the position-normalized scores.
    #[default]
    Normalized,
    /// Sort and accumulate the raw attention mass.
    Raw,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceProfile {
    pub layer: usize,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl ImportanceProfile {
    pub fn from_raw(layer: usize, raw: Vec<f64>) -> Self {
        let normalized = normalize_importance(&raw);
        Self { layer, raw, normalized }
    }

    pub fn scores(&self, mode: ThresholdMode) -> &[f64] {
        match mode {
            ThresholdMode::Normalized => &self.normalized,
            ThresholdMode::Raw => &self.raw,
        }
    }

    pub fn select(&self, tau: f64, mode: ThresholdMode) -> Result<Vec<usize>> {
        select_retained(self.scores(mode), tau)
    }
}

/// Smallest set of top-scoring tokens whose score mass reaches `tau` of the
/// total. Ties go to the earlier position. At `tau = 1` every token is kept.
/// Returned indices are ascending.
pub fn select_retained(scores: &[f64], tau: f64) -> Result<Vec<usize>> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Range(format!("threshold {tau} outside (0, 1]")));
    }
    if scores.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
        return Err(Error::Range("importance scores must be finite and non-negative".into()));
    }
    let l = scores.len();
    if l == 0 {
        return Ok(Vec::new());
    }
    if tau == 1.0 {
        return Ok((0..l).collect());
    }
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let total: f64 = order.iter().map(|&i| scores[i]).sum();
    let goal = tau * total;
    let mut acc = 0.0;
    let mut keep = l;
    for (r, &i) in order.iter().enumerate() {
        acc += scores[i];
        if acc >= goal {
            keep = r + 1;
            break;
        }
    }
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// A compressed layer cache: the retained token indices and their rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseLayerKV {
    retained: Vec<usize>,
    k: Tensor,
    v: Tensor,
    origin_length: usize,
}

impl SparseLayerKV {
    /// Assemble from parts, e.g. when decoding a file.
    pub fn from_parts(retained: Vec<usize>, k: Tensor, v: Tensor, origin_length: usize) -> Result<Self> {
        let (lk, hk, _) = dims3(&k, "sparse keys")?;
        let (lv, hv, _) = dims3(&v, "sparse values")?;
        if lk != retained.len() || lv != lk || hk != hv {
            return dim_err("sparse cache rows disagree with retained indices");
        }
        if retained.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Range("retained indices must be strictly ascending".into()));
        }
        if let Some(&last) = retained.last() {
            if last >= origin_length {
                return Err(Error::Index { index: last, len: origin_length });
            }
        }
        Ok(Self { retained, k, v, origin_length })
    }

    /// A cache that holds no tokens, with the given head layout.
    pub fn empty(heads: usize, key_dim: usize, value_dim: usize) -> Self {
        Self {
            retained: Vec::new(),
            k: Tensor::zeros(&[0, heads, key_dim]),
            v: Tensor::zeros(&[0, heads, value_dim]),
            origin_length: 0,
        }
    }

    pub fn retained_indices(&self) -> &[usize] {
        &self.retained
    }

    pub fn keys(&self) -> &Tensor {
        &self.k
    }

    pub fn values(&self) -> &Tensor {
        &self.v
    }

    pub fn origin_length(&self) -> usize {
        self.origin_length
    }

    pub fn len(&self) -> usize {
        self.retained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.retained.is_empty()
    }

    pub fn heads(&self) -> usize {
        self.k.shape()[1]
    }

    pub fn key_dim(&self) -> usize {
        self.k.shape()[2]
    }

    pub fn value_dim(&self) -> usize {
        self.v.shape()[2]
    }

    /// `r / L`, the fraction of the original tokens kept.
    pub fn retained_ratio(&self) -> f64 {
        if self.origin_length == 0 {
            0.0
        } else {
            self.len() as f64 / self.origin_length as f64
        }
    }

    /// Same rows rounded through `f32`, as they come back from disk.
    pub fn round_to_f32(&self) -> Self {
        Self {
            retained: self.retained.clone(),
            k: self.k.round_to_f32(),
            v: self.v.round_to_f32(),
            origin_length: self.origin_length,
        }
    }
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let shape = t.shape();
    let row = shape[1] * shape[2];
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
    }
    Tensor::from_parts(vec![idx.len(), shape[1], shape[2]], data)
}

/// Gather the retained rows of a layer cache.
pub fn compress(kv: &LayerKV, retained: &[usize]) -> Result<SparseLayerKV> {
    let l = kv.len();
    if let Some(&bad) = retained.iter().find(|&&i| i >= l) {
        return Err(Error::Index { index: bad, len: l });
    }
    let mut idx = retained.to_vec();
    idx.sort_unstable();
    idx.dedup();
    Ok(SparseLayerKV {
        k: gather_rows(&kv.k, &idx),
        v: gather_rows(&kv.v, &idx),
        retained: idx,
        origin_length: l,
    })
}

/// Softmax attention of per-head queries `[H × d_k]` over `[n × H × d]`
/// keys and values. Returns `[H × d_v]`.
fn attend(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (h, d) = q.dims2()?;
    let (n, hk, dk) = dims3(k, "keys")?;
    let (_, _, dv) = dims3(v, "values")?;
    if hk != h || dk != d {
        return dim_err(format!("query [{h}, {d}] vs keys [{n}, {hk}, {dk}]"));
    }
    if n == 0 {
        return Err(Error::EmptyCache);
    }
    let scale = 1.0 / (d as f64).sqrt();
    let (kd, vd) = (k.data(), v.data());
    let mut out = vec![0.0; h * dv];
    let mut alpha = vec![0.0; n];
    for head in 0..h {
        let qh = &q.data()[head * d..][..d];
        for (j, a) in alpha.iter_mut().enumerate() {
            *a = dot(qh, &kd[(j * h + head) * d..][..d]) * scale;
        }
        softmax_in_place(&mut alpha, None);
        let o = &mut out[head * dv..][..dv];
        for (j, &a) in alpha.iter().enumerate() {
            for (x, &y) in o.iter_mut().zip(&vd[(j * h + head) * dv..][..dv]) {
                *x += a * y;
            }
        }
    }
    Ok(Tensor::from_parts(vec![h, dv], out))
}

/// Attention of one query `[H × d_k]` restricted to the retained tokens.
pub fn sparse_attention(q: &Tensor, cache: &SparseLayerKV) -> Result<Tensor> {
    if cache.is_empty() {
        return Err(Error::EmptyCache);
    }
    attend(q, &cache.k, &cache.v)
}

/// Attention of one query over every token of an uncompressed layer cache.
pub fn dense_attention(q: &Tensor, kv: &LayerKV) -> Result<Tensor> {
    attend(q, &kv.k, &kv.v)
}

fn probe_query(probes: &ProbeSet, i: usize) -> Tensor {
    let s = probes.queries.shape();
    let row = s[1] * s[2];
    Tensor::from_parts(vec![s[1], s[2]], probes.queries.data()[i * row..(i + 1) * row].to_vec())
}

/// L2 distance between sparse and dense attention outputs, stacked over all
/// probe queries.
pub fn probe_error(probes: &ProbeSet, kv: &LayerKV, cache: &SparseLayerKV) -> Result<f64> {
    let mut sq = 0.0;
    for i in 0..probes.len() {
        let q = probe_query(probes, i);
        let dense = dense_attention(&q, kv)?;
        let sparse = sparse_attention(&q, cache)?;
        sq += dense.sub(&sparse)?.data().iter().map(|x| x * x).sum::<f64>();
    }
    Ok(sq.sqrt())
}

/// Compression settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionConfig {
    pub tau: f64,
    pub probe_count: usize,
    pub probe_strategy: ProbeStrategy,
    pub mode: ThresholdMode,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            tau: 0.9,
            probe_count: 4,
            probe_strategy: ProbeStrategy::Recent,
            mode: ThresholdMode::Normalized,
        }
    }
}

/// Full compression of one layer: probe attention (causal when the probes
/// carry positions), importance, normalization, selection, gather.
pub fn compress_layer(
    layer: usize,
    kv: &LayerKV,
    probes: &ProbeSet,
    tau: f64,
    mode: ThresholdMode,
) -> Result<(SparseLayerKV, ImportanceProfile)> {
    let mask = probes.causal_mask(kv.len());
    let weights = probe_attention(probes, kv, mask.as_ref())?;
    let profile = ImportanceProfile::from_raw(layer, importance_scores(&weights)?);
    let keep = profile.select(tau, mode)?;
    Ok((compress(kv, &keep)?, profile))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian, Rng};
    use proptest::prelude::*;

    fn random_kv(rng: &mut Rng, l: usize, h: usize, d: usize) -> LayerKV {
        LayerKV::new(gaussian(rng, &[l, h, d]), gaussian(rng, &[l, h, d])).unwrap()
    }

    /// Scalar-loop oracle for probe attention, written independently.
    fn naive_probe_attention(q: &Tensor, k: &Tensor) -> Vec<f64> {
        let (p, h, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
        let l = k.shape()[0];
        let mut out = vec![0.0; p * l * h];
        for i in 0..p {
            for hh in 0..h {
                let mut logits = vec![0.0; l];
                for j in 0..l {
                    let mut s = 0.0;
                    for c in 0..d {
                        s += q.data()[(i * h + hh) * d + c] * k.data()[(j * h + hh) * d + c];
                    }
                    logits[j] = s / (d as f64).sqrt();
                }
                let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|x| (x - mx).exp()).sum();
                for j in 0..l {
                    out[(i * l + j) * h + hh] = (logits[j] - mx).exp() / z;
                }
            }
        }
        out
    }

    #[test]
    fn probe_attention_examples() {
        let mut rng = Rng::new(5);
        // identical keys -> uniform
        let key = gaussian(&mut rng, &[1, 2, 4]);
        let k = Tensor::new(vec![6, 2, 4], key.data().repeat(6)).unwrap();
        let kv = LayerKV::new(k, Tensor::zeros(&[6, 2, 4])).unwrap();
        let probes = ProbeSet::new(gaussian(&mut rng, &[3, 2, 4]), None).unwrap();
        let a = probe_attention(&probes, &kv, None).unwrap();
        assert!(a.data().iter().all(|&x| (x - 1.0 / 6.0).abs() < 1e-15));

        let kv1 = random_kv(&mut rng, 1, 2, 4);
        let a = probe_attention(&probes, &kv1, None).unwrap();
        assert!(a.data().iter().all(|&x| x == 1.0));

        let kv = random_kv(&mut rng, 5, 2, 4);
        let a = probe_attention(&probes, &kv, None).unwrap();
        let oracle = naive_probe_attention(probes.queries(), kv.keys());
        for (x, y) in a.data().iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn probe_attention_rejects_bad_dims_and_masked_rows() {
        let mut rng = Rng::new(1);
        let kv = random_kv(&mut rng, 4, 2, 4);
        let probes = ProbeSet::new(gaussian(&mut rng, &[2, 2, 3]), None).unwrap();
        assert!(matches!(probe_attention(&probes, &kv, None), Err(Error::Dimension(_))));
        let probes = ProbeSet::new(gaussian(&mut rng, &[2, 2, 4]), None).unwrap();
        let mask = AttentionMask::new(2, 4, vec![true, false, false, false, false, false, false, false]).unwrap();
        assert!(matches!(
            probe_attention(&probes, &kv, Some(&mask)),
            Err(Error::DegenerateRow { row: 1 })
        ));
    }

    #[test]
    fn importance_examples() {
        // uniform weights
        let (p, l, h) = (3, 4, 2);
        let w = Tensor::filled(&[p, l, h], 1.0 / l as f64);
        let s = importance_scores(&w).unwrap();
        assert!(s.iter().all(|&x| (x - (p * h) as f64 / l as f64).abs() < 1e-12));
        // one probe, one head
        let row = Tensor::new(vec![1, 3, 1], vec![0.2, 0.3, 0.5]).unwrap();
        assert_eq!(importance_scores(&row).unwrap(), vec![0.2, 0.3, 0.5]);
        // 4-probe, 3-head random case against a double loop
        let mut rng = Rng::new(9);
        let kv = random_kv(&mut rng, 7, 3, 4);
        let probes = ProbeSet::new(gaussian(&mut rng, &[4, 3, 4]), None).unwrap();
        let a = probe_attention(&probes, &kv, None).unwrap();
        let s = importance_scores(&a).unwrap();
        for pos in 0..7 {
            let mut acc = 0.0;
            for i in 0..4 {
                for hh in 0..3 {
                    acc += a.data()[(i * 7 + pos) * 3 + hh];
                }
            }
            assert!((acc - s[pos]).abs() < 1e-12);
        }
        assert!((s.iter().sum::<f64>() - 12.0).abs() < 1e-6);
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_importance(&[0.4]), vec![0.4]);
        let n = normalize_importance(&[1.0, 1.0, 1.0]);
        assert_eq!(n, vec![1.0 / 3.0, 0.5, 1.0]);
        assert_eq!(normalize_importance(&[0.0; 4]), vec![0.0; 4]);
    }

    #[test]
    fn selection_examples() {
        let s = [0.7, 0.2, 0.1];
        assert_eq!(select_retained(&s, 1.0).unwrap(), vec![0, 1, 2]);
        assert_eq!(select_retained(&s, 0.6).unwrap(), vec![0]);
        assert_eq!(select_retained(&s, 0.8).unwrap(), vec![0, 1]);
        assert!(matches!(select_retained(&s, 0.0), Err(Error::Range(_))));
        assert!(matches!(select_retained(&s, 1.5), Err(Error::Range(_))));
        // ties go to the lower position
        assert_eq!(select_retained(&[0.5, 0.5], 0.5).unwrap(), vec![0]);
    }

    #[test]
    fn constant_importance_keeps_most_recent() {
        let prof = ImportanceProfile::from_raw(0, vec![1.0; 8]);
        let keep = prof.select(0.5, ThresholdMode::Normalized).unwrap();
        assert_eq!(*keep.last().unwrap(), 7);
        let k = keep.len();
        assert_eq!(keep, (8 - k..8).collect::<Vec<_>>());
    }

    #[test]
    fn compress_examples() {
        let mut rng = Rng::new(2);
        let kv = random_kv(&mut rng, 3, 2, 4);
        let all = compress(&kv, &[0, 1, 2]).unwrap();
        assert!(all.keys().bit_eq(kv.keys()) && all.values().bit_eq(kv.values()));
        let one = compress(&kv, &[1]).unwrap();
        assert_eq!(one.keys().data(), &kv.keys().data()[8..16]);
        assert_eq!(one.origin_length(), 3);
        assert!(matches!(compress(&kv, &[3]), Err(Error::Index { index: 3, len: 3 })));
    }

    #[test]
    fn sparse_attention_examples() {
        let mut rng = Rng::new(4);
        let kv = random_kv(&mut rng, 5, 2, 3);
        let q = gaussian(&mut rng, &[2, 3]);
        let single = compress(&kv, &[3]).unwrap();
        let h = sparse_attention(&q, &single).unwrap();
        assert_eq!(h.data(), &kv.values().data()[18..24]);

        let full = compress(&kv, &[0, 1, 2, 3, 4]).unwrap();
        let d = sparse_attention(&q, &full).unwrap().max_abs_diff(&dense_attention(&q, &kv).unwrap()).unwrap();
        assert!(d < 1e-10);

        let key = gaussian(&mut rng, &[1, 2, 3]);
        let same = LayerKV::new(Tensor::new(vec![4, 2, 3], key.data().repeat(4)).unwrap(), gaussian(&mut rng, &[4, 2, 3])).unwrap();
        let c = compress(&same, &[0, 2, 3]).unwrap();
        let h = sparse_attention(&q, &c).unwrap();
        for head in 0..2 {
            for ch in 0..3 {
                let m = [0, 2, 3].iter().map(|&j| same.values().data()[(j * 2 + head) * 3 + ch]).sum::<f64>() / 3.0;
                assert!((h.data()[head * 3 + ch] - m).abs() < 1e-12);
            }
        }
        assert!(matches!(sparse_attention(&q, &SparseLayerKV::empty(2, 3, 3)), Err(Error::EmptyCache)));
    }

    #[test]
    fn probe_selection_strategies() {
        let q = Tensor::zeros(&[10, 1, 2]);
        let p = select_probes(&q, 4, ProbeStrategy::Recent).unwrap();
        assert_eq!(p.positions().unwrap(), &[6, 7, 8, 9]);
        let p = select_probes(&q, 4, ProbeStrategy::Stride).unwrap();
        assert_eq!(p.positions().unwrap(), &[1, 4, 6, 9]);
        let p = select_probes(&Tensor::zeros(&[2, 1, 2]), 4, ProbeStrategy::Recent).unwrap();
        assert_eq!(p.len(), 2);
    }

    proptest! {
        #[test]
        fn retained_count_monotone_in_tau(scores in proptest::collection::vec(0.0f64..1.0, 1..40), a in 0.01f64..1.0, b in 0.01f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let n_lo = select_retained(&scores, lo).unwrap().len();
            let n_hi = select_retained(&scores, hi).unwrap().len();
            prop_assert!(n_lo <= n_hi);
        }

        #[test]
        fn compress_copies_rows_exactly(seed in 0u64..200, l in 1usize..20) {
            let mut rng = Rng::new(seed);
            let kv = random_kv(&mut rng, l, 2, 3);
            let keep: Vec<usize> = (0..l).filter(|_| rng.bernoulli(0.5)).collect();
            let c = compress(&kv, &keep).unwrap();
            for (r, &i) in keep.iter().enumerate() {
                prop_assert_eq!(&c.keys().data()[r * 6..(r + 1) * 6], &kv.keys().data()[i * 6..(i + 1) * 6]);
                prop_assert_eq!(&c.values().data()[r * 6..(r + 1) * 6], &kv.values().data()[i * 6..(i + 1) * 6]);
            }
        }

        #[test]
        fn full_mass_matches_dense(seed in 0u64..200, l in 1usize..65, h in 1usize..5) {
            let mut rng = Rng::new(seed);
            let kv = random_kv(&mut rng, l, h, 4);
            let q = gaussian(&mut rng, &[l, h, 4]);
            let probes = select_probes(&q, 4, ProbeStrategy::Recent).unwrap();
            let (cache, _) = compress_layer(0, &kv, &probes, 1.0, ThresholdMode::Normalized).unwrap();
            prop_assert_eq!(cache.len(), l);
            prop_assert!(probe_error(&probes, &kv, &cache).unwrap() < 1e-10);
        }
    }
}
