//! Drift penalty over chunked quality series: relative deviation of each
//! chunk from the first, weighted toward early chunks.

use crate::error::{Error, Result};
use crate::numerics::{clip_dims, Tensor};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Per-chunk scores `M_1..M_N` of one metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualitySeries {
    pub metric_name: String,
    pub scores: Vec<f64>,
}

impl QualitySeries {
    pub fn new(metric_name: impl Into<String>, scores: Vec<f64>) -> Result<Self> {
        if scores.len() < 2 {
            return Err(Error::Size(format!("a series needs at least 2 chunks, got {}", scores.len())));
        }
        if !(scores[0] > 0.0) {
            return Err(Error::Reference(scores[0]));
        }
        Ok(Self { metric_name: metric_name.into(), scores })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NRDPConfig {
    pub chunks: usize,
    /// `w_2..w_N`.
    pub weights: Vec<f64>,
}

impl NRDPConfig {
    pub fn linear(chunks: usize) -> Result<Self> {
        Ok(Self { chunks, weights: default_weights(chunks)? })
    }

    pub fn new(chunks: usize, weights: Vec<f64>) -> Result<Self> {
        if chunks < 2 {
            return Err(Error::Config(format!("need at least 2 chunks, got {chunks}")));
        }
        if weights.len() != chunks - 1 {
            return Err(Error::Config(format!("{} weights for {chunks} chunks", weights.len())));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Config("weights must be positive".into()));
        }
        if weights.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Config("weights must be non-increasing".into()));
        }
        Ok(Self { chunks, weights })
    }
}

impl Default for NRDPConfig {
    fn default() -> Self {
        Self::linear(10).expect("ten chunks is valid")
    }
}

/// Split per-frame scores into `chunks` contiguous groups (earlier chunks
/// take the remainder) and average each.
pub fn chunk_series(metric_name: &str, frames: &[f64], chunks: usize) -> Result<QualitySeries> {
    if chunks == 0 || frames.len() < chunks {
        return Err(Error::Size(format!("{} frames cannot fill {chunks} chunks", frames.len())));
    }
    let base = frames.len() / chunks;
    let extra = frames.len() % chunks;
    let mut out = Vec::with_capacity(chunks);
    let mut at = 0;
    for i in 0..chunks {
        let n = base + usize::from(i < extra);
        out.push(frames[at..at + n].iter().sum::<f64>() / n as f64);
        at += n;
    }
    QualitySeries::new(metric_name, out)
}

/// `D_i = |M_i − M_1| / M_1` for `i = 2..N`.
pub fn drift(series: &QualitySeries) -> Result<Vec<f64>> {
    let m1 = series.scores[0];
    if !(m1 > 0.0) {
        return Err(Error::Reference(m1));
    }
    Ok(series.scores[1..].iter().map(|m| (m - m1).abs() / m1).collect())
}

/// `w_i = N − i + 1` for `i = 2..N`.
pub fn default_weights(chunks: usize) -> Result<Vec<f64>> {
    if chunks < 2 {
        return Err(Error::Config(format!("need at least 2 chunks, got {chunks}")));
    }
    Ok((2..=chunks).map(|i| (chunks - i + 1) as f64).collect())
}

pub fn nrdp_score(series: &QualitySeries, config: &NRDPConfig) -> Result<f64> {
    if series.len() != config.chunks || config.weights.len() + 1 != config.chunks {
        return Err(Error::Config(format!(
            "series of {} chunks against a {}-chunk config with {} weights",
            series.len(),
            config.chunks,
            config.weights.len()
        )));
    }
    Ok(drift(series)?.iter().zip(&config.weights).map(|(d, w)| d * w).sum())
}

/// Mean absolute horizontal and vertical difference per frame, plus `1e-6`.
pub fn proxy_clarity(clip: &Tensor) -> Result<Vec<f64>> {
    let [c, t, h, w] = clip_dims(clip)?;
    let hw = h * w;
    let pairs = c * (h * w.saturating_sub(1) + h.saturating_sub(1) * w);
    Ok((0..t)
        .map(|ti| {
            let mut acc = 0.0;
            for ci in 0..c {
                let f = &clip.data()[(ci * t + ti) * hw..][..hw];
                for y in 0..h {
                    for x in 0..w {
                        let v = f[y * w + x];
                        if x + 1 < w {
                            acc += (f[y * w + x + 1] - v).abs();
                        }
                        if y + 1 < h {
                            acc += (f[(y + 1) * w + x] - v).abs();
                        }
                    }
                }
            }
            acc / pairs.max(1) as f64 + 1e-6
        })
        .collect())
}

/// `1 / (1 + mean |frame_t − frame_{t−1}|)`; the first frame copies the
/// second frame's score.
pub fn proxy_smoothness(clip: &Tensor) -> Result<Vec<f64>> {
    let [c, t, h, w] = clip_dims(clip)?;
    if t < 2 {
        return Err(Error::Size(format!("smoothness needs 2 frames, got {t}")));
    }
    let hw = h * w;
    let mut out = vec![0.0; t];
    for ti in 1..t {
        let mut acc = 0.0;
        for ci in 0..c {
            let base = ci * t * hw;
            let (prev, cur) = (&clip.data()[base + (ti - 1) * hw..][..hw], &clip.data()[base + ti * hw..][..hw]);
            acc += prev.iter().zip(cur).map(|(a, b)| (b - a).abs()).sum::<f64>();
        }
        out[ti] = 1.0 / (1.0 + acc / (c * hw) as f64);
    }
    out[0] = out[1];
    Ok(out)
}

/// Built-in per-frame proxies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Proxy {
    Clarity,
    Smoothness,
}

impl Proxy {
    pub fn name(self) -> &'static str {
        match self {
            Proxy::Clarity => "clarity",
            Proxy::Smoothness => "smoothness",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "clarity" => Ok(Proxy::Clarity),
            "smoothness" => Ok(Proxy::Smoothness),
            other => Err(Error::Config(format!("unknown proxy metric {other:?}"))),
        }
    }

    pub fn frame_scores(self, clip: &Tensor) -> Result<Vec<f64>> {
        match self {
            Proxy::Clarity => proxy_clarity(clip),
            Proxy::Smoothness => proxy_smoothness(clip),
        }
    }
}

/// Concatenate clips along time, frame by frame.
pub fn concat_frames(clips: &[Tensor]) -> Result<Tensor> {
    let first = clips.first().ok_or_else(|| Error::Size("no clips to concatenate".into()))?;
    let [c, _, h, w] = clip_dims(first)?;
    let hw = h * w;
    let mut total = 0;
    for clip in clips {
        let [cc, t, hh, ww] = clip_dims(clip)?;
        if (cc, hh, ww) != (c, h, w) {
            return Err(Error::Dimension(format!("clip {:?} does not match {:?}", clip.shape(), first.shape())));
        }
        total += t;
    }
    let mut data = Vec::with_capacity(c * total * hw);
    for ci in 0..c {
        for clip in clips {
            let t = clip.shape()[1];
            data.extend_from_slice(&clip.data()[ci * t * hw..(ci + 1) * t * hw]);
        }
    }
    Tensor::new(vec![c, total, h, w], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub series: QualitySeries,
    pub drifts: Vec<f64>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NRDPReport {
    pub config: NRDPConfig,
    pub metrics: Vec<MetricReport>,
}

impl NRDPReport {
    pub fn evaluate(series: Vec<QualitySeries>, config: NRDPConfig) -> Result<Self> {
        let metrics = series
            .into_iter()
            .map(|s| {
                let score = nrdp_score(&s, &config)?;
                Ok(MetricReport { drifts: drift(&s)?, series: s, score })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, metrics })
    }

    /// Per-frame proxy scores of the whole video, chunked and scored.
    pub fn from_video(clips: &[Tensor], proxies: &[Proxy], config: NRDPConfig) -> Result<Self> {
        let video = concat_frames(clips)?;
        let series = crate::par::map_range(proxies.len(), |i| {
            chunk_series(proxies[i].name(), &proxies[i].frame_scores(&video)?, config.chunks)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Self::evaluate(series, config)
    }

    pub fn score(&self, metric: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.series.metric_name == metric).map(|m| m.score)
    }

    pub fn total(&self) -> f64 {
        self.metrics.iter().map(|m| m.score).sum()
    }
}

impl fmt::Display for NRDPReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" ");
        writeln!(f, "metric\tM_i\tD_i\tNRDP")?;
        for m in &self.metrics {
            writeln!(f, "{}\t{}\t{}\t{:.6}", m.series.metric_name, join(&m.series.scores), join(&m.drifts), m.score)?;
        }
        Ok(())
    }
}
