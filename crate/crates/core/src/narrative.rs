//! Structured narrative scripts and prompt embeddings.
//!
//! A script is one segment per line:
//!
//! ```text
//! # comment
//! [0-120] kitchen sink area, frame-indexed (training form)
//! [0s-5s] presenter in front of a skyline (inference form)
//! ```
//!
//! Both bounds of a span either carry the `s` suffix (seconds) or do not
//! (frames); a script uses one unit throughout.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default prompt-embedding width.
pub const DEFAULT_EMBED_DIM: usize = 256;

/// Length of one narrative segment in seconds-mode scripts.
pub const NOMINAL_SEGMENT_SECONDS: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpanUnit {
    Frames,
    Seconds,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NarrativeSegment {
    pub index: usize,
    pub start: u64,
    pub end: u64,
    pub prompt: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NarrativeScript {
    unit: SpanUnit,
    segments: Vec<NarrativeSegment>,
}

impl NarrativeScript {
    pub fn unit(&self) -> SpanUnit {
        self.unit
    }

    pub fn segments(&self) -> &[NarrativeSegment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Build a script from `(start, end, prompt)` triples, applying the same
    /// checks as the parser.
    pub fn from_spans<S: Into<String>>(
        unit: SpanUnit,
        spans: impl IntoIterator<Item = (u64, u64, S)>,
    ) -> Result<Self> {
        let raw = spans
            .into_iter()
            .enumerate()
            .map(|(i, (start, end, p))| RawSegment { line: i + 1, start, end, prompt: p.into() })
            .collect();
        Self::assemble(unit, raw)
    }

    fn assemble(unit: SpanUnit, mut raw: Vec<RawSegment>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Parse { line: 0, msg: "script has no segments".into() });
        }
        for r in &raw {
            if r.start >= r.end {
                return Err(Error::Parse {
                    line: r.line,
                    msg: format!("span start {} is not before end {}", r.start, r.end),
                });
            }
            if r.prompt.trim().is_empty() {
                return Err(Error::EmptyPrompt { line: Some(r.line) });
            }
        }
        raw.sort_by_key(|r| (r.start, r.line));
        for w in raw.windows(2) {
            if w[1].start < w[0].end {
                return Err(Error::Overlap {
                    line: w[1].line,
                    msg: format!(
                        "[{}-{}] overlaps [{}-{}] from line {}",
                        w[1].start, w[1].end, w[0].start, w[0].end, w[0].line
                    ),
                });
            }
        }
        if unit == SpanUnit::Seconds {
            for r in &raw {
                if r.end - r.start != NOMINAL_SEGMENT_SECONDS {
                    log::warn!(
                        "line {}: segment spans {}s, expected {}s",
                        r.line,
                        r.end - r.start,
                        NOMINAL_SEGMENT_SECONDS
                    );
                }
            }
        }
        let segments = raw
            .into_iter()
            .enumerate()
            .map(|(index, r)| NarrativeSegment { index, start: r.start, end: r.end, prompt: r.prompt })
            .collect();
        Ok(Self { unit, segments })
    }
}

impl fmt::Display for NarrativeScript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sfx = match self.unit {
            SpanUnit::Frames => "",
            SpanUnit::Seconds => "s",
        };
        for s in &self.segments {
            writeln!(f, "[{}{sfx}-{}{sfx}] {}", s.start, s.end, s.prompt)?;
        }
        Ok(())
    }
}

struct RawSegment {
    line: usize,
    start: u64,
    end: u64,
    prompt: String,
}

fn parse_bound(tok: &str, line: usize) -> Result<(u64, bool)> {
    let tok = tok.trim();
    let (digits, secs) = match tok.strip_suffix('s') {
        Some(d) => (d, true),
        None => (tok, false),
    };
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(Error::Parse { line, msg: format!("malformed span bound {tok:?}") });
    }
    let v = digits
        .parse()
        .map_err(|_| Error::Parse { line, msg: format!("span bound {tok:?} out of range") })?;
    Ok((v, secs))
}

/// Parse a narrative script.
pub fn parse_script(text: &str) -> Result<NarrativeScript> {
    let mut unit: Option<SpanUnit> = None;
    let mut raw = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: &str| Error::Parse { line: line_no, msg: msg.into() };
        let body = line.strip_prefix('[').ok_or_else(|| bad("expected '[' to open a span"))?;
        let (span, prompt) = body.split_once(']').ok_or_else(|| bad("unterminated span"))?;
        let (a, b) = span.split_once('-').ok_or_else(|| bad("span needs '<start>-<end>'"))?;
        let (start, sa) = parse_bound(a, line_no)?;
        let (end, sb) = parse_bound(b, line_no)?;
        if sa != sb {
            return Err(bad("both span bounds must use the same unit"));
        }
        let this = if sa { SpanUnit::Seconds } else { SpanUnit::Frames };
        match unit {
            None => unit = Some(this),
            Some(u) if u != this => return Err(bad("script mixes frame and second spans")),
            Some(_) => {}
        }
        let prompt = prompt.trim();
        if prompt.is_empty() {
            return Err(Error::EmptyPrompt { line: Some(line_no) });
        }
        raw.push(RawSegment { line: line_no, start, end, prompt: prompt.to_string() });
    }
    NarrativeScript::assemble(unit.unwrap_or(SpanUnit::Frames), raw)
}

/// Unit-norm prompt embedding tagged with the segment it came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PromptEmbedding {
    pub vector: Vec<f64>,
    pub source_index: usize,
}

impl PromptEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    /// The all-zero conditioning vector used when the prompt is dropped.
    pub fn dropped(dim: usize) -> Self {
        Self { vector: vec![0.0; dim], source_index: usize::MAX }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { vector: self.vector.iter().map(|v| v * c).collect(), source_index: self.source_index }
    }
}

/// Maps prompt text to a fixed-width unit vector.
pub trait PromptEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;

    fn embed_segment(&self, seg: &NarrativeSegment) -> Result<PromptEmbedding> {
        Ok(PromptEmbedding { vector: self.embed(&seg.prompt)?, source_index: seg.index })
    }
}

/// Signed feature hashing over lower-cased word tokens.
#[derive(Clone, Copy, Debug)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding width must be positive");
        Self { dim }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_EMBED_DIM)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Lower-cased alphanumeric runs.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

impl PromptEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim];
        let mut any = false;
        for tok in tokenize(text) {
            any = true;
            let h = fnv1a(tok.as_bytes());
            let slot = (h % self.dim as u64) as usize;
            v[slot] += if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
        }
        if !any {
            return Err(Error::EmptyPrompt { line: None });
        }
        if v.iter().all(|&x| x == 0.0) {
            // every token cancelled against another; fall back to the whole-text hash
            let h = fnv1a(text.to_lowercase().as_bytes());
            v[(h % self.dim as u64) as usize] = 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

/// Embed `text` with the default hash embedder of width `dim`.
pub fn embed_prompt(text: &str, dim: usize) -> Result<PromptEmbedding> {
    Ok(PromptEmbedding { vector: HashEmbedder::new(dim).embed(text)?, source_index: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::cosine;
    use proptest::prelude::*;

    #[test]
    fn frame_form() {
        let s = parse_script("[0-120] kitchen sink area").unwrap();
        assert_eq!(s.unit(), SpanUnit::Frames);
        assert_eq!(s.len(), 1);
        assert_eq!((s.segments()[0].start, s.segments()[0].end), (0, 120));
        assert_eq!(s.segments()[0].prompt, "kitchen sink area");
    }

    #[test]
    fn seconds_form() {
        let s = parse_script("[0s-5s] woman with short blonde hair").unwrap();
        assert_eq!(s.unit(), SpanUnit::Seconds);
        assert_eq!((s.segments()[0].start, s.segments()[0].end), (0, 5));
    }

    #[test]
    fn inverted_span_rejected() {
        assert!(matches!(parse_script("[10-5] x"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn comments_blank_lines_and_ordering() {
        let text = "# scene\n\n[10-20] second\n   \n[0-10] first\n";
        let s = parse_script(text).unwrap();
        assert_eq!(s.segments()[0].prompt, "first");
        assert_eq!(s.segments()[1].index, 1);
        assert_eq!(s.segments()[1].prompt, "second");
    }

    #[test]
    fn error_cases() {
        assert!(matches!(parse_script("[0-10] a\n[5-15] b"), Err(Error::Overlap { line: 2, .. })));
        assert!(matches!(parse_script("[0-10]   "), Err(Error::EmptyPrompt { line: Some(1) })));
        assert!(matches!(parse_script("# only\n[0-x] a"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_script("[0s-10] a"), Err(Error::Parse { .. })));
        assert!(matches!(parse_script("[0-5] a\n[5s-10s] b"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_script("0-5 a"), Err(Error::Parse { .. })));
        assert!(parse_script("# nothing\n").is_err());
    }

    #[test]
    fn touching_spans_are_fine() {
        assert_eq!(parse_script("[0s-5s] a\n[5s-10s] b").unwrap().len(), 2);
    }

    #[test]
    fn embedding_contracts() {
        let a = embed_prompt("a b", 64).unwrap();
        assert_eq!(a, embed_prompt("a b", 64).unwrap());
        assert!((a.vector.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        assert!(matches!(embed_prompt("", 64), Err(Error::EmptyPrompt { .. })));
        assert!(matches!(embed_prompt(" ,;", 64), Err(Error::EmptyPrompt { .. })));
        // case and punctuation are normalized away
        assert_eq!(embed_prompt("Kitchen, SINK", 64).unwrap(), embed_prompt("kitchen sink", 64).unwrap());
    }

    #[test]
    fn overlapping_words_are_closer() {
        let e = |t| embed_prompt(t, DEFAULT_EMBED_DIM).unwrap().vector;
        let near = cosine(&e("kitchen sink faucet"), &e("kitchen sink sponge")).unwrap();
        let far = cosine(&e("kitchen sink faucet"), &e("city skyline fireworks")).unwrap();
        assert!(near > far, "{near} vs {far}");
    }

    fn arb_script() -> impl Strategy<Value = NarrativeScript> {
        let seg = (1u64..20, 0u64..5, "[a-z]{1,8}( [a-z]{1,8}){0,4}");
        (any::<bool>(), proptest::collection::vec(seg, 1..8)).prop_map(|(secs, segs)| {
            let mut t = 0;
            let spans: Vec<_> = segs
                .into_iter()
                .map(|(len, gap, p)| {
                    let start = t + gap;
                    t = start + len;
                    (start, t, p)
                })
                .collect();
            let unit = if secs { SpanUnit::Seconds } else { SpanUnit::Frames };
            NarrativeScript::from_spans(unit, spans).unwrap()
        })
    }

    proptest! {
        #[test]
        fn serialize_parse_round_trip(s in arb_script()) {
            let back = parse_script(&s.to_string()).unwrap();
            prop_assert_eq!(&back, &s);
            for w in back.segments().windows(2) {
                prop_assert!(w[0].end <= w[1].start);
            }
        }

        #[test]
        fn embeddings_unit_norm(text in "[A-Za-z ,.]{0,40}") {
            prop_assume!(tokenize(&text).next().is_some());
            let v = embed_prompt(&text, 32).unwrap().vector;
            prop_assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        }
    }
}
