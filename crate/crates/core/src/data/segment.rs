use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Document, Segment, MASK};
use crate::error::{Error, Result};

/// Splits a document into windows starting at multiples of `window − overlap`.
/// The last window may be short; a document no longer than `window` yields
/// one segment.
pub fn segment_document(doc: &Document, window: usize, overlap: usize) -> Result<Vec<Segment>> {
    if window == 0 || overlap >= window {
        return Err(Error::Config(format!(
            "segment overlap {overlap} must be smaller than window {window}"
        )));
    }
    let stride = window - overlap;
    let n = doc.tokens.len();
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + window).min(n);
        let tokens = doc.tokens[start..end].to_vec();
        out.push(Segment {
            source: tokens.clone(),
            target: tokens,
            index: out.len(),
            is_first: out.is_empty(),
            scored: true,
        });
        if end >= n {
            break;
        }
        start += stride;
    }
    Ok(out)
}

/// Replaces `floor(ratio · len)` distinct, uniformly chosen source positions
/// with the mask symbol. The target is left untouched.
pub fn apply_denoising_mask<R: Rng + ?Sized>(seg: &Segment, ratio: f64, rng: &mut R) -> Segment {
    let ratio = ratio.clamp(0.0, 1.0);
    let len = seg.source.len();
    let count = ((ratio * len as f64).floor() as usize).min(len);
    let mut out = seg.clone();
    for pos in sample(rng, len, count) {
        out.source[pos] = MASK;
    }
    out
}

/// Text recall: the encoder reads `x_t` and the decoder reproduces `x_{t−1}`.
/// The first segment is still encoded (so memory is written) but carries no
/// loss.
pub fn text_recall_pairs(segments: &[Segment]) -> Vec<Segment> {
    if segments.len() == 1 {
        log::warn!("single-segment document yields no text-recall loss pairs");
    }
    segments
        .iter()
        .enumerate()
        .map(|(t, seg)| Segment {
            source: seg.source.clone(),
            target: if t == 0 { Vec::new() } else { segments[t - 1].target.clone() },
            index: seg.index,
            is_first: seg.is_first,
            scored: t > 0,
        })
        .collect()
}

/// Training objective applied to each document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    /// Decode the previous segment.
    Recall,
    /// Reconstruct the current segment from a masked copy.
    Denoise,
    /// Decode the next segment.
    Lm,
    /// Decode the current segment unchanged.
    Copy,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Recall, Task::Denoise, Task::Lm, Task::Copy];

    pub fn name(self) -> &'static str {
        match self {
            Task::Recall => "recall",
            Task::Denoise => "denoise",
            Task::Lm => "lm",
            Task::Copy => "copy",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}` (expected recall, denoise, lm or copy)")))
    }
}

/// How an agent turns a document into its sequence of timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentPlan {
    pub task: Task,
    pub window: usize,
    pub overlap: usize,
    pub mask_ratio: f64,
    pub seed: u64,
}

impl SegmentPlan {
    pub fn new(task: Task, window: usize, overlap: usize) -> Self {
        Self {
            task,
            window,
            overlap,
            mask_ratio: 0.3,
            seed: 0,
        }
    }

    pub fn with_mask_ratio(mut self, ratio: f64) -> Self {
        self.mask_ratio = ratio;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Mask RNG seed for one segment; independent of processing order.
    pub fn mask_seed(&self, doc_id: u64, index: usize) -> u64 {
        splitmix(self.seed ^ splitmix(doc_id ^ splitmix(index as u64)))
    }

    pub fn prepare(&self, doc: &Document) -> Result<Vec<Segment>> {
        let segments = segment_document(doc, self.window, self.overlap)?;
        Ok(match self.task {
            Task::Copy => segments,
            Task::Recall => text_recall_pairs(&segments),
            Task::Denoise => segments
                .iter()
                .map(|s| {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.mask_seed(doc.id, s.index));
                    apply_denoising_mask(s, self.mask_ratio, &mut rng)
                })
                .collect(),
            Task::Lm => {
                let n = segments.len();
                (0..n)
                    .map(|t| Segment {
                        target: if t + 1 < n { segments[t + 1].target.clone() } else { Vec::new() },
                        scored: t + 1 < n,
                        ..segments[t].clone()
                    })
                    .collect()
            }
        })
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
