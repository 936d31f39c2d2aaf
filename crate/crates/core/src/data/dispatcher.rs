use std::collections::VecDeque;

use super::{Document, Segment, SegmentPlan, BOS, EOS, PAD};
use crate::error::Result;

/// Anything that hands out documents one at a time.
pub trait DocumentSource {
    fn next_document(&mut self) -> Option<Document>;
}

impl DocumentSource for VecDeque<Document> {
    fn next_document(&mut self) -> Option<Document> {
        self.pop_front()
    }
}

impl DocumentSource for std::vec::IntoIter<Document> {
    fn next_document(&mut self) -> Option<Document> {
        self.next()
    }
}

impl<S: DocumentSource + ?Sized> DocumentSource for Box<S> {
    fn next_document(&mut self) -> Option<Document> {
        (**self).next_document()
    }
}

/// Padded `[batch × len]` id matrix with a validity mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub valid: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl TokenBatch {
    /// Right-pads each row with `PAD` to the longest row.
    pub fn from_rows(rows: &[Vec<usize>]) -> Self {
        let len = rows.iter().map(Vec::len).max().unwrap_or(0);
        let batch = rows.len();
        let mut ids = vec![PAD; batch * len];
        let mut valid = vec![false; batch * len];
        for (b, row) in rows.iter().enumerate() {
            ids[b * len..b * len + row.len()].copy_from_slice(row);
            valid[b * len..b * len + row.len()].fill(true);
        }
        Self { ids, valid, batch, len }
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }

    /// The unpadded tokens of lane `b`.
    pub fn tokens(&self, b: usize) -> Vec<usize> {
        self.row(b)
            .iter()
            .zip(&self.valid[b * self.len..(b + 1) * self.len])
            .filter(|(_, &v)| v)
            .map(|(&t, _)| t)
            .collect()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Per-lane reset signal; `true` marks the first segment of a document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResetFlags(pub Vec<bool>);

impl ResetFlags {
    pub fn all(batch: usize, value: bool) -> Self {
        Self(vec![value; batch])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, lane: usize) -> bool {
        self.0[lane]
    }
}

/// Identifies which document segment occupies a lane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LaneTag {
    pub doc_id: u64,
    pub index: usize,
}

/// One synchronized timestep across all lanes.
#[derive(Debug, Clone, PartialEq)]
pub struct StepBatch {
    pub src: TokenBatch,
    /// Decoder input: `BOS` followed by the target.
    pub tgt_in: TokenBatch,
    /// Decoder labels: the target followed by `EOS`; same shape as `tgt_in`.
    pub tgt_out: TokenBatch,
    /// Loss weight per decoder position: 1 on scored, active positions.
    pub target_mask: Vec<f64>,
    pub reset: ResetFlags,
    pub active: Vec<bool>,
    pub tags: Vec<Option<LaneTag>>,
}

impl StepBatch {
    /// Builds a batch from per-lane segments; `None` lanes are inactive.
    pub fn from_segments(lanes: &[Option<(u64, Segment)>]) -> Self {
        let src_rows: Vec<Vec<usize>> = lanes
            .iter()
            .map(|l| l.as_ref().map(|(_, s)| s.source.clone()).unwrap_or_default())
            .collect();
        let tgt_in_rows: Vec<Vec<usize>> = lanes
            .iter()
            .map(|l| match scored(l) {
                Some(s) => std::iter::once(BOS).chain(s.target.iter().copied()).collect(),
                None => Vec::new(),
            })
            .collect();
        let tgt_out_rows: Vec<Vec<usize>> = lanes
            .iter()
            .map(|l| match scored(l) {
                Some(s) => s.target.iter().copied().chain(std::iter::once(EOS)).collect(),
                None => Vec::new(),
            })
            .collect();
        let tgt_in = TokenBatch::from_rows(&tgt_in_rows);
        let tgt_out = TokenBatch::from_rows(&tgt_out_rows);
        let target_mask = tgt_out.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        StepBatch {
            src: TokenBatch::from_rows(&src_rows),
            tgt_in,
            tgt_out,
            target_mask,
            reset: ResetFlags(lanes.iter().map(|l| l.as_ref().is_some_and(|(_, s)| s.is_first)).collect()),
            active: lanes.iter().map(Option::is_some).collect(),
            tags: lanes
                .iter()
                .map(|l| l.as_ref().map(|(id, s)| LaneTag { doc_id: *id, index: s.index }))
                .collect(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.active.len()
    }

    /// Number of loss-bearing target tokens.
    pub fn scored_tokens(&self) -> usize {
        self.target_mask.iter().filter(|&&w| w > 0.0).count()
    }

    /// Same batch with every reset flag forced on.
    pub fn with_reset_all(&self) -> Self {
        Self {
            reset: ResetFlags::all(self.batch_size(), true),
            ..self.clone()
        }
    }
}

fn scored(lane: &Option<(u64, Segment)>) -> Option<&Segment> {
    lane.as_ref().filter(|(_, s)| s.scored).map(|(_, s)| s)
}

#[derive(Debug, Clone, Default)]
struct Agent {
    doc_id: u64,
    segments: VecDeque<Segment>,
}

/// Synchronized per-lane agents pulling documents from one shared queue.
///
/// Each call advances every lane by one segment. A lane that has finished
/// its document takes the next one from the queue; once the queue is empty
/// it emits padded inactive steps until every lane has drained.
pub struct Dispatcher<S> {
    source: S,
    plan: SegmentPlan,
    agents: Vec<Agent>,
    exhausted: bool,
    steps: u64,
}

impl<S: DocumentSource> Dispatcher<S> {
    pub fn new(source: S, plan: SegmentPlan, batch_size: usize) -> Self {
        assert!(batch_size > 0, "dispatcher needs at least one lane");
        Self {
            source,
            plan,
            agents: vec![Agent::default(); batch_size],
            exhausted: false,
            steps: 0,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.agents.len()
    }

    /// Number of batches emitted so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn refill(&mut self, lane: usize) -> Result<()> {
        while self.agents[lane].segments.is_empty() && !self.exhausted {
            match self.source.next_document() {
                Some(doc) if doc.tokens.is_empty() => log::warn!("skipping empty document {}", doc.id),
                Some(doc) => {
                    self.agents[lane] = Agent {
                        doc_id: doc.id,
                        segments: self.plan.prepare(&doc)?.into(),
                    };
                }
                None => self.exhausted = true,
            }
        }
        Ok(())
    }

    /// The next timestep, or `None` once every lane has drained.
    pub fn next_batch(&mut self) -> Result<Option<StepBatch>> {
        let mut lanes = Vec::with_capacity(self.agents.len());
        for lane in 0..self.agents.len() {
            self.refill(lane)?;
            let agent = &mut self.agents[lane];
            lanes.push(agent.segments.pop_front().map(|s| (agent.doc_id, s)));
        }
        if lanes.iter().all(Option::is_none) {
            return Ok(None);
        }
        self.steps += 1;
        Ok(Some(StepBatch::from_segments(&lanes)))
    }

    /// Discards `n` batches; used to resume a run at a given step.
    pub fn fast_forward(&mut self, n: u64) -> Result<()> {
        for _ in 0..n {
            if self.next_batch()?.is_none() {
                break;
            }
        }
        Ok(())
    }
}

impl<S: DocumentSource> Iterator for Dispatcher<S> {
    type Item = Result<StepBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_batch().transpose()
    }
}
