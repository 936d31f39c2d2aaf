use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::{Dispatcher, DocumentSource, StepBatch};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Graph, Scalar, Tensor};

/// Token-level loss summary for one segment position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionBucket {
    /// Segment index within its document.
    pub position: usize,
    pub perplexity: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub perplexity: f64,
    /// Mean negative log-likelihood per token, in nats.
    pub nll: f64,
    pub tokens: usize,
    pub memory_enabled: bool,
    pub by_position: Vec<PositionBucket>,
    pub f1: Option<f64>,
}

/// Accumulates token log-likelihoods, optionally keyed by segment position.
#[derive(Debug, Clone, Default)]
pub struct NllAccumulator {
    total: f64,
    tokens: usize,
    buckets: BTreeMap<usize, (f64, usize)>,
}

impl NllAccumulator {
    pub fn add(&mut self, nll: f64, position: Option<usize>) {
        self.total += nll;
        self.tokens += 1;
        if let Some(p) = position {
            let b = self.buckets.entry(p).or_default();
            b.0 += nll;
            b.1 += 1;
        }
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn report(&self, memory_enabled: bool) -> Result<EvalReport> {
        if self.tokens == 0 {
            return Err(Error::Input("perplexity is undefined without scored tokens".into()));
        }
        let nll = self.total / self.tokens as f64;
        Ok(EvalReport {
            perplexity: nll.exp(),
            nll,
            tokens: self.tokens,
            memory_enabled,
            by_position: self
                .buckets
                .iter()
                .map(|(&position, &(sum, tokens))| PositionBucket {
                    position,
                    perplexity: (sum / tokens as f64).exp(),
                    tokens,
                })
                .collect(),
            f1: None,
        })
    }
}

/// Negative log-softmax of `target` within one logit row.
pub fn token_nll(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    lse - row[target]
}

/// Scores one batch on `memory`, adding every weighted target token to
/// `acc`. Returns the memory for the next step.
pub fn score_batch<F: Scalar>(
    model: &Model<F>,
    batch: &StepBatch,
    memory: &Tensor<F>,
    acc: &mut NllAccumulator,
) -> Result<Tensor<F>> {
    let mut g = Graph::no_grad();
    let m = g.constant(memory.clone())?;
    let out = model.forward_step(&mut g, batch, m, 1.0)?;
    let logits = g.value(out.logits);
    let vocab = model.config().vocab_size;
    let len = batch.tgt_out.len;
    for b in 0..batch.batch_size() {
        let position = batch.tags[b].as_ref().map(|t| t.index);
        for i in 0..len {
            let r = b * len + i;
            if batch.target_mask[r] > 0.0 {
                let row: Vec<f64> = logits.data()[r * vocab..(r + 1) * vocab].iter().map(|x| x.as_f64()).collect();
                acc.add(token_nll(&row, batch.tgt_out.ids[r]), position);
            }
        }
    }
    Ok(g.value(out.encoded.next_memory).clone())
}

/// Perplexity over a batch stream. With `memory_enabled` false every step
/// is evaluated with its reset flags forced on, so no history is used.
pub fn perplexity<F: Scalar, S: DocumentSource>(
    model: &Model<F>,
    batches: &mut Dispatcher<S>,
    memory_enabled: bool,
    max_batches: Option<u64>,
) -> Result<EvalReport> {
    let mut acc = NllAccumulator::default();
    let mut memory = model.initial_memory(batches.batch_size()).slots;
    let mut seen = 0u64;
    while max_batches.is_none_or(|n| seen < n) {
        let Some(batch) = batches.next_batch()? else { break };
        let batch = if memory_enabled { batch } else { batch.with_reset_all() };
        memory = score_batch(model, &batch, &memory, &mut acc)?;
        seen += 1;
    }
    acc.report(memory_enabled)
}

/// Multiset word-overlap F1 between a hypothesis and a reference.
pub fn f1_word_overlap<T: Eq + std::hash::Hash>(hypothesis: &[T], reference: &[T]) -> f64 {
    if hypothesis.is_empty() || reference.is_empty() {
        return if hypothesis.is_empty() && reference.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&T, usize> = HashMap::new();
    for t in reference {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in hypothesis {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / hypothesis.len() as f64;
    let r = common as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}
