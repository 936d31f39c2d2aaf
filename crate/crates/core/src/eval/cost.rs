use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{ResetFlags, TokenBatch, BOS, NUM_SPECIAL};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Graph, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    /// Each turn is encoded once with the carried memory.
    Stateful,
    /// Each turn re-encodes the whole history.
    StatelessFullHistory,
    /// Each turn re-encodes at most the last `C` history tokens.
    StatelessTruncated,
}

impl CostMode {
    pub const ALL: [CostMode; 3] = [CostMode::Stateful, CostMode::StatelessFullHistory, CostMode::StatelessTruncated];

    pub fn name(self) -> &'static str {
        match self {
            CostMode::Stateful => "stateful",
            CostMode::StatelessFullHistory => "stateless_full_history",
            CostMode::StatelessTruncated => "stateless_truncated",
        }
    }
}

impl fmt::Display for CostMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CostMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CostMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown cost mode {s:?}")))
    }
}

/// A scripted conversation of `turns` turns with `tokens_per_turn` tokens each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub mode: CostMode,
    pub turns: usize,
    pub tokens_per_turn: usize,
    /// Memory slots; zero for the stateless modes.
    pub memory_size: usize,
    /// History limit `C` of the truncated mode.
    pub truncation: usize,
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if self.turns == 0 || self.tokens_per_turn == 0 {
            return Err(Error::Config("turns and tokens per turn must be positive".into()));
        }
        if self.mode != CostMode::Stateful && self.memory_size != 0 {
            return Err(Error::Config(format!("{} mode has no memory slots", self.mode)));
        }
        if self.mode == CostMode::StatelessTruncated && self.truncation == 0 {
            return Err(Error::Config("truncation limit must be positive".into()));
        }
        Ok(())
    }

    /// Number of encoder tokens at 1-based turn `t`.
    pub fn encoded_tokens(&self, t: usize) -> usize {
        match self.mode {
            CostMode::Stateful => self.tokens_per_turn,
            CostMode::StatelessFullHistory => t * self.tokens_per_turn,
            CostMode::StatelessTruncated => (t * self.tokens_per_turn).min(self.truncation),
        }
    }
}

/// Closed-form count of query-key score products, per encoder layer and head,
/// summed over all turns.
pub fn attention_op_count(cost: &CostModel) -> u64 {
    (1..=cost.turns)
        .map(|t| {
            let n = (cost.encoded_tokens(t) + cost.memory_size) as u64;
            n * n
        })
        .sum()
}

/// Dummy token `i` of the scripted conversation.
fn dummy_token(i: usize, vocab: usize) -> usize {
    NUM_SPECIAL + i % (vocab - NUM_SPECIAL)
}

/// The encoder input of 1-based turn `t`.
pub fn turn_input(cost: &CostModel, t: usize, vocab: usize) -> Vec<usize> {
    let end = t * cost.tokens_per_turn;
    let start = end - cost.encoded_tokens(t);
    (start..end).map(|i| dummy_token(i, vocab)).collect()
}

/// Runs the scripted conversation through the encoder and counts the score
/// products actually computed, divided by layers and heads. The model's
/// memory size must equal `cost.memory_size`.
pub fn measured_attention_ops<F: Scalar>(model: &Model<F>, cost: &CostModel) -> Result<u64> {
    cost.validate()?;
    if model.slots() != cost.memory_size {
        return Err(Error::Config(format!(
            "model has {} memory slots, cost model expects {}",
            model.slots(),
            cost.memory_size
        )));
    }
    let cfg = model.config();
    let per = (cfg.encoder_layers * cfg.heads) as u64;
    let mut memory = model.initial_memory(1).slots;
    let mut total = 0u64;
    for t in 1..=cost.turns {
        let mut g = Graph::no_grad();
        let src = TokenBatch::from_rows(&[turn_input(cost, t, cfg.vocab_size)]);
        let m = g.constant(memory)?;
        let enc = model.encode(&mut g, &src, m, &ResetFlags(vec![t == 1]))?;
        total += g.counters().attention_scores;
        memory = g.value(enc.next_memory).clone();
    }
    if total % per != 0 {
        return Err(Error::Usage(format!("{total} score products do not divide into {per} layer-heads")));
    }
    Ok(total / per)
}

/// One encoder pass plus a single decoder step on turn `t`, returning the
/// next memory. This is the unit timed by the latency benchmark.
pub(crate) fn turn_forward<F: Scalar>(
    model: &Model<F>,
    cost: &CostModel,
    t: usize,
    memory: crate::tensor::Tensor<F>,
) -> Result<crate::tensor::Tensor<F>> {
    let mut g = Graph::no_grad();
    let src = TokenBatch::from_rows(&[turn_input(cost, t, model.config().vocab_size)]);
    let m = g.constant(memory)?;
    let enc = model.encode(&mut g, &src, m, &ResetFlags(vec![t == 1]))?;
    let tgt = TokenBatch::from_rows(&[vec![BOS]]);
    model.decode(&mut g, &tgt, enc.states, &src.valid)?;
    Ok(g.value(enc.next_memory).clone())
}

/// One row of the benchmark summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: CostMode,
    pub turns: usize,
    pub tokens_per_turn: usize,
    pub memory_size: usize,
    pub predicted_ops: u64,
    pub measured_ops: u64,
    pub mean_latency_ms: f64,
    pub latency_var: f64,
}

pub const BENCH_COLUMNS: [&str; 8] = [
    "mode",
    "T",
    "N",
    "m",
    "predicted_ops",
    "measured_ops",
    "mean_latency_ms",
    "var",
];

/// Tab-separated table with a header line.
pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut out = BENCH_COLUMNS.join("\t");
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\n",
            r.mode, r.turns, r.tokens_per_turn, r.memory_size, r.predicted_ops, r.measured_ops, r.mean_latency_ms, r.latency_var
        ));
    }
    out
}
