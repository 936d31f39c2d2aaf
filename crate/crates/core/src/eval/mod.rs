//! Perplexity and overlap metrics, attention-cost accounting, latency
//! measurement and gradient checking.

mod cost;
mod gradcheck;
mod latency;
mod metrics;

pub use cost::{
    attention_op_count, bench_table, measured_attention_ops, turn_input, BenchRow, CostMode, CostModel, BENCH_COLUMNS,
};
pub use gradcheck::{check_model_gradients, GradCheckReport};
pub use latency::{fit_line, latency_bench, latency_trend, LineFit, TurnLatency, DEFAULT_REPEATS};
pub use metrics::{f1_word_overlap, perplexity, score_batch, token_nll, EvalReport, NllAccumulator, PositionBucket};
