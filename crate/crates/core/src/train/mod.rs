//! Memory-replay back-propagation, the unrolled reference, the optimizer and
//! the training loop.

mod mrbp;
mod optim;

pub use mrbp::{memory_gradient_norm, mrbp_step, rollout_loss, unrolled_bptt_step, Rollout, StepConfig, StepGradients};
pub use optim::{clip_global_norm, learning_rate, AdamW, AdamWConfig};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Dispatcher, DocumentSource};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{DType, Scalar, Tensor};

/// Consecutive non-finite steps tolerated before training aborts.
pub const MAX_NAN_STREAK: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub horizon: usize,
    pub batch_size: usize,
    pub max_steps: u64,
    pub clip_norm: f64,
    pub precision: DType,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            warmup_steps: 100,
            weight_decay: 0.01,
            dropout: 0.0,
            horizon: 2,
            batch_size: 8,
            max_steps: 2000,
            clip_norm: 1.0,
            precision: DType::F32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// One line of training telemetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainDiagnostics {
    /// 1-based update index.
    pub step: u64,
    pub loss: f64,
    pub memory_grad_norm: f64,
    pub gate_mean: Option<f64>,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub scored_tokens: usize,
    pub peak_nodes: usize,
    /// True when the update was skipped because of non-finite values.
    pub skipped: bool,
    pub wall_ms: f64,
}

impl TrainDiagnostics {
    /// Bitwise equality of every field except wall-clock time.
    pub fn same_values(&self, other: &Self) -> bool {
        let key = |d: &Self| {
            (
                d.step,
                d.loss.to_bits(),
                d.memory_grad_norm.to_bits(),
                d.gate_mean.map(f64::to_bits),
                d.lr.to_bits(),
                d.grad_norm.to_bits(),
                d.scored_tokens,
                d.peak_nodes,
                d.skipped,
            )
        };
        key(self) == key(other)
    }
}

/// Mutable loop state that a checkpoint must carry to resume exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState<F> {
    pub step: u64,
    pub batches_consumed: u64,
    pub memory: Tensor<F>,
    pub nan_streak: u32,
    pub skipped: u64,
}

/// Drives dispatcher → rollout → MRBP → AdamW.
pub struct Trainer<F: Scalar, S> {
    pub model: Model<F>,
    pub optimizer: AdamW<F>,
    pub config: TrainConfig,
    dispatcher: Dispatcher<S>,
    memory: Tensor<F>,
    step: u64,
    nan_streak: u32,
    skipped: u64,
}

impl<F: Scalar, S: DocumentSource> Trainer<F, S> {
    pub fn new(model: Model<F>, config: TrainConfig, dispatcher: Dispatcher<S>) -> Result<Self> {
        config.validate()?;
        if dispatcher.batch_size() != config.batch_size {
            return Err(Error::Config(format!(
                "dispatcher has {} lanes but batch_size is {}",
                dispatcher.batch_size(),
                config.batch_size
            )));
        }
        let optimizer = AdamW::new(&model.params, config.adamw());
        let memory = model.initial_memory(config.batch_size).slots;
        Ok(Self {
            model,
            optimizer,
            config,
            dispatcher,
            memory,
            step: 0,
            nan_streak: 0,
            skipped: 0,
        })
    }

    /// Continues from a saved state. `dispatcher` must be freshly built from
    /// the same source and seed; it is fast-forwarded to the saved position.
    pub fn resume(
        model: Model<F>,
        optimizer: AdamW<F>,
        config: TrainConfig,
        mut dispatcher: Dispatcher<S>,
        state: TrainerState<F>,
    ) -> Result<Self> {
        dispatcher.fast_forward(state.batches_consumed)?;
        if dispatcher.steps() != state.batches_consumed {
            return Err(Error::Usage(format!(
                "data stream ended after {} batches, checkpoint expects {}",
                dispatcher.steps(),
                state.batches_consumed
            )));
        }
        let mut t = Self::new(model, config, dispatcher)?;
        t.optimizer = optimizer;
        t.memory = state.memory;
        t.step = state.step;
        t.nan_streak = state.nan_streak;
        t.skipped = state.skipped;
        Ok(t)
    }

    pub fn state(&self) -> TrainerState<F> {
        TrainerState {
            step: self.step,
            batches_consumed: self.dispatcher.steps(),
            memory: self.memory.clone(),
            nan_streak: self.nan_streak,
            skipped: self.skipped,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    fn diverged(&mut self, step: u64, start: Instant, lr: f64) -> Result<TrainDiagnostics> {
        self.nan_streak += 1;
        self.skipped += 1;
        self.memory = self.model.initial_memory(self.config.batch_size).slots;
        log::warn!("step {step}: non-finite loss or gradient, update skipped");
        if self.nan_streak >= MAX_NAN_STREAK {
            return Err(Error::Diverged {
                step,
                streak: self.nan_streak,
            });
        }
        Ok(TrainDiagnostics {
            step,
            loss: f64::NAN,
            memory_grad_norm: 0.0,
            gate_mean: None,
            lr,
            grad_norm: f64::NAN,
            scored_tokens: 0,
            peak_nodes: 0,
            skipped: true,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// One update over the next `horizon` batches; `None` once the data ends.
    pub fn train_step(&mut self) -> Result<Option<TrainDiagnostics>> {
        let start = Instant::now();
        let mut steps = Vec::with_capacity(self.config.horizon);
        while steps.len() < self.config.horizon {
            match self.dispatcher.next_batch()? {
                Some(b) => steps.push(b),
                None => break,
            }
        }
        if steps.is_empty() {
            return Ok(None);
        }
        self.step += 1;
        let step = self.step;
        let lr = learning_rate(self.config.learning_rate, self.config.warmup_steps, step);
        let rollout = Rollout::new(steps, self.memory.clone());
        let cfg = StepConfig {
            dropout: self.config.dropout,
            seed: self.config.seed ^ step.wrapping_mul(0xD6E8_FEB8_6659_FD93),
        };
        let mut out = match mrbp_step(&self.model, &rollout, &cfg) {
            Ok(out) => out,
            Err(e) if e.is_non_finite() => return self.diverged(step, start, lr).map(Some),
            Err(e) => return Err(e),
        };
        if !out.loss.is_finite() || !out.grads.is_finite() {
            return self.diverged(step, start, lr).map(Some);
        }
        self.nan_streak = 0;
        let grad_norm = clip_global_norm(&mut out.grads, self.config.clip_norm);
        self.optimizer.update(&mut self.model.params, &out.grads, lr);
        self.memory = out.next_memory;
        Ok(Some(TrainDiagnostics {
            step,
            loss: out.loss,
            memory_grad_norm: out.memory_grad_norm,
            gate_mean: out.gate_mean,
            lr,
            grad_norm,
            scored_tokens: out.scored_tokens,
            peak_nodes: out.peak_nodes,
            skipped: false,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        }))
    }
}
