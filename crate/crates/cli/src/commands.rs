//! The four commands as library functions. Each returns its result so tests
//! can inspect it; `app` handles printing and exit codes.

use std::fs;
use std::path::{Path, PathBuf};

use membart_core::data::{
    load_corpus, load_manifest, synthetic_copy_stream, CyclingSource, Dispatcher, DocumentSource, SegmentPlan, Task, EOS,
};
use membart_core::eval::{
    attention_op_count, bench_table, f1_word_overlap, latency_bench, latency_trend, measured_attention_ops,
    perplexity, BenchRow, CostMode, CostModel, EvalReport,
};
use membart_core::model::{BeamConfig, Model, ModelConfig, Variant};
use membart_core::tensor::{DType, Scalar};
use membart_core::train::{TrainDiagnostics, Trainer};
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::{Checkpoint, Snapshot};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::metrics::{MetricsLog, RunLock, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE};

/// Keeps evaluation documents apart from the training stream of the same seed.
const EVAL_SEED_SALT: u64 = 0x5EED_0E7A_1000_0001;

pub type Source = Box<dyn DocumentSource>;

/// Training documents: the corpus repeated forever, or an endless synthetic stream.
pub fn train_source(cfg: &RunConfig) -> Result<Source> {
    match &cfg.data.corpus {
        Some(manifest) => {
            let docs = load_corpus(&load_manifest(manifest)?, cfg.data.min_len)?;
            if docs.is_empty() {
                return Err(CliError::Usage(format!("{} lists no usable documents", manifest.display())));
            }
            Ok(Box::new(CyclingSource::new(docs)))
        }
        None => Ok(Box::new(synthetic_copy_stream(
            cfg.model.vocab_size,
            cfg.data.context,
            cfg.data.segs_per_doc,
            cfg.train.seed,
        )?)),
    }
}

/// Evaluation documents: the first `eval_docs` corpus documents, or a
/// finite synthetic stream under a salted seed.
pub fn eval_source(cfg: &RunConfig) -> Result<Source> {
    match &cfg.data.corpus {
        Some(manifest) => {
            let mut docs = load_corpus(&load_manifest(manifest)?, cfg.data.min_len)?;
            docs.truncate(cfg.data.eval_docs);
            Ok(Box::new(docs.into_iter()))
        }
        None => Ok(Box::new(
            synthetic_copy_stream(
                cfg.model.vocab_size,
                cfg.data.context,
                cfg.data.segs_per_doc,
                cfg.train.seed ^ EVAL_SEED_SALT,
            )?
            .take_docs(cfg.data.eval_docs),
        )),
    }
}

pub fn plan(cfg: &RunConfig) -> SegmentPlan {
    SegmentPlan::new(cfg.data.task, cfg.data.context, cfg.data.overlap)
        .with_mask_ratio(cfg.data.mask_ratio)
        .with_seed(cfg.train.seed)
}

fn dispatcher(cfg: &RunConfig, source: Source) -> Dispatcher<Source> {
    Dispatcher::new(source, plan(cfg), cfg.train.batch_size)
}

/// Claims `dir`, creates it and echoes the effective config into it.
fn open_run(cfg: &RunConfig) -> Result<(RunLock, MetricsLog)> {
    let dir = &cfg.run.out;
    let lock = RunLock::acquire(dir)?;
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, cfg.to_text()).map_err(|e| CliError::io(&path, e))?;
    let log = MetricsLog::open(&dir.join(METRICS_FILE))?;
    Ok((lock, log))
}

/// Model weights from the configured checkpoint, or a fresh initialization.
fn load_model<F: Scalar>(cfg: &RunConfig) -> Result<(Model<F>, Option<Snapshot<F>>)> {
    let mut model = Model::<F>::new(cfg.model.clone(), cfg.train.seed)?;
    let Some(path) = &cfg.run.checkpoint else {
        return Ok((model, None));
    };
    let ck = Checkpoint::load(path)?;
    ck.check_digest(&cfg.digest())?;
    let snap = Snapshot::from_checkpoint(&ck, &model, cfg.train.adamw())?;
    model.params = snap.params.clone();
    Ok((model, Some(snap)))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub diagnostics: Vec<TrainDiagnostics>,
    pub final_step: u64,
    pub checkpoint: PathBuf,
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    match cfg.train.precision {
        DType::F32 => train_typed::<f32>(cfg),
        DType::F64 => train_typed::<f64>(cfg),
    }
}

fn snapshot<F: Scalar>(t: &Trainer<F, Source>) -> Snapshot<F> {
    Snapshot {
        params: t.model.params.clone(),
        optimizer: Some(t.optimizer.clone()),
        state: Some(t.state()),
        seed: t.config.seed,
    }
}

fn train_typed<F: Scalar>(cfg: &RunConfig) -> Result<TrainOutcome> {
    let (_lock, mut log) = open_run(cfg)?;
    let (model, snap) = load_model::<F>(cfg)?;
    let mut tc = cfg.train.clone();
    let mut trainer = match snap {
        Some(Snapshot {
            optimizer: Some(opt),
            state: Some(state),
            seed,
            ..
        }) => {
            if seed != tc.seed {
                log::warn!("resuming with the checkpoint seed {seed} instead of {}", tc.seed);
                tc.seed = seed;
            }
            let mut resumed = cfg.clone();
            resumed.train.seed = seed;
            let disp = dispatcher(&resumed, train_source(&resumed)?);
            log::info!("resuming at step {} ({} batches consumed)", state.step, state.batches_consumed);
            Trainer::resume(model, opt, tc, disp, state)?
        }
        _ => Trainer::new(model, tc, dispatcher(cfg, train_source(cfg)?))?,
    };
    let digest = cfg.digest();
    let final_path = cfg.run.out.join(CHECKPOINT_FILE);
    let mut diagnostics = Vec::new();
    while trainer.step() < cfg.train.max_steps {
        let d = match trainer.train_step() {
            Ok(Some(d)) => d,
            Ok(None) => {
                log::warn!("data ran out after step {}", trainer.step());
                break;
            }
            Err(e) => {
                log.record("abort", &json!({ "step": trainer.step() + 1, "error": e.to_string() }))?;
                return Err(e.into());
            }
        };
        if cfg.run.log_every > 0 && (d.step % cfg.run.log_every == 0 || d.step == cfg.train.max_steps) {
            log.record("train", &d)?;
        }
        if cfg.run.checkpoint_every > 0 && d.step % cfg.run.checkpoint_every == 0 {
            let path = cfg.run.out.join(format!("step-{:06}.mbrt", d.step));
            snapshot(&trainer).to_checkpoint(digest).save(&path)?;
        }
        diagnostics.push(d);
    }
    snapshot(&trainer).to_checkpoint(digest).save(&final_path)?;
    log.record(
        "checkpoint",
        &json!({ "step": trainer.step(), "path": final_path.display().to_string() }),
    )?;
    Ok(TrainOutcome {
        diagnostics,
        final_step: trainer.step(),
        checkpoint: final_path,
    })
}

pub fn eval(cfg: &RunConfig, generate: bool) -> Result<EvalReport> {
    match cfg.train.precision {
        DType::F32 => eval_typed::<f32>(cfg, generate),
        DType::F64 => eval_typed::<f64>(cfg, generate),
    }
}

/// Mean word-overlap F1 of greedy generations against the targets, one
/// lane at a time with memory carried along each document.
fn generation_f1<F: Scalar>(model: &Model<F>, cfg: &RunConfig) -> Result<f64> {
    let mut d = Dispatcher::new(eval_source(cfg)?, plan(cfg), 1);
    let beam = BeamConfig {
        width: 1,
        max_len: cfg.data.context + 1,
        length_penalty: 1.0,
    };
    let mut memory = model.initial_memory(1).slots;
    let (mut sum, mut n) = (0.0, 0usize);
    while let Some(batch) = d.next_batch()? {
        let reset = batch.reset.get(0) || cfg.run.no_history;
        let src = batch.src.tokens(0);
        let (hyp, next) = model.generate(&src, &memory, reset, &beam)?;
        memory = next;
        if batch.target_mask.iter().any(|&w| w > 0.0) {
            let reference: Vec<usize> = batch.tgt_out.tokens(0).into_iter().filter(|&t| t != EOS).collect();
            sum += f1_word_overlap(&hyp.tokens, &reference);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Perplexity of `model` on the evaluation stream, honouring `run.no_history`.
pub fn eval_model<F: Scalar>(model: &Model<F>, cfg: &RunConfig, generate: bool) -> Result<EvalReport> {
    let mut d = dispatcher(cfg, eval_source(cfg)?);
    let mut report = perplexity(model, &mut d, !cfg.run.no_history, None)?;
    if generate {
        report.f1 = Some(generation_f1(model, cfg)?);
    }
    Ok(report)
}

fn eval_typed<F: Scalar>(cfg: &RunConfig, generate: bool) -> Result<EvalReport> {
    let (model, snap) = load_model::<F>(cfg)?;
    if snap.is_none() {
        log::warn!("no checkpoint given; evaluating an untrained model");
    }
    let report = eval_model(&model, cfg, generate)?;
    if cfg.run.out.exists() {
        let _lock = RunLock::acquire(&cfg.run.out)?;
        MetricsLog::open(&cfg.run.out.join(METRICS_FILE))?.record("eval", &report)?;
    }
    Ok(report)
}

/// Cells of the benchmark grid. The stateless modes carry no memory, so
/// they appear only with `m = 0`.
pub fn bench_grid(cfg: &RunConfig) -> Vec<CostModel> {
    let mut cells = Vec::new();
    for mode in CostMode::ALL {
        for &turns in &cfg.bench.turns {
            for &n in &cfg.bench.tokens {
                for &m in &cfg.bench.memory {
                    if mode != CostMode::Stateful && m != 0 {
                        continue;
                    }
                    cells.push(CostModel {
                        mode,
                        turns,
                        tokens_per_turn: n,
                        memory_size: m,
                        truncation: cfg.bench.truncation,
                    });
                }
            }
        }
    }
    cells
}

/// The model a bench cell runs on: the configured memory variant with `m`
/// slots, or the stateless baseline.
pub fn bench_model_config(cfg: &RunConfig, cell: &CostModel) -> ModelConfig {
    let longest = cell.turns * cell.tokens_per_turn + 1;
    let variant = match (cell.mode, cfg.model.variant) {
        (CostMode::Stateful, Variant::Stateless) => Variant::Membart,
        (CostMode::Stateful, v) => v,
        _ => Variant::Stateless,
    };
    ModelConfig {
        max_positions: cfg.model.max_positions.max(longest),
        ..cfg.model.clone().with_variant(variant).with_memory_size(cell.memory_size)
    }
}

#[derive(Debug, Clone, Serialize)]
struct CellTrend {
    mode: CostMode,
    turns: usize,
    tokens_per_turn: usize,
    memory_size: usize,
    slope_ms_per_turn: f64,
    slope_stderr: f64,
}

pub fn bench(cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    let (_lock, mut log) = open_run(cfg)?;
    let mut rows = Vec::new();
    for cell in bench_grid(cfg) {
        let model = Model::<f32>::new(bench_model_config(cfg, &cell), cfg.train.seed)?;
        let measured = measured_attention_ops(&model, &cell)?;
        let lat = latency_bench(&model, &cell, cfg.bench.repeats)?;
        let n = lat.len() as f64;
        let row = BenchRow {
            mode: cell.mode,
            turns: cell.turns,
            tokens_per_turn: cell.tokens_per_turn,
            memory_size: cell.memory_size,
            predicted_ops: attention_op_count(&cell),
            measured_ops: measured,
            mean_latency_ms: lat.iter().map(|t| t.mean_ms).sum::<f64>() / n,
            latency_var: lat.iter().map(|t| t.var_ms).sum::<f64>() / n,
        };
        log.record("bench", &row)?;
        if lat.len() >= 3 {
            let fit = latency_trend(&lat);
            log.record(
                "latency_trend",
                &CellTrend {
                    mode: cell.mode,
                    turns: cell.turns,
                    tokens_per_turn: cell.tokens_per_turn,
                    memory_size: cell.memory_size,
                    slope_ms_per_turn: fit.slope,
                    slope_stderr: fit.slope_stderr,
                },
            )?;
        }
        rows.push(row);
    }
    let path = cfg.run.out.join("bench.tsv");
    fs::write(&path, bench_table(&rows)).map_err(|e| CliError::io(&path, e))?;
    Ok(rows)
}

/// Exponential moving average seeded with the first value.
pub fn smooth(losses: &[f64], beta: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(losses.len());
    let mut acc: Option<f64> = None;
    for &x in losses {
        let v = match acc {
            None => x,
            Some(a) => beta * a + (1.0 - beta) * x,
        };
        acc = Some(v);
        out.push(v);
    }
    out
}

/// First 1-based step whose smoothed loss is below `threshold`.
pub fn steps_to_threshold(smoothed: &[f64], threshold: f64) -> Option<u64> {
    smoothed.iter().position(|&l| l < threshold).map(|i| i as u64 + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantCurve {
    pub variant: Variant,
    pub losses: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub memory_grad_norms: Vec<f64>,
    pub steps_to_threshold: Option<u64>,
    pub final_loss: f64,
}

/// Trains one variant on the recall task for `train.steps` updates, in memory.
pub fn train_curve(cfg: &RunConfig, variant: Variant) -> Result<VariantCurve> {
    Ok(train_curve_until(cfg, variant, false)?.0)
}

/// Like [`train_curve`], optionally stopping at the first step whose smoothed
/// loss is under the threshold. Also returns the trained model.
pub fn train_curve_until(cfg: &RunConfig, variant: Variant, stop_at_threshold: bool) -> Result<(VariantCurve, Model<f32>)> {
    let mut cfg = cfg.clone();
    cfg.model.variant = variant;
    cfg.data.task = Task::Recall;
    let model = Model::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    let mut t = Trainer::new(model, cfg.train.clone(), dispatcher(&cfg, train_source(&cfg)?))?;
    let (mut losses, mut smoothed, mut norms) = (Vec::new(), Vec::new(), Vec::new());
    while t.step() < cfg.train.max_steps {
        let Some(d) = t.train_step()? else { break };
        losses.push(d.loss);
        norms.push(d.memory_grad_norm);
        let beta = cfg.compare.smoothing;
        let s = smoothed.last().map_or(d.loss, |&a: &f64| beta * a + (1.0 - beta) * d.loss);
        smoothed.push(s);
        if d.step % 500 == 0 {
            log::info!("{variant} step {} smoothed loss {s:.4}", d.step);
        }
        if stop_at_threshold && s < cfg.compare.threshold {
            break;
        }
    }
    let curve = VariantCurve {
        variant,
        steps_to_threshold: steps_to_threshold(&smoothed, cfg.compare.threshold),
        final_loss: smoothed.last().copied().unwrap_or(f64::NAN),
        losses,
        smoothed,
        memory_grad_norms: norms,
    };
    Ok((curve, t.model))
}

/// Tab-separated smoothed curves, one column per variant.
pub fn curves_table(curves: &[VariantCurve]) -> String {
    let mut out = String::from("step");
    for c in curves {
        out.push('\t');
        out.push_str(c.variant.name());
    }
    out.push('\n');
    let len = curves.iter().map(|c| c.smoothed.len()).max().unwrap_or(0);
    for i in 0..len {
        out.push_str(&(i + 1).to_string());
        for c in curves {
            out.push('\t');
            if let Some(v) = c.smoothed.get(i) {
                out.push_str(&format!("{v:.6}"));
            }
        }
        out.push('\n');
    }
    out
}

pub fn compare_variants(cfg: &RunConfig) -> Result<Vec<VariantCurve>> {
    let (_lock, mut log) = open_run(cfg)?;
    let mut curves = Vec::new();
    for &v in &cfg.compare.variants {
        log::info!("training {v} for {} steps", cfg.train.max_steps);
        let c = train_curve(cfg, v)?;
        log.record(
            "variant",
            &json!({
                "variant": v.name(),
                "steps_to_threshold": c.steps_to_threshold,
                "final_loss": c.final_loss,
                "threshold": cfg.compare.threshold,
            }),
        )?;
        curves.push(c);
    }
    write_text(&cfg.run.out.join("curves.tsv"), &curves_table(&curves))?;
    Ok(curves)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}
