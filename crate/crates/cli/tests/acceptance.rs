//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,2,9` runs a subset. The process exits non-zero on a
//! failure only when `ACCEPTANCE_STRICT=1`; otherwise the lines are the report.

use std::collections::{HashMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use membart_cli::checkpoint::{Checkpoint, Snapshot};
use membart_cli::commands::{self, VariantCurve};
use membart_cli::config::{ConfigMap, RunConfig};
use membart_cli::metrics::{read_records, CHECKPOINT_FILE, METRICS_FILE};
use membart_core::data::{
    apply_denoising_mask, segment_document, synthetic_copy_stream, text_recall_pairs, Dispatcher, Document, ResetFlags,
    Segment, SegmentPlan, StepBatch, Task, MASK, PAD,
};
use membart_core::eval::{
    attention_op_count, check_model_gradients, latency_bench, latency_trend, measured_attention_ops, CostMode, CostModel,
};
use membart_core::memory::{
    dual_stream_layer, gated_memory_update, memformer_read, memformer_write, reset_and_normalize, DualLayer, GateParams,
    MemformerRead, MemformerWriter, MemoryAttention, MemoryGlobals,
};
use membart_core::model::{Model, ModelConfig, Variant};
use membart_core::nn::Initializer;
use membart_core::tensor::{finite_diff_grad, max_relative_error, Gradients, Graph, ParamStore, Tensor, Var};
use membart_core::train::{mrbp_step, unrolled_bptt_step, AdamWConfig, Rollout, StepConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

// Criterion 1
const FD_STEP: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-6;
const FD_TOLERANCE: f64 = 1e-4;
const FD_SEEDS: u64 = 10;
const FD_COORDS_PER_TENSOR: usize = 3;
// Criterion 2
const REPLAY_TOLERANCE: f64 = 1e-6;
const REPLAY_FLOOR: f64 = 1e-10;
// Criterion 3
const LATENCY_REPEATS: usize = 10;
const FLAT_T_STAT: f64 = 3.0;
const FLAT_DRIFT: f64 = 0.10;
const RISING_T_STAT: f64 = 3.0;
// Criteria 4 to 6
const RECALL_VOCAB: usize = 256;
const RECALL_SEGMENT: usize = 16;
const RECALL_SEGMENTS_PER_DOC: usize = 3;
const RECALL_MAX_STEPS: u64 = 5000;
const RECALL_THRESHOLD: f64 = 0.05;
const RECALL_BATCH: usize = 16;
const RECALL_LEARNING_RATE: f64 = 5e-4;
const RECALL_SPEEDUP: f64 = 0.5;
const HISTORY_RATIO: f64 = 1.2;
// Criterion 8
const QUEUES: u64 = 100;
// Criterion 9
const RESUME_STEPS: u64 = 200;

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- shared

fn tiny(variant: Variant, seed: u64, alpha: f64) -> Model<f64> {
    let mut model = Model::new(ModelConfig::tiny(variant), seed).unwrap();
    for l in 0..2 {
        if let Some(id) = model.params.find(&format!("mem.{l}.alpha")) {
            model.params.get_mut(id).data_mut()[0] = alpha;
        }
    }
    model
}

/// `horizon` recall batches entered mid-document with a random memory.
fn rollout(model: &Model<f64>, horizon: usize, seed: u64) -> Rollout<f64> {
    let stream = synthetic_copy_stream(12, 3, 3, seed).unwrap();
    let mut d = Dispatcher::new(stream, SegmentPlan::new(Task::Recall, 3, 0), 2);
    d.fast_forward(1).unwrap();
    let steps = (0..horizon).map(|_| d.next_batch().unwrap().unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_model = model.config().hidden_size;
    let memory = Tensor::from_fn(&[2, model.slots(), d_model], |_| rng.gen_range(-1.0..1.0));
    Rollout::new(steps, memory)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

// ---------------------------------------------------------------- 1

/// `Σ r ⊙ op(inputs)` against central differences for every input.
fn op_error<const N: usize>(seed: u64, inputs: [Tensor<f64>; N], op: impl Fn(&mut Graph<f64>, [Var; N]) -> Var) -> f64 {
    let loss = |vals: &[Tensor<f64>], record: bool| {
        let mut g = if record { Graph::new() } else { Graph::no_grad() };
        let vars: [Var; N] = std::array::from_fn(|i| g.leaf(vals[i].clone()).unwrap());
        let out = op(&mut g, vars);
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
        let proj = random(g.shape(out), &mut r);
        let p = g.constant(proj).unwrap();
        let m = g.mul(out, p).unwrap();
        let s = g.sum(m).unwrap();
        (g, vars, s)
    };
    let (mut g, vars, s) = loss(&inputs, true);
    g.backward(Some(s), &[]).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..N {
        let analytic = g.grad_or_zeros(vars[i]);
        let numeric = finite_diff_grad(
            |x| {
                let mut vals = inputs.to_vec();
                vals[i] = x.clone();
                let (g, _, s) = loss(&vals, false);
                Ok(g.value(s).item())
            },
            &inputs[i],
            FD_STEP,
        )
        .unwrap();
        worst = worst.max(max_relative_error(&analytic, &numeric, FD_FLOOR));
    }
    worst
}

fn memory_op_errors(seed: u64) -> Vec<(&'static str, f64)> {
    const D: usize = 8;
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Initializer {
        store: &mut store,
        rng: &mut rng,
    };
    let globals = MemoryGlobals {
        v_b: init.uniform("mem.v_b", &[3, D], 1.0),
        reset_norm: init.norm("mem.reset_norm", D),
    };
    let dual = DualLayer {
        input: init.stream("enc.0", D, 2 * D),
        memory: init.stream("mem.0", D, 2 * D),
    };
    let gate = GateParams {
        candidate: init.ffn("mem.candidate", D, 2 * D),
        gate: init.linear("mem.gate", D, 1),
    };
    let read = MemformerRead {
        ln: init.norm("mem.0.ln_read", D),
        attn: init.attn("mem.0.read", D),
        alpha: Some(init.constant("mem.0.alpha", &[1], 0.6)),
    };
    let writer = MemformerWriter {
        q: init.linear("mem.writer.q", D, D),
        k: init.linear("mem.writer.k", D, D),
        v: init.linear("mem.writer.v", D, D),
    };
    let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_add(100));
    let (h, m) = (random(&[2, 4, D], &mut r), random(&[2, 3, D], &mut r));
    let valid = vec![true, true, true, false, true, true, true, true];
    let reset = ResetFlags(vec![true, false]);
    let s = &store;
    vec![
        (
            "reset_and_normalize",
            op_error(seed, [m.clone()], |g, [m]| reset_and_normalize(g, s, &globals, m, &reset).unwrap()),
        ),
        (
            "dual_stream_layer",
            op_error(seed, [h.clone(), m.clone()], |g, [h, m]| {
                let (h, m) = dual_stream_layer(g, s, &dual, h, m, 2, &valid, MemoryAttention::SlotDiagonal).unwrap();
                let h = g.reshape(h, &[1, 8, D]).unwrap();
                let m = g.reshape(m, &[1, 6, D]).unwrap();
                g.concat1(&[h, m]).unwrap()
            }),
        ),
        (
            "gated_memory_update",
            op_error(seed, [m.clone(), random(&[2, 3, D], &mut r)], |g, [hm, prev]| {
                gated_memory_update(g, s, &gate, hm, prev).unwrap().0
            }),
        ),
        (
            "memformer_read",
            op_error(seed, [h.clone(), m.clone()], |g, [h, m]| memformer_read(g, s, &read, h, m, 2).unwrap()),
        ),
        (
            "memformer_write",
            op_error(seed, [m.clone(), h.clone()], |g, [m, h]| {
                memformer_write(g, s, &writer, m, h, 2, &valid).unwrap()
            }),
        ),
    ]
}

fn criterion_1() -> Check {
    let mut worst_op = (0.0, String::new());
    for seed in 0..FD_SEEDS {
        for (name, e) in memory_op_errors(seed) {
            if e > worst_op.0 || worst_op.1.is_empty() {
                worst_op = (e, format!("{name} seed {seed}"));
            }
        }
    }
    ensure(worst_op.0 < FD_TOLERANCE, || format!("{}: rel err {:.2e}", worst_op.1, worst_op.0))?;
    let mut worst = (0.0, String::new());
    let mut checked = 0;
    for variant in Variant::ALL {
        for seed in 0..FD_SEEDS {
            let mut model = tiny(variant, seed, 0.6);
            let r = rollout(&model, 2, seed);
            let rep = check_model_gradients(&mut model, &r, FD_COORDS_PER_TENSOR, FD_STEP, FD_FLOOR, seed).map_err(err)?;
            checked += rep.checked;
            if rep.max_rel_error > worst.0 || worst.1.is_empty() {
                worst = (rep.max_rel_error, format!("{variant} seed {seed} {}", rep.worst));
            }
        }
    }
    ensure(worst.0 < FD_TOLERANCE, || format!("{}: rel err {:.2e}", worst.1, worst.0))?;
    Ok(format!(
        "layer ops max rel err {:.2e}; {checked} model coordinates, max rel err {:.2e} ({})",
        worst_op.0, worst.0, worst.1
    ))
}

// ---------------------------------------------------------------- 2

fn max_grad_error(a: &Gradients<f64>, b: &Gradients<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|((_, x), (_, y))| max_relative_error(x, y, REPLAY_FLOOR))
        .fold(0.0, f64::max)
}

fn criterion_2() -> Check {
    let mut worst: f64 = 0.0;
    let cfg = StepConfig::default();
    for variant in Variant::ALL {
        let model = tiny(variant, 1, 0.5);
        let mut peaks = Vec::new();
        for horizon in [1, 2, 4, 8] {
            let r = rollout(&model, horizon, horizon as u64);
            let replay = mrbp_step(&model, &r, &cfg).map_err(err)?;
            let full = unrolled_bptt_step(&model, &r, &cfg, false).map_err(err)?;
            let e = max_grad_error(&replay.grads, &full.grads)
                .max(max_relative_error(&replay.initial_memory_grad, &full.initial_memory_grad, REPLAY_FLOOR));
            ensure(e < REPLAY_TOLERANCE, || format!("{variant} horizon {horizon}: rel err {e:.2e}"))?;
            worst = worst.max(e);
            peaks.push(replay.peak_nodes);
        }
        ensure(peaks.iter().all(|&p| p == peaks[0]), || format!("{variant}: peak nodes {peaks:?}"))?;
    }
    Ok(format!("max rel err {worst:.2e}; peak nodes constant over horizons 1, 2, 4, 8"))
}

// ---------------------------------------------------------------- 3

fn cost(mode: CostMode, turns: usize, n: usize, m: usize, c: usize) -> CostModel {
    CostModel {
        mode,
        turns,
        tokens_per_turn: n,
        memory_size: m,
        truncation: c,
    }
}

fn grid_config(variant: Variant, k: usize) -> ModelConfig {
    ModelConfig {
        hidden_size: 8,
        heads: 2,
        vocab_size: 16,
        max_positions: 8 * 32 + 1,
        ffn_expansion: 2,
        ..ModelConfig::tiny(variant)
    }
    .with_memory_size(k)
}

fn criterion_3() -> Check {
    let mut cells = 0;
    for m in 0..=8 {
        let model = Model::<f32>::new(grid_config(Variant::Membart, m), 1).map_err(err)?;
        for t in 1..=8 {
            for n in 1..=32 {
                let c = cost(CostMode::Stateful, t, n, m, 0);
                let got = measured_attention_ops(&model, &c).map_err(err)?;
                ensure(got == attention_op_count(&c), || format!("{c:?}: measured {got}"))?;
                cells += 1;
            }
        }
    }
    let model = Model::<f32>::new(grid_config(Variant::Stateless, 0), 1).map_err(err)?;
    for t in 1..=8 {
        for n in 1..=32 {
            for c in [cost(CostMode::StatelessFullHistory, t, n, 0, 0), cost(CostMode::StatelessTruncated, t, n, 0, 64)] {
                let got = measured_attention_ops(&model, &c).map_err(err)?;
                ensure(got == attention_op_count(&c), || format!("{c:?}: measured {got}"))?;
                cells += 1;
            }
        }
    }

    let (turns, n, m) = (8, 32, 8);
    let stateful = Model::<f32>::new(ModelConfig::default().with_memory_size(m), 1).map_err(err)?;
    let lat = latency_bench(&stateful, &cost(CostMode::Stateful, turns, n, m, 0), LATENCY_REPEATS).map_err(err)?;
    let flat = latency_trend(&lat);
    let drift = flat.slope.abs() * (turns - 1) as f64 / flat.mean_y;
    ensure(flat.t_stat().abs() < FLAT_T_STAT || drift < FLAT_DRIFT, || {
        format!("stateful slope {:.4} ms/turn (t = {:.2}, drift {:.1}%)", flat.slope, flat.t_stat(), 100.0 * drift)
    })?;
    let stateless = Model::<f32>::new(ModelConfig::default().with_variant(Variant::Stateless), 1).map_err(err)?;
    let lat = latency_bench(&stateless, &cost(CostMode::StatelessFullHistory, turns, n, 0, 0), LATENCY_REPEATS)
        .map_err(err)?;
    let rising = latency_trend(&lat);
    ensure(rising.slope > 0.0 && rising.t_stat() > RISING_T_STAT, || {
        format!("full-history slope {:.4} ms/turn (t = {:.2})", rising.slope, rising.t_stat())
    })?;
    Ok(format!(
        "{cells} cells exact; stateful slope {:.4} ms/turn (t = {:.2}, drift {:.1}%), full-history slope {:.3} ms/turn (t = {:.1})",
        flat.slope,
        flat.t_stat(),
        100.0 * drift,
        rising.slope,
        rising.t_stat()
    ))
}

// ---------------------------------------------------------------- 4 to 6

struct RecallRun {
    cfg: RunConfig,
    membart: VariantCurve,
    model: Model<f32>,
    memformer: Option<VariantCurve>,
    shared: Option<VariantCurve>,
}

fn recall_config() -> RunConfig {
    let mut map = ConfigMap::default();
    for (k, v) in [
        ("model.vocab_size", RECALL_VOCAB.to_string()),
        ("data.context", RECALL_SEGMENT.to_string()),
        ("data.segs_per_doc", RECALL_SEGMENTS_PER_DOC.to_string()),
        ("data.task", "recall".into()),
        ("train.steps", RECALL_MAX_STEPS.to_string()),
        ("train.batch_size", RECALL_BATCH.to_string()),
        ("train.warmup_steps", "0".into()),
        ("train.learning_rate", RECALL_LEARNING_RATE.to_string()),
        ("compare.threshold", RECALL_THRESHOLD.to_string()),
    ] {
        map.set(k, v).unwrap();
    }
    RunConfig::from_map(map).unwrap()
}

/// Membart until its smoothed loss crosses the threshold (or the step
/// budget ends). Memformer then needs only twice as many steps to decide the
/// speed-up, and the shared variant runs as long as membart did.
fn recall_run() -> &'static Result<RecallRun, String> {
    static RUN: OnceLock<Result<RecallRun, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = recall_config();
        let (membart, model) = commands::train_curve_until(&cfg, Variant::Membart, true).map_err(err)?;
        let ran = membart.losses.len() as u64;
        let (memformer, shared) = match membart.steps_to_threshold {
            Some(s) => {
                let mut c = cfg.clone();
                c.train.max_steps = ((s as f64 / RECALL_SPEEDUP).ceil() as u64).min(RECALL_MAX_STEPS);
                let memformer = commands::train_curve_until(&c, Variant::MemformerInsert, true).map_err(err)?.0;
                c.train.max_steps = ran;
                let shared = commands::train_curve_until(&c, Variant::MembartShared, false).map_err(err)?.0;
                (Some(memformer), Some(shared))
            }
            None => (None, None),
        };
        Ok(RecallRun {
            cfg,
            membart,
            model,
            memformer,
            shared,
        })
    })
}

fn criterion_4() -> Check {
    let run = recall_run().as_ref().map_err(Clone::clone)?;
    let s = run.membart.steps_to_threshold.ok_or_else(|| {
        format!(
            "membart smoothed loss {:.4} after {} steps, never below {RECALL_THRESHOLD}",
            run.membart.final_loss,
            run.membart.losses.len()
        )
    })?;
    let mf = run.memformer.as_ref().unwrap();
    let budget = mf.losses.len();
    let mf_steps = mf.steps_to_threshold;
    ensure(mf_steps.map_or(true, |m| s as f64 <= RECALL_SPEEDUP * m as f64), || {
        format!("membart {s} steps, memformer_insert {} steps", mf_steps.unwrap())
    })?;
    let shared = run.shared.as_ref().unwrap();
    ensure(shared.final_loss >= run.membart.final_loss, || {
        format!("membart_shared final loss {:.4} < membart {:.4}", shared.final_loss, run.membart.final_loss)
    })?;
    Ok(format!(
        "membart {s} steps; memformer_insert {}; membart_shared final {:.4} vs {:.4}",
        mf_steps.map_or(format!("not within {budget}"), |m| format!("{m} steps")),
        shared.final_loss,
        run.membart.final_loss
    ))
}

fn criterion_5() -> Check {
    let run = recall_run().as_ref().map_err(Clone::clone)?;
    let with = commands::eval_model(&run.model, &run.cfg, false).map_err(err)?;
    let mut cfg = run.cfg.clone();
    cfg.run.no_history = true;
    let without = commands::eval_model(&run.model, &cfg, false).map_err(err)?;
    let ratio = without.perplexity / with.perplexity;
    let detail = format!(
        "perplexity {:.3} with memory, {:.3} without (x{ratio:.3}) after {} steps",
        with.perplexity,
        without.perplexity,
        run.membart.losses.len()
    );
    ensure(ratio >= HISTORY_RATIO, || detail.clone())?;
    Ok(detail)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn criterion_6() -> Check {
    let cfg = StepConfig::default();
    for variant in Variant::ALL {
        let model = tiny(variant, 2, 0.5);
        let g = mrbp_step(&model, &rollout(&model, 1, 3), &cfg).map_err(err)?;
        ensure(g.memory_grad_norm == 0.0, || format!("{variant} horizon 1: {:e}", g.memory_grad_norm))?;
    }
    let model = tiny(Variant::Stateless, 2, 0.5);
    for horizon in [2, 4] {
        let g = mrbp_step(&model, &rollout(&model, horizon, 3), &cfg).map_err(err)?;
        ensure(g.memory_grad_norm == 0.0, || format!("stateless horizon {horizon}: {:e}", g.memory_grad_norm))?;
    }

    let run = recall_run().as_ref().map_err(Clone::clone)?;
    let norms = &run.membart.memory_grad_norms;
    ensure(norms.iter().all(|n| n.is_finite() && *n >= 0.0), || "non-finite memory gradient norm".into())?;
    let positive = norms.iter().filter(|&&n| n > 0.0).count();
    ensure(positive > 0, || "memory gradient norm never positive".into())?;
    // Windows of the first quarter: the first against the last.
    let quarter = &norms[..(norms.len() / 4).max(2)];
    let w = (quarter.len() / 5).max(1);
    let (first, last) = (mean(&quarter[..w]), mean(&quarter[quarter.len() - w..]));
    ensure(last > first, || format!("first-quarter mean fell from {first:.3e} to {last:.3e}"))?;
    Ok(format!(
        "zero at horizon 1 and stateless; positive on {positive}/{} recall steps; first quarter {first:.3e} -> {last:.3e}",
        norms.len()
    ))
}

// ---------------------------------------------------------------- 7

fn run_model(model: &Model<f64>, batch: &StepBatch, m: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut g = Graph::no_grad();
    let mv = g.constant(m.clone()).unwrap();
    let enc = model.encode(&mut g, &batch.src, mv, &batch.reset).unwrap();
    let logits = model.decode(&mut g, &batch.tgt_in, enc.states, &batch.src.valid).unwrap();
    (g.value(enc.states).clone(), g.value(enc.next_memory).clone(), g.value(logits).clone())
}

fn seg(source: &[usize], target: &[usize], is_first: bool) -> Option<(u64, Segment)> {
    Some((
        0,
        Segment {
            source: source.to_vec(),
            target: target.to_vec(),
            index: usize::from(!is_first),
            is_first,
            scored: true,
        },
    ))
}

fn criterion_7() -> Check {
    let stateful = [Variant::Membart, Variant::MembartShared, Variant::MemformerInsert, Variant::MemformerRezero];
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // Reset lanes forget history bitwise; carried lanes do not.
    for variant in stateful {
        let model = tiny(variant, 5, 0.5);
        let batch = StepBatch::from_segments(&[seg(&[5, 6, 7], &[4, 5], true), seg(&[9, 10, 11], &[8], false)]);
        let (m1, m2) = (random(&[2, 2, 8], &mut rng), random(&[2, 2, 8], &mut rng));
        let (a, b) = (run_model(&model, &batch, &m1), run_model(&model, &batch, &m2));
        let lane = |t: &Tensor<f64>, l: usize| {
            let per = t.len() / 2;
            t.data()[l * per..(l + 1) * per].iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        for (x, y) in [(&a.0, &b.0), (&a.1, &b.1), (&a.2, &b.2)] {
            ensure(lane(x, 0) == lane(y, 0), || format!("{variant}: reset lane depends on history"))?;
        }
        ensure(lane(&a.1, 1) != lane(&b.1, 1), || format!("{variant}: carried lane ignores history"))?;
    }

    // Gates in [0, 1] and the update between previous memory and candidate.
    for trial in 0..100u64 {
        let mut store = ParamStore::<f64>::new();
        let mut r = ChaCha8Rng::seed_from_u64(trial);
        let mut init = Initializer {
            store: &mut store,
            rng: &mut r,
        };
        let params = GateParams {
            candidate: init.ffn("mem.candidate", 8, 16),
            gate: init.linear("mem.gate", 8, 1),
        };
        store.get_mut(params.gate.b).data_mut()[0] = rng.gen_range(-8.0..8.0);
        let mut g = Graph::new();
        let hm = g.constant(random(&[2, 3, 8], &mut rng)).unwrap();
        let prev = random(&[2, 3, 8], &mut rng);
        let pv = g.constant(prev.clone()).unwrap();
        let (next, z) = gated_memory_update(&mut g, &store, &params, hm, pv).unwrap();
        let cand = params.candidate.forward(&mut g, &store, hm).unwrap();
        ensure(g.value(z).data().iter().all(|z| (0.0..=1.0).contains(z)), || format!("trial {trial}: gate outside [0, 1]"))?;
        let convex = g
            .value(next)
            .data()
            .iter()
            .zip(prev.data())
            .zip(g.value(cand).data())
            .all(|((&n, &p), &c)| n >= p.min(c) - 1e-12 && n <= p.max(c) + 1e-12);
        ensure(convex, || format!("trial {trial}: update leaves the hull"))?;
    }

    // Per layer, perturbing one slot leaves the other slots' outputs bitwise equal.
    let model = Model::<f64>::new(ModelConfig::tiny(Variant::Membart).with_memory_size(3), 9).map_err(err)?;
    for (l, (input, memory)) in model.stream_param_pairs().into_iter().enumerate() {
        let layer = DualLayer { input, memory };
        for slot in 0..3 {
            let h = random(&[1, 4, 8], &mut rng);
            let m = random(&[1, 3, 8], &mut rng);
            let mut p = m.clone();
            for (c, v) in p.data_mut()[slot * 8..(slot + 1) * 8].iter_mut().enumerate() {
                *v += 0.5 * c as f64;
            }
            let out = |m: &Tensor<f64>| {
                let mut g = Graph::no_grad();
                let (hv, mv) = (g.constant(h.clone()).unwrap(), g.constant(m.clone()).unwrap());
                let (_, mo) =
                    dual_stream_layer(&mut g, &model.params, &layer, hv, mv, 2, &[true; 4], MemoryAttention::SlotDiagonal)
                        .unwrap();
                g.value(mo).clone()
            };
            let (a, b) = (out(&m), out(&p));
            for other in (0..3).filter(|&j| j != slot) {
                let r = other * 8..(other + 1) * 8;
                let same = a.data()[r.clone()].iter().zip(&b.data()[r]).all(|(x, y)| x.to_bits() == y.to_bits());
                ensure(same, || format!("layer {l}: slot {slot} leaks into slot {other}"))?;
            }
        }
    }

    // Zero slots reproduce the stateless model bitwise.
    let batch = StepBatch::from_segments(&[seg(&[5, 6, 7, 8], &[4, 5, 6], false), seg(&[9, 10], &[7], true)]);
    let empty = Tensor::zeros(&[2, 0, 8]);
    let base = run_model(&Model::new(ModelConfig::tiny(Variant::Stateless), 3).map_err(err)?, &batch, &empty);
    for variant in stateful {
        let model = Model::<f64>::new(ModelConfig::tiny(variant).with_memory_size(0), 3).map_err(err)?;
        let got = run_model(&model, &batch, &empty);
        ensure(got.0.bitwise_eq(&base.0) && got.2.bitwise_eq(&base.2), || format!("{variant} with k = 0 differs"))?;
    }
    Ok("reset independence, gate convexity (100 trials), slot isolation per layer, k = 0 degeneracy".into())
}

// ---------------------------------------------------------------- 8

fn doc(id: u64, len: usize) -> Document {
    Document {
        id,
        tokens: (0..len).map(|i| 4 + (i * 7 + id as usize) % 250).collect(),
    }
}

fn check_queue(docs: &[Document], batch: usize, window: usize, overlap: usize) -> std::result::Result<(), String> {
    let mut d = Dispatcher::new(VecDeque::from(docs.to_vec()), SegmentPlan::new(Task::Copy, window, overlap), batch);
    let steps: Vec<StepBatch> = std::iter::from_fn(|| d.next_batch().unwrap()).collect();
    let mut per_lane: Vec<Vec<(u64, usize, bool, Vec<usize>)>> = vec![Vec::new(); batch];
    let mut drained = vec![false; batch];
    for s in &steps {
        ensure(s.batch_size() == batch, || "batch shape changed".into())?;
        for lane in 0..batch {
            match s.tags[lane] {
                Some(t) => {
                    ensure(!drained[lane], || format!("lane {lane} reactivated"))?;
                    per_lane[lane].push((t.doc_id, t.index, s.reset.get(lane), s.src.tokens(lane)));
                }
                None => {
                    drained[lane] = true;
                    ensure(!s.reset.get(lane) && s.src.row(lane).iter().all(|&t| t == PAD), || {
                        format!("inactive lane {lane} not padded")
                    })?;
                }
            }
        }
    }
    let mut lane_of = HashMap::new();
    let mut emitted: HashMap<u64, Vec<(usize, bool, Vec<usize>)>> = HashMap::new();
    for (lane, seq) in per_lane.iter().enumerate() {
        let mut prev = None;
        for (id, index, reset, tokens) in seq {
            ensure(*reset == (*index == 0), || format!("doc {id} segment {index}: reset {reset}"))?;
            if prev != Some(*id) {
                ensure(lane_of.insert(*id, lane).is_none(), || format!("doc {id} split across runs"))?;
            }
            prev = Some(*id);
            emitted.entry(*id).or_default().push((*index, *reset, tokens.clone()));
        }
    }
    ensure(emitted.len() == docs.len(), || format!("{} of {} docs emitted", emitted.len(), docs.len()))?;
    for dd in docs {
        let want: Vec<_> = segment_document(dd, window, overlap)
            .unwrap()
            .into_iter()
            .map(|s| (s.index, s.is_first, s.source))
            .collect();
        ensure(emitted[&dd.id] == want, || format!("doc {} segments out of order", dd.id))?;
    }
    Ok(())
}

fn criterion_8() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for q in 0..QUEUES {
        let n = rng.gen_range(0..12);
        let docs: Vec<_> = (0..n).map(|i| doc(i, rng.gen_range(1..40))).collect();
        let batch = rng.gen_range(1..5);
        let window = rng.gen_range(2..9);
        let overlap = rng.gen_range(0..window);
        check_queue(&docs, batch, window, overlap).map_err(|e| format!("queue {q}: {e}"))?;
    }
    for trial in 0..QUEUES {
        let len = rng.gen_range(1..200);
        let ratio: f64 = rng.gen_range(0.0..=1.0);
        let s = segment_document(&doc(trial, len), 256, 0).unwrap().remove(0);
        let masked = apply_denoising_mask(&s, ratio, &mut rng);
        let count = masked.source.iter().filter(|&&t| t == MASK).count();
        let want = (ratio * s.source.len() as f64).floor() as usize;
        ensure(count == want, || format!("len {len} ratio {ratio}: {count} masks, want {want}"))?;
    }
    for trial in 0..QUEUES {
        let segs = segment_document(&doc(trial, rng.gen_range(1..120)), rng.gen_range(2..20), 0).unwrap();
        let pairs = text_recall_pairs(&segs);
        ensure(pairs.iter().filter(|p| p.scored).count() == segs.len() - 1, || format!("trial {trial}: pair count"))?;
        for t in 1..segs.len() {
            ensure(pairs[t].source == segs[t].source && pairs[t].target == segs[t - 1].target, || {
                format!("trial {trial}: pair {t}")
            })?;
        }
    }
    Ok(format!("{QUEUES} dispatcher queues, {QUEUES} mask draws, {QUEUES} recall pairings"))
}

// ---------------------------------------------------------------- 9

const RESUME_CONFIG: &str = "\
model.hidden_size = 16
model.heads = 2
model.memory_size = 4
model.max_positions = 24
model.ffn_expansion = 2
data.context = 8
train.batch_size = 4
train.dropout = 0.1
";

fn resume_config(dir: &Path, extra: &[(&str, String)]) -> RunConfig {
    let mut map = ConfigMap::from_text(RESUME_CONFIG).unwrap();
    map.set("run.out", dir.display().to_string()).unwrap();
    for (k, v) in extra {
        map.set(k, v.clone()).unwrap();
    }
    RunConfig::from_map(map).unwrap()
}

fn train_records(path: &Path) -> Vec<Value> {
    read_records(path)
        .unwrap()
        .into_iter()
        .filter(|r| r["kind"] == "train")
        .map(|mut r| {
            r.as_object_mut().unwrap().remove("wall_ms");
            r
        })
        .collect()
}

fn criterion_9() -> Check {
    let model = Model::<f32>::new(ModelConfig::default(), 3).map_err(err)?;
    let snap = Snapshot {
        params: model.params.clone(),
        optimizer: None,
        state: None,
        seed: 3,
    };
    let bytes = snap.to_checkpoint([1; 32]).to_bytes();
    let back = Checkpoint::from_bytes(&bytes).map_err(err)?;
    ensure(back.to_bytes() == bytes, || "re-encoded bytes differ".into())?;
    let restored = Snapshot::<f32>::from_checkpoint(&back, &model, AdamWConfig::default()).map_err(err)?;
    ensure(restored.params.bitwise_eq(&model.params), || "parameters differ after round trip".into())?;

    let half = RESUME_STEPS / 2;
    let full = tempfile::tempdir().map_err(err)?;
    let steps = ("train.steps", RESUME_STEPS.to_string());
    commands::train(&resume_config(full.path(), &[steps.clone(), ("run.checkpoint_every", half.to_string())]))
        .map_err(err)?;
    let part = tempfile::tempdir().map_err(err)?;
    let ck = full.path().join(format!("step-{half:06}.mbrt")).display().to_string();
    commands::train(&resume_config(part.path(), &[steps, ("run.checkpoint", ck)])).map_err(err)?;
    let a = train_records(&full.path().join(METRICS_FILE));
    let b = train_records(&part.path().join(METRICS_FILE));
    ensure(a.len() == RESUME_STEPS as usize && a[half as usize..] == b[..], || {
        format!("{} uninterrupted vs {} resumed records disagree", a.len(), b.len())
    })?;
    let fa = std::fs::read(full.path().join(CHECKPOINT_FILE)).map_err(err)?;
    let fb = std::fs::read(part.path().join(CHECKPOINT_FILE)).map_err(err)?;
    ensure(fa == fb, || "final checkpoints differ".into())?;
    Ok(format!(
        "default-config checkpoint {} bytes round-trips bitwise; resume at {half} of {RESUME_STEPS} matches",
        bytes.len()
    ))
}

// ---------------------------------------------------------------- main

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let criteria: [(usize, &str, fn() -> Check); 9] = [
        (1, "gradient check", criterion_1),
        (2, "replay equals unrolled backprop", criterion_2),
        (3, "attention cost and latency", criterion_3),
        (4, "text recall", criterion_4),
        (5, "history ablation", criterion_5),
        (6, "memory gradient diagnostic", criterion_6),
        (7, "mechanism invariants", criterion_7),
        (8, "pipeline invariants", criterion_8),
        (9, "checkpoint and resume", criterion_9),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {id} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id} {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 && strict {
        std::process::exit(1);
    }
}
