use std::fs;
use std::path::{Path, PathBuf};

use membart_cli::app::run;
use membart_cli::checkpoint::{Checkpoint, Entry, Snapshot, MAGIC};
use membart_cli::commands;
use membart_cli::config::{ConfigMap, RunConfig};
use membart_cli::metrics::{read_records, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE};
use membart_cli::CliError;
use membart_core::model::{Model, ModelConfig};
use membart_core::tensor::Tensor;
use membart_core::train::AdamWConfig;
use serde_json::Value;

const TINY: &str = "\
# small enough for unit-speed tests
model.hidden_size = 8
model.heads = 2
model.memory_size = 2
model.vocab_size = 12
model.max_positions = 16
model.ffn_expansion = 2
data.context = 4
data.eval_docs = 6
train.batch_size = 2
train.warmup_steps = 3
train.dropout = 0.1
bench.repeats = 3
";

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.conf");
    fs::write(&path, TINY).unwrap();
    path
}

fn args(list: &[&str]) -> Vec<String> {
    std::iter::once("membart").chain(list.iter().copied()).map(String::from).collect()
}

fn resolve(extra: &[(&str, &str)], dir: &Path) -> RunConfig {
    let mut map = ConfigMap::from_text(TINY).unwrap();
    map.set("run.out", dir.display().to_string()).unwrap();
    for (k, v) in extra {
        map.set(k, *v).unwrap();
    }
    RunConfig::from_map(map).unwrap()
}

/// Training records with the wall-clock field removed.
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

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let model = Model::<f32>::new(ModelConfig::default(), 3).unwrap();
    let snap = Snapshot {
        params: model.params.clone(),
        optimizer: None,
        state: None,
        seed: u64::MAX - 5,
    };
    let digest = [7u8; 32];
    let bytes = snap.to_checkpoint(digest).to_bytes();
    assert!(bytes.len() < 5 * 1024 * 1024, "{} bytes", bytes.len());
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ck.to_bytes(), bytes);
    let back = Snapshot::<f32>::from_checkpoint(&ck, &model, AdamWConfig::default()).unwrap();
    assert!(back.params.bitwise_eq(&model.params));
    assert_eq!(back.seed, u64::MAX - 5);
}

#[test]
fn entry_layout_matches_the_format() {
    let mut ck = Checkpoint::new([0; 32]);
    ck.push(Entry::from_tensor("w", &Tensor::<f64>::from_f64(&[2], &[1.5, -2.0]).unwrap()));
    let bytes = ck.to_bytes();
    let body = &bytes[40..bytes.len() - 8];
    let mut want = vec![1u8, 0, b'w', 1, 1];
    want.extend_from_slice(&2u64.to_le_bytes());
    want.extend_from_slice(&1.5f64.to_le_bytes());
    want.extend_from_slice(&(-2.0f64).to_le_bytes());
    assert_eq!(body, &want[..]);
}

#[test]
fn damaged_checkpoints_are_refused() {
    let model = Model::<f32>::new(ModelConfig::tiny(membart_core::model::Variant::Membart), 1).unwrap();
    let snap = Snapshot {
        params: model.params.clone(),
        optimizer: None,
        state: None,
        seed: 0,
    };
    let bytes = snap.to_checkpoint([1; 32]).to_bytes();

    let mut flipped = bytes.clone();
    flipped[100] ^= 0x10;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(CliError::Runtime(m)) if m.contains("integrity")));

    let cut = &bytes[..20];
    assert!(matches!(Checkpoint::from_bytes(cut), Err(CliError::Runtime(m)) if m.contains("offset 8")));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&magic), Err(CliError::Usage(_))));

    let mut version = bytes.clone();
    version[4] = 2;
    assert!(matches!(Checkpoint::from_bytes(&version), Err(CliError::Usage(m)) if m.contains("version 2")));

    // a body cut short but with a valid checksum still reports the offset
    let mut short = bytes[..bytes.len() - 8 - 3].to_vec();
    let sum: [u8; 8] = {
        use sha2::Digest;
        sha2::Sha256::digest(&short)[..8].try_into().unwrap()
    };
    short.extend_from_slice(&sum);
    assert!(matches!(Checkpoint::from_bytes(&short), Err(CliError::Runtime(m)) if m.contains("truncated at offset")));
}

#[test]
fn zero_steps_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = resolve(&[("train.steps", "0")], dir.path());
    let out = commands::train(&cfg).unwrap();
    assert_eq!(out.final_step, 0);
    assert!(out.diagnostics.is_empty());
    let ck = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    let init = Model::<f32>::new(cfg.model.clone(), cfg.train.seed).unwrap();
    let snap = Snapshot::<f32>::from_checkpoint(&ck, &init, cfg.train.adamw()).unwrap();
    assert!(snap.params.bitwise_eq(&init.params));
    assert_eq!(snap.state.unwrap().step, 0);
    assert_eq!(fs::read_to_string(dir.path().join(CONFIG_FILE)).unwrap(), cfg.to_text());
    assert!(!dir.path().join("run.lock").exists());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let full = tempfile::tempdir().unwrap();
    commands::train(&resolve(&[("train.steps", "12"), ("run.checkpoint_every", "5")], full.path())).unwrap();
    let part = tempfile::tempdir().unwrap();
    let ck = full.path().join("step-000005.mbrt");
    let ck = ck.display().to_string();
    commands::train(&resolve(&[("train.steps", "12"), ("run.checkpoint", &ck)], part.path())).unwrap();

    let a = train_records(&full.path().join(METRICS_FILE));
    let b = train_records(&part.path().join(METRICS_FILE));
    assert_eq!(a.len(), 12);
    assert_eq!(b.len(), 7);
    assert_eq!(b[0]["step"], 6);
    assert_eq!(&a[5..], &b[..]);
    let fa = fs::read(full.path().join(CHECKPOINT_FILE)).unwrap();
    let fb = fs::read(part.path().join(CHECKPOINT_FILE)).unwrap();
    assert!(fa == fb, "final checkpoints differ");
}

#[test]
fn eval_is_repeatable_and_history_switch_changes_it() {
    let dir = tempfile::tempdir().unwrap();
    commands::train(&resolve(&[("train.steps", "4")], dir.path())).unwrap();
    let ck = dir.path().join(CHECKPOINT_FILE).display().to_string();
    let cfg = resolve(&[("run.checkpoint", &ck)], dir.path());
    let a = commands::eval(&cfg, true).unwrap();
    let b = commands::eval(&cfg, true).unwrap();
    assert_eq!(a, b);
    assert!(a.f1.is_some());
    let off = commands::eval(&resolve(&[("run.checkpoint", &ck), ("run.no_history", "true")], dir.path()), false).unwrap();
    assert_ne!(off.perplexity, a.perplexity);
    assert!(!off.memory_enabled);
    let evals = read_records(&dir.path().join(METRICS_FILE))
        .unwrap()
        .into_iter()
        .filter(|r| r["kind"] == "eval")
        .count();
    assert_eq!(evals, 3);
}

#[test]
fn mismatched_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    commands::train(&resolve(&[("train.steps", "0")], dir.path())).unwrap();
    let ck = dir.path().join(CHECKPOINT_FILE).display().to_string();
    let cfg = resolve(&[("run.checkpoint", &ck), ("model.memory_size", "3")], dir.path());
    match commands::eval(&cfg, false) {
        Err(CliError::Usage(m)) => assert!(m.contains("digest"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn bench_table_and_single_turn_equality() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = resolve(&[("bench.turns", "1,3"), ("bench.tokens", "4"), ("bench.memory", "0,2"), ("bench.truncation", "8")], dir.path());
    let rows = commands::bench(&cfg).unwrap();
    assert!(rows.iter().all(|r| r.predicted_ops == r.measured_ops));
    // stateful m ∈ {0, 2} plus two stateless modes, for each T
    assert_eq!(rows.len(), 8);
    let t1: Vec<u64> = rows.iter().filter(|r| r.turns == 1 && r.memory_size == 0).map(|r| r.measured_ops).collect();
    assert_eq!(t1.len(), 3);
    assert!(t1.iter().all(|&v| v == t1[0]));
    let tsv = fs::read_to_string(dir.path().join("bench.tsv")).unwrap();
    assert!(tsv.lines().all(|l| l.split('\t').count() == 8));
}

#[test]
fn compare_variants_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let extra = [("train.steps", "6"), ("compare.variants", "membart,memformer_insert")];
    let ca = commands::compare_variants(&resolve(&extra, a.path())).unwrap();
    let cb = commands::compare_variants(&resolve(&extra, b.path())).unwrap();
    assert_eq!(ca.len(), 2);
    for (x, y) in ca.iter().zip(&cb) {
        assert_eq!(x.losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y.losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
    assert_ne!(ca[0].losses, ca[1].losses);
    let curves = fs::read_to_string(a.path().join("curves.tsv")).unwrap();
    assert_eq!(curves.lines().count(), 7);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let conf = tiny_config(dir.path());
    let conf = conf.to_str().unwrap();
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    assert_eq!(run(args(&["train", "--config", conf, "--out", out, "--steps", "2", "--seed", "4"])), 0);
    assert_eq!(run(args(&["train", "--steps", "many"])), 1);
    assert_eq!(run(args(&["frobnicate"])), 1);
    assert_eq!(run(args(&["train", "--config", conf, "--variant", "lstm", "--out", out])), 1);
    assert_eq!(run(args(&["eval", "--config", conf, "--checkpoint", "/nonexistent.mbrt"])), 1);
    assert_eq!(run(args(&["train", "--config", conf, "--precision", "f16"])), 1);
    assert_eq!(run(args(&["train", "--config", conf, "--set", "model.slots=3"])), 1);

    let ck = Path::new(out).join(CHECKPOINT_FILE);
    let mut bytes = fs::read(&ck).unwrap();
    bytes[60] ^= 1;
    let bad = dir.path().join("bad.mbrt");
    fs::write(&bad, bytes).unwrap();
    assert_eq!(run(args(&["eval", "--config", conf, "--checkpoint", bad.to_str().unwrap()])), 2);
    assert_eq!(run(args(&["eval", "--config", conf, "--checkpoint", ck.to_str().unwrap(), "--no-history"])), 0);

    let locked = dir.path().join("locked");
    fs::create_dir_all(&locked).unwrap();
    fs::write(locked.join("run.lock"), "1").unwrap();
    assert_eq!(run(args(&["train", "--config", conf, "--out", locked.to_str().unwrap(), "--steps", "0"])), 2);
    assert_eq!(run(args(&["--help"])), 0);
}
