use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use membart_core::eval::bench_table;

use crate::commands;
use crate::config::{ConfigMap, RunConfig};
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "membart", version, about = "Train, evaluate and benchmark memory-augmented encoder-decoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model, writing checkpoints and metrics to the run directory.
    Train(Shared),
    /// Report perplexity of a checkpoint on the evaluation stream.
    Eval {
        #[command(flatten)]
        shared: Shared,
        /// Also decode greedily and report word-overlap F1.
        #[arg(long)]
        generate: bool,
    },
    /// Attention-cost and latency table over the configured grid.
    Bench(Shared),
    /// Train each variant on the recall task and report steps to threshold.
    CompareVariants(Shared),
}

/// Flags shared by every command. Each one overrides its config-file key.
#[derive(Debug, Clone, Default, Args)]
pub struct Shared {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// recall, denoise, lm or copy.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub variant: Option<String>,
    /// Memory slots k.
    #[arg(long)]
    pub memory_size: Option<usize>,
    /// Segment length in tokens.
    #[arg(long)]
    pub context: Option<usize>,
    /// Replay horizon in timesteps.
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Reset memory at every timestep.
    #[arg(long)]
    pub no_history: bool,
    #[arg(long, value_parser = ["f32", "f64"])]
    pub precision: Option<String>,
    /// Extra `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Shared {
    /// Config file (or defaults) with the flags applied on top.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut map = match &self.config {
            Some(p) => ConfigMap::from_file(p)?,
            None => ConfigMap::default(),
        };
        let path = |p: &PathBuf| p.display().to_string();
        let flags: [(&str, Option<String>); 11] = [
            ("data.task", self.task.clone()),
            ("model.variant", self.variant.clone()),
            ("model.memory_size", self.memory_size.map(|v| v.to_string())),
            ("data.context", self.context.map(|v| v.to_string())),
            ("train.horizon", self.horizon.map(|v| v.to_string())),
            ("train.steps", self.steps.map(|v| v.to_string())),
            ("train.seed", self.seed.map(|v| v.to_string())),
            ("run.checkpoint", self.checkpoint.as_ref().map(path)),
            ("run.out", self.out.as_ref().map(path)),
            ("run.no_history", self.no_history.then(|| "true".to_string())),
            ("train.precision", self.precision.clone()),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                map.set(key, v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            map.set(k.trim(), v.trim())?;
        }
        RunConfig::from_map(map)
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train(s) => {
            let cfg = s.resolve()?;
            let out = commands::train(&cfg)?;
            match out.diagnostics.last() {
                Some(d) => println!("step {} loss {:.6} checkpoint {}", out.final_step, d.loss, out.checkpoint.display()),
                None => println!("step {} checkpoint {}", out.final_step, out.checkpoint.display()),
            }
        }
        Command::Eval { shared, generate } => {
            let cfg = shared.resolve()?;
            let report = commands::eval(&cfg, generate)?;
            println!("{}", serde_json::to_string(&report).map_err(|e| CliError::Runtime(e.to_string()))?);
        }
        Command::Bench(s) => {
            let cfg = s.resolve()?;
            print!("{}", bench_table(&commands::bench(&cfg)?));
        }
        Command::CompareVariants(s) => {
            let cfg = s.resolve()?;
            println!("variant\tsteps_to_threshold\tfinal_loss");
            for c in commands::compare_variants(&cfg)? {
                let steps = c.steps_to_threshold.map_or("-".to_string(), |s| s.to_string());
                println!("{}\t{steps}\t{:.6}", c.variant, c.final_loss);
            }
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
