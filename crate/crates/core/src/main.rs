use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use alive_core::backend::{Generator, RemoteBackend};
use alive_core::engine::config::{load_backend, RunConfig};
use alive_core::engine::corpus::load_corpus;
use alive_core::engine::export::{export_batches, FORMAT_VERSION};
use alive_core::engine::stats::{render_table, run_stats};
use alive_core::engine::{run, Engine, RunSummary};

#[derive(Parser)]
#[command(name = "alive", version, about = "Self-play task construction, solving and review loop")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the loop against the built-in toy policy.
    ToyTrain(ToyTrain),
    /// Run the loop against an OpenAI-compatible endpoint.
    Generate(Generate),
    /// Write a run's batches as a labeled archive.
    Export {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = FORMAT_VERSION)]
        format_version: u32,
    },
    /// Windowed metric summaries of a run.
    Stats {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 50)]
        window: usize,
        #[arg(long)]
        json: bool,
    },
    /// Check a config file and list every problem found.
    ValidateConfig { path: PathBuf },
}

#[derive(Args)]
struct ToyTrain {
    /// Config file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs/toy")]
    run_dir: PathBuf,
    #[arg(long)]
    vocab_size: Option<u32>,
    #[arg(long)]
    chain_length: Option<u32>,
    #[arg(long)]
    modulus: Option<u32>,
    #[arg(long)]
    corpus_seed: Option<u64>,
}

#[derive(Args)]
struct Generate {
    #[arg(long)]
    config: PathBuf,
    /// Policy backend config.
    #[arg(long, alias = "backend-config")]
    backend: PathBuf,
    /// Oracle backend config, needed for warm-up and oracle review.
    #[arg(long)]
    oracle: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "runs/remote")]
    run_dir: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn report(run_dir: &Path, s: &RunSummary) {
    if s.resumed_from > 0 {
        println!("resumed after step {}", s.resumed_from);
    }
    println!("ran {} steps, last step {}, run dir {}", s.steps_run, s.last_step, run_dir.display());
    if let Some(m) = &s.final_metrics {
        let acc = m.solver_acc_mean.map_or("-".to_string(), |a| format!("{a:.4}"));
        let fcp = m.fcp_loss.map_or("-".to_string(), |f| format!("{f:.4}"));
        println!("final: constructor_reward {:.4} solver_acc {acc} fcp_loss {fcp}", m.constructor_reward_mean);
    }
}

fn toy_train(a: ToyTrain) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.steps {
        cfg.loop_cfg.total_steps = s;
        cfg.loop_cfg.warmup_steps = cfg.loop_cfg.warmup_steps.min(s);
    }
    if let Some(s) = a.seed {
        cfg.loop_cfg.seed = s;
    }
    let spec = &mut cfg.toy.spec;
    spec.vocab_size = a.vocab_size.unwrap_or(spec.vocab_size);
    spec.chain_length = a.chain_length.unwrap_or(spec.chain_length);
    spec.modulus = a.modulus.unwrap_or(spec.modulus);
    spec.seed = a.corpus_seed.unwrap_or(spec.seed);
    let mut engine = Engine::toy(cfg)?;
    let summary = run(&mut engine, &a.run_dir)?;
    report(&a.run_dir, &summary);
    Ok(())
}

fn generate(a: Generate) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config).with_context(|| format!("loading {}", a.config.display()))?;
    if let Some(s) = a.steps {
        cfg.loop_cfg.total_steps = s;
        cfg.loop_cfg.warmup_steps = cfg.loop_cfg.warmup_steps.min(s);
    }
    let policy_cfg = load_backend(&a.backend).with_context(|| format!("loading {}", a.backend.display()))?;
    cfg.backend = policy_cfg.clone();
    let policy: Arc<dyn Generator> = Arc::new(RemoteBackend::new(policy_cfg)?);
    let oracle: Option<Arc<dyn Generator>> = match &a.oracle {
        Some(p) => {
            let oc = load_backend(p).with_context(|| format!("loading {}", p.display()))?;
            Some(Arc::new(RemoteBackend::new(oc)?))
        }
        None => None,
    };
    let corpus = load_corpus(&a.corpus)?;
    let mut engine = Engine::remote(cfg, corpus, policy, oracle)?;
    let summary = run(&mut engine, &a.run_dir)?;
    report(&a.run_dir, &summary);
    Ok(())
}

fn validate_config(path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = RunConfig::from_text(&text)?;
    let violations = cfg.validate();
    if violations.is_empty() {
        println!("{}: ok", path.display());
        return Ok(());
    }
    for v in &violations {
        eprintln!("{v}");
    }
    bail!("{} problem(s) in {}", violations.len(), path.display())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().cmd {
        Cmd::ToyTrain(a) => toy_train(a),
        Cmd::Generate(a) => generate(a),
        Cmd::Export { run, out, format_version } => {
            let s = export_batches(&run, &out, format_version)?;
            println!("exported {} steps, {} batch items to {}", s.steps, s.batch_items, out.display());
            Ok(())
        }
        Cmd::Stats { run, window, json } => {
            let rows = run_stats(&run, window)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&rows)?);
            } else {
                print!("{}", render_table(&rows));
            }
            Ok(())
        }
        Cmd::ValidateConfig { path } => validate_config(&path),
    }
}
