use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latent_gate::harness::{self, RunConfig};
use latent_gate::models::ModelKind;
use latent_gate::Result;

#[derive(Parser)]
#[command(name = "latent-gate", version, about = "Autoencoder anomaly detection with a controlled latent dimension")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON config file; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory of the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Dataset directory containing manifest.json.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// 250 epochs and 3851/1000/1000 splits.
    #[arg(long, global = true)]
    paper_scale: bool,
    /// Training epochs, replacing the desk-scale default.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset.
    Generate {
        #[arg(long)]
        k_factors: Option<usize>,
    },
    /// Train one model.
    Train(ModelArgs),
    /// Score the test splits with a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Train and evaluate AEs over the latent sizes.
    Sweep {
        /// Comma-separated latent sizes.
        #[arg(long, value_delimiter = ',')]
        sweep: Option<Vec<usize>>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// AE, VAE, MemAE and CeAE against AE at the sweep's best latent size.
    Compare {
        #[arg(long)]
        sweep_dir: Option<PathBuf>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Linear bottleneck identity residual grid.
    Prop1,
    /// Exact information-theory checks.
    MiOracle {
        #[arg(long)]
        chains: Option<usize>,
    },
    /// Collect existing results into report.md.
    Report {
        #[arg(long)]
        sweep_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_parser = parse_kind)]
    model: Option<ModelKind>,
    #[arg(long)]
    latent_dim: Option<usize>,
}

fn parse_kind(s: &str) -> std::result::Result<ModelKind, String> {
    ModelKind::ALL
        .into_iter()
        .find(|k| k.name().eq_ignore_ascii_case(s))
        .ok_or_else(|| format!("unknown model {s:?}; expected ae, vae, memae or ceae"))
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if c.paper_scale {
        cfg.full_scale();
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
        cfg.generator.seed = s;
    }
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
    if let Some(d) = &c.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(e) = c.epochs {
        cfg.train.epoch_override = Some(e);
    }
    Ok(cfg)
}

fn print_json(value: &impl serde::Serialize) {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    // a closed pipe (e.g. `| head`) is not an error
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    let mut cfg = load_config(c)?;
    let log_fn = |m: &str| eprintln!("{m}");
    let log: harness::Log = if c.quiet { &harness::quiet } else { &log_fn };
    let out_or = |default: PathBuf| c.out.clone().unwrap_or(default);
    match cli.command {
        Command::Generate { k_factors } => {
            if let Some(k) = k_factors {
                cfg.generator.k_factors = k;
            }
            let out = out_or(cfg.dataset.clone());
            let m = harness::cmd_generate(&cfg, &out)?;
            eprintln!(
                "wrote {} train, {} test-normal, {} test-abnormal images to {}",
                m.splits.train.len(),
                m.splits.test_normal.len(),
                m.splits.test_abnormal.len(),
                out.display()
            );
        }
        Command::Train(m) => {
            if let Some(k) = m.model {
                cfg.model = k;
            }
            if let Some(d) = m.latent_dim {
                cfg.latent_dim = d;
            }
            let out = out_or(cfg.out.join("train"));
            let t = harness::cmd_train(&cfg, &cfg.dataset, &out, log)?;
            eprintln!("final loss {:.6}; wrote {} and {}", t.final_loss, t.checkpoint.display(), t.loss_csv.display());
        }
        Command::Eval { checkpoint, model } => {
            let out = out_or(cfg.out.join("eval"));
            let ck = checkpoint
                .or(cfg.checkpoint.clone())
                .unwrap_or_else(|| cfg.out.join("train").join(harness::CHECKPOINT));
            let summary = harness::cmd_eval(&ck, &cfg.dataset, &out, (model.model, model.latent_dim))?;
            print_json(&summary);
        }
        Command::Sweep { sweep, repeats } => {
            if let Some(s) = sweep {
                cfg.sweep = s;
            }
            if let Some(r) = repeats {
                cfg.repeats = r;
            }
            let out = out_or(cfg.sweep_dir());
            let r = harness::cmd_sweep(&cfg, &cfg.dataset, &out, log)?;
            eprintln!("d_optimal = {}; wrote {}", r.d_optimal, out.join(harness::SWEEP_TABLE).display());
        }
        Command::Compare { sweep_dir, repeats } => {
            if let Some(r) = repeats {
                cfg.repeats = r;
            }
            let sweep_dir = sweep_dir.unwrap_or_else(|| cfg.sweep_dir());
            let out = out_or(cfg.out.join("compare"));
            harness::cmd_compare(&cfg, &cfg.dataset, &sweep_dir, &out, log)?;
            eprintln!("wrote {}", out.join(harness::COMPARE_TABLE).display());
        }
        Command::Prop1 => {
            let out = out_or(cfg.out.join("prop1"));
            let rows = harness::cmd_prop1(&cfg, &out)?;
            eprintln!("{} grid rows written to {}", rows.len(), out.display());
        }
        Command::MiOracle { chains } => {
            let out = out_or(cfg.out.join("mi"));
            let r = harness::cmd_mi_oracle(cfg.seed, chains.unwrap_or(cfg.mi_chains), &out)?;
            eprintln!("{} chains and {} encoder cases passed", r.n_chains, r.prop2.len());
        }
        Command::Report { sweep_dir } => {
            let out = out_or(cfg.out.clone());
            let sweep_dir = sweep_dir.unwrap_or_else(|| out.join("sweep"));
            let path = harness::cmd_report(&sweep_dir, &out)?;
            eprintln!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
