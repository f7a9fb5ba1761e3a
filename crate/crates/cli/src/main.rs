use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use taskfuse::harness::{self, ExperimentConfig};
use taskfuse::store::{content_digest, load_snapshot, SnapshotId};
use taskfuse::{Error, Result};

#[derive(Parser)]
#[command(name = "taskfuse", version, about = "Multi-task pretraining with temporal task ensembling")]
struct Cli {
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set tte.enabled=false`. Repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self, extra: &[String]) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let mut all = self.overrides.clone();
        if let Some(s) = self.seed {
            all.push(format!("seed={s}"));
        }
        if let Some(d) = &self.output_dir {
            all.push(format!("output_dir={}", toml_string(&d.to_string_lossy())));
        }
        all.extend_from_slice(extra);
        base.with_overrides(&all)
    }
}

fn toml_string(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

#[derive(Subcommand)]
enum Command {
    /// Branch-and-merge pretraining of the shared encoder.
    Pretrain(ConfigArgs),
    /// Train the target network from a frozen encoder.
    Transfer {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Encoder snapshot directory; defaults to the run's fused encoder.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Linear probe and clustering evaluation.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Clustering evaluation only.
    Cluster {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of clusters; the class count when omitted.
        #[arg(short, long)]
        k: Option<usize>,
    },
    /// Plot a per-task impact trace and print its imbalance.
    Plot {
        trace: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Print the manifest and tensor summary of a snapshot.
    InspectCheckpoint {
        /// Snapshot directory.
        path: PathBuf,
    },
}

fn checkpoint_override(section: &str, path: &Option<PathBuf>) -> Vec<String> {
    path.iter()
        .map(|p| format!("{section}.checkpoint={}", toml_string(&p.to_string_lossy())))
        .collect()
}

fn inspect(path: &Path) -> Result<()> {
    let (dir, name) = match (path.parent(), path.file_name()) {
        (Some(d), Some(n)) => (d, n.to_string_lossy().into_owned()),
        _ => return Err(Error::NotFound(format!("snapshot at {}", path.display()))),
    };
    let (params, meta) = load_snapshot(&SnapshotId(name.clone()), dir)?;
    println!("id\t{name}");
    println!("arch\t{}", params.arch_id());
    println!("epoch\t{}", meta.epoch);
    println!("seed\t{}", meta.seed);
    println!("task_order\t{}", meta.task_order.join(","));
    println!("created_at\t{}", meta.created_at);
    for (k, v) in &meta.notes {
        println!("note.{k}\t{v}");
    }
    println!("digest\t{}", content_digest(&params));
    println!("values\t{}", params.num_values());
    for (entry, t) in params.iter() {
        let l2 = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("tensor\t{entry}\t{:?}\t{:?}\t{l2:.6e}", t.shape(), t.dtype());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(args) => {
            let cfg = args.resolve(&[])?;
            let out = harness::run_pretrain(&cfg)?;
            println!("run_dir\t{}", out.artifacts.run_dir.display());
            if let Some(id) = &out.artifacts.fused {
                println!("fused\t{}", harness::checkpoint_dir(&out.artifacts.run_dir).join(&id.0).display());
            }
            for e in out.ledger.epochs() {
                println!("epoch {e}\ttotal loss {:.6}", out.ledger.total(e).unwrap_or(f64::NAN));
            }
        }
        Command::Transfer { cfg, checkpoint } => {
            let cfg = cfg.resolve(&checkpoint_override("transfer", &checkpoint))?;
            let out = harness::run_transfer(&cfg)?;
            let r = &out.report;
            if let (Some(a), Some(b)) = (r.initial_distill_loss, r.final_distill_loss) {
                println!("distill_loss\t{a:.6} -> {b:.6}");
            }
            println!("train_accuracy\t{:.4}", r.train_accuracy);
            println!("test_accuracy\t{:.4}", r.test_accuracy);
            println!("run_dir\t{}", out.artifacts.run_dir.display());
        }
        Command::Eval { cfg, checkpoint } => {
            let cfg = cfg.resolve(&checkpoint_override("eval", &checkpoint))?;
            let out = harness::run_eval(&cfg)?;
            print_report(&out)?;
        }
        Command::Cluster { cfg, checkpoint, k } => {
            let mut extra = checkpoint_override("eval", &checkpoint);
            extra.extend(["eval.probe=false".to_string(), "eval.cluster=true".to_string()]);
            extra.extend(k.map(|k| format!("eval.clusters={k}")));
            let out = harness::run_eval(&cfg.resolve(&extra)?)?;
            print_report(&out)?;
        }
        Command::Plot { trace, out } => {
            let s = harness::plot_impact(&trace, out.as_deref())?;
            println!("image\t{}", s.image.display());
        }
        Command::InspectCheckpoint { path } => inspect(&path)?,
    }
    Ok(())
}

fn print_report(out: &harness::EvalOutcome) -> Result<()> {
    let tsv = out.artifacts.run_dir.join(harness::REPORT_FILE);
    let text = std::fs::read_to_string(&tsv).map_err(|e| Error::Io { path: tsv, source: e })?;
    print!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(e.category().exit_code() as u8)
        }
    }
}
