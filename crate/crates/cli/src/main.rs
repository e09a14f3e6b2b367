use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sama_cli::{cmd_datagen, cmd_eval, cmd_selfcheck, cmd_train, exit_code, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "sama", version, about = "Referential grounded video chat toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent directory for timestamped run directories.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a grounded-dialogue JSONL corpus.
    Datagen {
        /// Generate N synthetic moving-shape records instead of annotating sources.
        #[arg(long)]
        synthetic: Option<usize>,
        /// Drop single-object videos from every source kind.
        #[arg(long)]
        filter_single_object: bool,
        /// Replay annotation replies from this fixture file.
        #[arg(long)]
        fixture: Option<PathBuf>,
    },
    /// Train the toy model and write a checkpoint and loss curve.
    Train {
        #[arg(long)]
        synthetic: Option<usize>,
        /// Training JSONL (defaults to a synthetic corpus).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        text_loss_weight: Option<f64>,
        /// Train without the spatial-temporal-context aggregator.
        #[arg(long)]
        ablate_stc: bool,
        /// Freeze the language model.
        #[arg(long)]
        freeze_lm: bool,
    },
    /// Score predictions (or a checkpoint's generations) on an eval JSONL.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Gradient, attention, oracle, codec and metric self-checks.
    Selfcheck,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.common.out {
        cfg.out = o;
    }
    let dir = match cli.command {
        Command::Datagen {
            synthetic,
            filter_single_object,
            fixture,
        } => {
            if synthetic.is_some() {
                cfg.data.synthetic = synthetic;
            }
            if filter_single_object {
                cfg.data.filter_single_object = Some(true);
            }
            if fixture.is_some() {
                cfg.data.fixture = fixture;
            }
            cfg.finalize();
            cmd_datagen(&cfg)?
        }
        Command::Train {
            synthetic,
            data,
            steps,
            lr,
            text_loss_weight,
            ablate_stc,
            freeze_lm,
        } => {
            if synthetic.is_some() {
                cfg.data.synthetic = synthetic;
            }
            if data.is_some() {
                cfg.data.train_jsonl = data;
            }
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(l) = lr {
                cfg.train.lr = l;
            }
            if let Some(w) = text_loss_weight {
                cfg.train.text_loss_weight = w;
            }
            cfg.train.ablate_stc |= ablate_stc;
            cfg.train.freeze_lm |= freeze_lm;
            cfg.finalize();
            cmd_train(&cfg)?
        }
        Command::Eval { data, checkpoint } => {
            if data.is_some() {
                cfg.data.eval_jsonl = data;
            }
            cfg.finalize();
            cmd_eval(&cfg, checkpoint.as_deref())?
        }
        Command::Selfcheck => {
            cfg.finalize();
            cmd_selfcheck(&cfg)?
        }
    };
    println!("run directory: {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
