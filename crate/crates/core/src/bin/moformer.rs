use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use moformer::app::{commands, RunConfig};
use moformer::encoder::EncoderKind;
use moformer::{exec, Error, Result};

#[derive(Parser)]
#[command(name = "moformer", version, about = "MOFid transformer and crystal-graph encoders: pretraining, fine-tuning and export")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest, overriding `[data] manifest`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary from a manifest's mofid column.
    BuildVocab {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Show how a MOFid is split into tokens.
    Tokenize {
        mofid: String,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Jointly pretrain both encoders on paired MOFids and structures.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Fine-tune one encoder with a regression head.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        /// moformer or cgcnn, overriding `[finetune] encoder`.
        #[arg(long)]
        encoder: Option<EncoderKind>,
        /// Pretraining checkpoint to initialise the encoder from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Train on this many records drawn from the training split.
        #[arg(long)]
        train_subset: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Number of runs with consecutive seeds.
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Report the MAE of a fine-tuned checkpoint on a labeled manifest.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Write per-record predictions here.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Export encoder embeddings as CSV.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Which encoder to use when the checkpoint holds both.
        #[arg(long)]
        encoder: Option<EncoderKind>,
    },
    /// Export per-layer, per-head attention maps for one MOFid as JSON.
    AttnExport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mofid: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| Error::io(format!("resolving {}", p.display()), e))
}

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let mut cfg = RunConfig::default();
            cfg.rebase(&std::env::current_dir().map_err(|e| Error::io("reading working directory", e))?);
            cfg
        }
    };
    if let Some(m) = &args.manifest {
        cfg.data.manifest = Some(absolute(m)?);
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.output_dir {
        cfg.output_dir = absolute(o)?;
    }
    if args.threads.is_some() {
        cfg.threads = args.threads;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut stdout = std::io::stdout();
    let out = &mut stdout;
    match cli.command {
        Command::BuildVocab { manifest, out: path } => commands::build_vocab(&manifest, &path, out).map(drop),
        Command::Tokenize { mofid, vocab } => commands::tokenize(&mofid, vocab.as_deref(), out),
        Command::Pretrain { run } => {
            let cfg = load_config(&run)?;
            exec::with_threads(cfg.worker_threads(), || commands::pretrain(&cfg, out)).map(drop)
        }
        Command::Finetune { run, encoder, init, train_subset, epochs, repeats } => {
            let mut cfg = load_config(&run)?;
            let f = &mut cfg.finetune;
            if let Some(e) = encoder {
                f.encoder = e;
            }
            if let Some(p) = init {
                f.init = Some(absolute(&p)?);
            }
            if train_subset.is_some() {
                f.train_subset = train_subset;
            }
            if let Some(e) = epochs {
                f.epochs = e;
            }
            if let Some(r) = repeats {
                f.repeats = r;
            }
            exec::with_threads(cfg.worker_threads(), || commands::finetune(&cfg, out)).map(drop)
        }
        Command::Evaluate { checkpoint, manifest, predictions } => {
            commands::evaluate(&checkpoint, &manifest, predictions.as_deref(), out).map(drop)
        }
        Command::Embed { checkpoint, manifest, out: path, encoder } => {
            commands::embed(&checkpoint, &manifest, &path, encoder, out).map(drop)
        }
        Command::AttnExport { checkpoint, mofid, out: path } => {
            commands::attn_export(&checkpoint, &mofid, &path, out).map(drop)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
