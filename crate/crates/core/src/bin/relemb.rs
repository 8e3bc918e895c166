use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use relemb::cli::{cmd_eval, cmd_inspect, cmd_synth, cmd_train, EvalMode, Inspect, RunConfig};
use relemb::evalkit::mean_ap;
use relemb::Result;

#[derive(Parser)]
#[command(name = "relemb", version, about = "Relation triplet embeddings with analogy transfer")]
struct Args {
    /// key=value run configuration; defaults apply to missing keys
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Extra key=value overrides applied after the config file
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the planted synthetic benchmark
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train both stages and write a checkpoint
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Directory holding the dataset files (overrides data_dir)
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// direct or transfer
        #[arg(long)]
        mode: Option<String>,
        /// Query list file name inside the data directory
        #[arg(long)]
        queries: Option<String>,
    },
    /// Dump embeddings or transfer sources from a checkpoint
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write the dump into this directory instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(subcommand)]
        what: InspectWhat,
    },
}

#[derive(Subcommand)]
enum InspectWhat {
    Embeddings {
        /// Also dump visual embeddings of this dataset's pairs
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    Sources {
        subject: String,
        predicate: String,
        object: String,
    },
}

fn load_config(args: &Args) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| relemb::Error::Config(format!("override '{kv}' is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: Args) -> Result<()> {
    let mut cfg = load_config(&args)?;
    match args.command {
        Command::Synth { out } => {
            let data = cmd_synth(&cfg, &out)?;
            println!(
                "wrote {} train pairs, {} test pairs, {} heldout triplets to {}",
                data.train.len(),
                data.test.len(),
                data.heldout.len(),
                out.display()
            );
        }
        Command::Train { out, data } => {
            if let Some(dir) = data {
                cfg.data_dir = dir;
            }
            let res = cmd_train(&cfg, &out)?;
            if let Some(last) = res.stage1.epochs.last() {
                println!("stage1 final loss {last}");
            }
            println!("wrote {}", out.join(relemb::cli::CHECKPOINT_FILE).display());
        }
        Command::Eval {
            checkpoint,
            out,
            data,
            mode,
            queries,
        } => {
            if let Some(dir) = data {
                cfg.data_dir = dir;
            }
            if let Some(m) = mode {
                cfg.eval_mode = m.parse::<EvalMode>()?;
            }
            if let Some(q) = queries {
                cfg.queries_file = q;
            }
            let results = cmd_eval(&cfg, &checkpoint, &out)?;
            let excluded = results.iter().filter(|r| r.excluded()).count();
            if excluded > 0 {
                eprintln!("{excluded} query(ies) without test positives excluded from the mean");
            }
            println!("map {}", mean_ap(&results)?);
        }
        Command::Inspect { checkpoint, out, what } => {
            let (what, name) = match what {
                InspectWhat::Embeddings { dataset } => (Inspect::Embeddings { dataset }, "embeddings.txt"),
                InspectWhat::Sources {
                    subject,
                    predicate,
                    object,
                } => (
                    Inspect::Sources {
                        triplet: [subject, predicate, object],
                    },
                    "sources.txt",
                ),
            };
            let text = cmd_inspect(&cfg, &checkpoint, &what)?;
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir).map_err(|e| relemb::Error::Io {
                        path: dir.clone(),
                        source: e,
                    })?;
                    relemb::datamodel::write_text(&dir.join(name), &text)?;
                }
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
