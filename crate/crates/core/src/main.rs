use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mmcdr::checkpoint::Checkpoint;
use mmcdr::cli;
use mmcdr::config::PipelineConfig;
use mmcdr::{Error, Result};

#[derive(Parser)]
#[command(name = "mmcdr", version, about = "Multi-modal cross-domain recommendation pipeline")]
struct Cli {
    /// JSON pipeline configuration; omitted sections take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice of the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads. Computation is single-threaded, so this never changes results.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-domain dataset.
    Gen,
    /// Build each domain's fused item graph from its modality features.
    Fuse {
        #[arg(long)]
        data: PathBuf,
    },
    /// Cluster each domain's item graph into hyperedges.
    Cluster {
        #[arg(long)]
        graphs: PathBuf,
    },
    /// Match two user embedding sets.
    Match {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Known `source_id<TAB>target_id` pairs whose cost is masked.
        #[arg(long)]
        overlap: Option<PathBuf>,
        /// Write the plan even if the iteration budget runs out.
        #[arg(long)]
        allow_unconverged: bool,
    },
    /// Train both domain models.
    Train {
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Score a checkpoint on the validation and test splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Train the full model and its ablations over several seeds.
    Ablate {
        #[command(flatten)]
        inputs: Inputs,
    },
}

#[derive(clap::Args)]
struct Inputs {
    /// Directory with ratings, features and the overlap file.
    #[arg(long)]
    data: PathBuf,
    /// Directory with the item graphs (defaults to --data).
    #[arg(long)]
    graphs: Option<PathBuf>,
    /// Directory with the cluster files (defaults to the graphs directory).
    #[arg(long)]
    clusters: Option<PathBuf>,
}

impl Inputs {
    fn load(&self, cfg: &PipelineConfig) -> Result<mmcdr::evaluation::ExperimentData> {
        let graphs = self.graphs.as_deref().unwrap_or(&self.data);
        let clusters = self.clusters.as_deref().unwrap_or(graphs);
        cli::load_experiment(cfg, &self.data, graphs, clusters)
    }
}

fn require_out(out: &Option<PathBuf>) -> Result<&Path> {
    out.as_deref()
        .ok_or_else(|| Error::InvalidParameter("--out is required for this command".into()))
}

fn run(args: Cli) -> Result<()> {
    if args.threads == 0 {
        return Err(Error::InvalidParameter("--threads must be at least 1".into()));
    }
    let cfg = match &args.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let out = require_out(&args.out)?;
    match &args.command {
        Command::Gen => cli::cmd_gen(&cfg, args.seed, out),
        Command::Fuse { data } => cli::cmd_fuse(&cfg, data, out),
        Command::Cluster { graphs } => cli::cmd_cluster(&cfg, args.seed, graphs, out),
        Command::Match {
            source,
            target,
            overlap,
            allow_unconverged,
        } => cli::cmd_match(&cfg, source, target, overlap.as_deref(), *allow_unconverged, out),
        Command::Train { inputs } => cli::cmd_train(&cfg, args.seed, &inputs.load(&cfg)?, out).map(drop),
        Command::Eval { checkpoint, inputs } => {
            let ck = Checkpoint::load(checkpoint)?;
            cli::cmd_eval(&cfg, &ck, &inputs.load(&cfg)?, out).map(|csv| print!("{csv}"))
        }
        Command::Ablate { inputs } => cli::cmd_ablate(&cfg, args.seed, &inputs.load(&cfg)?, out).map(|t| print!("{}", t.summary_csv())),
    }
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    let line = serde_json::json!({"error": kind, "message": message, "exit_code": code});
    eprintln!("{line}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let args = match Cli::try_parse() {
        Ok(a) => a,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            return fail("usage", first, 2);
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string(), e.exit_code() as u8),
    }
}
