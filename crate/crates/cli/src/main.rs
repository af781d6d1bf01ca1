//! `cskg`: command-line runner for commonsense knowledge graph completion
//! experiments.

mod artifacts;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "cskg", version, about = "Commonsense knowledge graph completion experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON experiment config; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub train: Option<PathBuf>,
    #[arg(long, global = true)]
    pub valid: Option<PathBuf>,
    #[arg(long, global = true)]
    pub test: Option<PathBuf>,
    /// Disable contrastive pretraining (frozen random semantic vectors).
    #[arg(long, global = true)]
    pub no_cp: bool,
    /// Disable the latent-concept block.
    #[arg(long, global = true)]
    pub no_nc: bool,
    /// GCN input: `random` (trainable features) or `semantic`.
    #[arg(long, global = true)]
    pub gcn_init: Option<String>,
    /// Rank without filtering other known tails.
    #[arg(long, global = true)]
    pub raw: bool,
    /// Minimum training epochs.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse TSV splits and write the normalized graph snapshot.
    Ingest,
    /// Contrastively pretrain the phrase encoder and export semantic vectors.
    Pretrain,
    /// Cluster semantic vectors into latent concepts.
    Cluster {
        /// Number of latent concepts.
        #[arg(long)]
        k: usize,
    },
    /// Train the completion model.
    Train,
    /// Evaluate a trained model.
    Eval {
        /// Split to rank: train, valid or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write per-query ranks and top-10 candidates.
        #[arg(long)]
        dump: bool,
    },
    /// Remove a fraction of train edges and write the reduced splits.
    Sparsify {
        #[arg(long)]
        fraction: f64,
    },
    /// Cluster, train and evaluate once per cluster count.
    SweepK {
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<usize>,
    },
    /// Full pipeline per edge-removal fraction.
    SweepSparsity {
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5")]
        fractions: Vec<f64>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        /// Components to check (default: all).
        #[arg(long, value_delimiter = ',')]
        components: Option<Vec<String>>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<cskg_core::Error>()) {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = (|| -> anyhow::Result<bool> {
        let cfg = commands::resolve_config(&cli.common)?;
        if let Some(n) = cli.common.threads {
            if n == 0 {
                return Err(cskg_core::Error::Config("--threads must be positive".into()).into());
            }
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
        }
        match cli.command {
            Command::Ingest => commands::ingest(&cfg),
            Command::Pretrain => commands::pretrain(&cfg),
            Command::Cluster { k } => commands::cluster(&cfg, k),
            Command::Train => commands::train(&cfg),
            Command::Eval { split, dump } => commands::eval(&cfg, &split, dump),
            Command::Sparsify { fraction } => commands::sparsify(&cfg, fraction),
            Command::SweepK { k } => commands::sweep_k(&cfg, &k),
            Command::SweepSparsity { fractions } => commands::sweep_sparsity(&cfg, &fractions),
            Command::Gradcheck { components } => commands::gradcheck(&cfg, components.as_deref()),
        }
    })();
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
