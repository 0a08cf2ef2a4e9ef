use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod settings;

use settings::Settings;

/// Frequency-domain detector for machine-generated text embeddings.
#[derive(Parser, Debug)]
#[command(name = "specdet", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long)]
    pub seed: Option<u64>,
    /// File of key=value settings; explicit flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

/// Where the records come from: a manifest plus split plan, or explicit files.
#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// cross_generator, cross_domain, cross_scale or in_domain.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Comma-separated held-out attribute values.
    #[arg(long)]
    pub held_out: Option<String>,
    #[arg(long)]
    pub train_cap: Option<usize>,
    #[arg(long)]
    pub valid_cap: Option<usize>,
    #[arg(long)]
    pub test_cap: Option<usize>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub valid: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct PipelineArgs {
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub xi: Option<f64>,
    #[arg(long)]
    pub no_lff: bool,
    #[arg(long)]
    pub no_fsr: bool,
    #[arg(long)]
    pub no_fsa: bool,
    /// Bands kept when LFF is off, e.g. `low,mid,high`.
    #[arg(long)]
    pub band_keep: Option<String>,
    /// batch or off.
    #[arg(long)]
    pub fsr_inference: Option<String>,
    /// per_sample or corpus_average.
    #[arg(long)]
    pub band_source: Option<String>,
    /// feature or token.
    #[arg(long)]
    pub spectral_axis: Option<String>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub fsa_weight: Option<f64>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    /// Recompute the global spectrum means every epoch.
    #[arg(long)]
    pub refresh_stats: bool,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Compute global band means over the training split.
    Stats {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector; writes model.ckpt, stats.txt and history.jsonl.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a test set and print the report as JSON.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Override the checkpoint's inference-time reconstruction policy.
        #[arg(long)]
        fsr_inference: Option<String>,
    },
    /// Write a perturbed copy of a record file.
    Perturb {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        rate: Option<f64>,
        /// Donor records for token replacement and insertion; defaults to the input.
        #[arg(long)]
        donors: Option<PathBuf>,
        #[arg(long)]
        theme_offset: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-band spectral shift caused by each perturbation, as CSV.
    MaeShift {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated kinds; all kinds when omitted.
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        donors: Option<PathBuf>,
        #[arg(long)]
        theme_offset: Option<f64>,
        /// Stop after this many records.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every module or band combination over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// modules or bands.
        #[arg(long)]
        grid: Option<String>,
        /// Comma-separated seeds or a range like 0..10.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train at several tau values.
    SweepTau {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Comma-separated tau values.
        #[arg(long)]
        taus: Option<String>,
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic domain-shifted corpus and its manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        n_domains: Option<usize>,
        #[arg(long)]
        per_domain: Option<usize>,
        #[arg(long)]
        amplitude: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write reconstructed features and band moduli per record as CSV.
    DumpFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check record files against the binary format.
    Validate {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Stats { common, .. }
            | Command::Train { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Perturb { common, .. }
            | Command::MaeShift { common, .. }
            | Command::Ablate { common, .. }
            | Command::SweepTau { common, .. }
            | Command::Synth { common, .. }
            | Command::DumpFeatures { common, .. }
            | Command::Validate { common, .. } => common,
        }
    }
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

fn exit_code(e: &specdet::Error) -> u8 {
    if e.is_divergence() {
        EXIT_DIVERGED
    } else if e.is_usage() {
        EXIT_USAGE
    } else {
        EXIT_DATA
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = rayon_threads(cli.command.common().threads) {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_USAGE);
    }
    let settings = match Settings::load(cli.command.common().config.as_deref()) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match commands::run(cli.command, settings) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn rayon_threads(n: usize) -> Result<(), String> {
    if n == 0 {
        return Err("--threads must be >= 1".into());
    }
    commands::init_threads(n)
}
