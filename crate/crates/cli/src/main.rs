mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use election_forensics::AreaLevel;

const DEFAULT_SEED: u64 = 0x5EED;

#[derive(Debug, Parser)]
#[command(name = "elforensics", version, about = "Ballot-box level election forensics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Drop boxes with fewer eligible voters than this (default depends on the subcommand).
    #[arg(long)]
    pub min_electorate: Option<u64>,
    /// Master seed (default 0x5EED).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for artifacts and the manifest.
    #[arg(long, default_value = "elforensics-out")]
    pub out: PathBuf,
    /// Bins per axis of raw fingerprints and of the stuffing fit.
    #[arg(long, default_value_t = 100)]
    pub bins: usize,
    /// Drop malformed rows with a warning instead of failing.
    #[arg(long)]
    pub lenient: bool,
    /// Area level at which "one or two boxes" small areas are counted.
    #[arg(long, default_value_t = AreaLevel::County)]
    pub small_area_level: AreaLevel,
}

impl Common {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn min_electorate_or(&self, default: u64) -> u64 {
        self.min_electorate.unwrap_or(default)
    }
}

#[derive(Debug, Args)]
pub struct StuffingArgs {
    /// Stuffing intensity exponent.
    #[arg(long, default_value_t = 2.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.0)]
    pub extreme_fraction: f64,
    /// Simulated replicates per model fingerprint.
    #[arg(long, default_value_t = 32)]
    pub replicates: usize,
    /// Bootstrap refits for the SD of f.
    #[arg(long, default_value_t = 50)]
    pub bootstrap: usize,
}

#[derive(Debug, Args)]
pub struct ReferenceArgs {
    /// Directory of reference-election CSV files.
    #[arg(long, conflicts_with = "synthetic_refs")]
    pub references: Option<PathBuf>,
    /// Candidate analysed in the reference files (default: their first candidate column).
    #[arg(long, requires = "references")]
    pub reference_candidate: Option<String>,
    /// Generate this many synthetic fair references mimicking the round.
    #[arg(long)]
    pub synthetic_refs: Option<usize>,
    /// Grouping level for standardization.
    #[arg(long, default_value_t = AreaLevel::County)]
    pub level: AreaLevel,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse and validate a results file and summarize it.
    Ingest {
        #[arg(long)]
        round: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Raw and standardized fingerprints plus cumulative curves.
    Fingerprint {
        #[arg(long)]
        round: PathBuf,
        #[arg(long)]
        candidate: String,
        #[arg(long, default_value_t = election_forensics::fingerprint::DEFAULT_STANDARDIZED_BINS)]
        standardized_bins: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Fit the ballot-stuffing fraction.
    TestStuffing {
        #[arg(long)]
        round: PathBuf,
        #[arg(long)]
        candidate: String,
        #[command(flatten)]
        stuffing: StuffingArgs,
        /// Write the fit here instead of `<out>/stuffing.json`.
        #[arg(long)]
        json: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Small-unit displacement profile against a reference envelope.
    TestRigging {
        #[arg(long)]
        round: PathBuf,
        #[arg(long)]
        candidate: String,
        #[command(flatten)]
        refs: ReferenceArgs,
        #[arg(long)]
        json: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Two-round vote-shift symmetrization test.
    TestVoteshift {
        #[arg(long)]
        round1: PathBuf,
        #[arg(long)]
        round2: PathBuf,
        /// Round-1 candidates whose combined share is compared.
        #[arg(long, value_delimiter = ',', required = true)]
        pro_r1: Vec<String>,
        #[arg(long)]
        cand_r2: String,
        #[arg(long, default_value_t = election_forensics::voteshift::DEFAULT_REPLICATES)]
        replicates: usize,
        /// Use the literal votes-over-turnout shift instead of the share difference.
        #[arg(long)]
        literal_formula: bool,
        #[arg(long)]
        json: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic round (and optionally a paired second round).
    Simulate {
        /// SynthSpec JSON; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// ShiftSpec JSON for a second round.
        #[arg(long)]
        shift: Option<PathBuf>,
        #[arg(long)]
        n_boxes: Option<usize>,
        #[arg(long)]
        stuffing_fraction: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the whole battery on two rounds.
    Report {
        #[arg(long)]
        round1: PathBuf,
        #[arg(long)]
        round2: PathBuf,
        #[arg(long)]
        candidate: String,
        /// Round-1 candidates for the vote-shift test (default: the candidate).
        #[arg(long, value_delimiter = ',')]
        pro_r1: Vec<String>,
        #[arg(long)]
        cand_r2: Option<String>,
        #[command(flatten)]
        stuffing: StuffingArgs,
        #[command(flatten)]
        refs: ReferenceArgs,
        #[arg(long, default_value_t = election_forensics::voteshift::DEFAULT_REPLICATES)]
        voteshift_replicates: usize,
        #[command(flatten)]
        common: Common,
    },
}

/// Error in the arguments that clap cannot catch.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<election_forensics::Error>() {
            return if e.is_validation() { 2 } else { 1 };
        }
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    use commands::*;
    match cli.command {
        Command::Ingest { round, common } => ingest(&round, &common),
        Command::Fingerprint {
            round,
            candidate,
            standardized_bins,
            common,
        } => fingerprint(&round, &candidate, standardized_bins, &common),
        Command::TestStuffing {
            round,
            candidate,
            stuffing,
            json,
            common,
        } => test_stuffing(&round, &candidate, &stuffing, json.as_deref(), &common),
        Command::TestRigging {
            round,
            candidate,
            refs,
            json,
            common,
        } => test_rigging(&round, &candidate, &refs, json.as_deref(), &common),
        Command::TestVoteshift {
            round1,
            round2,
            pro_r1,
            cand_r2,
            replicates,
            literal_formula,
            json,
            common,
        } => test_voteshift(
            &VoteshiftInputs {
                round1: &round1,
                round2: &round2,
                pro_r1: &pro_r1,
                cand_r2: &cand_r2,
                replicates,
                literal: literal_formula,
            },
            json.as_deref(),
            &common,
        ),
        Command::Simulate {
            spec,
            shift,
            n_boxes,
            stuffing_fraction,
            common,
        } => simulate(spec.as_deref(), shift.as_deref(), n_boxes, stuffing_fraction, &common),
        Command::Report {
            round1,
            round2,
            candidate,
            pro_r1,
            cand_r2,
            stuffing,
            refs,
            voteshift_replicates,
            common,
        } => report(
            &ReportInputs {
                round1: &round1,
                round2: &round2,
                candidate: &candidate,
                pro_r1: &pro_r1,
                cand_r2: cand_r2.as_deref(),
                voteshift_replicates,
            },
            &stuffing,
            &refs,
            &common,
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
