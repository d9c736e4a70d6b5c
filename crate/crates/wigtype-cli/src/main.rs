//! `wigtype` command-line front end.
//!
//! Every subcommand reads JSON inputs, writes CSV tables into `--out`, and
//! records a JSON sidecar holding the run manifest and a result summary.
//! Exit status is 0 on success, 2 for input or contract errors and 3 when a
//! numerical routine fails on admissible input.

// `!(x > 0.0)` guards are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod bundle;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "wigtype", version, about = "Wigner-type random matrices: deterministic analysis and Monte Carlo")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

/// Options shared by all subcommands.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; all cores when omitted.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Bulk residual tolerance of the QVE solver.
    #[arg(long = "tol.qve", global = true)]
    pub tol_qve: Option<f64>,
    /// Residual tolerance accepted near the support edges.
    #[arg(long = "tol.edge", global = true)]
    pub tol_edge: Option<f64>,
    /// Number of energies on the scan grid.
    #[arg(long = "grid.points", global = true)]
    pub grid_points: Option<usize>,
    #[arg(long = "grid.emin", global = true, allow_hyphen_values = true)]
    pub grid_emin: Option<f64>,
    #[arg(long = "grid.emax", global = true, allow_hyphen_values = true)]
    pub grid_emax: Option<f64>,
    /// Smallest imaginary part used for boundary values.
    #[arg(long = "grid.eta-floor", global = true)]
    pub grid_eta_floor: Option<f64>,
}

/// Where the variance profile comes from.
#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = false, id = "source")]
pub struct ProfileArgs {
    /// Profile JSON file.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Named fixture: constant, goe, two_block or three_block.
    #[arg(long)]
    pub fixture: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct Sized {
    #[command(flatten)]
    pub source: ProfileArgs,
    /// Overrides the matrix dimension of size-parametrized profiles.
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum Mode {
    MatrixFlow,
    SdeEuler,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Density of states, support edges and quantiles.
    Spectrum(Sized),
    /// Block solution of the QVE on an energy x eta grid.
    Qve {
        #[command(flatten)]
        profile: Sized,
        /// Imaginary parts, any order.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1e-1, 1e-2, 1e-3])]
        eta: Vec<f64>,
    },
    /// Density after adding an independent GOE of variance `t`.
    Freeconv {
        #[command(flatten)]
        profile: Sized,
        #[arg(long)]
        t: f64,
        /// Use the `t/N` diagonal (GOE increment) variant.
        #[arg(long)]
        diagonal: bool,
    },
    /// Perron eigenvalue and spectral gap of the stability operator along the real axis.
    StabilityScan {
        #[command(flatten)]
        profile: Sized,
        #[arg(long, default_value_t = 1e-2)]
        eta: f64,
    },
    /// Variance functional of a linear statistic.
    Variance {
        #[command(flatten)]
        profile: Sized,
        #[arg(long)]
        testfn: PathBuf,
        #[arg(long, default_value_t = 4.0)]
        refine: f64,
        #[arg(long, default_value_t = 16)]
        order: usize,
    },
    /// Expectation correction of a linear statistic.
    Expectation {
        #[command(flatten)]
        profile: Sized,
        #[arg(long)]
        testfn: PathBuf,
        #[arg(long, default_value_t = 4.0)]
        refine: f64,
        #[arg(long, default_value_t = 16)]
        order: usize,
    },
    /// Monte Carlo run of an experiment manifest.
    Simulate {
        #[arg(long)]
        manifest: PathBuf,
        /// Histogram bins per statistic.
        #[arg(long, default_value_t = 40)]
        bins: usize,
    },
    /// Dyson Brownian motion started from one sampled spectrum.
    Dbm {
        #[command(flatten)]
        profile: Sized,
        #[arg(long)]
        t: f64,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long, value_enum, default_value_t = Mode::MatrixFlow)]
        mode: Mode,
        #[arg(long, default_value_t = 10)]
        record_every: usize,
    },
}

fn run(cli: Cli, argv: Vec<String>) -> anyhow::Result<()> {
    let ctx = bundle::Context::new(argv, cli.common)?;
    match cli.command {
        Command::Spectrum(p) => commands::spectrum(&ctx, &p),
        Command::Qve { profile, eta } => commands::qve(&ctx, &profile, &eta),
        Command::Freeconv { profile, t, diagonal } => commands::freeconv(&ctx, &profile, t, diagonal),
        Command::StabilityScan { profile, eta } => commands::stability_scan(&ctx, &profile, eta),
        Command::Variance { profile, testfn, refine, order } => commands::variance(&ctx, &profile, &testfn, refine, order),
        Command::Expectation { profile, testfn, refine, order } => commands::expectation(&ctx, &profile, &testfn, refine, order),
        Command::Simulate { manifest, bins } => commands::simulate(&ctx, &manifest, bins),
        Command::Dbm { profile, t, dt, mode, record_every } => commands::dbm(&ctx, &profile, t, dt, mode, record_every),
    }
}

/// 3 for numerical failures of the library, 2 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<wigtype::Error>() {
        Some(w) if w.is_numerical() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    match run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<wigtype::Error>().map_or("InputError", |w| w.kind());
            // Library errors already embed their source text, so skip repeated causes.
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error[{kind}]: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
