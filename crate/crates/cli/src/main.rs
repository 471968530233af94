use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod render;

/// Usage errors, following sysexits.
const EXIT_USAGE: u8 = 64;

#[derive(Debug, Parser)]
#[command(name = "comportal", version, about = "Stability certificates for compartmental systems")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Validation tolerance for matrix input and sampled checks.
    #[arg(long, global = true, default_value_t = 1e-12)]
    pub tol: f64,
    /// Seed for every sampled or randomized step.
    #[arg(long, global = true, env = "COMPORTAL_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Sample count for at-samples checks.
    #[arg(long, global = true, default_value_t = 4096)]
    pub samples: usize,
    /// Simulation horizon; also the time range sampled for time-varying coefficients.
    #[arg(long, global = true)]
    pub horizon: Option<f64>,
    /// Fixed integration step (default: picked from a Lipschitz estimate).
    #[arg(long, global = true)]
    pub step: Option<f64>,
    /// Directory for CSV, gnuplot and JSON artifacts.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Print the JSON report instead of tables.
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a matrix and report its flow graph.
    Check {
        matrix: PathBuf,
        /// Also list the minimal traps (closed components without outflow).
        #[arg(long)]
        minimal_traps: bool,
    },
    /// Permute a matrix into outflow canonical form.
    Canonicalize { matrix: PathBuf },
    /// Exponential stability certificate for a matrix, a family, a
    /// time-varying system in a family, or bounded coefficients.
    Certify(CertifyArgs),
    /// Integrate a matrix or system description and write the trajectory CSV.
    Simulate(SimulateArgs),
    /// Incremental exponential stability for a system description.
    Ies(IesArgs),
    /// Build a traffic reaction model, check its conditions, certify and simulate it.
    Trm(TrmArgs),
    /// Run the state-estimator demonstration on a traffic reaction model.
    Estimate(EstimateArgs),
}

#[derive(Debug, Args)]
pub struct CertifyArgs {
    /// Matrix JSON (`{"n", "entries"}`).
    pub matrix: Option<PathBuf>,
    /// Family JSON (`{"n", "l", "a", "b"}`); alone it yields the family certificate.
    #[arg(long)]
    pub family: Option<PathBuf>,
    /// System description JSON, checked for membership in `--family` at samples.
    #[arg(long)]
    pub system: Option<PathBuf>,
    /// Coefficient bounds JSON (`{"n", "f0", "f"}`).
    #[arg(long)]
    pub bounds: Option<PathBuf>,
    /// Choice of sigma: `ones` or `inverse-a`.
    #[arg(long, default_value = "ones")]
    pub sigma: String,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Matrix JSON or system description JSON.
    pub input: PathBuf,
    /// Initial state as comma-separated values (default: seeded random point of the box).
    #[arg(long, value_delimiter = ',')]
    pub x0: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct IesArgs {
    pub system: PathBuf,
    /// Entry time of the absorbing box (default: chosen automatically).
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, default_value = "ones")]
    pub sigma: String,
}

#[derive(Debug, Clone, Args)]
pub struct TrmModel {
    /// Speed factor h(x); `x` is the density, `rho_max` and `--const` names are available.
    #[arg(long, default_value = "vf * (1 - x / rho_max)")]
    pub h: String,
    /// Number of segments.
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, default_value_t = 1.0)]
    pub rho_max: f64,
    /// Named constants `name=value`; `vf` defaults to 1.
    #[arg(long = "const", value_name = "NAME=VALUE")]
    pub constants: Vec<String>,
    /// Upstream density rho_0(t): an expression in `t` or a CSV file with header `t,rho`.
    #[arg(long, default_value = "0.2 * rho_max")]
    pub boundary_in: String,
    /// Downstream density rho_{n+1}(t): an expression in `t` or a CSV file.
    #[arg(long, default_value = "0.5 * rho_max")]
    pub boundary_out: String,
    /// Lipschitz constant of h (default: estimated at samples with a 1.25 safety factor).
    #[arg(long)]
    pub h_lipschitz: Option<f64>,
    /// Margin epsilon with rho_{n+1} <= rho_max - epsilon (default: the largest admissible).
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrmArgs {
    #[command(flatten)]
    pub model: TrmModel,
    /// Initial densities (default: seeded random in [0, rho_max]).
    #[arg(long, value_delimiter = ',')]
    pub x0: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub model: TrmModel,
    /// Initial estimate (default: empty road).
    #[arg(long, value_delimiter = ',')]
    pub estimate_init: Option<Vec<f64>>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(outcome) => {
            if cli.global.json {
                println!("{}", serde_json::to_string_pretty(&outcome.report).expect("reports serialize"));
            } else {
                print!("{}", outcome.human);
            }
            ExitCode::from(outcome.exit)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
