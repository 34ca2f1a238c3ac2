//! Command-line front end for the radial-feeder OPF.
//!
//! Exit codes: 0 converged, 1 I/O error, 2 iteration limit reached,
//! 3 invalid input or usage, 4 power-flow failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use radial_opf::scenario::{exit, exit_code, validate_files};
use radial_opf::{run_scenario, OpfConfig, RunMode, Scenario};

#[derive(Parser)]
#[command(name = "opf", version, about = "Voltage-regulation OPF on radial distribution feeders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    None,
    Linear,
    Improved,
    Fd,
}

impl From<Mode> for RunMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::None => RunMode::None,
            Mode::Linear => RunMode::Linear,
            Mode::Improved => RunMode::Improved,
            Mode::Fd => RunMode::Fd,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write results to a directory.
    Run {
        /// Network JSON file, or a directory with nodes.csv, lines.csv and meta.json.
        #[arg(long)]
        network: PathBuf,
        #[arg(long)]
        clustering: Option<PathBuf>,
        /// Overrides the mode in the config file (default: improved).
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Compute the dual couplings through the regional/central controller split.
        #[arg(long)]
        hierarchical: bool,
        /// Multiplies all nominal loads.
        #[arg(long, allow_negative_numbers = true)]
        load_scale: Option<f64>,
        /// JSON file with limits, step sizes and solver settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a network and, optionally, a clustering.
    Validate {
        #[arg(long)]
        network: PathBuf,
        #[arg(long)]
        clustering: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> i32 {
    match cli.command {
        Command::Run {
            network,
            clustering,
            mode,
            hierarchical,
            load_scale,
            config,
            out,
        } => {
            let mut cfg = match config {
                Some(p) => match OpfConfig::load(&p) {
                    Ok(c) => c,
                    Err(e) => return fail(&e),
                },
                None => OpfConfig::default(),
            };
            if let Some(m) = mode {
                cfg.mode = m.into();
            }
            if let Some(s) = load_scale {
                cfg.load_scale = s;
            }
            cfg.hierarchical |= hierarchical;
            let scenario = Scenario {
                network,
                clustering,
                config: cfg,
                out,
            };
            match run_scenario(&scenario) {
                Ok(o) => {
                    let s = &o.summary;
                    println!(
                        "{}: min |V| {:.6} p.u. at {}, max |V| {:.6} p.u. at {}, {} iterations",
                        s.termination,
                        s.min_voltage_pu,
                        s.min_voltage_node,
                        s.max_voltage_pu,
                        s.max_voltage_node,
                        s.iterations
                    );
                    o.exit_code
                }
                Err(e) => fail(&e),
            }
        }
        Command::Validate {
            network,
            clustering,
        } => match validate_files(&network, clustering.as_deref()) {
            Ok(r) if r.violations.is_empty() => {
                println!("ok: {} nodes, {} lines", r.nodes, r.lines);
                exit::CONVERGED
            }
            Ok(r) => {
                for v in &r.violations {
                    eprintln!("violation: {v}");
                }
                exit::INVALID
            }
            Err(e) => fail(&e),
        },
    }
}

fn fail(e: &radial_opf::Error) -> i32 {
    eprintln!("error: {e}");
    exit_code(e)
}

fn main() -> ExitCode {
    let code = match Cli::try_parse() {
        Ok(cli) => run(cli),
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            if usage {
                exit::INVALID
            } else {
                exit::CONVERGED
            }
        }
    };
    ExitCode::from(code as u8)
}
