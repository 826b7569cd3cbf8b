//! `dpflow`: solve, release and validate privacy-preserving dispatches.
//!
//! Exit codes: 0 on success, 1 on a usage or domain error, 2 when a solver
//! fails or a program is infeasible.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use thiserror::Error;

use args::{Cli, Command};
use commands::Context;

#[derive(Debug, Error)]
pub enum Failure {
    #[error("{0}")]
    Domain(String),
    #[error("{0}")]
    Solver(String),
}

impl Failure {
    fn from_display(e: impl std::fmt::Display) -> Failure {
        Failure::Domain(e.to_string())
    }

    fn classify(solver: bool, msg: String) -> Failure {
        if solver {
            Failure::Solver(msg)
        } else {
            Failure::Domain(msg)
        }
    }

    fn code(&self) -> u8 {
        match self {
            Failure::Domain(_) => 1,
            Failure::Solver(_) => 2,
        }
    }
}

macro_rules! classified {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Failure {
                Failure::classify(e.is_solver_failure(), e.to_string())
            }
        }
    )*};
}

classified!(
    dpflow::dopf::DopfError,
    dpflow::ccopf::CcopfError,
    dpflow::mechanism::MechanismError,
    dpflow::validation::ValidationError
);

fn run(cli: &Cli) -> Result<String, Failure> {
    let ctx = Context::new(&cli.global)?;
    match &cli.command {
        Command::SolveDopf => commands::solve_dopf(&ctx),
        Command::SolveCcopf(a) => commands::solve_ccopf(&ctx, a),
        Command::Mechanism(m) => commands::mechanism(&ctx, m),
        Command::Validate(v) => commands::validate(&ctx, v),
        Command::Calibrate(p) => commands::calibrate(&ctx, p),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = run(&cli).and_then(|text| {
        dpflow::io::write_text(&text, cli.global.out.as_deref()).map_err(Failure::from_display)
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
