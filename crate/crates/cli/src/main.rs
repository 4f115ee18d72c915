mod commands;
mod config;
mod output;

use std::process::ExitCode;

use clap::Parser;

use config::{typed, Cli, Common};
use output::OutDir;

#[derive(Debug)]
pub enum CliError {
    /// Invalid input; exit status 2.
    Config(String),
    /// Library failure, reported verbatim; exit status 1.
    Numerical(strip_spectra::Error),
    Io(String),
}

impl From<strip_spectra::Error> for CliError {
    fn from(e: strip_spectra::Error) -> Self {
        use strip_spectra::Error as E;
        match e {
            E::Config(_)
            | E::Dimension(_)
            | E::NotHermitian { .. }
            | E::AsymmetricWindow(_)
            | E::IndexOutOfRange(_) => CliError::Config(e.to_string()),
            e => CliError::Numerical(e),
        }
    }
}

fn run(cli: &Cli) -> Result<bool, CliError> {
    let doc = cli.resolve()?;
    let common: Common = typed(&doc)?;
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot start {n} worker threads: {e}")))?;
    }
    let out_dir = || OutDir::new(common.out.as_deref().unwrap_or("."), common.plot);
    let seed = common.seed;
    match cli.command_name() {
        "bands" => {
            let mut out = common.out.as_ref().map(|_| out_dir()).transpose()?;
            commands::bands(&doc, out.as_mut())?;
            Ok(true)
        }
        "density" => commands::density(&doc, seed, &mut out_dir()?).map(|_| true),
        "schur-stats" => commands::schur_stats(&doc, seed, &mut out_dir()?).map(|_| true),
        "rank-scan" => commands::rank_scan(&doc, seed, &mut out_dir()?).map(|_| true),
        "verify" => commands::verify(&doc, seed, &mut out_dir()?),
        "mc" => commands::mc(&doc, seed, &mut out_dir()?),
        "fold" => commands::fold(&doc, seed, &mut out_dir()?),
        other => unreachable!("unknown command {other}"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: a checked bound failed");
            ExitCode::from(1)
        }
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Numerical(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(CliError::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
