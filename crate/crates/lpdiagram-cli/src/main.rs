use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use lpdiagram::cli::{exit_code, parse_instance, run, Command};
use lpdiagram::Error;

/// Diagrams of Lebesgue classes for prepared log-monomial sums.
#[derive(Parser, Debug)]
#[command(name = "lpdiagram", version)]
struct Args {
    /// classify, diagram, rectilinearize, split, dickson, countex or verify
    command: String,
    /// Instance JSON.
    #[arg(long = "in")]
    input: PathBuf,
    /// Report JSON.
    #[arg(long = "out")]
    output: PathBuf,
    /// Overrides the instance seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match go(&args) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(msg)) => {
            eprintln!("lpdiagram: invariant violated: {msg}");
            ExitCode::from(4)
        }
        Err(e) => {
            eprintln!("lpdiagram: {e:#}");
            let code = e.downcast_ref::<Error>().map(exit_code).unwrap_or(2);
            ExitCode::from(code as u8)
        }
    }
}

/// Writes the report; returns the invariant violation, if any.
fn go(args: &Args) -> anyhow::Result<Option<String>> {
    let cmd: Command = args.command.parse()?;
    let bytes = std::fs::read(&args.input).map_err(|e| Error::Parse(format!("{}: {e}", args.input.display())))?;
    let mut inst = parse_instance(&bytes)?;
    if let Some(s) = args.seed {
        inst.seed = s;
    }
    let out = run(cmd, &inst)?;
    std::fs::write(&args.output, out.to_json()).map_err(|e| Error::Argument(format!("{}: {e}", args.output.display())))?;
    Ok(out.violation)
}
