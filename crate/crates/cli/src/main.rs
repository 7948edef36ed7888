use std::process::ExitCode;

use clap::Parser;
use msmap_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let verbose = cli.global.verbose;
    match run(cli) {
        Ok(m) => {
            if verbose {
                eprintln!(
                    "{}: {} files, config {}",
                    m.command,
                    m.files.len(),
                    &m.config_hash[..12]
                );
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
