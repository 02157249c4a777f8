use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use histprune_cli::args::Cli;
use histprune_cli::execute;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = cli.resolve().and_then(|config| execute(&config));
    match result {
        Ok(report) => {
            for e in &report.errors {
                eprintln!("warning: {}: {}", e.path, e.message);
            }
            println!("wrote {}/report.json", report.config.out);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
