use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use open_rebalance::cli::{self, Args};

fn main() -> ExitCode {
    let args = Args::parse();
    match cli::run(args.command, &args.config, &args.out, args.jobs) {
        Ok(files) => {
            let mut stdout = std::io::stdout().lock();
            for f in files {
                // A closed pipe is not a failure of the run itself.
                if writeln!(stdout, "{}", f.display()).is_err() {
                    break;
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
