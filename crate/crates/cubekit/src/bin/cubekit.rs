use clap::error::ErrorKind;
use clap::Parser;

use cubekit::harness::{run, Cli};

fn main() {
    // Exit codes: 0 pass, 1 usage or I/O error, 2 property failure.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            std::process::exit(0);
        }
        Err(e) => {
            eprint!("{e}");
            std::process::exit(1);
        }
    };
    std::process::exit(run(cli));
}
