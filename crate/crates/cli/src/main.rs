use clap::Parser;
use pptail_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("pptail: {e}");
        std::process::exit(e.exit_code());
    }
}
