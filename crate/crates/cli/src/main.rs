use clap::Parser;
use docrec_cli::{categorize, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        let category = categorize(&err);
        eprintln!("error [{}]: {err:#}", category.name());
        std::process::exit(category.exit_code());
    }
}
