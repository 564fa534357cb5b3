use clap::Parser;
use dfkit_cli::args::Cli;

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dfkit_cli::run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(dfkit_cli::exit_code(&e));
    }
}
