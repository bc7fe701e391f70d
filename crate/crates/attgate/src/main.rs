use clap::Parser;

fn main() {
    let cli = attgate::cli::Cli::parse();
    if let Err(e) = attgate::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
