use clap::Parser;

fn main() {
    let cli = gazeswap::cli::Cli::parse();
    if let Err(e) = gazeswap::cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
