use clap::Parser;

fn main() {
    let cli = gridcox_cli::Cli::parse();
    if let Err(e) = gridcox_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
