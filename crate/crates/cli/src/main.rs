use clap::Parser;

fn main() {
    let cli = dial_cli::Cli::parse();
    if let Err(e) = dial_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
