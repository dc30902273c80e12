use clap::Parser;

fn main() {
    let cli = p2r::cli::Cli::parse();
    if let Err(e) = p2r::cli::run(cli) {
        eprintln!("error[{}]: {e}", e.code());
        std::process::exit(e.exit_code());
    }
}
