use clap::Parser;

fn main() {
    let cli = revmux::cli::Cli::parse();
    if let Err(e) = revmux::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
