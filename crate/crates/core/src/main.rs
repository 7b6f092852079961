use clap::Parser;

fn main() {
    let cli = hermit::cli::Cli::parse();
    if let Err(e) = hermit::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
