use clap::Parser;

fn main() {
    let cli = ucondgcn::cli::Cli::parse();
    if let Err(e) = ucondgcn::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
