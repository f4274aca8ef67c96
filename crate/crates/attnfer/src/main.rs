use clap::Parser;

fn main() {
    let cli = attnfer::cli::Cli::parse();
    std::process::exit(attnfer::cli::run(&cli));
}
