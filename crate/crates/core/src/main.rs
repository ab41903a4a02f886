use clap::Parser;

fn main() {
    let cli = inflarisk::cli::Cli::parse();
    std::process::exit(inflarisk::cli::run(cli));
}
