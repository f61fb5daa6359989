use clap::Parser;

fn main() {
    std::process::exit(homent::cli::run(homent::cli::Cli::parse()));
}
