use clap::Parser;

fn main() {
    std::process::exit(lift_cli::run(lift_cli::Cli::parse()));
}
