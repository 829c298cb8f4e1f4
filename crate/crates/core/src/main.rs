use clap::Parser;

fn main() {
    let args = steinflow::cli::Args::parse();
    std::process::exit(steinflow::cli::run(&args));
}
