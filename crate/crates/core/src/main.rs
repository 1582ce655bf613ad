use amortized_sw::cli::{run, Cli};
use amortized_sw::eval::alloc::PeakAlloc;
use clap::Parser;

#[global_allocator]
static ALLOC: PeakAlloc = PeakAlloc;

fn main() {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    std::process::exit(run(&cli));
}
