//! Command-line entry point: argument parsing and experiment orchestration.

/// CLI entry point.
pub fn main() {
    eprintln!("the benchmark CLI is not wired up yet");
    std::process::exit(1);
}
