use clap::Parser;

use dtmi_cli::{run, Cli, Command};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    // Pin the tensor thread pool before any kernel runs: deterministic mode always,
    // latency benchmarks unless the caller chose a thread count.
    let benchmark = matches!(&cli.command, Command::Predict(a) if a.benchmark.is_some());
    if dtmi_core::deterministic_requested() || (benchmark && std::env::var_os("RAYON_NUM_THREADS").is_none()) {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    std::process::exit(run(cli).exit_code);
}
