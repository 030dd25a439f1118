use clap::{Parser, ValueEnum};
use regimelq::{parse_config, run_command, Command};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    Validate,
    Solve,
    Simulate,
    Verify,
    Report,
}

/// Solver and verification tool for regime-switching linear-quadratic control.
#[derive(Debug, Parser)]
#[command(name = "regimelq", version)]
struct Args {
    command: Cmd,
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `simulate.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for relative output paths (default: current directory).
    #[arg(long)]
    output: Option<PathBuf>,
}

fn init_threads() {
    let threads = std::env::var("REGIMELQ_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    init_threads();
    let cmd = match args.command {
        Cmd::Validate => Command::Validate,
        Cmd::Solve => Command::Solve,
        Cmd::Simulate => Command::Simulate,
        Cmd::Verify => Command::Verify,
        Cmd::Report => Command::Report,
    };
    let result = parse_config(&args.config).map_err(regimelq::CliError::from).and_then(|mut cfg| {
        if let Some(seed) = args.seed {
            cfg.simulate.seed = seed;
        }
        let dir = args.output.unwrap_or_default();
        let mut stdout = std::io::stdout();
        run_command(cmd, &cfg, &dir, &mut stdout)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
