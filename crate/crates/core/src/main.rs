use clap::{Parser, Subcommand};
use nlfk_core::checks::CHECK_SUITES;
use nlfk_core::config::ExperimentConfig;
use nlfk_core::experiment::{convergence_table, run_experiment, RunOptions};
use std::path::PathBuf;
use std::process::ExitCode;

/// Sup-envelope parabolic PDE solver: controlled FBSDE dynamic programming
/// with a monotone finite-difference oracle.
///
/// Exit codes: 0 ok, 1 check failure, 2 usage/config error, 3 numeric/solver
/// error.
#[derive(Parser)]
#[command(name = "nlfk", version, about, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,

    /// List the known property-check suites and exit.
    #[arg(long)]
    list_checks: bool,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory (also via NLFK_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker-thread count hint for the parallel solvers.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the solvers and checks of an experiment config.
    Run { config: PathBuf },
    /// Run the refinement studies of an experiment config.
    Table { config: PathBuf },
}

fn out_dir_override(cli_out: &Option<PathBuf>) -> Option<PathBuf> {
    cli_out
        .clone()
        .or_else(|| std::env::var_os("NLFK_OUT").map(PathBuf::from))
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    if let Some(jobs) = cli.jobs {
        // a hint; ignore failure if a pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }

    if cli.list_checks {
        for (name, description) in CHECK_SUITES {
            println!("{name:<20} {description}");
        }
        return ExitCode::SUCCESS;
    }

    let Some(command) = cli.command else {
        eprintln!("error: expected a subcommand (run | table) or --list-checks");
        return ExitCode::from(2);
    };

    let opts = RunOptions {
        seed_override: cli.seed,
        out_dir_override: out_dir_override(&cli.out),
        dry_run: false,
    };

    match command {
        Command::Run { config } => match ExperimentConfig::load(&config).and_then(|cfg| {
            let report = run_experiment(&cfg, &opts)?;
            Ok((cfg, report))
        }) {
            Ok((cfg, report)) => {
                print!("{}", report.render_text());
                let dir = opts
                    .out_dir_override
                    .clone()
                    .unwrap_or_else(|| cfg.output.dir.clone());
                eprintln!("artifacts written to {}", dir.display());
                if report.all_checks_passed() {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(1)
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(e.exit_code() as u8)
            }
        },
        Command::Table { config } => match ExperimentConfig::load(&config)
            .and_then(|cfg| convergence_table(&cfg, &opts))
        {
            Ok(report) => {
                print!("{}", report.render_text());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(e.exit_code() as u8)
            }
        },
    }
}
