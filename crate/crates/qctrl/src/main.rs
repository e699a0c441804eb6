use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qctrl::config::ExperimentConfig;
use qctrl::report::{merge_fronts, resolve_output_dir, run_experiment, verify};

#[derive(Parser)]
#[command(name = "qctrl", version, about = "Quantum control experiments: gradient flows, fronts, MOEA")]
struct Cli {
    /// Worker threads for ensemble runs (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config file.
    Run {
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory (else QCTRL_OUTPUT_DIR/<dir> or <dir>).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run a self-check suite: gradients, unitarity, kbeta-oracle, or all.
    Verify { suite: String },
    /// Aggregate front tables produced on different machines.
    Front {
        /// Front table files to merge.
        #[arg(long = "merge", num_args = 1.., required = true)]
        merge: Vec<PathBuf>,
        /// Merged table destination (default: stdout).
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

// Exit codes: 0 success, 1 config error, 2 runtime failure,
// 3 verification failures present.
const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_VERIFY: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = configure_threads(n) {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                qctrl::Error::Config(_) => ExitCode::from(EXIT_CONFIG),
                _ => ExitCode::from(EXIT_RUNTIME),
            }
        }
    }
}

#[cfg(feature = "parallel")]
fn configure_threads(n: usize) -> qctrl::Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| qctrl::Error::Config(format!("--threads: {e}")))
}

#[cfg(not(feature = "parallel"))]
fn configure_threads(n: usize) -> qctrl::Result<()> {
    if n > 1 {
        eprintln!("note: built without the parallel feature; running serially");
    }
    Ok(())
}

fn run(command: Command) -> qctrl::Result<ExitCode> {
    match command {
        Command::Run {
            config,
            seed,
            output,
        } => {
            let text = std::fs::read_to_string(&config).map_err(|e| {
                qctrl::Error::Config(format!("cannot read {}: {e}", config.display()))
            })?;
            let mut cfg = ExperimentConfig::from_toml(&text)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let artifacts = run_experiment(&cfg)?;
            let dir = resolve_output_dir(&cfg, output.as_deref());
            let paths = artifacts.write_to(&dir)?;
            for p in &paths {
                println!("{}", p.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { suite } => {
            let report = verify(&suite)?;
            print!("{}", report.render());
            if report.all_passed() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(EXIT_VERIFY))
            }
        }
        Command::Front { merge, output } => {
            let mut texts = Vec::with_capacity(merge.len());
            for path in &merge {
                texts.push(std::fs::read_to_string(path).map_err(|e| {
                    qctrl::Error::Config(format!("cannot read {}: {e}", path.display()))
                })?);
            }
            let table = merge_fronts(&texts)?;
            let rendered = table.render(qctrl::config::Delimiter::Tab);
            match output {
                Some(path) => std::fs::write(path, rendered)?,
                None => print!("{rendered}"),
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
