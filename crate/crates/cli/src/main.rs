use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use youla_ren::experiment::{
    compare, format_compare, format_verify, run_experiment, write_compare_csv, ExperimentConfig, Overrides, Scale,
};
use youla_ren::Error;

#[derive(Parser)]
#[command(name = "youla-ren", version, about = "Youla-REN policy learning for the uncertain cart-pole")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Preset for omitted sizes and epochs.
        #[arg(long, value_parser = ["desk", "paper"])]
        scale: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory, overriding `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Suppress per-epoch progress.
        #[arg(long, short)]
        quiet: bool,
    },
    /// Tabulate final costs and gaps of finished runs.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        e if e.is_numerical() => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config, scale, seed, out, quiet } => {
            let ov = Overrides {
                scale: scale.map(|s| s.parse::<Scale>()).transpose()?,
                seed,
                output_dir: out,
            };
            let resolved = ExperimentConfig::load(&config)?.resolve(&ov)?;
            let mut log = |line: &str| {
                if !quiet {
                    eprintln!("{line}");
                }
            };
            let res = run_experiment(&resolved, &mut log)?;
            if let Some(v) = &res.metrics.verify {
                print!("{}", format_verify(v));
            }
            for a in &res.metrics.arms {
                let gap = a.gap.map_or("-".to_string(), |g| format!("{:.2}%", 100.0 * g));
                println!(
                    "{:<18} J_test {:.6}  J_robust {:.6}  gap {gap}  divergences {}",
                    a.label, a.j_test, a.j_robust, a.divergence_count
                );
            }
            println!("artifacts written to {}", res.dir.display());
            Ok(())
        }
        Command::Compare { dirs, csv } => {
            let rows = compare(&dirs)?;
            print!("{}", format_compare(&rows));
            if let Some(path) = csv {
                write_compare_csv(&path, &rows)?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let stage = if e.is_numerical() { "numerical fault: " } else { "" };
            eprintln!("error: {stage}{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
