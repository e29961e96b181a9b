use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dmft_lab::experiment::{
    gen_config, run_experiment, validate_config, write_report, ModelKind, EXIT_CONFIG,
};

#[derive(Parser)]
#[command(
    name = "dmft-lab",
    version,
    about = "Simulate SGD/SGF and predict its error curves from mean-field theory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the producers of a config and write the comparison table.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output.path`; without either the table goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config and list every problem found.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print an example config.
    GenConfig {
        #[arg(long, value_enum)]
        model: ModelArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Ridge,
    Logistic,
}

fn init_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("DMFT_LAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| format!("DMFT_LAB_THREADS must be a positive integer, got `{raw}`"))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn load(path: &PathBuf) -> Result<dmft_lab::experiment::ExperimentConfig, Vec<String>> {
    let raw = fs::read_to_string(path).map_err(|e| vec![format!("{}: {e}", path.display())])?;
    validate_config(&raw)
}

fn report_errors(errors: &[String]) {
    for e in errors {
        eprintln!("config error: {e}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("config error: {e}");
        return ExitCode::from(EXIT_CONFIG as u8);
    }
    match cli.command {
        Command::GenConfig { model } => {
            let kind = match model {
                ModelArg::Ridge => ModelKind::Ridge,
                ModelArg::Logistic => ModelKind::Logistic,
            };
            print!("{}", gen_config(kind));
            ExitCode::SUCCESS
        }
        Command::Validate { config } => match load(&config) {
            Ok(cfg) => {
                let names: Vec<&str> = cfg.run.producers.iter().map(|p| p.as_str()).collect();
                println!(
                    "ok: {} model, tau = {}, producers = {}",
                    match cfg.model.kind {
                        ModelKind::Ridge => "ridge",
                        ModelKind::Logistic => "logistic",
                    },
                    cfg.dynamics.tau,
                    names.join(",")
                );
                ExitCode::SUCCESS
            }
            Err(errors) => {
                report_errors(&errors);
                ExitCode::from(EXIT_CONFIG as u8)
            }
        },
        Command::Run { config, out } => {
            let cfg = match load(&config) {
                Ok(cfg) => cfg,
                Err(errors) => {
                    report_errors(&errors);
                    return ExitCode::from(EXIT_CONFIG as u8);
                }
            };
            let report = run_experiment(&cfg);
            if let Some(e) = &report.error {
                eprintln!("error: {e}");
            }
            if let Some(d) = &report.dmft {
                eprintln!(
                    "dmft_mc: {} after {} iterations",
                    if d.report.converged {
                        "converged"
                    } else {
                        "not converged"
                    },
                    d.report.iterations
                );
            }
            let target = out.or_else(|| cfg.output.path.clone());
            let written = match &target {
                Some(path) => fs::File::create(path).and_then(|f| {
                    let mut w = io::BufWriter::new(f);
                    write_report(&cfg, &report, &mut w)?;
                    w.flush()
                }),
                None => {
                    let mut w = io::stdout().lock();
                    write_report(&cfg, &report, &mut w).and_then(|_| w.flush())
                }
            };
            if let Err(e) = written {
                eprintln!("error: cannot write output: {e}");
                return ExitCode::from(1);
            }
            ExitCode::from(report.status.exit_code() as u8)
        }
    }
}
