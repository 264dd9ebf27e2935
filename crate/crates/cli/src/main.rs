use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use weaklab::study::{exit_code, run_and_write, StudyConfig, StudyKind};

#[derive(Parser)]
#[command(name = "weaklab", version, about = "Weak error studies for the Euler scheme")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a study and write its CSV and JSON reports
    Run { config: PathBuf },
    /// Check a configuration without running it
    Validate { config: PathBuf },
    /// List the available studies
    ListStudies,
}

fn init_workers() -> Result<(), String> {
    let Ok(raw) = std::env::var("WEAKLAB_WORKERS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| format!("WEAKLAB_WORKERS={raw:?} is not a positive integer"))?;
    if n == 0 {
        return Err("WEAKLAB_WORKERS must be at least 1".into());
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::ListStudies => {
            for s in StudyKind::ALL {
                println!("{:<12} {}", s.name(), s.description());
            }
            ExitCode::SUCCESS
        }
        Command::Validate { config } => match StudyConfig::load(&config) {
            Ok(cfg) => {
                println!("ok: {} study on {:?}", cfg.study.name(), cfg.model);
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(exit_code(&e) as u8)
            }
        },
        Command::Run { config } => {
            if let Err(e) = init_workers() {
                eprintln!("error: {e}");
                return ExitCode::from(3);
            }
            let result = StudyConfig::load(&config).and_then(|cfg| run_and_write(&cfg));
            match result {
                Ok((report, code)) => {
                    let s = &report.summary;
                    println!("{} on {}: {}", s.study, s.model, s.status);
                    for g in &s.gates {
                        println!("  {} {} = {:.6e}", if g.pass { "PASS" } else { "FAIL" }, g.name, g.value);
                    }
                    for f in &s.fits {
                        match f.slope {
                            Some(slope) => println!("  fit {}: slope {slope:.4} from {} points", f.name, f.used_points),
                            None => println!("  fit {}: {}", f.name, f.note.as_deref().unwrap_or("no fit")),
                        }
                    }
                    ExitCode::from(code as u8)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(exit_code(&e) as u8)
                }
            }
        }
    }
}
