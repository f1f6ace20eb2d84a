use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nearest_etf_cli::config::{parse_modes, parse_seeds, Overrides, OUTPUT_DIR_ENV};
use nearest_etf_cli::plot::{emit_plots, expand_glob, parse_panels};
use nearest_etf_cli::validate::{validate_suite, ValidateOptions};
use nearest_etf_cli::{run_experiment, CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "netf", version, about = "Nearest-ETF UFM experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (mode, seed) pair of an experiment config
    Run {
        config: PathBuf,
        /// Overrides `output_dir` and the NETF_OUTPUT_DIR variable
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Comma-separated seed list
        #[arg(long)]
        seeds: Option<String>,
        /// Comma-separated modes: standard, fixed_etf, implicit_etf
        #[arg(long)]
        modes: Option<String>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        log_interval: Option<usize>,
        /// Worker threads; 0 uses every core
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Render SVG panels from metrics CSVs
    Plot {
        /// Glob over metrics CSVs, e.g. 'runs/ufm10/*.csv'
        csv_glob: String,
        /// Comma-separated panels or `all`: loss, cosine_margin,
        /// margin_distribution, nc1, nc3, equinorm
        #[arg(long, default_value = "all")]
        panels: String,
        #[arg(long, default_value = "plots")]
        out_dir: PathBuf,
    },
    /// Run the oracle battery
    Validate {
        #[arg(long, hide = true)]
        corrupt_mixed_hessian: bool,
    },
}

fn run(command: Command) -> Result<i32, CliError> {
    match command {
        Command::Run { config, output_dir, seeds, modes, iterations, log_interval, workers } => {
            let mut cfg = ExperimentConfig::from_path(&config)?;
            let overrides = Overrides {
                output_dir,
                seeds: seeds.as_deref().map(parse_seeds).transpose()?,
                modes: modes.as_deref().map(parse_modes).transpose()?,
                iterations,
                log_interval,
                workers,
            };
            cfg.apply(&overrides, std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from));
            cfg.validate()?;
            let summary = run_experiment(&cfg)?;
            for r in &summary.runs {
                match &r.result {
                    Ok(rec) => {
                        let last = rec.rows.last();
                        println!(
                            "ok    {:<24} loss {:.6}  top1 {:.4}  first 100% at {}",
                            r.run_id,
                            last.map_or(f64::NAN, |l| l.loss),
                            last.map_or(f64::NAN, |l| l.train_top1),
                            rec.first_perfect_iteration.map_or("-".into(), |i| i.to_string())
                        );
                    }
                    Err(e) => eprintln!("error {:<24} {e}", r.run_id),
                }
            }
            println!("wrote {}", summary.dir.display());
            Ok(summary.exit_code())
        }
        Command::Plot { csv_glob, panels, out_dir } => {
            let panels = parse_panels(&panels)?;
            let paths = expand_glob(&csv_glob)?;
            for p in emit_plots(&paths, &panels, &out_dir)? {
                println!("wrote {}", p.display());
            }
            Ok(0)
        }
        Command::Validate { corrupt_mixed_hessian } => {
            let report = validate_suite(ValidateOptions { corrupt_mixed_hessian });
            print!("{}", report.render());
            Ok(report.exit_code())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
