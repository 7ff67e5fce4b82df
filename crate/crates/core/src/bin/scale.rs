use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scale_core::harness::analysis::{analyze_raw, bins_csv};
use scale_core::harness::experiment::{read_raw, run_experiment, write_outputs, RunOptions};
use scale_core::harness::selftest::run_selftest;
use scale_core::harness::{bench_latency, BenchOptions, ExperimentSpec};
use scale_core::Error;

#[derive(Parser)]
#[command(
    name = "scale",
    version,
    about = "Uncertainty-gated decoding and attention experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every strategy x seed x episode cell of an experiment file.
    Run {
        spec: PathBuf,
        /// Master seed (overrides SCALE_SEED and the file).
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (defaults to the file's output_dir, then ./results).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Time N-sample generation and single-pass overhead.
    Bench {
        spec: PathBuf,
        /// Comma-separated sample counts.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        n: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the latency table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Accepted for symmetry with `run`; timing runs single-threaded.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Success rate by episode-mean top-1 probability.
    Analyze {
        raw: PathBuf,
        #[arg(long, default_value_t = 5)]
        bins: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

fn load_spec(path: &Path, seed: Option<u64>) -> Result<ExperimentSpec, Error> {
    let mut spec = ExperimentSpec::load(path)?;
    spec.resolve_seed(seed)?;
    Ok(spec)
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::Io {
                    path: dir.to_path_buf(),
                    source: e,
                })?;
            }
            fs::write(p, text).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Run { spec, seed, out, jobs } => {
            let spec = load_spec(&spec, seed)?;
            let output = run_experiment(&spec, RunOptions { jobs })?;
            let dir = out
                .or_else(|| spec.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("results"));
            let paths = write_outputs(&output, &dir)?;
            print!("{}", output.summary.to_csv());
            eprintln!(
                "wrote {}, {}, {}",
                paths.summary.display(),
                paths.raw.display(),
                paths.timing.display()
            );
            Ok(true)
        }
        Command::Bench {
            spec,
            n,
            episodes,
            warmup,
            seed,
            out,
            jobs: _,
        } => {
            let spec = load_spec(&spec, seed)?;
            let report = bench_latency(&spec, &n, BenchOptions { episodes, warmup })?;
            emit(out.as_deref(), &report.to_csv())?;
            if let Some(fit) = report.fit {
                eprintln!(
                    "linear fit: {:.3} us/sample + {:.3} us, R^2 = {:.4}",
                    fit.slope, fit.intercept, fit.r2
                );
            }
            eprintln!(
                "single pass: greedy {:.3} us/step, adaptive {:.3} us/step, ratio {:.4}",
                report.greedy_step_us,
                report.adaptive_step_us,
                report.overhead_ratio()
            );
            Ok(true)
        }
        Command::Analyze { raw, bins, out } => {
            let records = read_raw(&raw)?;
            let table = analyze_raw(&records, bins).map_err(|e| Error::Config(e.to_string()))?;
            emit(out.as_deref(), &bins_csv(&table))?;
            Ok(true)
        }
        Command::Selftest => {
            let checks = run_selftest();
            let mut ok = true;
            for c in &checks {
                println!("{} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                ok &= c.passed;
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
