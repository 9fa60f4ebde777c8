use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use idemlock::harness::{self, mode_override, parse_config, run_sweep, write_csv, CsvRow, HarnessError, SweepConfig, WorkloadSpec};
use idemlock::structures::{LockKind, StructureKind};
use idemlock::verify::suite::{self, Suite, SuiteConfig};
use idemlock::verify::trace::TraceFile;
use idemlock::LockMode;

#[derive(Parser)]
#[command(name = "idemlock", version, about = "Benchmark and verify lock-free locks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a timed workload (or a sweep of them) and write CSV rows.
    Bench(BenchArgs),
    /// Explore schedules of a verification suite, or replay a saved trace.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "leaftree")]
    structure: StructureKind,
    /// Key range; keys are drawn from 1..=range.
    #[arg(long, default_value_t = 100_000)]
    range: u64,
    /// Percentage of operations that are updates, split evenly between inserts and removes.
    #[arg(long, default_value_t = 50)]
    updates: u32,
    /// Zipfian skew; 0 is uniform.
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 1.0)]
    seconds: f64,
    /// Overridden by the IDEMLOCK_MODE environment variable when it is set.
    #[arg(long, default_value = "lockfree")]
    mode: LockMode,
    #[arg(long, default_value = "try")]
    lock: LockKind,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Hash table buckets (default 65536).
    #[arg(long)]
    buckets: Option<usize>,
    /// Repetitions of the run, the first `warmup` of which are marked as warmup.
    #[arg(long, default_value_t = 1)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    warmup: usize,
    /// Sweep file of `key = value, value, ...` lines; replaces the single-run flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where to write CSV rows (stdout if omitted).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    suite: Option<Suite>,
    /// Run only this case of the suite.
    #[arg(long)]
    case: Option<String>,
    /// Longest execution, in scheduled steps, that is enumerated exhaustively.
    #[arg(long, default_value_t = 16)]
    budget: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Random schedules per case that is over budget.
    #[arg(long, default_value_t = 100_000)]
    random_runs: usize,
    /// Small scheduled histories per structure (linearizable suite).
    #[arg(long, default_value_t = 1000)]
    histories: usize,
    /// Operations per structure in recorded real-thread runs (linearizable suite).
    #[arg(long, default_value_t = 1_000_000)]
    ops: usize,
    #[arg(long, default_value_t = 4)]
    threads: usize,
    /// Preemption bound for cases too long to enumerate exhaustively.
    #[arg(long, default_value_t = 2)]
    preemptions: usize,
    /// Seconds per real-thread contention storm (helping suite).
    #[arg(long, default_value_t = 1.0)]
    storm_seconds: f64,
    /// Re-execute a saved trace and compare it step for step.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Save the first unexpected failure, or with --case a seeded run of that case.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

fn bench(a: BenchArgs) -> Result<bool, HarnessError> {
    let mode_env = mode_override()?;
    let mut cfg = match &a.config {
        Some(path) => parse_config(&std::fs::read_to_string(path)?)?,
        None => {
            let spec = WorkloadSpec {
                structure: a.structure,
                range: a.range,
                update_percent: a.updates,
                alpha: a.alpha,
                threads: a.threads,
                seconds: a.seconds,
                mode: a.mode,
                lock: a.lock,
                seed: a.seed,
                buckets: a.buckets,
            };
            spec.validate()?;
            SweepConfig {
                structures: vec![spec.structure],
                ranges: vec![spec.range],
                updates: vec![spec.update_percent],
                alphas: vec![spec.alpha],
                threads: vec![spec.threads],
                modes: vec![spec.mode],
                locks: vec![spec.lock],
                seconds: spec.seconds,
                seed: spec.seed,
                buckets: spec.buckets,
                reps: a.reps.max(1),
                warmup: a.warmup,
            }
        }
    };
    if let Some(m) = mode_env {
        eprintln!("{}={m} overrides the configured lock mode", harness::MODE_ENV);
        cfg.modes = vec![m];
    }
    let rows = run_sweep(&cfg, |row: &CsvRow| {
        let r = &row.result;
        eprintln!(
            "{} range={} updates={}% alpha={} threads={} mode={} lock={} rep={}{}: {:.3} Mop/s, max helping chain {}",
            r.spec.structure,
            r.spec.range,
            r.spec.update_percent,
            r.spec.alpha,
            r.spec.threads,
            r.spec.mode,
            r.spec.lock,
            row.rep,
            if row.warmup { " (warmup)" } else { "" },
            r.throughput() / 1e6,
            r.max_chain()
        );
    })?;
    match &a.csv {
        Some(path) => write_csv(&rows, File::create(path)?)?,
        None => write_csv(&rows, io::stdout().lock())?,
    }
    Ok(true)
}

fn verify(a: VerifyArgs) -> Result<bool, String> {
    if let Some(path) = &a.replay {
        let t = TraceFile::load(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let r = suite::replay(&t)?;
        println!("replayed {} {} (seed {}): {} steps", t.suite, t.case, t.seed, r.steps);
        match r.first_difference {
            None => println!("trace identical to the recording"),
            Some(i) => println!("trace differs from the recording at step {i}"),
        }
        match &r.verdict {
            Ok(()) => println!("verdict: passed"),
            Err(m) => println!("verdict: failed: {m}"),
        }
        if !t.message.is_empty() {
            println!("recorded verdict: failed: {}", t.message);
        }
        return Ok(r.identical && r.verdict.err().unwrap_or_default() == t.message);
    }
    let s = a.suite.ok_or("either --suite or --replay is required")?;
    let cfg = SuiteConfig {
        budget: a.budget,
        seed: a.seed,
        random_runs: a.random_runs,
        histories: a.histories,
        ops: a.ops,
        threads: a.threads,
        storm_seconds: a.storm_seconds,
        preemptions: a.preemptions,
        ..SuiteConfig::default()
    };
    if let Some(name) = &a.case {
        let c = suite::run_case(s, name, &cfg).ok_or_else(|| format!("no case `{name}` in suite {s}"))?;
        println!("{s} {}: {}: {}", c.name, if c.ok() { "ok" } else { "FAIL" }, c.report);
        if let Some(path) = &a.trace_out {
            let t = suite::record(s, name, a.seed).expect("case exists");
            t.save(path).map_err(|e| format!("{}: {e}", path.display()))?;
            println!("saved a run with schedule seed {} ({} steps) to {}", a.seed, t.steps.len(), path.display());
        }
        return Ok(c.ok());
    }
    let out = suite::run(s, &cfg);
    println!("{out}");
    if let (Some(path), Some(t)) = (&a.trace_out, out.first_failure(a.seed)) {
        t.save(path).map_err(|e| format!("{}: {e}", path.display()))?;
        println!("saved failing trace of {} to {}", t.case, path.display());
    }
    Ok(out.passed())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error")).init();
    let r = match Cli::parse().command {
        Command::Bench(a) => bench(a).map_err(|e| e.to_string()),
        Command::Verify(a) => verify(a),
    };
    let _ = io::stdout().flush();
    match r {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
