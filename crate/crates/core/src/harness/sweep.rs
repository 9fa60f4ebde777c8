use std::io::Write;

use crate::locks::LockMode;
use crate::structures::{LockKind, StructureKind};

use super::{cores, run_workload, HarnessError, RunResult, WorkloadSpec};

pub const CSV_HEADER: [&str; 15] = [
    "structure",
    "mode",
    "lockKind",
    "r",
    "updatePercent",
    "alpha",
    "threads",
    "rep",
    "warmup",
    "ops",
    "seconds",
    "throughput",
    "retries",
    "helps",
    "cores",
];

/// A sweep: the cartesian product of every axis, each point run `reps` times, the first
/// `warmup` of which are flagged.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub structures: Vec<StructureKind>,
    pub ranges: Vec<u64>,
    pub updates: Vec<u32>,
    pub alphas: Vec<f64>,
    pub threads: Vec<usize>,
    pub modes: Vec<LockMode>,
    pub locks: Vec<LockKind>,
    pub seconds: f64,
    pub seed: u64,
    pub buckets: Option<usize>,
    pub reps: usize,
    pub warmup: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let d = WorkloadSpec::default();
        SweepConfig {
            structures: vec![d.structure],
            ranges: vec![d.range],
            updates: vec![d.update_percent],
            alphas: vec![d.alpha],
            threads: vec![d.threads],
            modes: vec![d.mode],
            locks: vec![d.lock],
            seconds: d.seconds,
            seed: d.seed,
            buckets: None,
            reps: 4,
            warmup: 1,
        }
    }
}

impl SweepConfig {
    /// Every workload of the sweep, in row order.
    pub fn specs(&self) -> Vec<WorkloadSpec> {
        let mut out = Vec::new();
        for &structure in &self.structures {
            for &range in &self.ranges {
                for &update_percent in &self.updates {
                    for &alpha in &self.alphas {
                        for &threads in &self.threads {
                            for &mode in &self.modes {
                                for &lock in &self.locks {
                                    out.push(WorkloadSpec {
                                        structure,
                                        range,
                                        update_percent,
                                        alpha,
                                        threads,
                                        seconds: self.seconds,
                                        mode,
                                        lock,
                                        seed: self.seed,
                                        buckets: self.buckets,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

fn list<T>(line: usize, key: &str, value: &str, parse: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, HarnessError> {
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(s).map_err(|msg| HarnessError::Parse { line, msg: format!("{key}: {msg}") }))
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(HarnessError::Parse { line, msg: format!("{key}: empty list") });
    }
    Ok(items)
}

fn single<T>(line: usize, key: &str, value: &str, parse: impl Fn(&str) -> Result<T, String>) -> Result<T, HarnessError> {
    let mut v = list(line, key, value, parse)?;
    if v.len() != 1 {
        return Err(HarnessError::Parse { line, msg: format!("{key} takes a single value") });
    }
    Ok(v.remove(0))
}

fn num<T: std::str::FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.replace('_', "").parse().map_err(|e| format!("`{s}`: {e}"))
}

/// Thread counts: a number, `cores`, or a multiple of the core count such as `8x`.
pub(crate) fn thread_count(s: &str) -> Result<usize, String> {
    if s.eq_ignore_ascii_case("cores") {
        return Ok(cores());
    }
    if let Some(m) = s.strip_suffix(['x', 'X']) {
        return Ok(num::<usize>(m)? * cores());
    }
    num(s)
}

fn alpha(s: &str) -> Result<f64, String> {
    let a: f64 = num(s)?;
    if !(a >= 0.0 && a.is_finite()) {
        return Err(format!("alpha must be a finite number >= 0, got {s}"));
    }
    Ok(a)
}

/// Parses `key = value, value, ...` lines. `#` starts a comment.
pub fn parse_config(text: &str) -> Result<SweepConfig, HarnessError> {
    let mut c = SweepConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((key, value)) = body.split_once('=') else {
            return Err(HarnessError::Parse { line, msg: format!("expected `key = values`, got `{body}`") });
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "structure" | "structures" => c.structures = list(line, key, value, str::parse)?,
            "range" | "r" => c.ranges = list(line, key, value, num)?,
            "updates" | "updatePercent" => {
                c.updates = list(line, key, value, |s| {
                    let u: u32 = num(s)?;
                    if u > 100 {
                        return Err(format!("update percent must be at most 100, got {u}"));
                    }
                    Ok(u)
                })?
            }
            "alpha" => c.alphas = list(line, key, value, alpha)?,
            "threads" => c.threads = list(line, key, value, thread_count)?,
            "mode" => c.modes = list(line, key, value, str::parse)?,
            "lock" | "lockKind" => c.locks = list(line, key, value, str::parse)?,
            "seconds" => c.seconds = single(line, key, value, num)?,
            "seed" => c.seed = single(line, key, value, num)?,
            "buckets" => c.buckets = Some(single(line, key, value, num)?),
            "reps" => c.reps = single(line, key, value, num)?,
            "warmup" => c.warmup = single(line, key, value, num)?,
            _ => return Err(HarnessError::Parse { line, msg: format!("unknown key `{key}`") }),
        }
    }
    if c.reps == 0 {
        return Err(HarnessError::InvalidSpec("reps must be positive".into()));
    }
    for s in c.specs() {
        s.validate()?;
    }
    Ok(c)
}

/// One CSV line.
#[derive(Clone, Debug)]
pub struct CsvRow {
    pub result: RunResult,
    pub rep: usize,
    pub warmup: bool,
}

impl CsvRow {
    pub fn fields(&self) -> [String; 15] {
        let r = &self.result;
        let s = &r.spec;
        [
            s.structure.to_string(),
            s.mode.to_string(),
            s.lock.to_string(),
            s.range.to_string(),
            s.update_percent.to_string(),
            s.alpha.to_string(),
            s.threads.to_string(),
            self.rep.to_string(),
            self.warmup.to_string(),
            r.ops.to_string(),
            format!("{:.6}", r.elapsed.as_secs_f64()),
            format!("{:.1}", r.throughput()),
            r.retries.to_string(),
            r.helps.to_string(),
            r.cores.to_string(),
        ]
    }
}

pub fn write_csv<W: Write>(rows: &[CsvRow], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record(r.fields())?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every point of the sweep `reps` times, calling `each` as rows complete.
pub fn run_sweep(cfg: &SweepConfig, mut each: impl FnMut(&CsvRow)) -> Result<Vec<CsvRow>, HarnessError> {
    let mut rows = Vec::new();
    for spec in cfg.specs() {
        for rep in 0..cfg.reps {
            let row = CsvRow {
                result: run_workload(&spec)?,
                rep,
                warmup: rep < cfg.warmup,
            };
            each(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_blank_lines_and_lists() {
        let c = parse_config("# sweep\n\nstructure = dlist, leaftree  # two\nalpha=0,0.5 , 0.99\nthreads = 1, cores, 2x\nreps = 3\n").unwrap();
        assert_eq!(c.structures, vec![StructureKind::DList, StructureKind::LeafTree]);
        assert_eq!(c.alphas, vec![0.0, 0.5, 0.99]);
        assert_eq!(c.threads, vec![1, cores(), 2 * cores()]);
        assert_eq!(c.specs().len(), 6 * 3);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = parse_config("reps = 2\n\nalpha = 0.5, -1\n").unwrap_err();
        assert!(matches!(e, HarnessError::Parse { line: 3, .. }), "{e}");
        assert!(e.to_string().contains("alpha"));
        let e = parse_config("colour = red\n").unwrap_err();
        assert!(matches!(e, HarnessError::Parse { line: 1, .. }));
        let e = parse_config("x\n").unwrap_err();
        assert!(matches!(e, HarnessError::Parse { line: 1, .. }));
        let e = parse_config("mode = lockfree\nmode = sideways\n").unwrap_err();
        assert!(matches!(e, HarnessError::Parse { line: 2, .. }));
    }
}
