//! Command-line front end: training runs, rounding-mode sweeps, procedure
//! profiling and fixed-point self checks.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::admm::{accuracy, predict, train, AdmmError, Arithmetic, IterationTimings, NetworkConfig, TrainLog};
use crate::data::{load_csv, split, standardize, subsample, synthetic_higgs_like, with_bias_row, DataError, Dataset};
use crate::fixedpoint::{convert, value_of, FixedFormat, FixedWord, RoundingMode};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] AdmmError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0} self-test check(s) failed")]
    SelfTest(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

/// Layer widths written as `d,h1[,h2...],o`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arch(pub Vec<usize>);

impl FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let dims = s
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad layer width `{p}`")))
            .collect::<Result<Vec<_>, _>>()?;
        if dims.len() < 3 {
            return Err("architecture needs input, at least one hidden and an output width".into());
        }
        if dims.contains(&0) {
            return Err("layer widths must be positive".into());
        }
        Ok(Arch(dims))
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Parser)]
#[command(name = "admm-lsmr", version, about = "ADMM training of ReLU networks with a truncated LSMR solver")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train once and write a JSON report.
    Train(RunArgs),
    /// Mean / stdev test accuracy of real and each fixed-point rounding mode.
    CompareRounding(CompareArgs),
    /// Share of time spent in each training procedure.
    Profile(ProfileArgs),
    /// Check the fixed-point bit-pattern fixtures.
    Selftest,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// CSV file, one sample per row.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Zero-based label column (default: last).
    #[arg(long = "label-col")]
    pub label_col: Option<usize>,
    /// The CSV has no header line.
    #[arg(long)]
    pub no_header: bool,
    /// Layer widths `d,h1[,h2...],o` (default: `D,8,8,classes`).
    #[arg(long)]
    pub arch: Option<Arch>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long, default_value = "real")]
    pub arithmetic: Arithmetic,
    #[arg(long, default_value = "nearest")]
    pub rounding: RoundingMode,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
    #[arg(long = "test-frac", default_value_t = 0.2)]
    pub test_frac: f64,
    /// Keep this many samples before splitting.
    #[arg(long)]
    pub subsample: Option<usize>,
    /// LSMR iterations per solve (default: min(m, n)).
    #[arg(long = "lsmr-iters")]
    pub lsmr_iters: Option<usize>,
    /// Append a constant-one input feature.
    #[arg(long)]
    pub bias: bool,
    /// Leave timings out of the report.
    #[arg(long)]
    pub no_timings: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl RunArgs {
    /// `RunArgs` with every flag at its default and the given data file.
    pub fn for_data(data: impl Into<PathBuf>) -> Self {
        RunArgs {
            data: Some(data.into()),
            label_col: None,
            no_header: false,
            arch: None,
            iters: None,
            arithmetic: Arithmetic::Real,
            rounding: RoundingMode::Nearest,
            beta: 1.0,
            gamma: 1.0,
            seed: 0,
            workers: 4,
            test_frac: 0.2,
            subsample: None,
            lsmr_iters: None,
            bias: false,
            no_timings: false,
            out: None,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Seeded runs per mode; run `r` uses seed `seed + r`.
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Synthetic samples when no `--data` is given.
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    /// Synthetic feature count when no `--data` is given.
    #[arg(long, default_value_t = 28)]
    pub features: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub arch: Vec<usize>,
    pub arithmetic: Arithmetic,
    /// `fixed<WL,FL>` of the solver, absent for real arithmetic.
    pub format: Option<String>,
    pub rounding: RoundingMode,
    pub seed: u64,
    pub beta: f64,
    pub gamma: f64,
    pub iterations: usize,
    pub workers: usize,
    pub lsmr_iters: Option<usize>,
    pub bias: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub source: String,
    pub samples: usize,
    pub features: usize,
    pub classes: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub test_fraction: f64,
    pub subsample: Option<usize>,
}

/// Procedure times in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ProcedureSeconds {
    pub weight: f64,
    pub activation: f64,
    pub output: f64,
    pub lagrangian: f64,
}

impl ProcedureSeconds {
    pub fn from_timings(t: &IterationTimings) -> Self {
        ProcedureSeconds {
            weight: t.weight.as_secs_f64(),
            activation: t.activation.as_secs_f64(),
            output: t.output.as_secs_f64(),
            lagrangian: t.lagrangian.as_secs_f64(),
        }
    }

    pub fn total(&self) -> f64 {
        self.weight + self.activation + self.output + self.lagrangian
    }

    /// Shares of the total, in percent.
    pub fn percentages(&self) -> ProcedureSeconds {
        let total = self.total();
        if total <= 0.0 {
            return ProcedureSeconds::default();
        }
        ProcedureSeconds {
            weight: 100.0 * self.weight / total,
            activation: 100.0 * self.activation / total,
            output: 100.0 * self.output / total,
            lagrangian: 100.0 * self.lagrangian / total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub total_seconds: ProcedureSeconds,
    pub percentages: ProcedureSeconds,
    pub sweep_wall_seconds: f64,
    pub per_iteration: Vec<ProcedureSeconds>,
}

impl TimingReport {
    pub fn from_log(log: &TrainLog) -> Self {
        let total = ProcedureSeconds::from_timings(&log.total_timings());
        TimingReport {
            percentages: total.percentages(),
            total_seconds: total,
            sweep_wall_seconds: log.sweep_wall.iter().sum::<Duration>().as_secs_f64(),
            per_iteration: log.timings.iter().map(ProcedureSeconds::from_timings).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaturationReport {
    pub total: u64,
    pub per_iteration: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: ConfigEcho,
    pub dataset: DatasetInfo,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub saturations: SaturationReport,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub timing: Option<TimingReport>,
}

/// A prepared train/test problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub train: Dataset,
    pub test: Dataset,
    pub info: DatasetInfo,
}

fn load_source(args: &RunArgs) -> Result<(Dataset, String), CliError> {
    let path = args.data.as_ref().ok_or_else(|| CliError::Usage("--data is required".into()))?;
    Ok((load_csv(path, args.label_col, !args.no_header)?, path.display().to_string()))
}

/// Subsample, split, standardize and optionally append the bias row.
pub fn prepare(ds: &Dataset, source: String, args: &RunArgs) -> Result<Problem, CliError> {
    let ds = match args.subsample {
        Some(n) => subsample(ds, n, args.seed)?,
        None => ds.clone(),
    };
    let s = split(&ds, args.test_frac, args.seed)?;
    let (mut train, mut test, _) = standardize(&s.train, &s.test)?;
    if args.bias {
        train = with_bias_row(&train);
        test = with_bias_row(&test);
    }
    let info = DatasetInfo {
        source,
        samples: ds.len(),
        features: ds.feature_count(),
        classes: ds.class_count,
        train_samples: train.len(),
        test_samples: test.len(),
        test_fraction: args.test_frac,
        subsample: args.subsample,
    };
    Ok(Problem { train, test, info })
}

fn resolve_arch(args: &RunArgs, info: &DatasetInfo) -> Result<Vec<usize>, CliError> {
    let arch = match &args.arch {
        Some(a) => a.0.clone(),
        None => vec![info.features, 8, 8, info.classes],
    };
    if arch[0] != info.features {
        return Err(CliError::Usage(format!("--arch input width {} does not match {} features", arch[0], info.features)));
    }
    if *arch.last().unwrap() != info.classes {
        return Err(CliError::Usage(format!(
            "--arch output width {} does not match {} classes",
            arch.last().unwrap(),
            info.classes
        )));
    }
    Ok(arch)
}

/// Trains on a prepared problem with the flags in `args`.
pub fn train_problem(problem: &Problem, args: &RunArgs, default_iters: usize) -> Result<(TrainReport, TrainLog), CliError> {
    if args.workers == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    let arch = resolve_arch(args, &problem.info)?;
    let mut dims = arch.clone();
    dims[0] = problem.train.feature_count();
    let cfg = NetworkConfig {
        iterations: args.iters.unwrap_or(default_iters),
        arithmetic: args.arithmetic,
        rounding: args.rounding,
        seed: args.seed,
        workers: args.workers,
        lsmr_iters: args.lsmr_iters,
        ..NetworkConfig::new(dims).with_penalties(args.beta, args.gamma)
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let (state, log) = train(&cfg, &problem.train.features, &problem.train.targets())?;
    let train_accuracy = accuracy(&predict(&state.weights, &problem.train.features)?, &problem.train.labels);
    let test_accuracy = accuracy(&predict(&state.weights, &problem.test.features)?, &problem.test.labels);
    let report = TrainReport {
        config: ConfigEcho {
            arch,
            arithmetic: cfg.arithmetic,
            format: cfg.arithmetic.format().map(|f| f.to_string()),
            rounding: cfg.rounding,
            seed: cfg.seed,
            beta: args.beta,
            gamma: args.gamma,
            iterations: cfg.iterations,
            workers: cfg.workers,
            lsmr_iters: cfg.lsmr_iters,
            bias: args.bias,
        },
        dataset: problem.info.clone(),
        train_accuracy,
        test_accuracy,
        saturations: SaturationReport { total: log.total_saturations(), per_iteration: log.saturations.clone() },
        timing: if args.no_timings { None } else { Some(TimingReport::from_log(&log)) },
    };
    Ok((report, log))
}

pub fn cmd_train(args: &RunArgs) -> Result<TrainReport, CliError> {
    let (ds, source) = load_source(args)?;
    let problem = prepare(&ds, source, args)?;
    Ok(train_problem(&problem, args, 100)?.0)
}

/// One row of the rounding comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: String,
    pub mean: f64,
    pub stdev: f64,
    pub runs: usize,
}

/// Modes compared, in output order.
pub const COMPARE_MODES: [Option<RoundingMode>; 5] = [
    None,
    Some(RoundingMode::Nearest),
    Some(RoundingMode::Stochastic),
    Some(RoundingMode::Up),
    Some(RoundingMode::Down),
];

pub fn mean_stdev(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Test accuracy of every run for one mode; `None` is the real solver. The
/// fixed format comes from `--arithmetic`, falling back to `fixed<32,18>`.
pub fn mode_accuracies(ds: &Dataset, source: &str, args: &RunArgs, mode: Option<RoundingMode>, runs: usize) -> Result<Vec<f64>, CliError> {
    let fixed = if args.arithmetic == Arithmetic::Real { Arithmetic::Fixed32 } else { args.arithmetic };
    (0..runs)
        .map(|r| {
            let run = RunArgs {
                seed: args.seed + r as u64,
                arithmetic: if mode.is_some() { fixed } else { Arithmetic::Real },
                rounding: mode.unwrap_or(RoundingMode::Nearest),
                no_timings: true,
                ..args.clone()
            };
            let problem = prepare(ds, source.to_string(), &run)?;
            Ok(train_problem(&problem, &run, 100)?.0.test_accuracy)
        })
        .collect()
}

pub fn cmd_compare_rounding(args: &CompareArgs) -> Result<Vec<ModeSummary>, CliError> {
    if args.runs < 2 {
        return Err(CliError::Usage("--runs must be at least 2".into()));
    }
    let (ds, source) = load_source(&args.run)?;
    COMPARE_MODES
        .iter()
        .map(|&mode| {
            let accs = mode_accuracies(&ds, &source, &args.run, mode, args.runs)?;
            let (mean, stdev) = mean_stdev(&accs);
            let name = mode.map_or("real".to_string(), |m| m.name().to_string());
            Ok(ModeSummary { mode: name, mean, stdev, runs: args.runs })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub source: String,
    pub samples: usize,
    pub arch: Vec<usize>,
    pub iterations: usize,
    pub workers: usize,
    pub seconds: ProcedureSeconds,
    pub percentages: ProcedureSeconds,
    pub sweep_wall_seconds: f64,
    /// Tracked procedure time over sweep wall time.
    pub coverage: f64,
}

pub fn cmd_profile(args: &ProfileArgs) -> Result<ProfileReport, CliError> {
    let mut run = args.run.clone();
    let (ds, source) = match &run.data {
        Some(_) => load_source(&run)?,
        None => {
            if run.arch.is_none() {
                let f = args.features;
                run.arch = Some(Arch(vec![f, f, f, f, 2]));
            }
            (synthetic_higgs_like(args.samples, args.features, run.seed), format!("synthetic:{}x{}", args.samples, args.features))
        }
    };
    let problem = prepare(&ds, source.clone(), &run)?;
    let (report, log) = train_problem(&problem, &run, 3)?;
    let timing = TimingReport::from_log(&log);
    Ok(ProfileReport {
        source,
        samples: problem.info.train_samples,
        arch: report.config.arch,
        iterations: report.config.iterations,
        workers: report.config.workers,
        coverage: if timing.sweep_wall_seconds > 0.0 {
            timing.total_seconds.total() / timing.sweep_wall_seconds
        } else {
            0.0
        },
        seconds: timing.total_seconds,
        percentages: timing.percentages,
        sweep_wall_seconds: timing.sweep_wall_seconds,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
}

/// The fixed-point bit-pattern fixtures.
pub fn selftest_checks() -> Vec<Check> {
    let q16 = FixedFormat::Q16_10;
    let q32 = FixedFormat::Q32_18;
    let mut checks = Vec::new();
    let mut check = |name: &str, passed: bool| checks.push(Check { name: name.to_string(), passed });
    for (rep, value) in [(23689i32, 23.1337890625), (-28254, -27.591796875)] {
        check(&format!("fixed<16,10> rep {rep} is {value}"), FixedWord::from_rep(rep as i64, q16).map(value_of).ok() == Some(value));
        let back = convert(value, q16, RoundingMode::Nearest, None).map(|w| w.rep());
        check(&format!("fixed<16,10> {value} converts to rep {rep}"), back == Ok(rep));
    }
    check("fixed<32,18> Ubound = 0x7FFFFFFF", q32.upper_bound_rep() as u32 == 0x7FFF_FFFF);
    check("fixed<32,18> Lbound = 0x80000000", q32.lower_bound_rep() as u32 == 0x8000_0000);
    check("fixed<32,18> ONE_F = 0x00040000", q32.one_rep() as u32 == 0x0004_0000);
    check("fixed<32,18> MINUS_ONE_F = 0xFFFC0000", q32.minus_one_rep() as u32 == 0xFFFC_0000);
    checks
}

fn open_out(out: &Option<PathBuf>) -> Result<Box<dyn Write>, CliError> {
    Ok(match out {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_json<T: Serialize>(value: &T, out: &Option<PathBuf>) -> Result<(), CliError> {
    let mut w = open_out(out)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    Ok(())
}

pub fn write_summary_csv(rows: &[ModeSummary], w: impl Write) -> Result<(), CliError> {
    let mut wtr = csv::Writer::from_writer(w);
    for row in rows {
        wtr.serialize(row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => write_json(&cmd_train(&args)?, &args.out),
        Command::CompareRounding(args) => {
            let rows = cmd_compare_rounding(&args)?;
            write_summary_csv(&rows, open_out(&args.run.out)?)
        }
        Command::Profile(args) => write_json(&cmd_profile(&args)?, &args.run.out),
        Command::Selftest => {
            let checks = selftest_checks();
            let failed = checks.iter().filter(|c| !c.passed).count();
            let mut out = io::stdout().lock();
            for c in &checks {
                writeln!(out, "{} {}", if c.passed { "ok  " } else { "FAIL" }, c.name)?;
            }
            if failed > 0 {
                return Err(CliError::SelfTest(failed));
            }
            Ok(())
        }
    }
}

/// Parses arguments; usage errors print and exit with status 2.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Path of the IRIS copy shipped with the crate.
pub fn bundled_iris() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/iris.csv")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_parsing() {
        assert_eq!("4,8,3".parse::<Arch>().unwrap(), Arch(vec![4, 8, 3]));
        assert_eq!(" 4, 8 ,8,3".parse::<Arch>().unwrap().to_string(), "4,8,8,3");
        assert!("4,3".parse::<Arch>().is_err());
        assert!("4,0,3".parse::<Arch>().is_err());
        assert!("4,x,3".parse::<Arch>().is_err());
    }

    #[test]
    fn percentages_sum_to_hundred() {
        let p = ProcedureSeconds { weight: 1.0, activation: 2.0, output: 0.5, lagrangian: 0.01 }.percentages();
        assert!((p.total() - 100.0).abs() < 1e-9);
        assert_eq!(ProcedureSeconds::default().percentages(), ProcedureSeconds::default());
    }

    #[test]
    fn mean_stdev_sample() {
        let (m, s) = mean_stdev(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn selftest_passes() {
        assert!(selftest_checks().iter().all(|c| c.passed));
    }

    #[test]
    fn arch_must_fit_data() {
        let mut args = RunArgs::for_data(bundled_iris());
        args.arch = Some(Arch(vec![5, 8, 3]));
        args.iters = Some(1);
        assert!(matches!(cmd_train(&args), Err(CliError::Usage(_))));
        args.arch = Some(Arch(vec![4, 8, 2]));
        assert!(matches!(cmd_train(&args), Err(CliError::Usage(_))));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(main_with_args(["admm-lsmr", "train", "--iters", "x"]), 2);
        assert_eq!(main_with_args(["admm-lsmr", "train", "--data", "/nonexistent.csv"]), 1);
        assert_eq!(main_with_args(["admm-lsmr", "bogus"]), 2);
    }
}
