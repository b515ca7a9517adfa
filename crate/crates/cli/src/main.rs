use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use num_rational::Ratio;

use flash_core::checks;
use flash_core::graph::{parse_scale, Amount, FeeBands};
use flash_core::metrics::{
    run_experiment, sweep, ExperimentError, ExperimentSpec, FeeModel, SweepAxis, SweepResult, TopologySource,
    WorkloadSource,
};
use flash_core::router::{RouterKind, SplitMode};
use flash_core::workload::{load_trace, summarize, Pairing, ParetoSizes, SizeModel, SplicedSizes, WorkloadError};

#[derive(Parser)]
#[command(name = "flash", version, about = "Payment-channel routing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every selected router on the same instances and write CSVs.
    Run(RunArgs),
    /// Repeat `run` for each value of one parameter.
    Sweep {
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Size and recurrence statistics of a payment trace.
    Stats {
        #[arg(long)]
        trace: PathBuf,
        /// Treat (a, b) and (b, a) as the same pair.
        #[arg(long)]
        unordered: bool,
    },
    /// Compare the solvers against brute-force oracles.
    Oracle {
        #[arg(long)]
        check: Check,
        #[arg(long, default_value_t = 200)]
        cases: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Check {
    Maxflow,
    Lp,
    Yen,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fees {
    Free,
    Bands,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sizes {
    /// Log-normal body with a Pareto tail above the 90th percentile.
    Spliced,
    /// Single Pareto fitted to the median and top-decile share.
    Pareto,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    MinFee,
    Sequential,
}

#[derive(Args)]
struct RunArgs {
    /// `ws:N,DEG,BETA` or `file:PATH`.
    #[arg(long, default_value = "ws:50,4,0.3")]
    topology: TopologySource,
    /// Channel funding interval LOW,HIGH in atomic units.
    #[arg(long, value_parser = parse_fund)]
    fund: Option<(Amount, Amount)>,
    /// Keep the balances stored in a topology file.
    #[arg(long, conflicts_with = "fund")]
    keep_balances: bool,
    /// Capacity multiplier, e.g. 10 or 0.5.
    #[arg(long, value_parser = parse_scale, default_value = "1")]
    scale: Ratio<u64>,
    #[arg(long, default_value_t = 10_000)]
    txns: usize,
    /// Routers to compare; all of them by default.
    #[arg(long, value_delimiter = ',')]
    router: Vec<RouterKind>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    /// Fraction of payments routed as mice.
    #[arg(long)]
    mice_q: Option<f64>,
    #[arg(long)]
    spider_paths: Option<usize>,
    #[arg(long, value_enum)]
    split: Option<Split>,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Payments in flight at once.
    #[arg(long, default_value_t = 1)]
    overlap: usize,
    #[arg(long, value_enum, default_value = "free")]
    fees: Fees,
    #[arg(long, value_enum, default_value = "spliced")]
    sizes: Sizes,
    /// Replay a CSV trace instead of sampling sizes.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// `random` or `trace`.
    #[arg(long, default_value = "random")]
    pairing: Pairing,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

fn parse_fund(s: &str) -> Result<(Amount, Amount), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected LOW,HIGH")?;
    let num = |x: &str| x.trim().parse::<Amount>().map_err(|e| format!("{x:?}: {e}"));
    Ok((num(lo)?, num(hi)?))
}

impl RunArgs {
    fn spec(&self) -> ExperimentSpec {
        let base = ExperimentSpec::default();
        let mut config = base.config.clone();
        config.k = self.k.unwrap_or(config.k);
        config.m = self.m.unwrap_or(config.m);
        config.mice_q = self.mice_q.unwrap_or(config.mice_q);
        config.spider_paths = self.spider_paths.unwrap_or(config.spider_paths);
        if let Some(split) = self.split {
            config.split = match split {
                Split::MinFee => SplitMode::MinFee,
                Split::Sequential => SplitMode::Sequential,
            };
        }
        let workload = match &self.trace {
            Some(path) => WorkloadSource::Trace(path.clone()),
            None => WorkloadSource::Synthetic {
                sizes: match self.sizes {
                    Sizes::Spliced => SizeModel::Spliced(SplicedSizes::ripple_like()),
                    Sizes::Pareto => SizeModel::Pareto(ParetoSizes::ripple_like()),
                },
                units_per_dollar: 100,
            },
        };
        ExperimentSpec {
            topology: self.topology.clone(),
            fund: if self.keep_balances { None } else { self.fund.or(base.fund) },
            capacity_scale: self.scale,
            txn_count: self.txns,
            routers: if self.router.is_empty() { RouterKind::ALL.to_vec() } else { self.router.clone() },
            config,
            fees: match self.fees {
                Fees::Free => FeeModel::Free,
                Fees::Bands => FeeModel::Bands(FeeBands::default()),
            },
            workload,
            pairing: self.pairing,
            repetitions: self.reps,
            seed_base: self.seed,
            overlap: self.overlap,
        }
    }
}

struct Failure {
    code: u8,
    message: String,
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        Failure { code: if e.is_config() { 2 } else { 1 }, message: e.to_string() }
    }
}

impl From<WorkloadError> for Failure {
    fn from(e: WorkloadError) -> Self {
        let code = if matches!(e, WorkloadError::Io(_)) { 1 } else { 2 };
        Failure { code, message: e.to_string() }
    }
}

fn print_summary(result: &SweepResult) {
    println!("{:<10} {:<8} {:>8} {:>16} {:>12}", "value", "router", "ratio", "volume", "probes");
    for (value, cell) in &result.cells {
        let mut routers: Vec<RouterKind> = Vec::new();
        for row in &cell.rows {
            if !routers.contains(&row.router) {
                routers.push(row.router);
            }
        }
        for kind in routers {
            println!(
                "{:<10} {:<8} {:>8.4} {:>16.0} {:>12.0}",
                if value.is_empty() { "-" } else { value },
                kind.name(),
                cell.mean(kind, |m| m.all.success_ratio()),
                cell.mean(kind, |m| m.all.success_volume as f64),
                cell.mean(kind, |m| m.all.probe_messages as f64),
            );
        }
    }
}

fn write(result: &SweepResult, run: &RunArgs, stem: &str) -> Result<(), Failure> {
    let (runs, summary) = result.write(&run.out, stem)?;
    print_summary(result);
    println!("wrote {} and {}", runs.display(), summary.display());
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run(run) => {
            let result = run_experiment(&run.spec())?;
            write(&SweepResult::single(result), &run, "run")
        }
        Command::Sweep { axis, values, run } => {
            let result = sweep(&run.spec(), axis, &values)?;
            write(&result, &run, &format!("sweep_{}", axis.name()))
        }
        Command::Stats { trace, unordered } => {
            let records = load_trace(&trace)?;
            let s = summarize(&records, unordered)?;
            let opt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            println!("records                    {}", s.records);
            println!("median volume              {:.2}", s.median_volume);
            println!("90th percentile threshold  {}", s.p90_threshold);
            println!("top-decile volume share    {:.4}", s.top_decile_volume_share);
            println!("daily windows              {}", s.windows);
            println!("median recurring fraction  {}", opt(s.median_recurring_fraction));
            println!("median top-5 pair share    {}", opt(s.median_top5_share));
            Ok(())
        }
        Command::Oracle { check, cases, seed } => {
            let report = match check {
                Check::Maxflow => checks::maxflow_suite(cases, seed),
                Check::Lp => checks::lp_suite(cases, seed),
                Check::Yen => checks::yen_suite(cases, seed),
            };
            println!("{report}");
            for f in &report.failures {
                println!("  {f}");
            }
            if report.passed() {
                Ok(())
            } else {
                Err(Failure { code: 1, message: format!("{} oracle mismatches", report.failures.len()) })
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
