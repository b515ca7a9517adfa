//! Experiment runner: builds topology and workload per repetition, routes it
//! with each router and aggregates the outcomes into reports and CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path as FsPath, PathBuf};
use std::str::FromStr;

use num_rational::Ratio;
use rayon::prelude::*;
use thiserror::Error;

use crate::graph::{Amount, FeeBands, GraphError, Topology, RATE_SCALE};
use crate::router::{ConfigError, Router, RouterConfig, RouterKind, RoutingOutcome};
use crate::workload::{
    load_trace, mice_threshold, sample_payments, synthetic_trace, Pairing, Payment, SizeClass, SizeModel,
    SplicedSizes, TraceRecord, WorkloadError,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Router(#[from] ConfigError),
    #[error("topology: {0}")]
    Graph(#[from] GraphError),
    #[error("workload: {0}")]
    Workload(#[from] WorkloadError),
    #[error("i/o on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl ExperimentError {
    /// Whether the error stems from the experiment description rather than
    /// the environment.
    pub fn is_config(&self) -> bool {
        !matches!(
            self,
            ExperimentError::Io { .. } | ExperimentError::Graph(GraphError::Io(_)) | ExperimentError::Workload(WorkloadError::Io(_))
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TopologySource {
    WattsStrogatz { nodes: usize, ring_degree: usize, beta: f64 },
    File(PathBuf),
}

impl FromStr for TopologySource {
    type Err = String;
    /// `ws:N,DEG,BETA` or `file:PATH`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(rest) = s.strip_prefix("ws:") {
            let parts: Vec<&str> = rest.split(',').collect();
            let [n, d, b] = parts[..] else {
                return Err(format!("expected ws:N,DEG,BETA, got {s:?}"));
            };
            let bad = |what: &str| format!("bad {what} in {s:?}");
            Ok(TopologySource::WattsStrogatz {
                nodes: n.trim().parse().map_err(|_| bad("node count"))?,
                ring_degree: d.trim().parse().map_err(|_| bad("ring degree"))?,
                beta: b.trim().parse().map_err(|_| bad("beta"))?,
            })
        } else if let Some(path) = s.strip_prefix("file:") {
            Ok(TopologySource::File(PathBuf::from(path)))
        } else {
            Err(format!("unknown topology source {s:?} (expected ws:N,DEG,BETA or file:PATH)"))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum WorkloadSource {
    /// Sampled volumes in atomic units, `units_per_dollar` per dollar.
    Synthetic { sizes: SizeModel, units_per_dollar: u64 },
    Trace(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub enum FeeModel {
    /// Balances only; every fee is zero.
    Free,
    Bands(FeeBands),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub topology: TopologySource,
    /// Funding interval for each channel's total; `None` keeps file balances.
    pub fund: Option<(Amount, Amount)>,
    pub capacity_scale: Ratio<u64>,
    pub txn_count: usize,
    pub routers: Vec<RouterKind>,
    pub config: RouterConfig,
    pub fees: FeeModel,
    pub workload: WorkloadSource,
    pub pairing: Pairing,
    pub repetitions: usize,
    pub seed_base: u64,
    /// Payments in flight at once.
    pub overlap: usize,
}

impl Default for ExperimentSpec {
    /// 50-node Watts-Strogatz testbed, channels funded from [$1000, $1500)
    /// in cents, 10,000 Ripple-like payments between random pairs.
    fn default() -> Self {
        ExperimentSpec {
            topology: TopologySource::WattsStrogatz { nodes: 50, ring_degree: 4, beta: 0.3 },
            fund: Some((100_000, 150_000)),
            capacity_scale: Ratio::from_integer(1),
            txn_count: 10_000,
            routers: RouterKind::ALL.to_vec(),
            config: RouterConfig::default(),
            fees: FeeModel::Free,
            workload: WorkloadSource::Synthetic {
                sizes: SizeModel::Spliced(SplicedSizes::ripple_like()),
                units_per_dollar: 100,
            },
            pairing: Pairing::RandomPairs,
            repetitions: 5,
            seed_base: 1,
            overlap: 1,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let fail = |m: String| Err(ExperimentError::Config(m));
        if self.repetitions == 0 {
            return fail("repetitions must be at least 1".into());
        }
        if self.routers.is_empty() {
            return fail("no router selected".into());
        }
        if self.overlap == 0 {
            return fail("overlap must be at least 1".into());
        }
        if *self.capacity_scale.numer() == 0 {
            return fail("capacity scale must be positive".into());
        }
        if let Some((lo, hi)) = self.fund {
            if lo >= hi {
                return fail(format!("funding interval [{lo}, {hi}) is empty"));
            }
        }
        if let TopologySource::File(_) = self.topology {
        } else if self.fund.is_none() {
            return fail("generated topologies need a funding interval".into());
        }
        self.config.validate()?;
        Ok(())
    }
}

/// Counters for one class of payments (or all of them).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassStats {
    pub attempts: u64,
    pub successes: u64,
    pub success_volume: u128,
    pub total_volume: u128,
    pub probe_messages: u64,
    pub total_messages: u64,
    /// Fees of successful payments, in millionths of a unit.
    pub fee_micros: u128,
    /// Sum over successful payments of fee / volume.
    pub fee_fraction_sum: f64,
    pub settle_ticks: u128,
}

impl ClassStats {
    fn add(&mut self, o: &RoutingOutcome) {
        self.attempts += 1;
        self.total_volume += o.demand as u128;
        self.probe_messages += o.messages.probe_messages();
        self.total_messages += o.messages.total();
        self.settle_ticks += o.settle_ticks() as u128;
        if o.succeeded() {
            self.successes += 1;
            self.success_volume += o.delivered as u128;
            self.fee_micros += o.fee_micros;
            if o.delivered > 0 {
                self.fee_fraction_sum += o.fee_micros as f64 / (o.delivered as f64 * RATE_SCALE as f64);
            }
        }
    }

    pub fn success_ratio(&self) -> f64 {
        ratio(self.successes as f64, self.attempts as f64)
    }

    /// Total fee over total delivered volume.
    pub fn unit_fee(&self) -> f64 {
        ratio(self.fee_micros as f64, self.success_volume as f64 * RATE_SCALE as f64)
    }

    pub fn mean_fee_fraction(&self) -> f64 {
        ratio(self.fee_fraction_sum, self.successes as f64)
    }

    pub fn mean_settle_ticks(&self) -> f64 {
        ratio(self.settle_ticks as f64, self.attempts as f64)
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub all: ClassStats,
    pub elephant: ClassStats,
    pub mice: ClassStats,
    /// Mean settlement ticks divided by SP's mean in the same repetition.
    pub normalized_delay: Option<f64>,
    pub normalized_mice_delay: Option<f64>,
}

impl MetricsReport {
    pub fn from_outcomes(outcomes: &[RoutingOutcome]) -> Self {
        let mut r = MetricsReport::default();
        for o in outcomes {
            r.all.add(o);
            match o.class {
                SizeClass::Elephant => r.elephant.add(o),
                SizeClass::Mice => r.mice.add(o),
            }
        }
        r
    }

    /// Named numeric columns in CSV order.
    pub fn columns(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (prefix, c) in [("", &self.all), ("elephant_", &self.elephant), ("mice_", &self.mice)] {
            out.extend([
                (format!("{prefix}attempts"), c.attempts as f64),
                (format!("{prefix}successes"), c.successes as f64),
                (format!("{prefix}success_ratio"), c.success_ratio()),
                (format!("{prefix}success_volume"), c.success_volume as f64),
                (format!("{prefix}total_volume"), c.total_volume as f64),
                (format!("{prefix}probe_messages"), c.probe_messages as f64),
                (format!("{prefix}total_messages"), c.total_messages as f64),
                (format!("{prefix}unit_fee"), c.unit_fee()),
                (format!("{prefix}mean_fee_fraction"), c.mean_fee_fraction()),
                (format!("{prefix}mean_settle_ticks"), c.mean_settle_ticks()),
            ]);
        }
        out.push(("normalized_delay".into(), self.normalized_delay.unwrap_or(f64::NAN)));
        out.push(("normalized_mice_delay".into(), self.normalized_mice_delay.unwrap_or(f64::NAN)));
        out
    }

    fn csv_fields(&self) -> Vec<String> {
        let mut out = Vec::new();
        for c in [&self.all, &self.elephant, &self.mice] {
            out.extend([
                c.attempts.to_string(),
                c.successes.to_string(),
                fmt_f(c.success_ratio()),
                c.success_volume.to_string(),
                c.total_volume.to_string(),
                c.probe_messages.to_string(),
                c.total_messages.to_string(),
                fmt_f(c.unit_fee()),
                fmt_f(c.mean_fee_fraction()),
                fmt_f(c.mean_settle_ticks()),
            ]);
        }
        out.push(self.normalized_delay.map(fmt_f).unwrap_or_default());
        out.push(self.normalized_mice_delay.map(fmt_f).unwrap_or_default());
        out
    }
}

fn fmt_f(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x:.9}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub router: RouterKind,
    pub rep: usize,
    pub seed: u64,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    /// Ordered by (rep, router in spec order).
    pub rows: Vec<RunRow>,
}

impl ExperimentResult {
    pub fn rows_for(&self, router: RouterKind) -> impl Iterator<Item = &RunRow> + '_ {
        self.rows.iter().filter(move |r| r.router == router)
    }

    /// Mean of a column over repetitions of `router`.
    pub fn mean(&self, router: RouterKind, column: impl Fn(&MetricsReport) -> f64) -> f64 {
        let vals: Vec<f64> = self.rows_for(router).map(|r| column(&r.report)).collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }

    /// Reports summed over repetitions: counters add up, so ratios are
    /// pooled over all payments of `router`.
    pub fn pooled(&self, router: RouterKind) -> MetricsReport {
        let mut out = MetricsReport::default();
        for row in self.rows_for(router) {
            for (acc, c) in [
                (&mut out.all, &row.report.all),
                (&mut out.elephant, &row.report.elephant),
                (&mut out.mice, &row.report.mice),
            ] {
                acc.attempts += c.attempts;
                acc.successes += c.successes;
                acc.success_volume += c.success_volume;
                acc.total_volume += c.total_volume;
                acc.probe_messages += c.probe_messages;
                acc.total_messages += c.total_messages;
                acc.fee_micros += c.fee_micros;
                acc.fee_fraction_sum += c.fee_fraction_sum;
                acc.settle_ticks += c.settle_ticks;
            }
        }
        out
    }
}

/// Topology, payments and mice threshold of one repetition.
#[derive(Clone, Debug)]
pub struct Instance {
    pub topology: Topology,
    pub payments: Vec<Payment>,
    pub threshold: Amount,
}

fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Inputs that do not depend on the seed, loaded once.
struct Loaded {
    file_topology: Option<Topology>,
    trace: Option<Vec<TraceRecord>>,
}

fn load_inputs(spec: &ExperimentSpec) -> Result<Loaded, ExperimentError> {
    let file_topology = match &spec.topology {
        TopologySource::File(p) => Some(Topology::load(p)?),
        TopologySource::WattsStrogatz { .. } => None,
    };
    let trace = match &spec.workload {
        WorkloadSource::Trace(p) => Some(load_trace(p)?),
        WorkloadSource::Synthetic { .. } => None,
    };
    Ok(Loaded { file_topology, trace })
}

fn build_instance(spec: &ExperimentSpec, loaded: &Loaded, seed: u64) -> Result<Instance, ExperimentError> {
    let mut topology = match (&spec.topology, &loaded.file_topology) {
        (TopologySource::WattsStrogatz { nodes, ring_degree, beta }, _) => {
            Topology::watts_strogatz(*nodes, *ring_degree, *beta, sub_seed(seed, 0))?
        }
        (TopologySource::File(_), Some(t)) => t.clone(),
        (TopologySource::File(p), None) => unreachable!("{} loaded up front", p.display()),
    };
    if let Some((lo, hi)) = spec.fund {
        topology.fund_uniform(lo, hi, sub_seed(seed, 1))?;
    }
    if spec.capacity_scale != Ratio::from_integer(1) {
        topology.scale_capacities(spec.capacity_scale)?;
    }
    if let FeeModel::Bands(bands) = &spec.fees {
        topology.assign_fee_rates(bands, sub_seed(seed, 2));
    }
    let records = match (&spec.workload, &loaded.trace) {
        (WorkloadSource::Synthetic { sizes, units_per_dollar }, _) => synthetic_trace(
            spec.txn_count,
            *sizes,
            *units_per_dollar,
            topology.node_count(),
            sub_seed(seed, 3),
        ),
        (WorkloadSource::Trace(_), Some(r)) => r.clone(),
        (WorkloadSource::Trace(p), None) => unreachable!("{} loaded up front", p.display()),
    };
    let payments = sample_payments(&records, spec.txn_count, &topology, spec.pairing, sub_seed(seed, 4))?;
    let volumes: Vec<Amount> = payments.iter().map(|p| p.demand).collect();
    let threshold = if volumes.is_empty() { 0 } else { mice_threshold(&volumes, spec.config.mice_q)? };
    Ok(Instance { topology, payments, threshold })
}

/// Builds the instance for repetition `rep` (seed `seed_base + rep`).
pub fn instance(spec: &ExperimentSpec, rep: usize) -> Result<Instance, ExperimentError> {
    spec.validate()?;
    build_instance(spec, &load_inputs(spec)?, spec.seed_base + rep as u64)
}

/// Routes one repetition with one router.
pub fn route_instance(
    spec: &ExperimentSpec,
    kind: RouterKind,
    inst: &Instance,
    seed: u64,
) -> Result<Vec<RoutingOutcome>, ExperimentError> {
    let config = RouterConfig { seed, ..spec.config.clone() };
    let router = Router::new(kind, config, inst.threshold)?;
    Ok(router.run(inst.topology.clone(), &inst.payments, spec.overlap).0)
}

/// Runs every repetition with every router.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult, ExperimentError> {
    spec.validate()?;
    let loaded = load_inputs(spec)?;
    let instances: Vec<(u64, Instance)> = (0..spec.repetitions)
        .map(|rep| {
            let seed = spec.seed_base + rep as u64;
            build_instance(spec, &loaded, seed).map(|i| (seed, i))
        })
        .collect::<Result<_, _>>()?;
    let cells: Vec<(usize, RouterKind)> =
        (0..spec.repetitions).flat_map(|rep| spec.routers.iter().map(move |&k| (rep, k))).collect();
    let mut rows: Vec<RunRow> = cells
        .par_iter()
        .map(|&(rep, kind)| {
            let (seed, inst) = &instances[rep];
            let outcomes = route_instance(spec, kind, inst, *seed)?;
            Ok(RunRow { router: kind, rep, seed: *seed, report: MetricsReport::from_outcomes(&outcomes) })
        })
        .collect::<Result<_, ExperimentError>>()?;
    for rep in 0..spec.repetitions {
        let sp = rows.iter().find(|r| r.rep == rep && r.router == RouterKind::Sp).map(|r| r.report.clone());
        if let Some(sp) = sp {
            for row in rows.iter_mut().filter(|r| r.rep == rep) {
                let (all, mice) = (sp.all.mean_settle_ticks(), sp.mice.mean_settle_ticks());
                row.report.normalized_delay = (all > 0.0).then(|| row.report.all.mean_settle_ticks() / all);
                row.report.normalized_mice_delay = (mice > 0.0).then(|| row.report.mice.mean_settle_ticks() / mice);
            }
        }
    }
    Ok(ExperimentResult { rows })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    CapacityScale,
    TxnCount,
    ThresholdQ,
    M,
    K,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::CapacityScale => "capacity_scale",
            SweepAxis::TxnCount => "txn_count",
            SweepAxis::ThresholdQ => "threshold_q",
            SweepAxis::M => "m",
            SweepAxis::K => "k",
        }
    }

    /// Copy of `spec` with this axis set to `value`.
    pub fn apply(self, spec: &ExperimentSpec, value: &str) -> Result<ExperimentSpec, ExperimentError> {
        let bad = |e: String| ExperimentError::Config(format!("{} value {value:?}: {e}", self.name()));
        let mut out = spec.clone();
        match self {
            SweepAxis::CapacityScale => out.capacity_scale = crate::graph::parse_scale(value).map_err(bad)?,
            SweepAxis::TxnCount => out.txn_count = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            SweepAxis::ThresholdQ => {
                out.config.mice_q = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?
            }
            SweepAxis::M => out.config.m = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            SweepAxis::K => out.config.k = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
        }
        out.validate()?;
        Ok(out)
    }
}

impl FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "capacity_scale" | "capacity-scale" | "scale" => Ok(SweepAxis::CapacityScale),
            "txn_count" | "txn-count" | "txns" => Ok(SweepAxis::TxnCount),
            "threshold_q" | "threshold-q" | "q" => Ok(SweepAxis::ThresholdQ),
            "m" => Ok(SweepAxis::M),
            "k" => Ok(SweepAxis::K),
            other => Err(format!("unknown sweep axis {other:?} (capacity_scale, txn_count, threshold_q, m, k)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub axis: Option<SweepAxis>,
    /// One experiment per axis value, in the order given.
    pub cells: Vec<(String, ExperimentResult)>,
}

impl SweepResult {
    pub fn single(result: ExperimentResult) -> Self {
        SweepResult { axis: None, cells: vec![(String::new(), result)] }
    }

    pub fn cell(&self, value: &str) -> Option<&ExperimentResult> {
        self.cells.iter().find(|(v, _)| v == value).map(|(_, r)| r)
    }

    /// One row per (axis value, router, rep).
    pub fn runs_csv(&self) -> String {
        let axis = self.axis.map(SweepAxis::name).unwrap_or("none");
        let mut out = String::new();
        let mut header = vec!["axis".to_string(), "value".into(), "router".into(), "rep".into(), "seed".into()];
        header.extend(MetricsReport::default().columns().into_iter().map(|c| c.0));
        out.push_str(&header.join(","));
        out.push('\n');
        for (value, result) in &self.cells {
            let mut rows: Vec<&RunRow> = result.rows.iter().collect();
            rows.sort_by_key(|r| (r.router, r.rep));
            for r in rows {
                let mut fields = vec![axis.to_string(), value.clone(), r.router.to_string(), r.rep.to_string(), r.seed.to_string()];
                fields.extend(r.report.csv_fields());
                out.push_str(&fields.join(","));
                out.push('\n');
            }
        }
        out
    }

    /// Min, mean and max over repetitions for every (value, router, metric).
    pub fn summary_csv(&self) -> String {
        let axis = self.axis.map(SweepAxis::name).unwrap_or("none");
        let mut out = String::from("axis,value,router,metric,min,mean,max\n");
        for (value, result) in &self.cells {
            let mut kinds: Vec<RouterKind> = result.rows.iter().map(|r| r.router).collect();
            kinds.sort();
            kinds.dedup();
            for kind in kinds {
                let cols: Vec<Vec<(String, f64)>> = result.rows_for(kind).map(|r| r.report.columns()).collect();
                for (i, (name, _)) in cols[0].iter().enumerate() {
                    let vals: Vec<f64> = cols.iter().map(|c| c[i].1).filter(|v| !v.is_nan()).collect();
                    if vals.is_empty() {
                        let _ = writeln!(out, "{axis},{value},{kind},{name},,,");
                        continue;
                    }
                    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
                    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    let _ = writeln!(out, "{axis},{value},{kind},{name},{},{},{}", fmt_f(min), fmt_f(mean), fmt_f(max));
                }
            }
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>_summary.csv` into `dir`. Both files
    /// appear only once complete.
    pub fn write(&self, dir: &FsPath, stem: &str) -> Result<(PathBuf, PathBuf), ExperimentError> {
        let io = |path: &FsPath| {
            let path = path.to_path_buf();
            move |source| ExperimentError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let runs = dir.join(format!("{stem}.csv"));
        let summary = dir.join(format!("{stem}_summary.csv"));
        for (path, body) in [(&runs, self.runs_csv()), (&summary, self.summary_csv())] {
            let tmp = path.with_extension("csv.partial");
            fs::write(&tmp, body).map_err(io(&tmp))?;
            fs::rename(&tmp, path).map_err(io(path))?;
        }
        Ok((runs, summary))
    }
}

/// Runs `spec` once per axis value; all cells are computed before anything
/// is returned.
pub fn sweep(spec: &ExperimentSpec, axis: SweepAxis, values: &[String]) -> Result<SweepResult, ExperimentError> {
    if values.is_empty() {
        return Err(ExperimentError::Config("sweep needs at least one value".into()));
    }
    let specs: Vec<ExperimentSpec> = values.iter().map(|v| axis.apply(spec, v)).collect::<Result<_, _>>()?;
    let results: Vec<ExperimentResult> = specs.par_iter().map(run_experiment).collect::<Result<_, _>>()?;
    Ok(SweepResult { axis: Some(axis), cells: values.iter().cloned().zip(results).collect() })
}
