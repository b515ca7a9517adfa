//! Payment traces, workload sampling and trace statistics.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path as FsPath;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Pareto};
use statrs::distribution::{ContinuousCDF, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Amount, NodeId, Topology};

/// Seconds in one recurrence window.
pub const DAY_SECS: u64 = 24 * 60 * 60;

/// Resampling budget per payment before giving up on finding a routable pair.
pub const MAX_PAIR_ATTEMPTS: usize = 1_000;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("empty input")]
    EmptyInput,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("no routable sender/receiver pair after {0} attempts")]
    UnreachablePairs(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub sender: String,
    pub receiver: String,
    pub volume: Amount,
    pub timestamp: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Payment {
    pub id: u64,
    pub sender: NodeId,
    pub receiver: NodeId,
    pub demand: Amount,
    pub seq: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SizeClass {
    Elephant,
    Mice,
}

/// Mice iff `demand <= threshold`.
pub fn classify(payment: &Payment, threshold: Amount) -> SizeClass {
    if payment.demand <= threshold {
        SizeClass::Mice
    } else {
        SizeClass::Elephant
    }
}

/// Reads a `sender,receiver,volume,timestamp` CSV trace. The header line is
/// required; rows with zero volume or identical endpoints are rejected.
pub fn load_trace(path: &FsPath) -> Result<Vec<TraceRecord>, WorkloadError> {
    let file = std::fs::File::open(path)?;
    read_trace(file)
}

pub fn read_trace<R: Read>(reader: R) -> Result<Vec<TraceRecord>, WorkloadError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| WorkloadError::Parse { line: 1, msg: e.to_string() })?
        .clone();
    let expected = ["sender", "receiver", "volume", "timestamp"];
    if headers.iter().map(str::trim).ne(expected.iter().copied()) {
        return Err(WorkloadError::Parse {
            line: 1,
            msg: format!("expected header {}", expected.join(",")),
        });
    }
    let mut out = Vec::new();
    for row in rdr.deserialize::<TraceRecord>() {
        let record = row.map_err(|e| WorkloadError::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = out.len() as u64 + 2;
        if record.volume == 0 {
            return Err(WorkloadError::Parse { line, msg: "volume must be positive".into() });
        }
        if record.sender == record.receiver {
            return Err(WorkloadError::Parse { line, msg: "sender equals receiver".into() });
        }
        out.push(record);
    }
    Ok(out)
}

pub fn write_trace<W: std::io::Write>(records: &[TraceRecord], writer: W) -> Result<(), WorkloadError> {
    let mut wtr = csv::Writer::from_writer(writer);
    for r in records {
        wtr.serialize(r).map_err(|e| WorkloadError::Io(e.into()))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Nearest-rank percentile: the smallest value `v` such that at least
/// `ceil(q * N)` volumes are `<= v`.
pub fn percentile_threshold(volumes: &[Amount], q: f64) -> Result<Amount, WorkloadError> {
    if volumes.is_empty() {
        return Err(WorkloadError::EmptyInput);
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(WorkloadError::InvalidParameter(format!("quantile {q} outside (0, 1)")));
    }
    let mut sorted = volumes.to_vec();
    sorted.sort_unstable();
    let rank = nearest_rank(q, sorted.len());
    Ok(sorted[rank - 1])
}

fn nearest_rank(q: f64, n: usize) -> usize {
    let x = q * n as f64;
    // q = 0.9 over 10 items must give rank 9, not 10
    let rank = if (x - x.round()).abs() < 1e-9 { x.round() } else { x.ceil() };
    (rank as usize).clamp(1, n)
}

/// Elephant/mice threshold for a target mice fraction. `q <= 0` classifies
/// every payment as an elephant, `q >= 1` every payment as mice.
pub fn mice_threshold(volumes: &[Amount], q: f64) -> Result<Amount, WorkloadError> {
    if volumes.is_empty() {
        return Err(WorkloadError::EmptyInput);
    }
    if q <= 0.0 {
        Ok(0)
    } else if q >= 1.0 {
        Ok(*volumes.iter().max().expect("nonempty"))
    } else {
        percentile_threshold(volumes, q)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pairing {
    /// Trace identities are mapped onto topology nodes, keeping recurrence.
    TracePairsMapped,
    /// Endpoints drawn uniformly among connected pairs.
    RandomPairs,
}

impl std::str::FromStr for Pairing {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "trace-pairs-mapped" | "trace" => Ok(Pairing::TracePairsMapped),
            "random-pairs" | "random" => Ok(Pairing::RandomPairs),
            other => Err(format!("unknown pairing {other:?}")),
        }
    }
}

/// Draws `n` payments from `records`. Volumes are sampled with replacement.
pub fn sample_payments(
    records: &[TraceRecord],
    n: usize,
    topology: &Topology,
    pairing: Pairing,
    seed: u64,
) -> Result<Vec<Payment>, WorkloadError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if records.is_empty() {
        return Err(WorkloadError::EmptyInput);
    }
    let nodes: Vec<NodeId> = topology.nodes().collect();
    if nodes.len() < 2 {
        return Err(WorkloadError::InvalidParameter("topology needs at least two nodes".into()));
    }
    let component = components(topology);
    let connected = |a: NodeId, b: NodeId| a != b && component[&a] == component[&b];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut mapping: HashMap<&str, NodeId> = HashMap::new();
    if pairing == Pairing::TracePairsMapped {
        let mut shuffled = nodes.clone();
        shuffled.shuffle(&mut rng);
        for r in records {
            for id in [r.sender.as_str(), r.receiver.as_str()] {
                let next = mapping.len();
                mapping.entry(id).or_insert(shuffled[next % shuffled.len()]);
            }
        }
    }

    let mut payments = Vec::with_capacity(n);
    for seq in 0..n as u64 {
        let mut chosen = None;
        for _ in 0..MAX_PAIR_ATTEMPTS {
            let record = &records[rng.gen_range(0..records.len())];
            let (s, t) = match pairing {
                Pairing::TracePairsMapped => {
                    (mapping[record.sender.as_str()], mapping[record.receiver.as_str()])
                }
                Pairing::RandomPairs => {
                    let s = nodes[rng.gen_range(0..nodes.len())];
                    let t = nodes[rng.gen_range(0..nodes.len())];
                    (s, t)
                }
            };
            if connected(s, t) {
                chosen = Some((s, t, record.volume));
                break;
            }
        }
        let (sender, receiver, demand) =
            chosen.ok_or(WorkloadError::UnreachablePairs(MAX_PAIR_ATTEMPTS))?;
        payments.push(Payment { id: seq, sender, receiver, demand, seq });
    }
    Ok(payments)
}

fn components(topology: &Topology) -> HashMap<NodeId, usize> {
    let mut label = HashMap::new();
    let mut next = 0;
    for start in topology.nodes() {
        if label.contains_key(&start) {
            continue;
        }
        let mut stack = vec![start];
        label.insert(start, next);
        while let Some(u) = stack.pop() {
            for &v in topology.neighbors(u) {
                if let std::collections::hash_map::Entry::Vacant(e) = label.entry(v) {
                    e.insert(next);
                    stack.push(v);
                }
            }
        }
        next += 1;
    }
    label
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CdfPoint {
    pub volume: Amount,
    pub payment_fraction: f64,
    pub volume_fraction: f64,
}

/// Empirical CDF over payment count and over cumulative volume, sorted by
/// ascending volume, one point per record.
pub fn size_cdf(records: &[TraceRecord]) -> Result<Vec<CdfPoint>, WorkloadError> {
    if records.is_empty() {
        return Err(WorkloadError::EmptyInput);
    }
    let mut volumes: Vec<Amount> = records.iter().map(|r| r.volume).collect();
    volumes.sort_unstable();
    let total: u128 = volumes.iter().map(|&v| v as u128).sum();
    let n = volumes.len();
    let mut acc: u128 = 0;
    Ok(volumes
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            acc += v as u128;
            CdfPoint {
                volume: v,
                payment_fraction: if i + 1 == n { 1.0 } else { (i + 1) as f64 / n as f64 },
                volume_fraction: if i + 1 == n { 1.0 } else { acc as f64 / total as f64 },
            }
        })
        .collect())
}

/// Share of total volume carried by the largest `ceil(fraction * N)` payments.
pub fn top_share(volumes: &[Amount], fraction: f64) -> Result<f64, WorkloadError> {
    if volumes.is_empty() {
        return Err(WorkloadError::EmptyInput);
    }
    let mut sorted = volumes.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let count = nearest_rank(fraction, sorted.len());
    let top: u128 = sorted[..count].iter().map(|&v| v as u128).sum();
    let total: u128 = sorted.iter().map(|&v| v as u128).sum();
    Ok(top as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowStats {
    pub window_start: u64,
    pub transactions: usize,
    pub recurring_fraction: f64,
    /// Mean over senders with recurring transactions of the share of those
    /// transactions that go to the sender's five most frequent receivers.
    pub top5_share: Option<f64>,
}

/// Per-window recurrence statistics over fixed calendar-aligned windows.
/// A transaction is recurring when its pair already appeared earlier in the
/// same window. Pairs are ordered unless `unordered` is set.
pub fn recurrence_stats(records: &[TraceRecord], window: u64, unordered: bool) -> Vec<WindowStats> {
    let window = window.max(1);
    let mut sorted: Vec<&TraceRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.timestamp);

    let mut buckets: BTreeMap<u64, Vec<&TraceRecord>> = BTreeMap::new();
    for r in sorted {
        buckets.entry(r.timestamp / window).or_default().push(r);
    }

    buckets
        .into_iter()
        .map(|(bucket, txs)| {
            let mut seen: HashMap<(&str, &str), usize> = HashMap::new();
            let mut recurring = 0usize;
            let mut per_sender: BTreeMap<&str, HashMap<&str, usize>> = BTreeMap::new();
            for r in &txs {
                let (a, b) = (r.sender.as_str(), r.receiver.as_str());
                let key = if unordered && b < a { (b, a) } else { (a, b) };
                let count = seen.entry(key).or_insert(0);
                if *count > 0 {
                    recurring += 1;
                    *per_sender.entry(a).or_default().entry(b).or_insert(0) += 1;
                }
                *count += 1;
            }
            let shares: Vec<f64> = per_sender
                .values()
                .map(|recv| {
                    let mut counts: Vec<usize> = recv.values().copied().collect();
                    counts.sort_unstable_by(|x, y| y.cmp(x));
                    let total: usize = counts.iter().sum();
                    counts.iter().take(5).sum::<usize>() as f64 / total as f64
                })
                .collect();
            WindowStats {
                window_start: bucket * window,
                transactions: txs.len(),
                recurring_fraction: recurring as f64 / txs.len() as f64,
                top5_share: if shares.is_empty() {
                    None
                } else {
                    Some(shares.iter().sum::<f64>() / shares.len() as f64)
                },
            }
        })
        .collect()
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

/// Pareto payment-size model fitted to a median and a top-decile volume share.
///
/// For a Pareto law with shape `a > 1` the largest fraction `p` of samples
/// carries `p^(1 - 1/a)` of the total volume, which fixes `a`; the median
/// `scale * 2^(1/a)` then fixes the scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParetoSizes {
    pub shape: f64,
    pub scale: f64,
}

impl ParetoSizes {
    pub fn fit(median: f64, top_decile_share: f64) -> Result<Self, WorkloadError> {
        if !(median > 0.0) || !(top_decile_share > 0.1 && top_decile_share < 1.0) {
            return Err(WorkloadError::InvalidParameter(format!(
                "cannot fit Pareto to median {median}, top-decile share {top_decile_share}"
            )));
        }
        let exponent = top_decile_share.ln() / 0.1f64.ln();
        let shape = 1.0 / (1.0 - exponent);
        let scale = median / 2f64.powf(1.0 / shape);
        Ok(ParetoSizes { shape, scale })
    }

    /// Median $4.8 with 94.5% of the volume in the top 10% of payments.
    pub fn ripple_like() -> Self {
        Self::fit(4.8, 0.945).expect("valid anchors")
    }

    pub fn median(&self) -> f64 {
        self.scale * 2f64.powf(1.0 / self.shape)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        Pareto::new(self.scale, self.shape)
            .expect("positive parameters")
            .sample(rng)
    }
}

/// Log-normal body with a Pareto tail above the 90th percentile, fitted to
/// a median, a 90th percentile and the top decile's share of the volume.
///
/// The body is the log-normal through the median and the 90th percentile,
/// restricted to values at or below the latter. The tail shape makes the
/// tail mean `0.1 T` carry `share / (1 - share)` times the body's volume.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplicedSizes {
    pub mu: f64,
    pub sigma: f64,
    pub p90: f64,
    pub tail_shape: f64,
}

impl SplicedSizes {
    pub fn fit(median: f64, p90: f64, top_decile_share: f64) -> Result<Self, WorkloadError> {
        let invalid = || {
            WorkloadError::InvalidParameter(format!(
                "cannot fit median {median}, p90 {p90}, top-decile share {top_decile_share}"
            ))
        };
        if !(median > 0.0 && p90 > median && top_decile_share > 0.1 && top_decile_share < 1.0) {
            return Err(invalid());
        }
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        let z90 = std_normal.inverse_cdf(0.9);
        let mu = median.ln();
        let sigma = (p90 / median).ln() / z90;
        // E[X; X <= p90] for the log-normal
        let body = (mu + sigma * sigma / 2.0).exp() * std_normal.cdf(z90 - sigma);
        let tail_mean = top_decile_share / (1.0 - top_decile_share) * body / 0.1;
        if !(tail_mean > p90) {
            return Err(invalid());
        }
        let tail_shape = tail_mean / (tail_mean - p90);
        Ok(SplicedSizes { mu, sigma, p90, tail_shape })
    }

    /// Median $4.8, 90th percentile $1,740 and 94.5% of the volume in the
    /// top 10% of payments.
    pub fn ripple_like() -> Self {
        Self::fit(4.8, 1740.0, 0.945).expect("valid anchors")
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if rng.gen_bool(0.9) {
            let body = LogNormal::new(self.mu, self.sigma).expect("positive sigma");
            loop {
                let x = body.sample(rng);
                if x <= self.p90 {
                    return x;
                }
            }
        }
        Pareto::new(self.p90, self.tail_shape).expect("positive parameters").sample(rng)
    }
}

/// Payment-size law of the synthetic workload, in dollars.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SizeModel {
    Pareto(ParetoSizes),
    Spliced(SplicedSizes),
}

impl SizeModel {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            SizeModel::Pareto(p) => p.sample(rng),
            SizeModel::Spliced(s) => s.sample(rng),
        }
    }
}

impl From<ParetoSizes> for SizeModel {
    fn from(p: ParetoSizes) -> Self {
        SizeModel::Pareto(p)
    }
}

impl From<SplicedSizes> for SizeModel {
    fn from(s: SplicedSizes) -> Self {
        SizeModel::Spliced(s)
    }
}

/// Synthetic trace with volumes in atomic units (`units_per_dollar` atomic
/// units per dollar). Senders and receivers are drawn from a pool of
/// `users` identities named `synthetic-<i>`, one transaction per minute.
pub fn synthetic_trace(
    count: usize,
    sizes: impl Into<SizeModel>,
    units_per_dollar: u64,
    users: usize,
    seed: u64,
) -> Vec<TraceRecord> {
    let sizes = sizes.into();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users = users.max(2);
    (0..count)
        .map(|i| {
            let dollars = sizes.sample(&mut rng);
            let volume = (dollars * units_per_dollar as f64).round().clamp(1.0, u64::MAX as f64) as u64;
            let s = rng.gen_range(0..users);
            let mut t = rng.gen_range(0..users - 1);
            if t >= s {
                t += 1;
            }
            TraceRecord {
                sender: format!("synthetic-{s}"),
                receiver: format!("synthetic-{t}"),
                volume,
                timestamp: i as u64 * 60,
            }
        })
        .collect()
}

/// Headline statistics of a trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceSummary {
    pub records: usize,
    pub median_volume: f64,
    pub p90_threshold: Amount,
    pub top_decile_volume_share: f64,
    pub windows: usize,
    pub median_recurring_fraction: Option<f64>,
    pub median_top5_share: Option<f64>,
}

pub fn summarize(records: &[TraceRecord], unordered: bool) -> Result<TraceSummary, WorkloadError> {
    if records.is_empty() {
        return Err(WorkloadError::EmptyInput);
    }
    let volumes: Vec<Amount> = records.iter().map(|r| r.volume).collect();
    let mut as_f: Vec<f64> = volumes.iter().map(|&v| v as f64).collect();
    let windows = recurrence_stats(records, DAY_SECS, unordered);
    let mut rec: Vec<f64> = windows.iter().map(|w| w.recurring_fraction).collect();
    let mut top5: Vec<f64> = windows.iter().filter_map(|w| w.top5_share).collect();
    Ok(TraceSummary {
        records: records.len(),
        median_volume: median(&mut as_f).expect("nonempty"),
        p90_threshold: percentile_threshold(&volumes, 0.9)?,
        top_decile_volume_share: top_share(&volumes, 0.1)?,
        windows: windows.len(),
        median_recurring_fraction: median(&mut rec),
        median_top5_share: median(&mut top5),
    })
}
