//! Per-payment routing: Flash (elephant and mice pipelines) and the
//! shortest-path and Spider baselines.

mod baseline;
mod flash;
pub mod table;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_traits::ToPrimitive;
use thiserror::Error;

use crate::flowpath::Path;
use crate::graph::{Amount, NodeId, Topology, RATE_SCALE};
use crate::simnet::{run_workload, Handle, MessageCounts, Network};
use crate::workload::{classify, Payment, SizeClass};

pub use baseline::waterfill;
pub use table::{RoutingTable, TableEntry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RouterKind {
    Flash,
    Sp,
    Spider,
}

impl RouterKind {
    pub const ALL: [RouterKind; 3] = [RouterKind::Flash, RouterKind::Sp, RouterKind::Spider];

    pub fn name(self) -> &'static str {
        match self {
            RouterKind::Flash => "flash",
            RouterKind::Sp => "sp",
            RouterKind::Spider => "spider",
        }
    }
}

impl fmt::Display for RouterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RouterKind {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "flash" => Ok(RouterKind::Flash),
            "sp" => Ok(RouterKind::Sp),
            "spider" => Ok(RouterKind::Spider),
            other => Err(ConfigError(format!("unknown router `{other}` (expected flash, sp or spider)"))),
        }
    }
}

/// How an elephant's demand is spread over its probed paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SplitMode {
    /// Fee-minimizing linear program.
    #[default]
    MinFee,
    /// Fill paths in discovery order.
    Sequential,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid router configuration: {0}")]
pub struct ConfigError(pub String);

#[derive(Clone, Debug, PartialEq)]
pub struct RouterConfig {
    /// Elephant path budget.
    pub k: usize,
    /// Mice paths per receiver; 0 routes every payment as an elephant.
    pub m: usize,
    /// Fraction of payments classified as mice.
    pub mice_q: f64,
    /// Payments a routing-table entry may stay idle before eviction.
    pub table_timeout: u64,
    pub seed: u64,
    pub spider_paths: usize,
    pub split: SplitMode,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig {
            k: 20,
            m: 4,
            mice_q: 0.9,
            table_timeout: 2000,
            seed: 0,
            spider_paths: 4,
            split: SplitMode::MinFee,
        }
    }
}

impl RouterConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.k == 0 {
            return Err(ConfigError("k must be at least 1".into()));
        }
        if self.m > self.k {
            return Err(ConfigError(format!("m = {} exceeds k = {}", self.m, self.k)));
        }
        if !(0.0..=1.0).contains(&self.mice_q) {
            return Err(ConfigError(format!("mice fraction {} outside [0, 1]", self.mice_q)));
        }
        if self.spider_paths == 0 {
            return Err(ConfigError("spider needs at least one path".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FailureReason {
    NoPath,
    InsufficientFlow,
    SplitInfeasible,
    CommitAborted,
    PathsExhausted,
    InsufficientCapacity,
}

impl FailureReason {
    pub fn name(self) -> &'static str {
        match self {
            FailureReason::NoPath => "no-path",
            FailureReason::InsufficientFlow => "insufficient-flow",
            FailureReason::SplitInfeasible => "split-infeasible",
            FailureReason::CommitAborted => "commit-aborted",
            FailureReason::PathsExhausted => "paths-exhausted",
            FailureReason::InsufficientCapacity => "insufficient-capacity",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Success,
    Failure(FailureReason),
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Status::Success => f.write_str("success"),
            Status::Failure(r) => f.write_str(r.name()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutingOutcome {
    pub payment_id: u64,
    pub class: SizeClass,
    pub demand: Amount,
    pub status: Status,
    pub delivered: Amount,
    /// Probe round trips started.
    pub probes: u64,
    pub paths_used: usize,
    /// Fee paid in millionths of a unit.
    pub fee_micros: u128,
    pub start_tick: u64,
    pub end_tick: u64,
    /// Confirmed sub-payments.
    pub legs: Vec<(Path, Amount)>,
    pub messages: MessageCounts,
}

impl RoutingOutcome {
    fn start(p: &Payment, class: SizeClass, now: u64) -> Self {
        RoutingOutcome {
            payment_id: p.id,
            class,
            demand: p.demand,
            status: Status::Failure(FailureReason::NoPath),
            delivered: 0,
            probes: 0,
            paths_used: 0,
            fee_micros: 0,
            start_tick: now,
            end_tick: now,
            legs: Vec::new(),
            messages: MessageCounts::default(),
        }
    }

    pub fn succeeded(&self) -> bool {
        self.status == Status::Success
    }

    pub fn settle_ticks(&self) -> u64 {
        self.end_tick - self.start_tick
    }
}

/// Exact fee of `legs` under the fee schedules in `view`, in millionths.
pub fn legs_fee_micros(view: &Topology, legs: &[(Path, Amount)]) -> u128 {
    let mut total = 0u128;
    for (path, amount) in legs {
        for (u, v) in path.edges() {
            let fee = view.fee(u, v).unwrap_or_default().fee(*amount) * RATE_SCALE as u128;
            total += fee.to_integer().to_u128().unwrap_or(0);
        }
    }
    total
}

/// A configured router. Mice routing tables live here, one per sender.
pub struct Router {
    kind: RouterKind,
    config: RouterConfig,
    threshold: Amount,
    tables: RefCell<BTreeMap<NodeId, RoutingTable>>,
}

impl Router {
    /// `threshold` is the largest demand routed as mice.
    pub fn new(kind: RouterKind, config: RouterConfig, threshold: Amount) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Router { kind, config, threshold, tables: RefCell::new(BTreeMap::new()) })
    }

    pub fn kind(&self) -> RouterKind {
        self.kind
    }

    pub fn config(&self) -> &RouterConfig {
        &self.config
    }

    pub fn threshold(&self) -> Amount {
        self.threshold
    }

    pub fn table(&self, owner: NodeId) -> Option<RoutingTable> {
        self.tables.borrow().get(&owner).cloned()
    }

    pub fn classify(&self, payment: &Payment) -> SizeClass {
        classify(payment, self.threshold)
    }

    /// Routes one payment to completion. Every hold it placed is terminal
    /// when this resolves.
    pub async fn route(&self, net: Handle, payment: Payment) -> RoutingOutcome {
        let class = self.classify(&payment);
        let mut out = RoutingOutcome::start(&payment, class, net.now());
        let result = match self.kind {
            RouterKind::Flash => self.route_flash(&net, &payment, class, &mut out).await,
            RouterKind::Sp => baseline::route_sp(&net, &payment, &mut out).await,
            RouterKind::Spider => baseline::route_spider(&net, &payment, self.config.spider_paths, &mut out).await,
        };
        match result {
            Ok(legs) => {
                out.status = Status::Success;
                out.delivered = payment.demand;
                out.paths_used = legs.len();
                out.fee_micros = net.with(|n| legs_fee_micros(n.view(), &legs));
                out.legs = legs;
            }
            Err(reason) => out.status = Status::Failure(reason),
        }
        out.end_tick = net.now();
        out
    }

    async fn route_flash(
        &self,
        net: &Handle,
        payment: &Payment,
        class: SizeClass,
        out: &mut RoutingOutcome,
    ) -> Result<Vec<(Path, Amount)>, FailureReason> {
        if class == SizeClass::Mice && self.config.m > 0 {
            self.route_mice(net, payment, out).await
        } else {
            self.route_elephant(net, payment, out).await
        }
    }

    /// Routes `payments` through a fresh network over `topology` with at
    /// most `overlap` payments in flight.
    pub fn run(&self, topology: Topology, payments: &[Payment], overlap: usize) -> (Vec<RoutingOutcome>, Network) {
        self.run_on(Network::new(topology), payments, overlap)
    }

    pub fn run_on(&self, net: Network, payments: &[Payment], overlap: usize) -> (Vec<RoutingOutcome>, Network) {
        let (settled, net) = run_workload(net, payments, overlap, |h, p| self.route(h, p));
        let outcomes = settled
            .into_iter()
            .map(|s| RoutingOutcome { messages: s.counts, ..s.outcome })
            .collect();
        (outcomes, net)
    }
}
