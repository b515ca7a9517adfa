//! Directed payment-channel topology.
//!
//! Every open channel contributes two directions, `(u, v)` and `(v, u)`, each
//! with its own balance and fee schedule. Balances are integer atomic units and
//! only move through [`Topology::debit`], [`Topology::credit`] and
//! [`Topology::apply_payment_delta`], so the sum over both directions of a
//! channel is preserved by every payment operation.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::fs;
use std::path::Path as FsPath;
use std::str::FromStr;

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Currency amount in integer atomic units.
pub type Amount = u64;

/// Denominator of [`FeeSchedule::rate_ppm`].
pub const RATE_SCALE: u64 = 1_000_000;

/// Maximum number of reseeded attempts when Watts-Strogatz rewiring
/// disconnects the graph.
pub const MAX_GENERATOR_ATTEMPTS: u64 = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for NodeId {
    fn from(v: u32) -> Self {
        NodeId(v)
    }
}

/// Per-direction relay fee: a flat `base` charged whenever the direction
/// carries a non-zero amount, plus `rate_ppm` parts-per-million of the amount.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct FeeSchedule {
    pub base: Amount,
    pub rate_ppm: u64,
}

impl FeeSchedule {
    pub fn new(base: Amount, rate_ppm: u64) -> Result<Self, GraphError> {
        if rate_ppm >= RATE_SCALE {
            return Err(GraphError::InvalidParameter(format!(
                "fee rate {rate_ppm} ppm must be below {RATE_SCALE}"
            )));
        }
        Ok(FeeSchedule { base, rate_ppm })
    }

    pub fn proportional(rate_ppm: u64) -> Self {
        FeeSchedule { base: 0, rate_ppm }
    }

    /// Exact fee for relaying `amount`.
    pub fn fee(&self, amount: Amount) -> Ratio<u128> {
        if amount == 0 {
            return Ratio::from_integer(0);
        }
        Ratio::new(
            self.base as u128 * RATE_SCALE as u128 + self.rate_ppm as u128 * amount as u128,
            RATE_SCALE as u128,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct ChannelDirState {
    pub balance: Amount,
    pub fee: FeeSchedule,
}

impl ChannelDirState {
    pub fn new(balance: Amount, fee: FeeSchedule) -> Self {
        ChannelDirState { balance, fee }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("graph stayed disconnected after {0} generator attempts")]
    Disconnected(u64),
    #[error("insufficient balance on {u}->{v}: balance {balance} < amount {amount}")]
    InsufficientBalance {
        u: NodeId,
        v: NodeId,
        balance: Amount,
        amount: Amount,
    },
    #[error("no channel {0}->{1}")]
    UnknownChannel(NodeId, NodeId),
    #[error("duplicate channel {0}-{1}")]
    DuplicateChannel(NodeId, NodeId),
    #[error("self-loop channel on node {0}")]
    SelfLoop(NodeId),
    #[error("balance overflow on {0}->{1}")]
    Overflow(NodeId, NodeId),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(String),
}

/// Directed channel graph with a balance ledger.
///
/// Channels are always inserted in pairs, so `(u, v)` is present iff `(v, u)`
/// is. Neighbor lists are kept sorted, which makes every traversal in this
/// crate deterministic.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Topology {
    adjacency: BTreeMap<NodeId, Vec<NodeId>>,
    channels: BTreeMap<(NodeId, NodeId), ChannelDirState>,
}

impl Topology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, id: NodeId) {
        self.adjacency.entry(id).or_default();
    }

    pub fn add_channel(
        &mut self,
        u: NodeId,
        v: NodeId,
        forward: ChannelDirState,
        reverse: ChannelDirState,
    ) -> Result<(), GraphError> {
        if u == v {
            return Err(GraphError::SelfLoop(u));
        }
        if self.channels.contains_key(&(u, v)) {
            return Err(GraphError::DuplicateChannel(u, v));
        }
        self.channels.insert((u, v), forward);
        self.channels.insert((v, u), reverse);
        for (a, b) in [(u, v), (v, u)] {
            let list = self.adjacency.entry(a).or_default();
            let pos = list.binary_search(&b).unwrap_or_else(|p| p);
            list.insert(pos, b);
        }
        Ok(())
    }

    /// Adds a channel with the given balances and zero fees.
    pub fn connect(&mut self, u: NodeId, v: NodeId, forward: Amount, reverse: Amount) -> Result<(), GraphError> {
        let fee = FeeSchedule::default();
        self.add_channel(u, v, ChannelDirState::new(forward, fee), ChannelDirState::new(reverse, fee))
    }

    /// Removes both directions of the channel between `u` and `v`.
    pub fn remove_channel(&mut self, u: NodeId, v: NodeId) -> Result<(), GraphError> {
        if self.channels.remove(&(u, v)).is_none() {
            return Err(GraphError::UnknownChannel(u, v));
        }
        self.channels.remove(&(v, u));
        for (a, b) in [(u, v), (v, u)] {
            if let Some(list) = self.adjacency.get_mut(&a) {
                list.retain(|x| *x != b);
            }
        }
        Ok(())
    }

    pub fn remove_node(&mut self, id: NodeId) {
        let neighbors = self.adjacency.get(&id).cloned().unwrap_or_default();
        for v in neighbors {
            let _ = self.remove_channel(id, v);
        }
        self.adjacency.remove(&id);
    }

    pub fn contains_node(&self, id: NodeId) -> bool {
        self.adjacency.contains_key(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.adjacency.keys().copied()
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    /// Number of undirected channels.
    pub fn channel_count(&self) -> usize {
        self.channels.len() / 2
    }

    /// Number of channel directions (twice the channel count).
    pub fn direction_count(&self) -> usize {
        self.channels.len()
    }

    /// Out-neighbors of `u` in ascending id order.
    pub fn neighbors(&self, u: NodeId) -> &[NodeId] {
        self.adjacency.get(&u).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn has_edge(&self, u: NodeId, v: NodeId) -> bool {
        self.channels.contains_key(&(u, v))
    }

    pub fn direction(&self, u: NodeId, v: NodeId) -> Option<&ChannelDirState> {
        self.channels.get(&(u, v))
    }

    pub fn direction_mut(&mut self, u: NodeId, v: NodeId) -> Option<&mut ChannelDirState> {
        self.channels.get_mut(&(u, v))
    }

    pub fn balance(&self, u: NodeId, v: NodeId) -> Option<Amount> {
        self.channels.get(&(u, v)).map(|c| c.balance)
    }

    pub fn fee(&self, u: NodeId, v: NodeId) -> Option<FeeSchedule> {
        self.channels.get(&(u, v)).map(|c| c.fee)
    }

    /// Sum of both direction balances of the channel between `u` and `v`.
    pub fn channel_total(&self, u: NodeId, v: NodeId) -> Option<Amount> {
        Some(self.balance(u, v)? + self.balance(v, u)?)
    }

    /// Every channel direction with its state, in `(u, v)` order.
    pub fn directions(&self) -> impl Iterator<Item = ((NodeId, NodeId), &ChannelDirState)> + '_ {
        self.channels.iter().map(|(k, v)| (*k, v))
    }

    /// Undirected channels as `(u, v)` with `u < v`.
    pub fn channels(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.channels
            .keys()
            .filter(|(u, v)| u < v)
            .copied()
    }

    pub fn debit(&mut self, u: NodeId, v: NodeId, amount: Amount) -> Result<(), GraphError> {
        let dir = self
            .channels
            .get_mut(&(u, v))
            .ok_or(GraphError::UnknownChannel(u, v))?;
        if dir.balance < amount {
            return Err(GraphError::InsufficientBalance {
                u,
                v,
                balance: dir.balance,
                amount,
            });
        }
        dir.balance -= amount;
        Ok(())
    }

    pub fn credit(&mut self, u: NodeId, v: NodeId, amount: Amount) -> Result<(), GraphError> {
        let dir = self
            .channels
            .get_mut(&(u, v))
            .ok_or(GraphError::UnknownChannel(u, v))?;
        dir.balance = dir
            .balance
            .checked_add(amount)
            .ok_or(GraphError::Overflow(u, v))?;
        Ok(())
    }

    /// Moves `amount` from direction `u -> v` to direction `v -> u`.
    pub fn apply_payment_delta(
        &mut self,
        u: NodeId,
        v: NodeId,
        amount: Amount,
    ) -> Result<(), GraphError> {
        if !self.has_edge(v, u) {
            return Err(GraphError::UnknownChannel(v, u));
        }
        self.debit(u, v, amount)?;
        self.credit(v, u, amount)
    }

    /// Same connectivity and fees with every balance zeroed: what a node
    /// knows about the network without probing.
    pub fn without_balances(&self) -> Topology {
        let mut view = self.clone();
        for dir in view.channels.values_mut() {
            dir.balance = 0;
        }
        view
    }

    /// Returns true if a directed path from `s` to `t` exists.
    pub fn has_path(&self, s: NodeId, t: NodeId) -> bool {
        if !self.contains_node(s) || !self.contains_node(t) {
            return false;
        }
        let mut seen = BTreeSet::from([s]);
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            if u == t {
                return true;
            }
            for &v in self.neighbors(u) {
                if seen.insert(v) {
                    queue.push_back(v);
                }
            }
        }
        false
    }

    pub fn is_connected(&self) -> bool {
        let Some(first) = self.nodes().next() else {
            return true;
        };
        let mut seen = BTreeSet::from([first]);
        let mut queue = VecDeque::from([first]);
        while let Some(u) = queue.pop_front() {
            for &v in self.neighbors(u) {
                if seen.insert(v) {
                    queue.push_back(v);
                }
            }
        }
        seen.len() == self.node_count()
    }

    /// Draws each channel's total capacity and splits it evenly between its
    /// two directions.
    ///
    /// Each direction receives the same integer half `h`, drawn uniformly from
    /// `[ceil(low/2), ceil(high/2))`, so that the total `2h` lies in
    /// `[low, high)`. When that half-range is empty (a width-one interval with
    /// odd `low`) the total is drawn directly and the odd unit goes to the
    /// `u -> v` direction with `u < v`.
    pub fn fund_uniform(&mut self, low: Amount, high: Amount, seed: u64) -> Result<(), GraphError> {
        if low >= high {
            return Err(GraphError::InvalidParameter(format!(
                "funding interval [{low}, {high}) is empty"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half_lo = low.div_ceil(2);
        let half_hi = high.div_ceil(2);
        let keys: Vec<(NodeId, NodeId)> = self.channels().collect();
        for (u, v) in keys {
            let (fwd, rev) = if half_lo < half_hi {
                let h = rng.gen_range(half_lo..half_hi);
                (h, h)
            } else {
                let total = rng.gen_range(low..high);
                (total - total / 2, total / 2)
            };
            self.channels.get_mut(&(u, v)).expect("channel").balance = fwd;
            self.channels.get_mut(&(v, u)).expect("channel").balance = rev;
        }
        Ok(())
    }

    /// Multiplies every balance by `factor`, rounding down.
    pub fn scale_capacities(&mut self, factor: Ratio<u64>) -> Result<(), GraphError> {
        if *factor.numer() == 0 {
            return Err(GraphError::InvalidParameter("scale factor must be positive".into()));
        }
        for dir in self.channels.values_mut() {
            let scaled = dir.balance as u128 * *factor.numer() as u128 / *factor.denom() as u128;
            dir.balance = u64::try_from(scaled).map_err(|_| {
                GraphError::InvalidParameter(format!("scaled balance {scaled} overflows"))
            })?;
        }
        Ok(())
    }

    /// Assigns every direction the same fee schedule.
    pub fn set_uniform_fees(&mut self, fee: FeeSchedule) {
        for dir in self.channels.values_mut() {
            dir.fee = fee;
        }
    }

    /// Draws per-direction proportional fee rates from a two-band mixture.
    pub fn assign_fee_rates(&mut self, bands: &FeeBands, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for dir in self.channels.values_mut() {
            let (lo, hi) = if rng.gen_bool(bands.low_band_share) {
                bands.low_band
            } else {
                bands.high_band
            };
            dir.fee = FeeSchedule::proportional(rng.gen_range(lo..hi));
        }
    }

    /// Removes zero-fund channels, then nodes left with at most one neighbor.
    /// With `iterative` the two steps repeat until nothing changes.
    pub fn prune(&mut self, iterative: bool) {
        loop {
            let dead: Vec<(NodeId, NodeId)> = self
                .channels()
                .filter(|&(u, v)| self.channel_total(u, v) == Some(0))
                .collect();
            for (u, v) in &dead {
                let _ = self.remove_channel(*u, *v);
            }
            let leaves: Vec<NodeId> = self
                .adjacency
                .iter()
                .filter(|(_, n)| n.len() <= 1)
                .map(|(id, _)| *id)
                .collect();
            for id in &leaves {
                self.remove_node(*id);
            }
            if !iterative || (dead.is_empty() && leaves.is_empty()) {
                break;
            }
        }
    }

    /// Parses the line-oriented topology format:
    /// `u v balance_uv balance_vu rate_uv rate_vu base_uv base_vu`, with `#`
    /// comments. Rates are decimal fractions with at most six fractional
    /// digits.
    pub fn parse(text: &str) -> Result<Topology, GraphError> {
        let mut topo = Topology::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 8 {
                return Err(GraphError::Parse {
                    line: line_no,
                    msg: format!("expected 8 fields, found {}", fields.len()),
                });
            }
            let perr = |msg: String| GraphError::Parse { line: line_no, msg };
            let int = |s: &str| -> Result<u64, GraphError> {
                s.parse::<u64>().map_err(|e| perr(format!("bad integer {s:?}: {e}")))
            };
            let rate = |s: &str| -> Result<u64, GraphError> {
                parse_rate_ppm(s).map_err(|e| perr(format!("bad rate {s:?}: {e}")))
            };
            let u = NodeId(u32::try_from(int(fields[0])?).map_err(|e| perr(e.to_string()))?);
            let v = NodeId(u32::try_from(int(fields[1])?).map_err(|e| perr(e.to_string()))?);
            let fwd = ChannelDirState::new(
                int(fields[2])?,
                FeeSchedule::new(int(fields[6])?, rate(fields[4])?).map_err(|e| perr(e.to_string()))?,
            );
            let rev = ChannelDirState::new(
                int(fields[3])?,
                FeeSchedule::new(int(fields[7])?, rate(fields[5])?).map_err(|e| perr(e.to_string()))?,
            );
            topo.add_channel(u, v, fwd, rev)
                .map_err(|e| perr(e.to_string()))?;
        }
        Ok(topo)
    }

    pub fn load(path: &FsPath) -> Result<Topology, GraphError> {
        let text = fs::read_to_string(path).map_err(|e| GraphError::Io(e.to_string()))?;
        Self::parse(&text)
    }

    /// Serializes in the format accepted by [`Topology::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::from("# u v balance_uv balance_vu rate_uv rate_vu base_uv base_vu\n");
        for (u, v) in self.channels() {
            let f = self.channels[&(u, v)];
            let r = self.channels[&(v, u)];
            out.push_str(&format!(
                "{u} {v} {} {} {} {} {} {}\n",
                f.balance,
                r.balance,
                format_rate_ppm(f.fee.rate_ppm),
                format_rate_ppm(r.fee.rate_ppm),
                f.fee.base,
                r.fee.base
            ));
        }
        out
    }

    /// Generates a connected Watts-Strogatz small-world graph on nodes
    /// `0..n`. Balances and fees are zero until funded.
    ///
    /// Rewiring follows the classic procedure: for each lattice offset `j` and
    /// node `u`, the edge `(u, u+j)` is moved to a uniformly random new
    /// endpoint with probability `beta`. A disconnected result is retried with
    /// `seed + 1`, up to [`MAX_GENERATOR_ATTEMPTS`] times.
    pub fn watts_strogatz(
        n: usize,
        ring_degree: usize,
        beta: f64,
        seed: u64,
    ) -> Result<Topology, GraphError> {
        if n < 3 {
            return Err(GraphError::InvalidParameter(format!("n = {n} must be at least 3")));
        }
        if ring_degree < 2 || ring_degree >= n || !ring_degree.is_multiple_of(2) {
            return Err(GraphError::InvalidParameter(format!(
                "ring degree {ring_degree} must be even and in [2, {n})"
            )));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(GraphError::InvalidParameter(format!("beta {beta} outside [0, 1]")));
        }
        if n > u32::MAX as usize {
            return Err(GraphError::InvalidParameter("too many nodes".into()));
        }
        for attempt in 0..MAX_GENERATOR_ATTEMPTS {
            let edges = ws_edges(n, ring_degree, beta, seed.wrapping_add(attempt));
            let mut topo = Topology::new();
            for i in 0..n {
                topo.add_node(NodeId(i as u32));
            }
            for (a, b) in edges {
                topo.add_channel(
                    NodeId(a as u32),
                    NodeId(b as u32),
                    ChannelDirState::default(),
                    ChannelDirState::default(),
                )?;
            }
            if topo.is_connected() {
                return Ok(topo);
            }
        }
        Err(GraphError::Disconnected(MAX_GENERATOR_ATTEMPTS))
    }
}

fn ws_edges(n: usize, k: usize, beta: f64, seed: u64) -> BTreeSet<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let norm = |a: usize, b: usize| if a < b { (a, b) } else { (b, a) };
    let mut edges = BTreeSet::new();
    let mut degree = vec![0usize; n];
    for j in 1..=k / 2 {
        for u in 0..n {
            edges.insert(norm(u, (u + j) % n));
            degree[u] += 1;
            degree[(u + j) % n] += 1;
        }
    }
    let nodes: Vec<usize> = (0..n).collect();
    for j in 1..=k / 2 {
        for u in 0..n {
            let v = (u + j) % n;
            if !rng.gen_bool(beta) {
                continue;
            }
            if !edges.contains(&norm(u, v)) {
                continue;
            }
            let mut w = *nodes.choose(&mut rng).expect("nonempty");
            let mut skip = false;
            while w == u || edges.contains(&norm(u, w)) {
                if degree[u] >= n - 1 {
                    skip = true;
                    break;
                }
                w = *nodes.choose(&mut rng).expect("nonempty");
            }
            if skip {
                continue;
            }
            edges.remove(&norm(u, v));
            degree[v] -= 1;
            edges.insert(norm(u, w));
            degree[w] += 1;
        }
    }
    edges
}

/// Two-band mixture of proportional fee rates, in ppm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeeBands {
    pub low_band_share: f64,
    pub low_band: (u64, u64),
    pub high_band: (u64, u64),
}

impl Default for FeeBands {
    /// 90% of directions charge 0.1%-1%, the rest 1%-10%.
    fn default() -> Self {
        FeeBands {
            low_band_share: 0.9,
            low_band: (1_000, 10_000),
            high_band: (10_000, 100_000),
        }
    }
}

/// Parses a decimal fraction such as `0.005` into parts per million.
pub fn parse_rate_ppm(s: &str) -> Result<u64, String> {
    let (int_part, frac_part) = match s.split_once('.') {
        Some((i, f)) => (i, f),
        None => (s, ""),
    };
    if frac_part.len() > 6 {
        return Err("more than six fractional digits".into());
    }
    if int_part.is_empty() && frac_part.is_empty() {
        return Err("empty".into());
    }
    let whole = if int_part.is_empty() {
        0
    } else {
        int_part.parse::<u64>().map_err(|e| e.to_string())?
    };
    let mut frac = if frac_part.is_empty() {
        0
    } else {
        frac_part.parse::<u64>().map_err(|e| e.to_string())?
    };
    for _ in frac_part.len()..6 {
        frac *= 10;
    }
    let ppm = whole
        .checked_mul(RATE_SCALE)
        .and_then(|w| w.checked_add(frac))
        .ok_or_else(|| "rate overflows".to_string())?;
    if ppm >= RATE_SCALE {
        return Err("rate must be below 1".into());
    }
    Ok(ppm)
}

pub fn format_rate_ppm(ppm: u64) -> String {
    format!("{}.{:06}", ppm / RATE_SCALE, ppm % RATE_SCALE)
}

/// Parses a positive decimal such as `0.5` or `10` into an exact ratio.
pub fn parse_scale(s: &str) -> Result<Ratio<u64>, String> {
    let (int_part, frac_part) = s.split_once('.').unwrap_or((s, ""));
    let digits = format!("{int_part}{frac_part}");
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(format!("bad scale factor {s:?}"));
    }
    let numer = u64::from_str(&digits).map_err(|e| e.to_string())?;
    let denom = 10u64
        .checked_pow(frac_part.len() as u32)
        .ok_or_else(|| "too many fractional digits".to_string())?;
    if numer == 0 {
        return Err("scale factor must be positive".into());
    }
    Ok(Ratio::new(numer, denom))
}
