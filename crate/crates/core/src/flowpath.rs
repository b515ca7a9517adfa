//! Path algorithms over the channel graph: filtered shortest paths, Yen's
//! loopless k-shortest paths, edge-disjoint path sets, and the probe-driven
//! modified Edmonds-Karp used to route elephant payments.
//!
//! Every search breaks ties toward the lexicographically smallest node
//! sequence, so results are reproducible across runs.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;

use thiserror::Error;

use crate::graph::{Amount, NodeId, Topology};
use crate::workload::Payment;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PathError {
    #[error("a path needs at least two nodes, got {0}")]
    TooShort(usize),
    #[error("path revisits node {0}")]
    NotSimple(NodeId),
}

/// Simple path given as its node sequence.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Path {
    hops: Vec<NodeId>,
}

impl Path {
    pub fn new(hops: Vec<NodeId>) -> Result<Self, PathError> {
        if hops.len() < 2 {
            return Err(PathError::TooShort(hops.len()));
        }
        let mut seen = HashSet::with_capacity(hops.len());
        for &h in &hops {
            if !seen.insert(h) {
                return Err(PathError::NotSimple(h));
            }
        }
        Ok(Path { hops })
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.hops
    }

    pub fn source(&self) -> NodeId {
        self.hops[0]
    }

    pub fn target(&self) -> NodeId {
        *self.hops.last().expect("non-empty path")
    }

    /// Number of channels traversed.
    pub fn channel_count(&self) -> usize {
        self.hops.len() - 1
    }

    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.hops.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn uses(&self, u: NodeId, v: NodeId) -> bool {
        self.edges().any(|e| e == (u, v))
    }

    pub fn reversed(&self) -> Path {
        let mut hops = self.hops.clone();
        hops.reverse();
        Path { hops }
    }

    /// True if every consecutive pair is a channel direction of `topology`.
    pub fn exists_in(&self, topology: &Topology) -> bool {
        self.edges().all(|(u, v)| topology.has_edge(u, v))
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.hops.iter().map(|h| h.to_string()).collect();
        write!(f, "{}", parts.join("-"))
    }
}

/// Sparse capacity map. A missing entry is unknown and treated as unbounded.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CapacityMatrix {
    entries: BTreeMap<(NodeId, NodeId), Amount>,
}

impl CapacityMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, u: NodeId, v: NodeId) -> Option<Amount> {
        self.entries.get(&(u, v)).copied()
    }

    pub fn set(&mut self, u: NodeId, v: NodeId, amount: Amount) {
        self.entries.insert((u, v), amount);
    }

    pub fn is_known(&self, u: NodeId, v: NodeId) -> bool {
        self.entries.contains_key(&(u, v))
    }

    /// Unknown or strictly positive.
    pub fn passable(&self, u: NodeId, v: NodeId) -> bool {
        self.get(u, v).is_none_or(|c| c > 0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((NodeId, NodeId), Amount)> + '_ {
        self.entries.iter().map(|(k, v)| (*k, *v))
    }
}

/// One channel as reported by a probe: balances in both directions and the
/// proportional fee rates (ppm) of both directions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct HopProbe {
    pub forward: Amount,
    pub reverse: Amount,
    pub forward_rate_ppm: u64,
    pub reverse_rate_ppm: u64,
}

/// Source of live channel state along a path.
pub trait Prober {
    /// Per-hop state in path order, or `None` if the probe got no answer.
    fn probe(&mut self, path: &Path) -> Option<Vec<HopProbe>>;
}

/// Prober reading balances straight from a ledger.
pub struct LedgerProber<'a> {
    pub topology: &'a Topology,
    pub probes: usize,
}

impl<'a> LedgerProber<'a> {
    pub fn new(topology: &'a Topology) -> Self {
        LedgerProber { topology, probes: 0 }
    }
}

impl Prober for LedgerProber<'_> {
    fn probe(&mut self, path: &Path) -> Option<Vec<HopProbe>> {
        self.probes += 1;
        path.edges()
            .map(|(u, v)| {
                let f = self.topology.direction(u, v)?;
                let r = self.topology.direction(v, u)?;
                Some(HopProbe {
                    forward: f.balance,
                    reverse: r.balance,
                    forward_rate_ppm: f.fee.rate_ppm,
                    reverse_rate_ppm: r.fee.rate_ppm,
                })
            })
            .collect()
    }
}

/// Lexicographically smallest minimum-hop path from `s` to `t` over edges
/// accepted by `allowed`, never visiting a node in `banned`.
pub fn shortest_path_filtered<F>(
    topology: &Topology,
    s: NodeId,
    t: NodeId,
    banned: &HashSet<NodeId>,
    allowed: F,
) -> Option<Path>
where
    F: Fn(NodeId, NodeId) -> bool,
{
    if s == t || banned.contains(&s) || banned.contains(&t) {
        return None;
    }
    if !topology.contains_node(s) || !topology.contains_node(t) {
        return None;
    }
    // distances to t, walking edges backwards; channels are symmetric so the
    // in-neighbors of v are its neighbors
    let mut dist: HashMap<NodeId, u32> = HashMap::new();
    dist.insert(t, 0);
    let mut queue = VecDeque::from([t]);
    'bfs: while let Some(v) = queue.pop_front() {
        let d = dist[&v];
        for &u in topology.neighbors(v) {
            if banned.contains(&u) || dist.contains_key(&u) || !allowed(u, v) {
                continue;
            }
            dist.insert(u, d + 1);
            if u == s {
                break 'bfs;
            }
            queue.push_back(u);
        }
    }
    let mut remaining = *dist.get(&s)?;
    let mut hops = vec![s];
    let mut cur = s;
    while cur != t {
        let next = topology
            .neighbors(cur)
            .iter()
            .copied()
            .find(|&v| dist.get(&v) == Some(&(remaining - 1)) && allowed(cur, v))
            .expect("distance labels admit a successor");
        hops.push(next);
        cur = next;
        remaining -= 1;
    }
    Some(Path { hops })
}

/// Minimum-hop path using only edges whose residual is unknown or positive.
pub fn bfs_feasible_shortest(
    topology: &Topology,
    residual: &CapacityMatrix,
    s: NodeId,
    t: NodeId,
) -> Option<Path> {
    shortest_path_filtered(topology, s, t, &HashSet::new(), |u, v| residual.passable(u, v))
}

/// Up to `m` loopless `s -> t` paths ordered by hop count, ties broken by
/// lexicographic node order.
pub fn yen_k_shortest(topology: &Topology, s: NodeId, t: NodeId, m: usize) -> Vec<Path> {
    let mut found: Vec<Path> = Vec::new();
    if m == 0 {
        return found;
    }
    let Some(first) = shortest_path_filtered(topology, s, t, &HashSet::new(), |_, _| true) else {
        return found;
    };
    found.push(first);
    let mut candidates: BTreeSet<(usize, Vec<NodeId>)> = BTreeSet::new();
    let mut seen: HashSet<Vec<NodeId>> = HashSet::from([found[0].hops.clone()]);

    while found.len() < m {
        let prev = found.last().expect("nonempty").hops.clone();
        for i in 0..prev.len() - 1 {
            let spur = prev[i];
            let root = &prev[..=i];
            let mut banned_edges: HashSet<(NodeId, NodeId)> = HashSet::new();
            for p in &found {
                if p.hops.len() > i + 1 && &p.hops[..=i] == root {
                    banned_edges.insert((p.hops[i], p.hops[i + 1]));
                }
            }
            let banned_nodes: HashSet<NodeId> = root[..i].iter().copied().collect();
            let spur_path = shortest_path_filtered(topology, spur, t, &banned_nodes, |u, v| {
                !banned_edges.contains(&(u, v))
            });
            if let Some(sp) = spur_path {
                let mut hops = root[..i].to_vec();
                hops.extend_from_slice(&sp.hops);
                if seen.insert(hops.clone()) {
                    candidates.insert((hops.len(), hops));
                }
            }
        }
        match candidates.pop_first() {
            Some((_, hops)) => found.push(Path { hops }),
            None => break,
        }
    }
    found
}

/// Up to `count` shortest paths that share no channel, found by repeated
/// searches that delete both directions of every channel already used.
pub fn edge_disjoint_shortest(topology: &Topology, s: NodeId, t: NodeId, count: usize) -> Vec<Path> {
    let mut used: HashSet<(NodeId, NodeId)> = HashSet::new();
    let mut out = Vec::new();
    while out.len() < count {
        let Some(p) = shortest_path_filtered(topology, s, t, &HashSet::new(), |u, v| {
            !used.contains(&(u, v))
        }) else {
            break;
        };
        for (u, v) in p.edges() {
            used.insert((u, v));
            used.insert((v, u));
        }
        out.push(p);
    }
    out
}

/// Paths in discovery order with the flow each contributed.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PathSet {
    entries: Vec<(Path, Amount)>,
}

impl PathSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn paths(&self) -> impl Iterator<Item = &Path> + '_ {
        self.entries.iter().map(|(p, _)| p)
    }

    pub fn get(&self, i: usize) -> Option<(&Path, Amount)> {
        self.entries.get(i).map(|(p, c)| (p, *c))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Path, Amount)> + '_ {
        self.entries.iter().map(|(p, c)| (p, *c))
    }

    /// Sum of per-path bottlenecks.
    pub fn total_flow(&self) -> u128 {
        self.entries.iter().map(|(_, c)| *c as u128).sum()
    }

    /// Adds `path` with bottleneck `flow`; a path seen before accumulates.
    pub fn push(&mut self, path: Path, flow: Amount) {
        if let Some(entry) = self.entries.iter_mut().find(|(p, _)| *p == path) {
            entry.1 = entry.1.saturating_add(flow);
        } else {
            self.entries.push((path, flow));
        }
    }
}

/// Successful outcome of the modified Edmonds-Karp search.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ElephantPaths {
    pub paths: PathSet,
    /// First-probed capacities of every channel direction touched.
    pub capacities: CapacityMatrix,
    /// Proportional fee rates reported by the probes.
    pub rates: BTreeMap<(NodeId, NodeId), u64>,
    pub flow: u128,
    pub probes: usize,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("insufficient flow: found {achieved} for demand {demand} using {probes} probes")]
pub struct InsufficientFlow {
    pub achieved: u128,
    pub demand: Amount,
    pub probes: usize,
}

/// Incremental form of the modified Edmonds-Karp search, so that probes can
/// be issued by an asynchronous transport between steps.
///
/// Usage: while [`next_path`](Self::next_path) yields a path, probe it and
/// pass the result to [`record_probe`](Self::record_probe); then call
/// [`finish`](Self::finish).
#[derive(Clone, Debug)]
pub struct ModifiedEdmondsKarp {
    source: NodeId,
    target: NodeId,
    demand: Amount,
    max_paths: usize,
    iterations: usize,
    flow: u128,
    paths: PathSet,
    known: CapacityMatrix,
    residual: CapacityMatrix,
    rates: BTreeMap<(NodeId, NodeId), u64>,
}

impl ModifiedEdmondsKarp {
    pub fn new(source: NodeId, target: NodeId, demand: Amount, max_paths: usize) -> Self {
        ModifiedEdmondsKarp {
            source,
            target,
            demand,
            max_paths,
            iterations: 0,
            flow: 0,
            paths: PathSet::new(),
            known: CapacityMatrix::new(),
            residual: CapacityMatrix::new(),
            rates: BTreeMap::new(),
        }
    }

    /// Next augmenting path on the residual graph, or `None` once the path
    /// budget is spent or no feasible path remains.
    pub fn next_path(&self, topology: &Topology) -> Option<Path> {
        if self.iterations >= self.max_paths {
            return None;
        }
        bfs_feasible_shortest(topology, &self.residual, self.source, self.target)
    }

    /// Folds in the probe of `path`. Returns the bottleneck pushed along it.
    ///
    /// A channel direction's capacity is recorded the first time it is
    /// probed; afterwards only the residual changes. The bottleneck is the
    /// smallest residual along the path, and pushing it credits the reverse
    /// residual. An unanswered probe counts as zero capacity on every hop not
    /// yet known.
    pub fn record_probe(&mut self, path: &Path, probe: Option<&[HopProbe]>) -> Amount {
        self.iterations += 1;
        for (i, (u, v)) in path.edges().enumerate() {
            let hop = probe.and_then(|p| p.get(i)).copied().unwrap_or_default();
            if !self.known.is_known(u, v) {
                self.known.set(u, v, hop.forward);
                self.residual.set(u, v, hop.forward);
            }
            if !self.known.is_known(v, u) {
                self.known.set(v, u, hop.reverse);
                self.residual.set(v, u, hop.reverse);
            }
            if probe.is_some() {
                self.rates.entry((u, v)).or_insert(hop.forward_rate_ppm);
                self.rates.entry((v, u)).or_insert(hop.reverse_rate_ppm);
            }
        }
        let bottleneck = path
            .edges()
            .map(|(u, v)| self.residual.get(u, v).expect("recorded above"))
            .min()
            .unwrap_or(0);
        if bottleneck > 0 {
            for (u, v) in path.edges() {
                let fwd = self.residual.get(u, v).expect("recorded");
                self.residual.set(u, v, fwd - bottleneck);
                let rev = self.residual.get(v, u).expect("recorded");
                self.residual.set(v, u, rev.saturating_add(bottleneck));
            }
        }
        self.flow += bottleneck as u128;
        self.paths.push(path.clone(), bottleneck);
        bottleneck
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn flow(&self) -> u128 {
        self.flow
    }

    pub fn residual(&self) -> &CapacityMatrix {
        &self.residual
    }

    pub fn known(&self) -> &CapacityMatrix {
        &self.known
    }

    pub fn finish(self) -> Result<ElephantPaths, InsufficientFlow> {
        if self.flow >= self.demand as u128 {
            Ok(ElephantPaths {
                paths: self.paths,
                capacities: self.known,
                rates: self.rates,
                flow: self.flow,
                probes: self.iterations,
            })
        } else {
            Err(InsufficientFlow {
                achieved: self.flow,
                demand: self.demand,
                probes: self.iterations,
            })
        }
    }
}

/// Runs the modified Edmonds-Karp search to completion with a synchronous
/// prober: at most `k` probed paths, success iff the found flow covers the
/// payment's demand.
pub fn modified_edmonds_karp<P: Prober>(
    topology: &Topology,
    payment: &Payment,
    k: usize,
    prober: &mut P,
) -> Result<ElephantPaths, InsufficientFlow> {
    let mut search = ModifiedEdmondsKarp::new(payment.sender, payment.receiver, payment.demand, k);
    while let Some(path) = search.next_path(topology) {
        let probe = prober.probe(&path);
        search.record_probe(&path, probe.as_deref());
    }
    search.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ChannelDirState, FeeSchedule};

    fn n(i: u32) -> NodeId {
        NodeId(i)
    }

    fn hops(p: &Path) -> Vec<u32> {
        p.nodes().iter().map(|x| x.0).collect()
    }

    fn build(chans: &[(u32, u32, Amount, Amount)]) -> Topology {
        let mut t = Topology::new();
        for &(u, v, a, b) in chans {
            t.add_channel(
                n(u),
                n(v),
                ChannelDirState::new(a, FeeSchedule::default()),
                ChannelDirState::new(b, FeeSchedule::default()),
            )
            .unwrap();
        }
        t
    }

    fn payment(s: u32, t: u32, demand: Amount) -> Payment {
        Payment { id: 0, sender: n(s), receiver: n(t), demand, seq: 0 }
    }

    /// Two shortest 1->6 paths share the 1->2 bottleneck of 30; the longer
    /// route 1-5-4-6 has spare capacity.
    fn shared_bottleneck() -> Topology {
        build(&[
            (1, 2, 30, 30),
            (2, 3, 100, 100),
            (3, 6, 100, 100),
            (2, 7, 100, 100),
            (7, 6, 100, 100),
            (1, 5, 40, 40),
            (5, 4, 40, 40),
            (4, 6, 40, 40),
        ])
    }

    #[test]
    fn path_validation() {
        assert!(Path::new(vec![n(1)]).is_err());
        assert!(Path::new(vec![n(1), n(2), n(1)]).is_err());
        let p = Path::new(vec![n(1), n(2), n(3)]).unwrap();
        assert_eq!(p.channel_count(), 2);
        assert!(p.uses(n(2), n(3)) && !p.uses(n(3), n(2)));
        assert_eq!(hops(&p.reversed()), vec![3, 2, 1]);
    }

    #[test]
    fn bfs_direct_and_blocked() {
        let t = build(&[(0, 1, 5, 5)]);
        let p = bfs_feasible_shortest(&t, &CapacityMatrix::new(), n(0), n(1)).unwrap();
        assert_eq!(hops(&p), vec![0, 1]);
        let mut zero = CapacityMatrix::new();
        for ((u, v), _) in t.directions() {
            zero.set(u, v, 0);
        }
        assert!(bfs_feasible_shortest(&t, &zero, n(0), n(1)).is_none());
    }

    #[test]
    fn bfs_prefers_min_hops_then_smallest_ids() {
        let t = shared_bottleneck();
        let p = bfs_feasible_shortest(&t, &CapacityMatrix::new(), n(1), n(6)).unwrap();
        assert_eq!(hops(&p), vec![1, 2, 3, 6]);
    }

    #[test]
    fn single_channel_elephant() {
        let t = build(&[(0, 1, 10, 0)]);
        let mut prober = LedgerProber::new(&t);
        let res = modified_edmonds_karp(&t, &payment(0, 1, 7), 1, &mut prober).unwrap();
        assert_eq!(res.paths.len(), 1);
        assert_eq!(res.flow, 10);
        assert_eq!(res.capacities.get(n(0), n(1)), Some(10));
        assert_eq!(res.capacities.get(n(1), n(0)), Some(0));
    }

    #[test]
    fn augmentation_escapes_shared_bottleneck() {
        let t = shared_bottleneck();
        let mut prober = LedgerProber::new(&t);
        let res = modified_edmonds_karp(&t, &payment(1, 6, 60), 2, &mut prober).unwrap();
        assert_eq!(res.flow, 70);
        let found: Vec<Vec<u32>> = res.paths.paths().map(hops).collect();
        assert_eq!(found, vec![vec![1, 2, 3, 6], vec![1, 5, 4, 6]]);

        let mut prober = LedgerProber::new(&t);
        let err = modified_edmonds_karp(&t, &payment(1, 6, 71), 20, &mut prober).unwrap_err();
        assert_eq!(err.achieved, 70);
        assert!(err.probes <= 20);
    }

    #[test]
    fn zero_capacity_path_consumes_an_iteration() {
        let t = build(&[(0, 1, 0, 5), (0, 2, 9, 9), (2, 3, 9, 9), (3, 1, 9, 9)]);
        let mut prober = LedgerProber::new(&t);
        let res = modified_edmonds_karp(&t, &payment(0, 1, 5), 2, &mut prober).unwrap();
        assert_eq!(res.paths.get(0).map(|(p, c)| (hops(p), c)), Some((vec![0, 1], 0)));
        assert_eq!(res.flow, 9);
        let mut prober = LedgerProber::new(&t);
        assert!(modified_edmonds_karp(&t, &payment(0, 1, 5), 1, &mut prober).is_err());
    }

    #[test]
    fn unanswered_probe_is_zero_capacity() {
        struct Deaf;
        impl Prober for Deaf {
            fn probe(&mut self, _: &Path) -> Option<Vec<HopProbe>> {
                None
            }
        }
        let t = build(&[(0, 1, 10, 10)]);
        let err = modified_edmonds_karp(&t, &payment(0, 1, 1), 5, &mut Deaf).unwrap_err();
        assert_eq!((err.achieved, err.probes), (0, 1));
    }

    #[test]
    fn residual_sums_are_conserved() {
        let t = shared_bottleneck();
        let mut prober = LedgerProber::new(&t);
        let mut search = ModifiedEdmondsKarp::new(n(1), n(6), 1000, 10);
        while let Some(path) = search.next_path(&t) {
            let before: Vec<_> = path
                .edges()
                .map(|(u, v)| (search.residual().get(u, v), search.residual().get(v, u)))
                .collect();
            let probe = prober.probe(&path);
            search.record_probe(&path, probe.as_deref());
            for ((u, v), (a, b)) in path.edges().zip(before) {
                if let (Some(a), Some(b)) = (a, b) {
                    let after = search.residual().get(u, v).unwrap() + search.residual().get(v, u).unwrap();
                    assert_eq!(a + b, after);
                }
            }
        }
        assert!(prober.probes <= 10);
    }

    #[test]
    fn yen_single_and_triangle() {
        let chain = build(&[(0, 1, 1, 1), (1, 2, 1, 1)]);
        assert_eq!(yen_k_shortest(&chain, n(0), n(2), 4).len(), 1);
        let tri = build(&[(0, 1, 1, 1), (0, 2, 1, 1), (2, 1, 1, 1)]);
        let paths: Vec<_> = yen_k_shortest(&tri, n(0), n(1), 2).iter().map(hops).collect();
        assert_eq!(paths, vec![vec![0, 1], vec![0, 2, 1]]);
        assert!(yen_k_shortest(&tri, n(0), n(1), 0).is_empty());
    }

    #[test]
    fn yen_is_prefix_stable() {
        let t = Topology::watts_strogatz(14, 4, 0.4, 5).unwrap();
        let long = yen_k_shortest(&t, n(0), n(7), 8);
        for m in 1..8 {
            assert_eq!(&yen_k_shortest(&t, n(0), n(7), m)[..], &long[..m.min(long.len())]);
        }
    }

    #[test]
    fn disjoint_paths_share_no_channel() {
        let t = Topology::watts_strogatz(20, 4, 0.3, 2).unwrap();
        let paths = edge_disjoint_shortest(&t, n(0), n(10), 4);
        assert!(!paths.is_empty() && paths.len() <= 4);
        let mut used = HashSet::new();
        for p in &paths {
            for (u, v) in p.edges() {
                let key = if u < v { (u, v) } else { (v, u) };
                assert!(used.insert(key));
            }
        }
    }

    #[test]
    fn duplicate_paths_merge() {
        let mut set = PathSet::new();
        let p = Path::new(vec![n(0), n(1)]).unwrap();
        set.push(p.clone(), 3);
        set.push(p, 4);
        assert_eq!(set.len(), 1);
        assert_eq!(set.total_flow(), 7);
    }
}
