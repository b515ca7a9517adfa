//! Seeded randomized suites comparing the solvers against [`crate::oracle`].

use std::collections::BTreeMap;
use std::fmt;

use num_bigint::BigInt;
use num_rational::{BigRational, Ratio};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::feeopt::{allocation_fee, solve_min_fee_split, Allocation, CapacityRule, SplitError, SplitProblem};
use crate::flowpath::{yen_k_shortest, CapacityMatrix, LedgerProber, ModifiedEdmondsKarp, Path, Prober};
use crate::graph::{Amount, FeeSchedule, NodeId, Topology, RATE_SCALE};
use crate::oracle;

/// Largest grid the LP suite enumerates exhaustively.
const GRID_LIMIT: u128 = 200_000;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    /// Cases where the oracle had nothing to compare (e.g. s and t disconnected).
    pub trivial: usize,
    pub failures: Vec<String>,
}

impl SuiteReport {
    fn new(name: &'static str) -> Self {
        SuiteReport { name, ..SuiteReport::default() }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} cases ({} trivial), {} failures",
            self.name,
            self.cases,
            self.trivial,
            self.failures.len()
        )
    }
}

/// Random directed graph: up to `nodes` nodes, up to `edges` directed edges
/// with capacities in `1..=max_cap`. Opposite edges share one channel.
pub fn random_digraph(rng: &mut ChaCha8Rng, nodes: u32, edges: usize, max_cap: Amount) -> (Topology, usize) {
    let n = rng.gen_range(2..=nodes);
    let mut caps: BTreeMap<(u32, u32), Amount> = BTreeMap::new();
    let target = rng.gen_range(1..=edges);
    for _ in 0..target * 4 {
        if caps.len() == target {
            break;
        }
        let u = rng.gen_range(0..n);
        let v = rng.gen_range(0..n);
        if u != v {
            caps.entry((u, v)).or_insert_with(|| rng.gen_range(1..=max_cap));
        }
    }
    let mut t = Topology::new();
    for i in 0..n {
        t.add_node(NodeId(i));
    }
    for (&(u, v), &c) in &caps {
        if u < v {
            let back = caps.get(&(v, u)).copied().unwrap_or(0);
            t.connect(NodeId(u), NodeId(v), c, back).expect("fresh channel");
        } else if !caps.contains_key(&(v, u)) {
            t.connect(NodeId(u), NodeId(v), c, 0).expect("fresh channel");
        }
    }
    (t, caps.len())
}

/// Random undirected graph on up to `nodes` nodes, all balances 1.
pub fn random_graph(rng: &mut ChaCha8Rng, nodes: u32, density: f64) -> Topology {
    let n = rng.gen_range(2..=nodes);
    let mut t = Topology::new();
    for i in 0..n {
        t.add_node(NodeId(i));
    }
    for u in 0..n {
        for v in u + 1..n {
            if rng.gen_bool(density) {
                t.connect(NodeId(u), NodeId(v), 1, 1).expect("fresh channel");
            }
        }
    }
    t
}

/// Modified Edmonds-Karp with `k = |E|` and unbounded demand against the
/// textbook max flow, on `cases` graphs with at most 12 nodes, 30 edges and
/// capacities up to 20.
pub fn maxflow_suite(cases: usize, seed: u64) -> SuiteReport {
    let mut report = SuiteReport::new("maxflow");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let (topology, edges) = random_digraph(&mut rng, 12, 30, 20);
        let n = topology.node_count() as u32;
        let s = NodeId(rng.gen_range(0..n));
        let t = NodeId((s.0 + rng.gen_range(1..n)) % n);
        let expected = oracle::max_flow(&topology, s, t);
        if expected == 0 {
            report.trivial += 1;
        }
        let mut search = ModifiedEdmondsKarp::new(s, t, Amount::MAX, edges);
        let mut prober = LedgerProber::new(&topology);
        while let Some(path) = search.next_path(&topology) {
            let probe = prober.probe(&path);
            search.record_probe(&path, probe.as_deref());
        }
        if search.flow() != expected {
            report.failures.push(format!(
                "case {case}: {s}->{t} on {edges} edges found {} but max flow is {expected}",
                search.flow()
            ));
        }
        report.cases += 1;
    }
    report
}

/// Yen's `m` shortest paths (`m <= 5`) against exhaustive enumeration on
/// graphs with at most 10 nodes.
pub fn yen_suite(cases: usize, seed: u64) -> SuiteReport {
    let mut report = SuiteReport::new("yen");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let density = rng.gen_range(0.2..0.7);
        let topology = random_graph(&mut rng, 10, density);
        let n = topology.node_count() as u32;
        let s = NodeId(rng.gen_range(0..n));
        let t = NodeId((s.0 + rng.gen_range(1..n)) % n);
        let m = rng.gen_range(1..=5);
        let expected: Vec<Path> = oracle::all_simple_paths(&topology, s, t).into_iter().take(m).collect();
        if expected.is_empty() {
            report.trivial += 1;
        }
        let got = yen_k_shortest(&topology, s, t, m);
        if got != expected {
            let show = |ps: &[Path]| ps.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(" ");
            report.failures.push(format!(
                "case {case}: m={m} {s}->{t}: got [{}], expected [{}]",
                show(&got),
                show(&expected)
            ));
        }
        report.cases += 1;
    }
    report
}

/// Random split instance: up to 4 paths between two nodes of a small graph
/// using at most 8 channels, capacities up to 50.
pub fn random_split_problem(rng: &mut ChaCha8Rng) -> Option<SplitProblem> {
    let topology = random_graph(rng, 6, 0.6);
    let n = topology.node_count() as u32;
    let s = NodeId(0);
    let t = NodeId(n - 1);
    let mut all = oracle::all_simple_paths(&topology, s, t);
    if all.is_empty() {
        return None;
    }
    all.shuffle(rng);
    let want = rng.gen_range(1..=4);
    let mut paths: Vec<Path> = Vec::new();
    let mut channels: Vec<(NodeId, NodeId)> = Vec::new();
    for p in all {
        if paths.len() == want {
            break;
        }
        let mut extra: Vec<(NodeId, NodeId)> = p
            .edges()
            .map(|(u, v)| if u < v { (u, v) } else { (v, u) })
            .filter(|c| !channels.contains(c))
            .collect();
        extra.dedup();
        if channels.len() + extra.len() <= 8 {
            channels.extend(extra);
            paths.push(p);
        }
    }
    let mut capacities = CapacityMatrix::new();
    let mut fees = BTreeMap::new();
    for &(u, v) in &channels {
        for (a, b) in [(u, v), (v, u)] {
            capacities.set(a, b, rng.gen_range(0..=50));
            let rate = if rng.gen_bool(0.9) { rng.gen_range(1_000..10_000) } else { rng.gen_range(10_000..100_000) };
            fees.insert((a, b), FeeSchedule::proportional(rate));
        }
    }
    let rule = if rng.gen_bool(0.5) { CapacityRule::Netted } else { CapacityRule::Gross };
    let reach: Amount = paths
        .iter()
        .map(|p| p.edges().map(|(u, v)| capacities.get(u, v).unwrap_or(0)).min().unwrap_or(0))
        .sum();
    let demand = rng.gen_range(1..=reach.clamp(1, 60));
    Some(SplitProblem { paths, capacities, fees, demand, rule })
}

fn compositions(demand: Amount, parts: usize) -> u128 {
    // C(demand + parts - 1, parts - 1)
    let mut c: u128 = 1;
    for i in 1..parts as u128 {
        c = c * (demand as u128 + i) / i;
    }
    c
}

/// Recomputes every capacity constraint from scratch.
fn satisfies_constraints(problem: &SplitProblem, a: &Allocation) -> Result<(), String> {
    let total: u128 = a.amounts.iter().map(|&r| r as u128).sum();
    if total != problem.demand as u128 {
        return Err(format!("allocates {total} of {}", problem.demand));
    }
    let mut load: BTreeMap<(NodeId, NodeId), i128> = BTreeMap::new();
    for (p, &r) in problem.paths.iter().zip(&a.amounts) {
        for (u, v) in p.edges() {
            *load.entry((u, v)).or_default() += r as i128;
            if problem.rule == CapacityRule::Netted {
                *load.entry((v, u)).or_default() -= r as i128;
            }
        }
    }
    for ((u, v), l) in load {
        let cap = problem.capacities.get(u, v).unwrap_or(0) as i128;
        if l > cap {
            return Err(format!("{u}->{v} carries {l} over capacity {cap}"));
        }
    }
    Ok(())
}

/// Fee-minimizing split against the continuous vertex optimum and the
/// exhaustive integer grid.
pub fn lp_suite(cases: usize, seed: u64) -> SuiteReport {
    let mut report = SuiteReport::new("lp");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = BigRational::from_integer(BigInt::from(RATE_SCALE));
    let one = Ratio::from_integer(1u128);
    while report.cases < cases {
        let Some(problem) = random_split_problem(&mut rng) else {
            continue;
        };
        let case = report.cases;
        report.cases += 1;
        let lp = oracle::split_lp_optimum(&problem);
        let grid = if compositions(problem.demand, problem.paths.len()) <= GRID_LIMIT {
            oracle::split_grid_optimum(&problem)
        } else {
            None
        };
        let got = solve_min_fee_split(&problem);
        match (&got, &lp) {
            (Err(SplitError::Infeasible { .. }), None) => {
                report.trivial += 1;
                continue;
            }
            (Ok(_), Some(_)) => {}
            (got, lp) => {
                report.failures.push(format!(
                    "case {case}: solver {:?} but LP optimum {:?}",
                    got.as_ref().map(|a| &a.amounts),
                    lp.as_ref().map(|x| x.to_string())
                ));
                continue;
            }
        }
        let alloc = got.expect("matched above");
        if let Err(e) = satisfies_constraints(&problem, &alloc) {
            report.failures.push(format!("case {case}: {e}"));
            continue;
        }
        let fee = allocation_fee(&problem, &alloc).expect("constraints hold");
        let lower = lp.expect("matched above") / &scale;
        let fee_big = BigRational::new(BigInt::from(*fee.numer()), BigInt::from(*fee.denom()));
        if fee_big < lower {
            report.failures.push(format!("case {case}: fee {fee} below LP bound {lower}"));
        }
        if let Some((_, best)) = grid {
            if fee > best + one {
                report.failures.push(format!("case {case}: fee {fee} vs grid optimum {best}"));
            }
        } else if fee_big > &lower + BigRational::from_integer(BigInt::from(1)) {
            report.failures.push(format!("case {case}: fee {fee} vs LP bound {lower}"));
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_on_small_samples() {
        for r in [maxflow_suite(30, 1), yen_suite(30, 2), lp_suite(20, 3)] {
            assert!(r.passed(), "{r}: {:?}", r.failures);
            assert!(r.trivial < r.cases, "{r}");
        }
    }

    #[test]
    fn compositions_count() {
        assert_eq!(compositions(3, 1), 1);
        assert_eq!(compositions(3, 2), 4);
        assert_eq!(compositions(2, 3), 6);
    }
}
