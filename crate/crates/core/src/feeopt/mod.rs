//! Fee-minimizing split of a payment over a fixed set of probed paths.
//!
//! Variables are the per-path amounts `r_p`. The objective is the sum of the
//! proportional rates along each path; base fees are charged afterwards for
//! every path that carries a non-zero amount.

pub mod simplex;

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigInt;
use num_rational::{BigRational, Ratio};
use num_traits::{ToPrimitive, Zero};
use thiserror::Error;

use crate::flowpath::{CapacityMatrix, Path};
use crate::graph::{Amount, FeeSchedule, NodeId, RATE_SCALE};
use simplex::{minimize_exact, LpOutcome, Relation, Row};

/// Branch-and-bound nodes explored before the incumbent is accepted.
pub const BRANCH_NODE_LIMIT: usize = 256;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SplitError {
    #[error("no allocation of {demand} satisfies the channel constraints")]
    Infeasible { demand: Amount },
    #[error("no probed capacity for channel {0}->{1}")]
    MissingCapacity(NodeId, NodeId),
    #[error("no fee schedule for channel {0}->{1}")]
    MissingFee(NodeId, NodeId),
    #[error("allocation has {got} entries for {expected} paths")]
    LengthMismatch { expected: usize, got: usize },
    #[error("allocation violates constraints: {0}")]
    ConstraintViolation(String),
}

/// How opposite-direction use of a channel interacts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CapacityRule {
    /// Flow in the reverse direction offsets flow in the forward direction.
    #[default]
    Netted,
    /// Each direction is bounded by its own capacity on its own.
    Gross,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitProblem {
    pub paths: Vec<Path>,
    pub capacities: CapacityMatrix,
    pub fees: BTreeMap<(NodeId, NodeId), FeeSchedule>,
    pub demand: Amount,
    pub rule: CapacityRule,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Allocation {
    pub amounts: Vec<Amount>,
}

impl Allocation {
    pub fn total(&self) -> u128 {
        self.amounts.iter().map(|&a| a as u128).sum()
    }

    /// Indices of paths carrying a non-zero amount.
    pub fn used(&self) -> impl Iterator<Item = usize> + '_ {
        self.amounts.iter().enumerate().filter(|(_, a)| **a > 0).map(|(i, _)| i)
    }
}

/// Continuous optimum of the split program.
#[derive(Clone, Debug, PartialEq)]
pub struct Relaxation {
    pub amounts: Vec<BigRational>,
    /// Proportional objective in ppm-scaled units.
    pub objective: BigRational,
}

/// One capacity row: `Σ coef_p · r_p ≤ capacity`, coefficients in {-1, 0, 1}.
#[derive(Clone, Debug)]
struct ChannelRow {
    channel: (NodeId, NodeId),
    coefs: Vec<i128>,
    capacity: Amount,
}

struct Program {
    costs: Vec<i128>,
    rows: Vec<ChannelRow>,
}

impl SplitProblem {
    /// Per-unit proportional cost of each path, in ppm.
    pub fn path_costs(&self) -> Result<Vec<u64>, SplitError> {
        self.paths
            .iter()
            .map(|p| {
                p.edges().try_fold(0u64, |acc, (u, v)| {
                    let fee = self.fees.get(&(u, v)).ok_or(SplitError::MissingFee(u, v))?;
                    Ok(acc + fee.rate_ppm)
                })
            })
            .collect()
    }

    fn program(&self) -> Result<Program, SplitError> {
        let costs = self.path_costs()?.into_iter().map(i128::from).collect();
        let used: BTreeSet<(NodeId, NodeId)> =
            self.paths.iter().flat_map(|p| p.edges()).collect();
        let mut rows = Vec::new();
        for &(u, v) in &used {
            let coefs: Vec<i128> = self
                .paths
                .iter()
                .map(|p| {
                    let fwd = i128::from(p.uses(u, v));
                    match self.rule {
                        CapacityRule::Netted => fwd - i128::from(p.uses(v, u)),
                        CapacityRule::Gross => fwd,
                    }
                })
                .collect();
            if !coefs.iter().any(|&c| c > 0) {
                continue;
            }
            let capacity = self.capacities.get(u, v).ok_or(SplitError::MissingCapacity(u, v))?;
            rows.push(ChannelRow { channel: (u, v), coefs, capacity });
        }
        Ok(Program { costs, rows })
    }
}

impl Program {
    fn lp_rows(&self, demand: Amount) -> Vec<Row> {
        let mut rows = vec![Row {
            coefs: vec![1; self.costs.len()],
            relation: Relation::Eq,
            rhs: demand as i128,
        }];
        rows.extend(self.rows.iter().map(|r| Row {
            coefs: r.coefs.clone(),
            relation: Relation::Le,
            rhs: r.capacity as i128,
        }));
        rows
    }

    fn lhs(&self, row: &ChannelRow, x: &[Amount]) -> i128 {
        row.coefs.iter().zip(x).map(|(c, &v)| c * v as i128).sum()
    }

    fn violation(&self, x: &[Amount], demand: Amount) -> Option<String> {
        let total: u128 = x.iter().map(|&a| a as u128).sum();
        if total != demand as u128 {
            return Some(format!("amounts sum to {total}, demand is {demand}"));
        }
        self.rows.iter().find_map(|r| {
            let lhs = self.lhs(r, x);
            (lhs > r.capacity as i128).then(|| {
                format!("channel {}->{} carries {lhs} over capacity {}", r.channel.0, r.channel.1, r.capacity)
            })
        })
    }

    /// Largest amount path `p` can additionally carry given `x`.
    fn headroom(&self, p: usize, x: &[Amount]) -> i128 {
        self.rows
            .iter()
            .filter(|r| r.coefs[p] > 0)
            .map(|r| r.capacity as i128 - self.lhs(r, x))
            .min()
            .unwrap_or(i128::MAX)
            .max(0)
    }

    fn objective(&self, x: &[Amount]) -> i128 {
        self.costs.iter().zip(x).map(|(c, &v)| c * v as i128).sum()
    }
}

fn relax(program: &Program, rows: &[Row]) -> Option<Relaxation> {
    match minimize_exact(&program.costs, rows) {
        LpOutcome::Optimal { x, objective } => Some(Relaxation { amounts: x, objective }),
        // r_p >= 0 with non-negative costs cannot be unbounded below
        LpOutcome::Infeasible | LpOutcome::Unbounded => None,
    }
}

fn floor_amount(r: &BigRational) -> Amount {
    r.floor().to_integer().to_u64().unwrap_or(Amount::MAX)
}

/// Exact continuous optimum, or `Infeasible`.
pub fn solve_relaxation(problem: &SplitProblem) -> Result<Relaxation, SplitError> {
    let program = problem.program()?;
    relax(&program, &program.lp_rows(problem.demand))
        .ok_or(SplitError::Infeasible { demand: problem.demand })
}

/// Integer allocation of minimum proportional fee.
///
/// The continuous optimum is floored and the residue handed greedily to the
/// cheapest paths with headroom. When that leaves the demand unmet, breaks a
/// constraint, or costs a full unit more than the relaxation, a bounded
/// branch and bound takes over from the greedy result.
pub fn solve_min_fee_split(problem: &SplitProblem) -> Result<Allocation, SplitError> {
    let program = problem.program()?;
    let n = problem.paths.len();
    let demand = problem.demand;
    if demand == 0 {
        return Ok(Allocation { amounts: vec![0; n] });
    }
    let base_rows = program.lp_rows(demand);
    let relaxed = relax(&program, &base_rows).ok_or(SplitError::Infeasible { demand })?;

    let mut x: Vec<Amount> = relaxed.amounts.iter().map(floor_amount).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&p| (program.costs[p], p));
    let mut remaining = demand as i128 - x.iter().map(|&a| a as i128).sum::<i128>();
    for &p in &order {
        if remaining <= 0 {
            break;
        }
        let add = program.headroom(p, &x).min(remaining);
        x[p] += add as Amount;
        remaining -= add;
    }

    let greedy_ok = program.violation(&x, demand).is_none();
    let scale = BigRational::from_integer(BigInt::from(RATE_SCALE));
    let close_enough = |obj: i128| {
        BigRational::from_integer(BigInt::from(obj)) - &relaxed.objective < scale
    };
    if greedy_ok && close_enough(program.objective(&x)) {
        return Ok(Allocation { amounts: x });
    }
    let incumbent = greedy_ok.then(|| {
        let obj = program.objective(&x);
        (x, obj)
    });
    branch_and_bound(&program, &base_rows, incumbent, BRANCH_NODE_LIMIT)
        .map(|(amounts, _)| Allocation { amounts })
        .ok_or(SplitError::Infeasible { demand })
}

fn branch_and_bound(
    program: &Program,
    base: &[Row],
    mut best: Option<(Vec<Amount>, i128)>,
    limit: usize,
) -> Option<(Vec<Amount>, i128)> {
    let n = program.costs.len();
    let bound_row = |i: usize, relation: Relation, rhs: Amount| {
        let mut coefs = vec![0; n];
        coefs[i] = 1;
        Row { coefs, relation, rhs: rhs as i128 }
    };
    let mut stack: Vec<Vec<Row>> = vec![Vec::new()];
    let mut explored = 0;
    while let Some(extra) = stack.pop() {
        if explored == limit {
            break;
        }
        explored += 1;
        let rows: Vec<Row> = base.iter().chain(&extra).cloned().collect();
        let Some(node) = relax(program, &rows) else {
            continue;
        };
        if let Some((_, obj)) = &best {
            if node.objective >= BigRational::from_integer(BigInt::from(*obj)) {
                continue;
            }
        }
        match node.amounts.iter().position(|r| !r.is_integer()) {
            None => {
                let x: Vec<Amount> = node.amounts.iter().map(floor_amount).collect();
                let obj = program.objective(&x);
                best = Some((x, obj));
            }
            Some(i) => {
                let f = floor_amount(&node.amounts[i]);
                let mut up = extra.clone();
                up.push(bound_row(i, Relation::Ge, f + 1));
                let mut down = extra;
                down.push(bound_row(i, Relation::Le, f));
                stack.push(up);
                stack.push(down);
            }
        }
    }
    best
}

/// Fills paths in discovery order, each up to its remaining headroom.
pub fn sequential_fill(problem: &SplitProblem) -> Result<Allocation, SplitError> {
    let program = problem.program()?;
    let mut x = vec![0; problem.paths.len()];
    let mut remaining = problem.demand as i128;
    for p in 0..x.len() {
        if remaining == 0 {
            break;
        }
        let add = program.headroom(p, &x).min(remaining);
        x[p] = add as Amount;
        remaining -= add;
    }
    if remaining > 0 {
        return Err(SplitError::Infeasible { demand: problem.demand });
    }
    Ok(Allocation { amounts: x })
}

/// Rewrites `allocation` as simple source-target paths over the net
/// per-channel flow it induces, dropping opposite-direction offsets and
/// cycles. Each direction then carries at most its net use, so the legs
/// can be held independently.
pub fn decompose_net_flow(problem: &SplitProblem, allocation: &Allocation) -> Vec<(Path, Amount)> {
    let Some(first) = problem.paths.first() else {
        return Vec::new();
    };
    let (s, t) = (first.source(), first.target());
    let mut signed: BTreeMap<(NodeId, NodeId), i128> = BTreeMap::new();
    for (p, &r) in problem.paths.iter().zip(&allocation.amounts) {
        for (u, v) in p.edges() {
            *signed.entry((u, v)).or_default() += r as i128;
            *signed.entry((v, u)).or_default() -= r as i128;
        }
    }
    let mut flow: BTreeMap<(NodeId, NodeId), Amount> =
        signed.into_iter().filter(|(_, f)| *f > 0).map(|(k, f)| (k, f as Amount)).collect();
    let mut legs = Vec::new();
    loop {
        // BFS over positive net flow, smallest ids first
        let mut parent: BTreeMap<NodeId, NodeId> = BTreeMap::new();
        let mut queue = std::collections::VecDeque::from([s]);
        let mut seen = BTreeSet::from([s]);
        while let Some(u) = queue.pop_front() {
            if u == t {
                break;
            }
            for (&(_, v), _) in flow.range((u, NodeId(0))..=(u, NodeId(u32::MAX))) {
                if seen.insert(v) {
                    parent.insert(v, u);
                    queue.push_back(v);
                }
            }
        }
        if !seen.contains(&t) {
            break;
        }
        let mut hops = vec![t];
        while *hops.last().expect("non-empty") != s {
            let prev = parent[hops.last().expect("non-empty")];
            hops.push(prev);
        }
        hops.reverse();
        let path = Path::new(hops).expect("BFS tree paths are simple");
        let amount = path.edges().map(|e| flow[&e]).min().expect("at least one hop");
        for e in path.edges() {
            let left = flow[&e] - amount;
            if left == 0 {
                flow.remove(&e);
            } else {
                flow.insert(e, left);
            }
        }
        legs.push((path, amount));
    }
    legs
}

/// Checks `allocation` against the demand and capacity rows.
pub fn check_allocation(problem: &SplitProblem, allocation: &Allocation) -> Result<(), SplitError> {
    if allocation.amounts.len() != problem.paths.len() {
        return Err(SplitError::LengthMismatch {
            expected: problem.paths.len(),
            got: allocation.amounts.len(),
        });
    }
    let program = problem.program()?;
    match program.violation(&allocation.amounts, problem.demand) {
        Some(msg) => Err(SplitError::ConstraintViolation(msg)),
        None => Ok(()),
    }
}

/// Exact total fee of `allocation`, base fees included.
pub fn allocation_fee(problem: &SplitProblem, allocation: &Allocation) -> Result<Ratio<u128>, SplitError> {
    check_allocation(problem, allocation)?;
    let mut total = Ratio::<u128>::zero();
    for (path, &r) in problem.paths.iter().zip(&allocation.amounts) {
        for (u, v) in path.edges() {
            let fee = problem.fees.get(&(u, v)).ok_or(SplitError::MissingFee(u, v))?;
            total += fee.fee(r);
        }
    }
    Ok(total)
}

/// Total fee rounded up to whole units.
pub fn allocation_cost(problem: &SplitProblem, allocation: &Allocation) -> Result<Amount, SplitError> {
    let fee = allocation_fee(problem, allocation)?;
    Ok(fee.ceil().to_integer() as Amount)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(ids: &[u32]) -> Path {
        Path::new(ids.iter().map(|&i| NodeId(i)).collect()).unwrap()
    }

    /// Every direction of every path gets capacity `cap` and rate `ppm`.
    fn problem(paths: Vec<Path>, cap: Amount, ppm: u64, demand: Amount) -> SplitProblem {
        let mut capacities = CapacityMatrix::new();
        let mut fees = BTreeMap::new();
        for p in &paths {
            for (u, v) in p.edges() {
                for (a, b) in [(u, v), (v, u)] {
                    capacities.set(a, b, cap);
                    fees.insert((a, b), FeeSchedule::proportional(ppm));
                }
            }
        }
        SplitProblem { paths, capacities, fees, demand, rule: CapacityRule::Netted }
    }

    #[test]
    fn single_path_is_forced() {
        let p = problem(vec![path(&[1, 2, 3])], 100, 0, 60);
        assert_eq!(solve_min_fee_split(&p).unwrap().amounts, vec![60]);
    }

    #[test]
    fn cheaper_path_fills_first() {
        let mut p = problem(vec![path(&[1, 2, 9]), path(&[1, 3, 9])], 50, 0, 60);
        p.fees.insert((NodeId(1), NodeId(2)), FeeSchedule::proportional(10_000));
        p.fees.insert((NodeId(1), NodeId(3)), FeeSchedule::proportional(20_000));
        let a = solve_min_fee_split(&p).unwrap();
        assert_eq!(a.amounts, vec![50, 10]);
        assert_eq!(allocation_fee(&p, &a).unwrap(), Ratio::new(7, 10));
        assert_eq!(allocation_cost(&p, &a).unwrap(), 1);
    }

    #[test]
    fn shared_channel_same_direction_is_infeasible() {
        // both paths cross 2->3
        let mut p = problem(vec![path(&[1, 2, 3, 4]), path(&[1, 5, 2, 3, 6, 4])], 100, 0, 60);
        p.capacities.set(NodeId(2), NodeId(3), 40);
        assert_eq!(solve_min_fee_split(&p), Err(SplitError::Infeasible { demand: 60 }));
        assert_eq!(sequential_fill(&p), Err(SplitError::Infeasible { demand: 60 }));
    }

    #[test]
    fn opposite_directions_offset_under_netting() {
        // path A crosses 2->3, path B crosses 3->2
        let mut p = problem(vec![path(&[1, 2, 3, 4]), path(&[1, 3, 2, 4])], 100, 0, 60);
        p.capacities.set(NodeId(2), NodeId(3), 40);
        p.capacities.set(NodeId(3), NodeId(2), 40);
        let a = solve_min_fee_split(&p).unwrap();
        assert_eq!(a.total(), 60);
        check_allocation(&p, &a).unwrap();

        p.rule = CapacityRule::Gross;
        let g = solve_min_fee_split(&p).unwrap();
        assert!(g.amounts.iter().all(|&r| r <= 40));
        assert_eq!(g.total(), 60);
    }

    #[test]
    fn cost_sums_hop_fees() {
        let mut p = problem(vec![path(&[1, 2, 3])], 500, 0, 100);
        p.fees.insert((NodeId(1), NodeId(2)), FeeSchedule::proportional(10_000));
        p.fees.insert((NodeId(2), NodeId(3)), FeeSchedule::proportional(20_000));
        let a = Allocation { amounts: vec![100] };
        assert_eq!(allocation_cost(&p, &a).unwrap(), 3);
        let zero = problem(vec![path(&[1, 2, 3])], 500, 0, 100);
        assert_eq!(allocation_cost(&zero, &a).unwrap(), 0);
    }

    #[test]
    fn base_fee_only_on_used_paths() {
        let mut p = problem(vec![path(&[1, 2]), path(&[1, 3, 2])], 100, 0, 10);
        p.fees.insert((NodeId(1), NodeId(3)), FeeSchedule { base: 7, rate_ppm: 0 });
        let a = Allocation { amounts: vec![10, 0] };
        assert_eq!(allocation_cost(&p, &a).unwrap(), 0);
        let b = Allocation { amounts: vec![5, 5] };
        assert_eq!(allocation_cost(&p, &b).unwrap(), 7);
    }

    #[test]
    fn cost_rejects_bad_allocations() {
        let p = problem(vec![path(&[1, 2])], 10, 0, 10);
        assert!(matches!(
            allocation_cost(&p, &Allocation { amounts: vec![9] }),
            Err(SplitError::ConstraintViolation(_))
        ));
        let q = problem(vec![path(&[1, 2])], 5, 0, 10);
        assert!(matches!(
            allocation_cost(&q, &Allocation { amounts: vec![10] }),
            Err(SplitError::ConstraintViolation(_))
        ));
        assert!(matches!(
            allocation_cost(&p, &Allocation { amounts: vec![] }),
            Err(SplitError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn missing_capacity_is_reported() {
        let mut p = problem(vec![path(&[1, 2])], 10, 0, 5);
        p.capacities = CapacityMatrix::new();
        assert_eq!(solve_min_fee_split(&p), Err(SplitError::MissingCapacity(NodeId(1), NodeId(2))));
    }

    #[test]
    fn fractional_vertex_is_integerized() {
        // each capacity-3 channel is shared by two of the three paths,
        // so the relaxation peaks at 1.5 per path
        let paths = vec![path(&[1, 2, 3, 4, 9]), path(&[1, 3, 4, 2, 9]), path(&[1, 4, 2, 3, 9])];
        let mut p = problem(paths, 100, 1_000, 4);
        for (u, v, c) in [(2, 3, 3), (3, 4, 3), (4, 2, 3)] {
            p.capacities.set(NodeId(u), NodeId(v), c);
        }
        p.fees.insert((NodeId(1), NodeId(2)), FeeSchedule::proportional(500));
        let a = solve_min_fee_split(&p).unwrap();
        check_allocation(&p, &a).unwrap();
    }

    #[test]
    fn net_flow_decomposition_cancels_offsets() {
        // A crosses 2->3, B crosses 3->2: net flow is 1-2-4 and 1-3-4
        let mut p = problem(vec![path(&[1, 2, 3, 4]), path(&[1, 3, 2, 4])], 100, 0, 60);
        p.capacities.set(NodeId(2), NodeId(3), 40);
        p.capacities.set(NodeId(3), NodeId(2), 0);
        let a = Allocation { amounts: vec![35, 25] };
        check_allocation(&p, &a).unwrap();
        let legs = decompose_net_flow(&p, &a);
        let shape: Vec<(Vec<u32>, Amount)> =
            legs.iter().map(|(q, r)| (q.nodes().iter().map(|n| n.0).collect(), *r)).collect();
        assert_eq!(shape, vec![(vec![1, 2, 4], 25), (vec![1, 3, 4], 25), (vec![1, 2, 3, 4], 10)]);
        assert_eq!(legs.iter().map(|l| l.1).sum::<Amount>(), 60);
    }

    #[test]
    fn sequential_fill_uses_discovery_order() {
        let p = problem(vec![path(&[1, 2, 9]), path(&[1, 3, 9])], 50, 0, 60);
        assert_eq!(sequential_fill(&p).unwrap().amounts, vec![50, 10]);
    }
}
