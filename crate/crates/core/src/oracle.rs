//! Brute-force reference implementations used to cross-check the solvers.
//!
//! Everything here favors obviousness over speed and shares no code with the
//! algorithms it checks.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use num_bigint::BigInt;
use num_rational::{BigRational, Ratio};
use num_traits::{Signed, Zero};

use crate::feeopt::{CapacityRule, SplitProblem};
use crate::flowpath::Path;
use crate::graph::{Amount, NodeId, Topology};

/// Classic Edmonds-Karp max flow with balances as capacities.
pub fn max_flow(topology: &Topology, s: NodeId, t: NodeId) -> u128 {
    let nodes: Vec<NodeId> = topology.nodes().collect();
    let index: BTreeMap<NodeId, usize> = nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let (Some(&si), Some(&ti)) = (index.get(&s), index.get(&t)) else {
        return 0;
    };
    if si == ti {
        return 0;
    }
    let n = nodes.len();
    let mut cap = vec![vec![0u128; n]; n];
    for ((u, v), dir) in topology.directions() {
        cap[index[&u]][index[&v]] += dir.balance as u128;
    }
    let mut flow = 0u128;
    loop {
        let mut parent = vec![usize::MAX; n];
        parent[si] = si;
        let mut queue = VecDeque::from([si]);
        while let Some(u) = queue.pop_front() {
            for v in 0..n {
                if parent[v] == usize::MAX && cap[u][v] > 0 {
                    parent[v] = u;
                    queue.push_back(v);
                }
            }
        }
        if parent[ti] == usize::MAX {
            return flow;
        }
        let mut bottleneck = u128::MAX;
        let mut v = ti;
        while v != si {
            let u = parent[v];
            bottleneck = bottleneck.min(cap[u][v]);
            v = u;
        }
        let mut v = ti;
        while v != si {
            let u = parent[v];
            cap[u][v] -= bottleneck;
            cap[v][u] += bottleneck;
            v = u;
        }
        flow += bottleneck;
    }
}

/// Every simple s-t path, ordered by hop count then node ids.
pub fn all_simple_paths(topology: &Topology, s: NodeId, t: NodeId) -> Vec<Path> {
    fn walk(
        topology: &Topology,
        t: NodeId,
        stack: &mut Vec<NodeId>,
        seen: &mut BTreeSet<NodeId>,
        out: &mut Vec<Vec<NodeId>>,
    ) {
        let u = *stack.last().expect("stack starts with the source");
        if u == t {
            out.push(stack.clone());
            return;
        }
        for &v in topology.neighbors(u) {
            if seen.insert(v) {
                stack.push(v);
                walk(topology, t, stack, seen, out);
                stack.pop();
                seen.remove(&v);
            }
        }
    }
    if s == t || !topology.contains_node(s) {
        return Vec::new();
    }
    let mut out = Vec::new();
    walk(topology, t, &mut vec![s], &mut BTreeSet::from([s]), &mut out);
    out.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    out.into_iter().map(|h| Path::new(h).expect("walk yields simple paths")).collect()
}

/// Dense constraint `a . x <= b` (or `= b` when `eq`).
struct Constraint {
    a: Vec<BigRational>,
    b: BigRational,
    eq: bool,
}

fn rat(v: i128) -> BigRational {
    BigRational::from_integer(BigInt::from(v))
}

fn constraints(problem: &SplitProblem) -> Option<Vec<Constraint>> {
    let n = problem.paths.len();
    let mut out = vec![Constraint { a: vec![rat(1); n], b: rat(problem.demand as i128), eq: true }];
    for i in 0..n {
        let mut a = vec![rat(0); n];
        a[i] = rat(-1);
        out.push(Constraint { a, b: rat(0), eq: false });
    }
    let mut directions: BTreeSet<(NodeId, NodeId)> = BTreeSet::new();
    for p in &problem.paths {
        for w in p.nodes().windows(2) {
            directions.insert((w[0], w[1]));
            directions.insert((w[1], w[0]));
        }
    }
    for (u, v) in directions {
        let a: Vec<BigRational> = problem
            .paths
            .iter()
            .map(|p| {
                let hops = p.nodes();
                let has = |x: NodeId, y: NodeId| hops.windows(2).any(|w| w[0] == x && w[1] == y);
                let mut c = i128::from(has(u, v));
                if problem.rule == CapacityRule::Netted {
                    c -= i128::from(has(v, u));
                }
                rat(c)
            })
            .collect();
        if a.iter().all(|c| !c.is_positive()) {
            continue;
        }
        let cap = problem.capacities.get(u, v)?;
        out.push(Constraint { a, b: rat(cap as i128), eq: false });
    }
    Some(out)
}

/// Solves the square system by Gauss-Jordan; `None` when singular.
fn solve_square(mut m: Vec<Vec<BigRational>>, mut rhs: Vec<BigRational>) -> Option<Vec<BigRational>> {
    let n = rhs.len();
    for col in 0..n {
        let pivot = (col..n).find(|&r| !m[r][col].is_zero())?;
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        let p = m[col][col].clone();
        for j in 0..n {
            m[col][j] = &m[col][j] / &p;
        }
        rhs[col] = &rhs[col] / &p;
        for r in 0..n {
            if r != col && !m[r][col].is_zero() {
                let f = m[r][col].clone();
                for j in 0..n {
                    let d = &f * &m[col][j];
                    m[r][j] -= d;
                }
                let d = &f * &rhs[col];
                rhs[r] -= d;
            }
        }
    }
    Some(rhs)
}

fn path_rates(problem: &SplitProblem) -> Option<Vec<BigRational>> {
    problem
        .paths
        .iter()
        .map(|p| {
            p.nodes().windows(2).try_fold(rat(0), |acc, w| {
                problem.fees.get(&(w[0], w[1])).map(|f| acc + rat(f.rate_ppm as i128))
            })
        })
        .collect()
}

/// Continuous optimum of the proportional objective (ppm units) found by
/// enumerating every basic solution. `None` when infeasible or incomplete.
pub fn split_lp_optimum(problem: &SplitProblem) -> Option<BigRational> {
    let n = problem.paths.len();
    if n == 0 {
        return None;
    }
    let cons = constraints(problem)?;
    let costs = path_rates(problem)?;
    let inequalities: Vec<usize> = (1..cons.len()).collect();
    let mut best: Option<BigRational> = None;
    // the equality is always tight; choose n - 1 more
    let mut pick = Vec::with_capacity(n - 1);
    fn choose(
        from: &[usize],
        k: usize,
        start: usize,
        pick: &mut Vec<usize>,
        visit: &mut dyn FnMut(&[usize]),
    ) {
        if pick.len() == k {
            visit(pick);
            return;
        }
        for i in start..from.len() {
            pick.push(from[i]);
            choose(from, k, i + 1, pick, visit);
            pick.pop();
        }
    }
    let mut visit = |tight: &[usize]| {
        let rows: Vec<&Constraint> = std::iter::once(&cons[0]).chain(tight.iter().map(|&i| &cons[i])).collect();
        let m = rows.iter().map(|c| c.a.clone()).collect();
        let rhs = rows.iter().map(|c| c.b.clone()).collect();
        let Some(x) = solve_square(m, rhs) else {
            return;
        };
        let feasible = cons.iter().all(|c| {
            let lhs = c.a.iter().zip(&x).fold(rat(0), |acc, (a, v)| acc + a * v);
            if c.eq {
                lhs == c.b
            } else {
                lhs <= c.b
            }
        });
        if feasible {
            let obj = costs.iter().zip(&x).fold(rat(0), |acc, (c, v)| acc + c * v);
            if best.as_ref().is_none_or(|b| obj < *b) {
                best = Some(obj);
            }
        }
    };
    choose(&inequalities, n - 1, 0, &mut pick, &mut visit);
    best
}

/// Cheapest integer allocation by exhaustive grid search, with its exact
/// total fee (base fees included).
pub fn split_grid_optimum(problem: &SplitProblem) -> Option<(Vec<Amount>, Ratio<u128>)> {
    let n = problem.paths.len();
    let cons = constraints(problem)?;
    let mut best: Option<(Vec<Amount>, Ratio<u128>)> = None;
    let mut x = vec![0 as Amount; n];
    fn fill(
        i: usize,
        left: Amount,
        x: &mut Vec<Amount>,
        visit: &mut dyn FnMut(&[Amount]),
    ) {
        if i + 1 == x.len() {
            x[i] = left;
            visit(x);
            return;
        }
        for r in 0..=left {
            x[i] = r;
            fill(i + 1, left - r, x, visit);
        }
    }
    let mut visit = |x: &[Amount]| {
        let ok = cons.iter().skip(1).all(|c| {
            let lhs = c.a.iter().zip(x).fold(rat(0), |acc, (a, &v)| acc + a * rat(v as i128));
            lhs <= c.b
        });
        if !ok {
            return;
        }
        let mut fee = Ratio::<u128>::zero();
        for (p, &r) in problem.paths.iter().zip(x) {
            for w in p.nodes().windows(2) {
                match problem.fees.get(&(w[0], w[1])) {
                    Some(f) => fee += f.fee(r),
                    None => return,
                }
            }
        }
        if best.as_ref().is_none_or(|(_, b)| fee < *b) {
            best = Some((x.to_vec(), fee));
        }
    };
    if n == 0 {
        return None;
    }
    fill(0, problem.demand, &mut x, &mut visit);
    best
}

/// Unit-by-unit waterfilling: each unit goes to the path with the largest
/// remaining capacity, lowest index on ties. `None` if capacity runs out.
pub fn waterfill_units(capacities: &[Amount], demand: Amount) -> Option<Vec<Amount>> {
    let mut left = capacities.to_vec();
    let mut out = vec![0; capacities.len()];
    for _ in 0..demand {
        let (i, &c) = left
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(&a.0)))?;
        if c == 0 {
            return None;
        }
        left[i] -= 1;
        out[i] += 1;
    }
    Some(out)
}

