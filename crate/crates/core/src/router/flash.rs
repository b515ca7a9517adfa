use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{FailureReason, Router, RoutingOutcome, RoutingTable, SplitMode};
use crate::feeopt::{
    check_allocation, decompose_net_flow, sequential_fill, solve_min_fee_split, Allocation, CapacityRule,
    SplitError, SplitProblem,
};
use crate::flowpath::{ModifiedEdmondsKarp, Path};
use crate::graph::{Amount, FeeSchedule};
use crate::protocol::{SenderTxnState, SubStatus};
use crate::simnet::Handle;
use crate::workload::Payment;

type Legs = Vec<(Path, Amount)>;

/// Acknowledged sub-payments of a settled transaction.
pub(super) fn confirmed_legs(txn: &SenderTxnState) -> Legs {
    txn.subs
        .iter()
        .filter(|s| s.status == SubStatus::Confirmed)
        .map(|s| (s.path.clone(), s.amount))
        .collect()
}

/// Commits `legs` concurrently, then confirms or reverses all of them.
pub(super) async fn commit_atomically(net: &Handle, payment: &Payment, legs: &[(Path, Amount)]) -> Result<Legs, FailureReason> {
    let mut txn = SenderTxnState::new(payment.id, payment.demand);
    if net.commit_all(&mut txn, legs).await && net.finalize(&mut txn).await {
        Ok(confirmed_legs(&txn))
    } else {
        net.abort(&mut txn).await;
        Err(FailureReason::CommitAborted)
    }
}

impl Router {
    pub(super) async fn route_elephant(
        &self,
        net: &Handle,
        payment: &Payment,
        out: &mut RoutingOutcome,
    ) -> Result<Legs, FailureReason> {
        let mut search = ModifiedEdmondsKarp::new(payment.sender, payment.receiver, payment.demand, self.config.k);
        while let Some(path) = net.with(|n| search.next_path(n.view())) {
            out.probes += 1;
            let hops = net.probe(payment.id, &path).await;
            search.record_probe(&path, hops.as_deref());
        }
        if search.iterations() == 0 {
            return Err(FailureReason::NoPath);
        }
        let found = search.finish().map_err(|_| FailureReason::InsufficientFlow)?;

        let paths: Vec<Path> = found.paths.paths().cloned().collect();
        let fees = net.with(|n| {
            let mut fees = BTreeMap::new();
            for (u, v) in paths.iter().flat_map(|p| p.edges()) {
                let listed = n.view().fee(u, v).unwrap_or_default();
                let rate = found.rates.get(&(u, v)).copied().unwrap_or(listed.rate_ppm);
                fees.insert((u, v), FeeSchedule { base: listed.base, rate_ppm: rate });
            }
            fees
        });
        let mut problem = SplitProblem {
            paths,
            capacities: found.capacities,
            fees,
            demand: payment.demand,
            rule: CapacityRule::Netted,
        };
        let legs = self.split(&mut problem).map_err(|_| FailureReason::SplitInfeasible)?;
        commit_atomically(net, payment, &legs).await
    }

    /// Chooses per-path amounts that can be held simultaneously.
    ///
    /// Holds on one direction are not offset by pending flow in the other,
    /// so a netted split that overdraws a direction is re-solved with each
    /// direction bounded on its own; if that has no solution the netted
    /// split is executed along its net-flow decomposition.
    fn split(&self, problem: &mut SplitProblem) -> Result<Legs, SplitError> {
        let as_legs = |problem: &SplitProblem, a: Allocation| -> Legs {
            problem.paths.iter().cloned().zip(a.amounts).filter(|(_, r)| *r > 0).collect()
        };
        if self.config.split == SplitMode::Sequential {
            problem.rule = CapacityRule::Gross;
            let a = sequential_fill(problem)?;
            return Ok(as_legs(problem, a));
        }
        problem.rule = CapacityRule::Netted;
        let netted = solve_min_fee_split(problem)?;
        problem.rule = CapacityRule::Gross;
        if check_allocation(problem, &netted).is_ok() {
            return Ok(as_legs(problem, netted));
        }
        match solve_min_fee_split(problem) {
            Ok(gross) => Ok(as_legs(problem, gross)),
            Err(SplitError::Infeasible { .. }) => {
                problem.rule = CapacityRule::Netted;
                Ok(decompose_net_flow(problem, &netted))
            }
            Err(e) => Err(e),
        }
    }

    pub(super) async fn route_mice(
        &self,
        net: &Handle,
        payment: &Payment,
        out: &mut RoutingOutcome,
    ) -> Result<Legs, FailureReason> {
        let (s, t, now) = (payment.sender, payment.receiver, payment.seq);
        let (m, timeout) = (self.config.m, self.config.table_timeout);
        let stored: Vec<Path> = net.with(|n| {
            let mut tables = self.tables.borrow_mut();
            let table = tables.entry(s).or_insert_with(|| RoutingTable::new(s, m, timeout));
            table.evict_idle(now);
            table.lookup(n.view(), t, now).paths.clone()
        });
        if stored.is_empty() {
            return Err(FailureReason::NoPath);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(payment.id);
        let mut order = stored;
        order.shuffle(&mut rng);
        let mut queue: VecDeque<Path> = order.into();

        let mut txn = SenderTxnState::new(payment.id, payment.demand);
        let mut remaining = payment.demand;
        let mut replacements = 0;
        while remaining > 0 {
            let Some(path) = queue.pop_front() else {
                break;
            };
            if net.commit(&mut txn, &path, remaining).await {
                remaining = 0;
                break;
            }
            out.probes += 1;
            let bottleneck = net
                .probe(payment.id, &path)
                .await
                .and_then(|hops| hops.iter().map(|h| h.forward).min())
                .unwrap_or(0);
            if bottleneck == 0 {
                if replacements < m {
                    let fresh = net.with(|n| {
                        self.tables.borrow_mut().get_mut(&s).and_then(|tb| tb.replace(n.view(), t, &path))
                    });
                    if let Some(p) = fresh {
                        replacements += 1;
                        queue.push_back(p);
                    }
                }
                continue;
            }
            let part = remaining.min(bottleneck);
            if net.commit(&mut txn, &path, part).await {
                remaining -= part;
            }
        }
        if remaining == 0 && net.finalize(&mut txn).await {
            Ok(confirmed_legs(&txn))
        } else {
            net.abort(&mut txn).await;
            Err(FailureReason::PathsExhausted)
        }
    }
}
