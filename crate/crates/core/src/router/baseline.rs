use super::flash::commit_atomically;
use super::{FailureReason, RoutingOutcome};
use crate::flowpath::{bfs_feasible_shortest, edge_disjoint_shortest, CapacityMatrix, Path};
use crate::graph::Amount;
use crate::simnet::{Handle, Ticket};
use crate::workload::Payment;

type Legs = Vec<(Path, Amount)>;

pub(super) async fn route_sp(net: &Handle, payment: &Payment, _out: &mut RoutingOutcome) -> Result<Legs, FailureReason> {
    let path = net
        .with(|n| bfs_feasible_shortest(n.view(), &CapacityMatrix::new(), payment.sender, payment.receiver))
        .ok_or(FailureReason::NoPath)?;
    commit_atomically(net, payment, &[(path, payment.demand)]).await
}

pub(super) async fn route_spider(
    net: &Handle,
    payment: &Payment,
    path_count: usize,
    out: &mut RoutingOutcome,
) -> Result<Legs, FailureReason> {
    let paths = net.with(|n| edge_disjoint_shortest(n.view(), payment.sender, payment.receiver, path_count));
    if paths.is_empty() {
        return Err(FailureReason::NoPath);
    }
    let tickets: Vec<Ticket> = paths.iter().map(|p| net.send_probe(payment.id, p)).collect();
    out.probes += tickets.len() as u64;
    let mut caps = Vec::with_capacity(paths.len());
    for t in tickets {
        let hops = net.probe_result(t).await;
        caps.push(hops.and_then(|h| h.iter().map(|x| x.forward).min()).unwrap_or(0));
    }
    let split = waterfill(&caps, payment.demand).ok_or(FailureReason::InsufficientCapacity)?;
    let legs: Legs = paths.into_iter().zip(split).filter(|(_, r)| *r > 0).collect();
    commit_atomically(net, payment, &legs).await
}

/// Unit-block waterfilling in closed form: every unit goes to the path with
/// the most remaining capacity, lowest index first on ties. `None` when the
/// capacities cannot cover `demand`.
pub fn waterfill(caps: &[Amount], demand: Amount) -> Option<Vec<Amount>> {
    let total: u128 = caps.iter().map(|&c| c as u128).sum();
    if total < demand as u128 {
        return None;
    }
    let above = |level: Amount| -> u128 { caps.iter().map(|&c| c.saturating_sub(level) as u128).sum() };
    // smallest level whose excess fits in the demand
    let (mut lo, mut hi) = (0, caps.iter().copied().max().unwrap_or(0));
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if above(mid) <= demand as u128 {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let level = lo;
    let mut out: Vec<Amount> = caps.iter().map(|&c| c.saturating_sub(level)).collect();
    let mut left = demand as u128 - above(level);
    for (i, &c) in caps.iter().enumerate() {
        if left == 0 {
            break;
        }
        if c >= level && level > 0 {
            out[i] += 1;
            left -= 1;
        }
    }
    debug_assert_eq!(left, 0);
    Some(out)
}
