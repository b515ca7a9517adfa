//! Deterministic discrete-event network.
//!
//! Every delivery takes one tick, including the first delivery of a message
//! to the node that created it. Routers are written as `async` functions
//! against [`Handle`]; [`run_workload`] polls them with a no-op waker and
//! advances the event queue whenever every active payment is waiting.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::future::Future;
use std::ops::{Add, AddAssign};
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};

use crate::flowpath::{HopProbe, Path};
use crate::graph::{Amount, NodeId, Topology};
use crate::protocol::{Message, MsgType, NodeState, Output, SenderTxnState, TransIdAllocator};
use crate::workload::Payment;

/// Extra ticks granted on top of a round trip before a reply is given up.
pub const DEFAULT_TIMEOUT_SLACK: u64 = 4;

/// Deliveries per message type.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MessageCounts([u64; 9]);

impl MessageCounts {
    pub fn get(&self, ty: MsgType) -> u64 {
        self.0[ty as usize - 1]
    }

    fn bump(&mut self, ty: MsgType) {
        self.0[ty as usize - 1] += 1;
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    /// PROBE plus PROBE_ACK deliveries.
    pub fn probe_messages(&self) -> u64 {
        self.get(MsgType::Probe) + self.get(MsgType::ProbeAck)
    }
}

impl AddAssign for MessageCounts {
    fn add_assign(&mut self, o: Self) {
        for (a, b) in self.0.iter_mut().zip(o.0) {
            *a += b;
        }
    }
}

impl Add for MessageCounts {
    type Output = Self;
    fn add(mut self, o: Self) -> Self {
        self += o;
        self
    }
}

type CommitHook = Box<dyn FnMut(&mut Topology, &Message)>;

/// Ground-truth ledger, per-node protocol state and the event queue.
pub struct Network {
    ledger: Topology,
    view: Topology,
    nodes: BTreeMap<NodeId, NodeState>,
    allocators: BTreeMap<NodeId, TransIdAllocator>,
    queue: BTreeMap<(u64, u64), (NodeId, Message)>,
    clock: u64,
    seq: u64,
    slack: u64,
    inbox: HashMap<u64, Message>,
    waiting: BTreeSet<(u64, u64)>,
    abandoned: HashSet<u64>,
    owner: HashMap<u64, u64>,
    counts: MessageCounts,
    per_payment: HashMap<u64, MessageCounts>,
    protocol_errors: u64,
    commit_hook: Option<CommitHook>,
}

impl Network {
    pub fn new(topology: Topology) -> Self {
        let ids: Vec<NodeId> = topology.nodes().collect();
        Network {
            view: topology.without_balances(),
            ledger: topology,
            nodes: ids.iter().map(|&n| (n, NodeState::new(n))).collect(),
            allocators: ids.iter().map(|&n| (n, TransIdAllocator::new(n))).collect(),
            queue: BTreeMap::new(),
            clock: 0,
            seq: 0,
            slack: DEFAULT_TIMEOUT_SLACK,
            inbox: HashMap::new(),
            waiting: BTreeSet::new(),
            abandoned: HashSet::new(),
            owner: HashMap::new(),
            counts: MessageCounts::default(),
            per_payment: HashMap::new(),
            protocol_errors: 0,
            commit_hook: None,
        }
    }

    pub fn with_timeout_slack(mut self, slack: u64) -> Self {
        self.slack = slack;
        self
    }

    pub fn ledger(&self) -> &Topology {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut Topology {
        &mut self.ledger
    }

    /// Connectivity and fees, no balances.
    pub fn view(&self) -> &Topology {
        &self.view
    }

    pub fn now(&self) -> u64 {
        self.clock
    }

    pub fn counts(&self) -> MessageCounts {
        self.counts
    }

    pub fn payment_counts(&self, payment_id: u64) -> MessageCounts {
        self.per_payment.get(&payment_id).copied().unwrap_or_default()
    }

    pub fn protocol_errors(&self) -> u64 {
        self.protocol_errors
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeState> {
        self.nodes.get(&id)
    }

    /// Runs `hook` on the ledger every time a sender issues a COMMIT.
    pub fn set_commit_hook(&mut self, hook: impl FnMut(&mut Topology, &Message) + 'static) {
        self.commit_hook = Some(Box::new(hook));
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    pub fn open_holds(&self) -> usize {
        self.nodes.values().map(|n| n.open_holds().count()).sum()
    }

    /// No queued events and no funds on hold.
    pub fn is_quiescent(&self) -> bool {
        self.queue.is_empty() && self.open_holds() == 0
    }

    pub fn next_trans_id(&mut self, node: NodeId) -> u64 {
        self.allocators.entry(node).or_insert_with(|| TransIdAllocator::new(node)).next_id()
    }

    fn enqueue(&mut self, to: NodeId, msg: Message) {
        self.seq += 1;
        self.queue.insert((self.clock + 1, self.seq), (to, msg));
    }

    /// Injects `msg` at its origin on behalf of `payment_id` and returns the
    /// deadline for the reply.
    pub fn send(&mut self, payment_id: u64, msg: Message) -> Ticket {
        if msg.msg_type == MsgType::Commit {
            if let Some(hook) = self.commit_hook.as_mut() {
                hook(&mut self.ledger, &msg);
            }
        }
        let trans_id = msg.trans_id;
        let deadline = self.clock + 2 * msg.path.nodes().len() as u64 + self.slack;
        self.owner.insert(trans_id, payment_id);
        self.abandoned.remove(&trans_id);
        self.enqueue(msg.path.source(), msg);
        self.waiting.insert((deadline, trans_id));
        Ticket { trans_id, deadline }
    }

    /// Delivers the earliest event. Returns false when the queue is empty.
    pub fn deliver_next(&mut self) -> bool {
        let Some(((tick, _), (to, msg))) = self.queue.pop_first() else {
            return false;
        };
        self.clock = tick;
        self.counts.bump(msg.msg_type);
        if let Some(pid) = self.owner.get(&msg.trans_id) {
            self.per_payment.entry(*pid).or_default().bump(msg.msg_type);
        }
        let trans_id = msg.trans_id;
        let Some(node) = self.nodes.get_mut(&to) else {
            log::warn!("message {trans_id:#x} addressed to unknown node {to}");
            self.protocol_errors += 1;
            return true;
        };
        match node.handle(&mut self.ledger, msg) {
            Ok(outputs) => {
                for out in outputs {
                    match out {
                        Output::Send { to, msg } => self.enqueue(to, msg),
                        Output::Deliver(msg) => {
                            if !self.abandoned.contains(&msg.trans_id) {
                                self.inbox.insert(msg.trans_id, msg);
                            }
                        }
                    }
                }
            }
            Err(e) => {
                log::debug!("protocol error: {e}");
                self.protocol_errors += 1;
            }
        }
        true
    }

    /// Delivers every queued event.
    pub fn drain(&mut self) {
        while self.deliver_next() {}
    }

    /// Moves time forward: delivers the next event, or jumps past the
    /// earliest reply deadline if that comes first. Returns false if there
    /// is nothing to do.
    fn step(&mut self) -> bool {
        let head = self.queue.first_key_value().map(|(k, _)| k.0);
        // deadlines already behind the clock belong to replies nobody is
        // polling yet; they resolve when awaited
        let deadline = self.waiting.range((self.clock, 0)..).next().map(|w| w.0);
        match (head, deadline) {
            (Some(h), Some(d)) if h > d => {
                self.clock = self.clock.max(d + 1);
                true
            }
            (Some(_), _) => self.deliver_next(),
            (None, Some(d)) => {
                self.clock = self.clock.max(d + 1);
                true
            }
            (None, None) => false,
        }
    }

    /// Sums `balance(u,v) + balance(v,u)` per channel.
    pub fn channel_totals(topology: &Topology) -> BTreeMap<(NodeId, NodeId), u128> {
        topology
            .channels()
            .map(|(u, v)| {
                let t = topology.balance(u, v).unwrap_or(0) as u128 + topology.balance(v, u).unwrap_or(0) as u128;
                ((u, v), t)
            })
            .collect()
    }

    /// Channel totals counting held funds on their channel.
    pub fn channel_totals_with_holds(&self) -> BTreeMap<(NodeId, NodeId), u128> {
        let mut totals = Self::channel_totals(&self.ledger);
        for node in self.nodes.values() {
            for h in node.open_holds() {
                let (u, v) = h.channel;
                let key = if u < v { (u, v) } else { (v, u) };
                *totals.entry(key).or_default() += h.amount as u128;
            }
        }
        totals
    }

    pub fn prune_settled_holds(&mut self) {
        for n in self.nodes.values_mut() {
            n.prune_settled();
        }
    }
}

/// A sent request awaiting its reply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ticket {
    pub trans_id: u64,
    pub deadline: u64,
}

/// Shared access to the network for routing tasks.
#[derive(Clone)]
pub struct Handle(Rc<RefCell<Network>>);

impl Handle {
    pub fn new(net: Network) -> Self {
        Handle(Rc::new(RefCell::new(net)))
    }

    pub fn with<R>(&self, f: impl FnOnce(&Network) -> R) -> R {
        f(&self.0.borrow())
    }

    pub fn with_mut<R>(&self, f: impl FnOnce(&mut Network) -> R) -> R {
        f(&mut self.0.borrow_mut())
    }

    pub fn now(&self) -> u64 {
        self.0.borrow().clock
    }

    pub fn into_inner(self) -> Result<Network, Handle> {
        Rc::try_unwrap(self.0).map(RefCell::into_inner).map_err(Handle)
    }

    pub fn reply(&self, ticket: Ticket) -> Reply {
        Reply { net: self.0.clone(), ticket, done: false }
    }

    /// Starts a probe along `path` from its source.
    pub fn send_probe(&self, payment_id: u64, path: &Path) -> Ticket {
        let mut net = self.0.borrow_mut();
        let id = net.next_trans_id(path.source());
        net.send(payment_id, Message::probe(id, path.clone()))
    }

    /// Probes `path`; `None` if the probe was lost.
    pub async fn probe(&self, payment_id: u64, path: &Path) -> Option<Vec<HopProbe>> {
        let ticket = self.send_probe(payment_id, path);
        self.probe_result(ticket).await
    }

    pub async fn probe_result(&self, ticket: Ticket) -> Option<Vec<HopProbe>> {
        self.reply(ticket).await.filter(|m| m.msg_type == MsgType::ProbeAck).map(|m| m.capacity)
    }

    /// Registers a sub-payment with `txn` and sends its COMMIT.
    pub fn send_commit(&self, txn: &mut SenderTxnState, path: &Path, amount: Amount) -> Ticket {
        let mut net = self.0.borrow_mut();
        let id = net.next_trans_id(path.source());
        let msg = txn.add(id, path.clone(), amount);
        net.send(txn.payment_id, msg)
    }

    /// Waits for a COMMIT reply and records it. A missing reply counts as a
    /// NACK. Returns whether the sub-payment was acknowledged.
    pub async fn commit_result(&self, txn: &mut SenderTxnState, ticket: Ticket) -> bool {
        match self.reply(ticket).await {
            Some(m) => {
                txn.on_message(&m);
                m.msg_type == MsgType::CommitAck
            }
            None => {
                let nack = txn
                    .subs
                    .iter()
                    .find(|s| s.trans_id == ticket.trans_id)
                    .map(|s| Message {
                        trans_id: s.trans_id,
                        msg_type: MsgType::CommitNack,
                        path: s.path.clone(),
                        capacity: Vec::new(),
                        commit: s.amount,
                    });
                if let Some(n) = nack {
                    txn.on_message(&n);
                }
                false
            }
        }
    }

    pub async fn commit(&self, txn: &mut SenderTxnState, path: &Path, amount: Amount) -> bool {
        let ticket = self.send_commit(txn, path, amount);
        self.commit_result(txn, ticket).await
    }

    /// Commits all sub-payments concurrently. Returns true iff every one
    /// was acknowledged.
    pub async fn commit_all(&self, txn: &mut SenderTxnState, legs: &[(Path, Amount)]) -> bool {
        let tickets: Vec<Ticket> = legs.iter().map(|(p, a)| self.send_commit(txn, p, *a)).collect();
        let mut all = true;
        for t in tickets {
            all &= self.commit_result(txn, t).await;
        }
        all
    }

    async fn settle(&self, txn: &mut SenderTxnState, msgs: Vec<Message>) {
        let tickets: Vec<Ticket> = {
            let mut net = self.0.borrow_mut();
            msgs.into_iter().map(|m| net.send(txn.payment_id, m)).collect()
        };
        for t in tickets {
            if let Some(m) = self.reply(t).await {
                txn.on_message(&m);
            }
        }
    }

    /// Confirms if the acknowledged total covers the requirement, else
    /// reverses; waits for all acknowledgements. Returns success.
    pub async fn finalize(&self, txn: &mut SenderTxnState) -> bool {
        let msgs = txn.finalize();
        self.settle(txn, msgs).await;
        txn.succeeded()
    }

    /// Reverses every acknowledged sub-payment.
    pub async fn abort(&self, txn: &mut SenderTxnState) {
        let msgs = txn.abort();
        self.settle(txn, msgs).await;
    }
}

/// Resolves to the reply for a ticket, or `None` once its deadline passed.
pub struct Reply {
    net: Rc<RefCell<Network>>,
    ticket: Ticket,
    done: bool,
}

impl Future for Reply {
    type Output = Option<Message>;

    fn poll(mut self: Pin<&mut Self>, _: &mut Context<'_>) -> Poll<Self::Output> {
        let Ticket { trans_id, deadline } = self.ticket;
        let mut net = self.net.borrow_mut();
        if let Some(m) = net.inbox.remove(&trans_id) {
            net.waiting.remove(&(deadline, trans_id));
            drop(net);
            self.done = true;
            return Poll::Ready(Some(m));
        }
        if net.clock > deadline {
            net.waiting.remove(&(deadline, trans_id));
            net.abandoned.insert(trans_id);
            drop(net);
            self.done = true;
            return Poll::Ready(None);
        }
        Poll::Pending
    }
}

impl Drop for Reply {
    fn drop(&mut self) {
        if !self.done {
            if let Ok(mut net) = self.net.try_borrow_mut() {
                net.waiting.remove(&(self.ticket.deadline, self.ticket.trans_id));
                net.abandoned.insert(self.ticket.trans_id);
            }
        }
    }
}

/// Outcome of a routed payment together with the messages it caused.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Settled<T> {
    pub outcome: T,
    pub counts: MessageCounts,
}

/// Routes `payments` in order with at most `overlap` in flight at once
/// (1 = strictly sequential, the queue drained between payments).
pub fn run_workload<T, F, Fut>(
    net: Network,
    payments: &[Payment],
    overlap: usize,
    mut route: F,
) -> (Vec<Settled<T>>, Network)
where
    F: FnMut(Handle, Payment) -> Fut,
    Fut: Future<Output = T>,
{
    let overlap = overlap.max(1);
    let handle = Handle::new(net);
    let mut results: Vec<Option<T>> = payments.iter().map(|_| None).collect();
    let mut active: Vec<(usize, Pin<Box<Fut>>)> = Vec::new();
    let mut next = 0;
    let mut cx = Context::from_waker(Waker::noop());
    loop {
        while active.len() < overlap && next < payments.len() {
            if overlap == 1 {
                handle.with_mut(|n| {
                    n.drain();
                    n.prune_settled_holds();
                });
            }
            active.push((next, Box::pin(route(handle.clone(), payments[next]))));
            next += 1;
        }
        let before = active.len();
        let mut i = 0;
        while i < active.len() {
            match active[i].1.as_mut().poll(&mut cx) {
                Poll::Ready(out) => {
                    results[active[i].0] = Some(out);
                    active.remove(i);
                }
                Poll::Pending => i += 1,
            }
        }
        if active.is_empty() && next == payments.len() {
            break;
        }
        if active.len() < before {
            continue;
        }
        let progressed = handle.with_mut(|n| n.step());
        assert!(progressed, "routing tasks wait on replies that can never arrive");
    }
    drop(active);
    let mut net = handle.into_inner().unwrap_or_else(|_| panic!("routing tasks outlived the run"));
    net.drain();
    net.prune_settled_holds();
    let settled = results
        .into_iter()
        .zip(payments)
        .map(|(o, p)| Settled { outcome: o.expect("every payment resolves"), counts: net.payment_counts(p.id) })
        .collect();
    (settled, net)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(ids: &[u32]) -> Path {
        Path::new(ids.iter().map(|&i| NodeId(i)).collect()).unwrap()
    }

    fn line(n: u32, bal: Amount) -> Topology {
        let mut t = Topology::new();
        for i in 0..n - 1 {
            t.connect(NodeId(i), NodeId(i + 1), bal, bal).unwrap();
        }
        t
    }

    fn pay(id: u64, s: u32, t: u32, d: Amount) -> Payment {
        Payment { id, sender: NodeId(s), receiver: NodeId(t), demand: d, seq: id }
    }

    #[test]
    fn probe_round_trip_costs_two_deliveries_per_node() {
        let net = Network::new(line(2, 7));
        let (out, net) = run_workload(net, &[pay(0, 0, 1, 1)], 1, |h, p| async move {
            let start = h.now();
            let r = h.probe(p.id, &path(&[0, 1])).await;
            (r, h.now() - start)
        });
        let (caps, ticks) = &out[0].outcome;
        assert_eq!(caps.as_ref().unwrap()[0].forward, 7);
        assert_eq!(*ticks, 4);
        assert_eq!(out[0].counts.probe_messages(), 4);
        assert_eq!(net.counts().total(), 4);

        let net = Network::new(line(4, 7));
        let (out, _) = run_workload(net, &[pay(0, 0, 3, 1)], 1, |h, p| async move {
            let a = h.send_probe(p.id, &path(&[0, 1, 2, 3]));
            let b = h.send_probe(p.id, &path(&[0, 1]));
            (h.probe_result(a).await.is_some(), h.probe_result(b).await.is_some())
        });
        assert_eq!(out[0].outcome, (true, true));
        assert_eq!(out[0].counts.probe_messages(), 2 * 4 + 2 * 2);
    }

    #[test]
    fn lost_probe_times_out() {
        // 0-1 exists in the view but 1-2 is missing from the ledger
        let mut t = line(3, 5);
        let net = {
            let mut n = Network::new(t.clone());
            t.remove_channel(NodeId(1), NodeId(2)).unwrap();
            *n.ledger_mut() = t;
            n
        };
        let (out, net) = run_workload(net, &[pay(0, 0, 2, 1)], 1, |h, p| async move {
            h.probe(p.id, &path(&[0, 1, 2])).await
        });
        assert_eq!(out[0].outcome, None);
        assert_eq!(net.protocol_errors(), 1);
        assert!(net.now() > 2 * 3 + DEFAULT_TIMEOUT_SLACK);
    }

    #[test]
    fn commit_and_finalize_transfer_funds() {
        let net = Network::new(line(3, 10));
        let (out, net) = run_workload(net, &[pay(0, 0, 2, 4)], 1, |h, p| async move {
            let mut txn = SenderTxnState::new(p.id, p.demand);
            let ok = h.commit(&mut txn, &path(&[0, 1, 2]), 4).await;
            ok && h.finalize(&mut txn).await
        });
        assert!(out[0].outcome);
        assert_eq!(net.ledger().balance(NodeId(1), NodeId(2)), Some(6));
        assert_eq!(net.ledger().balance(NodeId(2), NodeId(1)), Some(14));
        assert!(net.is_quiescent());
        let c = out[0].counts;
        assert_eq!(c.get(MsgType::Commit) + c.get(MsgType::CommitAck), 6);
        assert_eq!(c.get(MsgType::Confirm) + c.get(MsgType::ConfirmAck), 6);
    }

    #[test]
    fn commit_hook_forces_nack_and_overlap_conserves() {
        let mut net = Network::new(line(3, 10));
        net.set_commit_hook(|ledger, msg| {
            if msg.commit == 9 {
                let b = ledger.balance(NodeId(1), NodeId(2)).unwrap();
                ledger.apply_payment_delta(NodeId(1), NodeId(2), b).unwrap();
            }
        });
        let before = Network::channel_totals(net.ledger());
        let payments = [pay(0, 0, 2, 9), pay(1, 0, 2, 3), pay(2, 2, 0, 5)];
        let (out, net) = run_workload(net, &payments, 3, |h, p| async move {
            let mut txn = SenderTxnState::new(p.id, p.demand);
            let hops: Vec<u32> = if p.sender == NodeId(0) { vec![0, 1, 2] } else { vec![2, 1, 0] };
            let ok = h.commit(&mut txn, &path(&hops), p.demand).await;
            if ok {
                h.finalize(&mut txn).await
            } else {
                h.abort(&mut txn).await;
                false
            }
        });
        assert!(!out[0].outcome);
        assert_eq!(Network::channel_totals(net.ledger()), before);
        assert!(net.is_quiescent());
    }

    #[test]
    fn sequential_runs_are_reproducible() {
        let run = || {
            let net = Network::new(line(3, 10));
            let payments: Vec<Payment> = (0..5).map(|i| pay(i, 0, 2, 3)).collect();
            let (out, net) = run_workload(net, &payments, 1, |h, p| async move {
                let mut txn = SenderTxnState::new(p.id, p.demand);
                let ok = h.commit(&mut txn, &path(&[0, 1, 2]), p.demand).await;
                let done = if ok { h.finalize(&mut txn).await } else { h.abort(&mut txn).await; false };
                (done, h.now())
            });
            (out.into_iter().map(|s| (s.outcome, s.counts)).collect::<Vec<_>>(), net.ledger().clone())
        };
        let (a, la) = run();
        assert_eq!(a.iter().filter(|(o, _)| o.0).count(), 3);
        assert_eq!((a, la), run());
    }

    #[test]
    fn empty_workload() {
        let (out, net) = run_workload(Network::new(line(2, 1)), &[], 1, |_, _| async {});
        assert!(out.is_empty());
        assert_eq!(net.now(), 0);
    }

    #[test]
    fn short_deadline_awaited_after_long_one() {
        let net = Network::new(line(6, 5));
        let (out, _) = run_workload(net, &[pay(0, 0, 5, 1)], 1, |h, p| async move {
            let long = h.send_probe(p.id, &path(&[0, 1, 2, 3, 4, 5]));
            let short = h.send_probe(p.id, &path(&[0, 1]));
            let a = h.probe_result(long).await;
            let b = h.probe_result(short).await;
            (a.is_some(), b.is_some())
        });
        assert_eq!(out[0].outcome, (true, true));
    }
}
