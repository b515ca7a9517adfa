//! Source-routed probing and two-phase commit.
//!
//! Each message carries its full path and is delivered to every node on it in
//! order, starting with the node that created it. Funds are held on COMMIT,
//! turned into transfers when CONFIRM_ACK travels back, and released by
//! COMMIT_NACK or REVERSE.

pub mod wire;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::flowpath::{HopProbe, Path};
use crate::graph::{Amount, NodeId, Topology};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum MsgType {
    Probe = 1,
    ProbeAck = 2,
    Commit = 3,
    CommitAck = 4,
    CommitNack = 5,
    Confirm = 6,
    ConfirmAck = 7,
    Reverse = 8,
    ReverseAck = 9,
}

impl MsgType {
    pub const ALL: [MsgType; 9] = [
        MsgType::Probe,
        MsgType::ProbeAck,
        MsgType::Commit,
        MsgType::CommitAck,
        MsgType::CommitNack,
        MsgType::Confirm,
        MsgType::ConfirmAck,
        MsgType::Reverse,
        MsgType::ReverseAck,
    ];

    pub fn from_u8(v: u8) -> Option<MsgType> {
        Self::ALL.get((v as usize).wrapping_sub(1)).copied()
    }

    pub fn is_probe(self) -> bool {
        matches!(self, MsgType::Probe | MsgType::ProbeAck)
    }

    pub fn name(self) -> &'static str {
        match self {
            MsgType::Probe => "PROBE",
            MsgType::ProbeAck => "PROBE_ACK",
            MsgType::Commit => "COMMIT",
            MsgType::CommitAck => "COMMIT_ACK",
            MsgType::CommitNack => "COMMIT_NACK",
            MsgType::Confirm => "CONFIRM",
            MsgType::ConfirmAck => "CONFIRM_ACK",
            MsgType::Reverse => "REVERSE",
            MsgType::ReverseAck => "REVERSE_ACK",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Message {
    pub trans_id: u64,
    pub msg_type: MsgType,
    pub path: Path,
    /// Per-hop probe results in forward hop order.
    pub capacity: Vec<HopProbe>,
    pub commit: Amount,
}

impl Message {
    pub fn probe(trans_id: u64, path: Path) -> Message {
        Message { trans_id, msg_type: MsgType::Probe, path, capacity: Vec::new(), commit: 0 }
    }

    pub fn commit(trans_id: u64, path: Path, amount: Amount) -> Message {
        Message { trans_id, msg_type: MsgType::Commit, path, capacity: Vec::new(), commit: amount }
    }

    fn with(&self, msg_type: MsgType, path: Path) -> Message {
        Message { trans_id: self.trans_id, msg_type, path, capacity: Vec::new(), commit: self.commit }
    }
}

/// Hands out `(node << 32) | counter` identifiers.
#[derive(Clone, Debug)]
pub struct TransIdAllocator {
    node: NodeId,
    counter: u32,
}

impl TransIdAllocator {
    pub fn new(node: NodeId) -> Self {
        TransIdAllocator { node, counter: 0 }
    }

    pub fn next_id(&mut self) -> u64 {
        let id = ((self.node.0 as u64) << 32) | self.counter as u64;
        self.counter = self.counter.wrapping_add(1);
        id
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HoldPhase {
    Committed,
    Confirmed,
    Reversed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PendingHold {
    pub trans_id: u64,
    pub channel: (NodeId, NodeId),
    pub amount: Amount,
    pub phase: HoldPhase,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Output {
    /// Deliver `msg` to node `to` one tick later.
    Send { to: NodeId, msg: Message },
    /// Hand `msg` to the local sender application.
    Deliver(Message),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("node {node} is not on the path of transaction {trans_id:#x}")]
    NotOnPath { node: NodeId, trans_id: u64 },
    #[error("node {node} has no open hold for {ty} of transaction {trans_id:#x}")]
    UnknownTransaction { node: NodeId, trans_id: u64, ty: &'static str },
    #[error("node {node} already saw COMMIT for transaction {trans_id:#x}")]
    DuplicateCommit { node: NodeId, trans_id: u64 },
    #[error("node {node} has no channel to {next}")]
    MissingChannel { node: NodeId, next: NodeId },
    #[error("probe reached node {node} with {entries} entries at hop {hop}")]
    ProbeOutOfOrder { node: NodeId, entries: usize, hop: usize },
}

/// Per-node protocol state: the holds this node placed on its outgoing
/// channels, keyed by transaction.
#[derive(Clone, Debug)]
pub struct NodeState {
    pub id: NodeId,
    holds: BTreeMap<u64, PendingHold>,
}

impl NodeState {
    pub fn new(id: NodeId) -> Self {
        NodeState { id, holds: BTreeMap::new() }
    }

    pub fn hold(&self, trans_id: u64) -> Option<&PendingHold> {
        self.holds.get(&trans_id)
    }

    /// Holds still in the Committed phase.
    pub fn open_holds(&self) -> impl Iterator<Item = &PendingHold> + '_ {
        self.holds.values().filter(|h| h.phase == HoldPhase::Committed)
    }

    /// Forgets holds that reached a terminal phase.
    pub fn prune_settled(&mut self) {
        self.holds.retain(|_, h| h.phase == HoldPhase::Committed);
    }

    pub fn handle(&mut self, ledger: &mut Topology, msg: Message) -> Result<Vec<Output>, ProtocolError> {
        let nodes = msg.path.nodes();
        let idx = nodes
            .iter()
            .position(|&n| n == self.id)
            .ok_or(ProtocolError::NotOnPath { node: self.id, trans_id: msg.trans_id })?;
        let last = idx + 1 == nodes.len();
        let next = nodes.get(idx + 1).copied();
        let onward = |msg: Message| match next {
            Some(to) => Output::Send { to, msg },
            None => Output::Deliver(msg),
        };
        let me = self.id;
        let reply = |msg: &Message, ty: MsgType| Output::Send { to: me, msg: msg.with(ty, msg.path.reversed()) };

        match msg.msg_type {
            MsgType::Probe if last => {
                let mut ack = msg.with(MsgType::ProbeAck, msg.path.reversed());
                ack.capacity = msg.capacity;
                Ok(vec![Output::Send { to: me, msg: ack }])
            }
            MsgType::Probe => {
                let v = next.expect("not last");
                if msg.capacity.len() != idx {
                    return Err(ProtocolError::ProbeOutOfOrder { node: me, entries: msg.capacity.len(), hop: idx });
                }
                let (Some(fwd), Some(rev)) = (ledger.direction(me, v), ledger.direction(v, me)) else {
                    return Err(ProtocolError::MissingChannel { node: me, next: v });
                };
                let hop = HopProbe {
                    forward: fwd.balance,
                    reverse: rev.balance,
                    forward_rate_ppm: fwd.fee.rate_ppm,
                    reverse_rate_ppm: rev.fee.rate_ppm,
                };
                let mut msg = msg;
                msg.capacity.push(hop);
                Ok(vec![onward(msg)])
            }
            MsgType::Commit if last => Ok(vec![reply(&msg, MsgType::CommitAck)]),
            MsgType::Commit => {
                let v = next.expect("not last");
                if self.holds.contains_key(&msg.trans_id) {
                    return Err(ProtocolError::DuplicateCommit { node: me, trans_id: msg.trans_id });
                }
                if ledger.debit(me, v, msg.commit).is_ok() {
                    self.holds.insert(
                        msg.trans_id,
                        PendingHold { trans_id: msg.trans_id, channel: (me, v), amount: msg.commit, phase: HoldPhase::Committed },
                    );
                    return Ok(vec![onward(msg)]);
                }
                if idx == 0 {
                    return Ok(vec![Output::Deliver(msg.with(MsgType::CommitNack, msg.path.clone()))]);
                }
                let upstream: Vec<NodeId> = nodes[..=idx].iter().rev().copied().collect();
                let path = Path::new(upstream).expect("prefix of a simple path");
                Ok(vec![Output::Send { to: me, msg: msg.with(MsgType::CommitNack, path) }])
            }
            MsgType::CommitNack => {
                if let Some(h) = self.holds.get_mut(&msg.trans_id) {
                    if h.phase == HoldPhase::Committed {
                        ledger.credit(h.channel.0, h.channel.1, h.amount).expect("held channel exists");
                        h.phase = HoldPhase::Reversed;
                    }
                }
                Ok(vec![onward(msg)])
            }
            MsgType::Confirm | MsgType::Reverse if last => {
                let ack = if msg.msg_type == MsgType::Confirm { MsgType::ConfirmAck } else { MsgType::ReverseAck };
                Ok(vec![reply(&msg, ack)])
            }
            MsgType::Confirm => match self.holds.get(&msg.trans_id) {
                Some(h) if h.phase != HoldPhase::Reversed => Ok(vec![onward(msg)]),
                _ => Err(ProtocolError::UnknownTransaction { node: me, trans_id: msg.trans_id, ty: "CONFIRM" }),
            },
            MsgType::Reverse => match self.holds.get_mut(&msg.trans_id) {
                Some(h) if h.phase != HoldPhase::Confirmed => {
                    if h.phase == HoldPhase::Committed {
                        ledger.credit(h.channel.0, h.channel.1, h.amount).expect("held channel exists");
                        h.phase = HoldPhase::Reversed;
                    }
                    Ok(vec![onward(msg)])
                }
                _ => Err(ProtocolError::UnknownTransaction { node: me, trans_id: msg.trans_id, ty: "REVERSE" }),
            },
            MsgType::ConfirmAck => {
                if let Some(h) = self.holds.get_mut(&msg.trans_id) {
                    if h.phase == HoldPhase::Committed {
                        let (u, v) = h.channel;
                        ledger.credit(v, u, h.amount).expect("held channel exists");
                        h.phase = HoldPhase::Confirmed;
                    }
                }
                Ok(vec![onward(msg)])
            }
            MsgType::ProbeAck | MsgType::CommitAck | MsgType::ReverseAck => Ok(vec![onward(msg)]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubStatus {
    InFlight,
    Acked,
    Nacked,
    Confirmed,
    Reversed,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubPayment {
    pub trans_id: u64,
    pub path: Path,
    pub amount: Amount,
    pub status: SubStatus,
}

/// Sender-side bookkeeping for one (possibly multipath) payment.
///
/// The payment is confirmed when the acknowledged sub-payments add up to the
/// required amount; otherwise every acknowledged sub-payment is reversed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SenderTxnState {
    pub payment_id: u64,
    pub required: Amount,
    pub subs: Vec<SubPayment>,
    decision: Option<bool>,
}

impl SenderTxnState {
    pub fn new(payment_id: u64, required: Amount) -> Self {
        SenderTxnState { payment_id, required, subs: Vec::new(), decision: None }
    }

    /// Registers a sub-payment and returns its COMMIT.
    pub fn add(&mut self, trans_id: u64, path: Path, amount: Amount) -> Message {
        self.subs.push(SubPayment { trans_id, path: path.clone(), amount, status: SubStatus::InFlight });
        Message::commit(trans_id, path, amount)
    }

    /// Applies a reply addressed to this payment. Returns false for foreign
    /// or stale messages.
    pub fn on_message(&mut self, msg: &Message) -> bool {
        let Some(sub) = self.subs.iter_mut().find(|s| s.trans_id == msg.trans_id) else {
            return false;
        };
        let next = match (msg.msg_type, sub.status) {
            (MsgType::CommitAck, SubStatus::InFlight) => SubStatus::Acked,
            (MsgType::CommitNack, SubStatus::InFlight) => SubStatus::Nacked,
            (MsgType::ConfirmAck, SubStatus::Acked) if self.decision == Some(true) => SubStatus::Confirmed,
            (MsgType::ReverseAck, SubStatus::Acked) if self.decision == Some(false) => SubStatus::Reversed,
            _ => return false,
        };
        sub.status = next;
        true
    }

    pub fn status(&self, trans_id: u64) -> Option<SubStatus> {
        self.subs.iter().find(|s| s.trans_id == trans_id).map(|s| s.status)
    }

    pub fn acked_total(&self) -> u128 {
        self.subs
            .iter()
            .filter(|s| matches!(s.status, SubStatus::Acked | SubStatus::Confirmed))
            .map(|s| s.amount as u128)
            .sum()
    }

    pub fn in_flight(&self) -> usize {
        self.subs.iter().filter(|s| s.status == SubStatus::InFlight).count()
    }

    pub fn decision(&self) -> Option<bool> {
        self.decision
    }

    /// Decides the payment and returns the CONFIRM or REVERSE messages.
    /// Confirms iff nothing is in flight and the acknowledged total equals
    /// the required amount.
    pub fn finalize(&mut self) -> Vec<Message> {
        if self.decision.is_some() {
            return Vec::new();
        }
        let success = self.in_flight() == 0 && self.acked_total() == self.required as u128;
        self.decision = Some(success);
        let ty = if success { MsgType::Confirm } else { MsgType::Reverse };
        self.subs
            .iter()
            .filter(|s| s.status == SubStatus::Acked)
            .map(|s| Message { trans_id: s.trans_id, msg_type: ty, path: s.path.clone(), capacity: Vec::new(), commit: s.amount })
            .collect()
    }

    /// Decides failure regardless of acknowledgements.
    pub fn abort(&mut self) -> Vec<Message> {
        if self.decision.is_some() {
            return Vec::new();
        }
        self.decision = Some(false);
        self.subs
            .iter()
            .filter(|s| s.status == SubStatus::Acked)
            .map(|s| Message { trans_id: s.trans_id, msg_type: MsgType::Reverse, path: s.path.clone(), capacity: Vec::new(), commit: s.amount })
            .collect()
    }

    /// Decided and every acknowledged sub-payment reached a terminal state.
    pub fn is_complete(&self) -> bool {
        self.decision.is_some() && self.subs.iter().all(|s| !matches!(s.status, SubStatus::InFlight | SubStatus::Acked))
    }

    pub fn succeeded(&self) -> bool {
        self.decision == Some(true) && self.is_complete()
    }
}
