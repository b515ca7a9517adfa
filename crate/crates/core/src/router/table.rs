//! Per-sender cache of shortest paths to recurring receivers.

use std::collections::BTreeMap;

use crate::flowpath::{yen_k_shortest, Path};
use crate::graph::{NodeId, Topology};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableEntry {
    pub paths: Vec<Path>,
    /// Yen paths handed out so far, replacements included.
    pub next_yen_index: usize,
    pub last_access: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutingTable {
    owner: NodeId,
    m: usize,
    timeout: u64,
    entries: BTreeMap<NodeId, TableEntry>,
}

impl RoutingTable {
    pub fn new(owner: NodeId, m: usize, timeout: u64) -> Self {
        RoutingTable { owner, m, timeout, entries: BTreeMap::new() }
    }

    pub fn owner(&self) -> NodeId {
        self.owner
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, receiver: NodeId) -> Option<&TableEntry> {
        self.entries.get(&receiver)
    }

    /// Paths to `receiver`, computing the top `m` on a miss.
    pub fn lookup(&mut self, view: &Topology, receiver: NodeId, now: u64) -> &TableEntry {
        let (owner, m) = (self.owner, self.m);
        let entry = self.entries.entry(receiver).or_insert_with(|| {
            let paths = yen_k_shortest(view, owner, receiver, m);
            TableEntry { next_yen_index: paths.len(), paths, last_access: now }
        });
        entry.last_access = now;
        entry
    }

    /// Swaps `dead` for the next unused Yen path. Returns the new path, or
    /// `None` when the receiver is unknown, `dead` is not stored, or Yen has
    /// no further paths.
    pub fn replace(&mut self, view: &Topology, receiver: NodeId, dead: &Path) -> Option<Path> {
        let owner = self.owner;
        let entry = self.entries.get_mut(&receiver)?;
        let slot = entry.paths.iter().position(|p| p == dead)?;
        let more = yen_k_shortest(view, owner, receiver, entry.next_yen_index + 1);
        let fresh = more.get(entry.next_yen_index)?.clone();
        entry.next_yen_index += 1;
        entry.paths[slot] = fresh.clone();
        Some(fresh)
    }

    /// Recomputes every entry on `view`.
    pub fn refresh(&mut self, view: &Topology) {
        let (owner, m) = (self.owner, self.m);
        for (&receiver, entry) in self.entries.iter_mut() {
            entry.paths = yen_k_shortest(view, owner, receiver, m);
            entry.next_yen_index = entry.paths.len();
        }
    }

    /// Drops receivers not looked up for longer than the timeout.
    pub fn evict_idle(&mut self, now: u64) {
        let timeout = self.timeout;
        self.entries.retain(|_, e| now.saturating_sub(e.last_access) <= timeout);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n(i: u32) -> NodeId {
        NodeId(i)
    }

    /// Square 0-1-3, 0-2-3 plus a long detour 0-4-5-3.
    fn square() -> Topology {
        let mut t = Topology::new();
        for (u, v) in [(0, 1), (1, 3), (0, 2), (2, 3), (0, 4), (4, 5), (5, 3)] {
            t.connect(n(u), n(v), 1, 1).unwrap();
        }
        t
    }

    #[test]
    fn miss_computes_and_hit_reuses() {
        let view = square();
        let mut table = RoutingTable::new(n(0), 2, 10);
        let first = table.lookup(&view, n(3), 1).clone();
        assert_eq!(first.paths.len(), 2);
        assert_eq!(first.paths[0].nodes(), &[n(0), n(1), n(3)]);
        let again = table.lookup(&view, n(3), 2).clone();
        assert_eq!(again.paths, first.paths);
        assert_eq!(again.last_access, 2);
        table.refresh(&view);
        assert_eq!(table.get(n(3)).unwrap().paths, first.paths);
    }

    #[test]
    fn replacement_walks_down_yen_order() {
        let view = square();
        let mut table = RoutingTable::new(n(0), 2, 10);
        let dead = table.lookup(&view, n(3), 0).paths[0].clone();
        let fresh = table.replace(&view, n(3), &dead).unwrap();
        assert_eq!(fresh.nodes(), &[n(0), n(4), n(5), n(3)]);
        assert_eq!(table.get(n(3)).unwrap().paths[0], fresh);
        let other = table.get(n(3)).unwrap().paths[1].clone();
        assert_eq!(table.replace(&view, n(3), &other), None);
    }

    #[test]
    fn idle_entries_are_evicted() {
        let view = square();
        let mut table = RoutingTable::new(n(0), 2, 5);
        table.lookup(&view, n(3), 0);
        table.lookup(&view, n(5), 4);
        table.evict_idle(6);
        assert!(table.get(n(3)).is_none());
        assert!(table.get(n(5)).is_some());
    }

    #[test]
    fn refresh_drops_dead_paths() {
        let mut view = square();
        let mut table = RoutingTable::new(n(0), 2, 10);
        table.lookup(&view, n(3), 0);
        view.remove_channel(n(1), n(3)).unwrap();
        table.refresh(&view);
        let paths = &table.get(n(3)).unwrap().paths;
        assert!(paths.iter().all(|p| p.exists_in(&view)));
        assert_eq!(paths[0].nodes(), &[n(0), n(2), n(3)]);
    }
}
