//! Banked sector data array, MSHR bookkeeping, and the request distributor
//! that routes a request to the local data array, a remote cache, or L2
//! based on the aggregated tag comparison.

use crate::core::AddressParts;
use crate::tagarray::PresenceVector;
use std::collections::{BTreeMap, VecDeque};

/// Where the distributor sends a request. The remote target is the
/// cluster-local cache index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutingDecision {
    LocalHit,
    RemoteHit(u32),
    MissToL2,
}

/// Routes one load from its presence vector. The local cache always wins
/// when it holds the sector, regardless of remote copies. Among several
/// remote holders the one with the fewest queued data-array requests wins,
/// ties to the lowest cache index.
pub fn distribute(
    local_index: usize,
    presence: &PresenceVector,
    queued_data_requests: &[u64],
) -> RoutingDecision {
    if presence.hit_sector[local_index] {
        return RoutingDecision::LocalHit;
    }
    let mut best: Option<(u64, usize)> = None;
    for (i, &hit) in presence.hit_sector.iter().enumerate() {
        if !hit || i == local_index {
            continue;
        }
        let key = (queued_data_requests[i], i);
        if best.map_or(true, |b| key < b) {
            best = Some(key);
        }
    }
    match best {
        Some((_, i)) => RoutingDecision::RemoteHit(i as u32),
        None => RoutingDecision::MissToL2,
    }
}

/// One data access waiting for a bank, in arrival order with ties broken by
/// (core_id, request_id).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct BankAccess {
    pub core_id: u32,
    pub request_id: u64,
    pub set_index: u64,
}

/// Banked data array of one cache. Banks are pipelined: each accepts one
/// access start per cycle, and the access itself takes `t_data` cycles of
/// latency charged by the engine.
#[derive(Debug, Clone)]
pub struct DataArrayState {
    pub owner_cache_id: u32,
    pub banks: u32,
    next_start: Vec<u64>,
    /// Opaque value tokens per (line address, sector).
    tokens: BTreeMap<(u64, u64), u64>,
}

impl DataArrayState {
    pub fn new(owner_cache_id: u32, banks: u32) -> DataArrayState {
        DataArrayState {
            owner_cache_id,
            banks,
            next_start: vec![0; banks as usize],
            tokens: BTreeMap::new(),
        }
    }

    pub fn bank_of(&self, set_index: u64) -> u32 {
        (set_index % self.banks as u64) as u32
    }

    /// Grants a start cycle to one access arriving at `now`: the bank's next
    /// free cycle, no earlier than `now`.
    pub fn grant(&mut self, set_index: u64, now: u64) -> u64 {
        let bank = self.bank_of(set_index) as usize;
        let start = now.max(self.next_start[bank]);
        self.next_start[bank] = start + 1;
        start
    }

    /// Backlog measure used by the distributor: bank-start slots already
    /// promised beyond `now`, summed over banks.
    pub fn queued_requests(&self, now: u64) -> u64 {
        self.next_start
            .iter()
            .map(|&n| n.saturating_sub(now))
            .sum()
    }

    pub fn write_token(&mut self, line_address: u64, sector: u64, token: u64) {
        self.tokens.insert((line_address, sector), token);
    }

    pub fn read_token(&self, line_address: u64, sector: u64) -> Option<u64> {
        self.tokens.get(&(line_address, sector)).copied()
    }

    pub fn drop_line(&mut self, line_address: u64, sectors_per_line: u64) {
        for s in 0..sectors_per_line {
            self.tokens.remove(&(line_address, s));
        }
    }
}

/// Schedules a batch of same-cycle accesses to one data array. Accesses to
/// distinct banks start at `now`; accesses sharing a bank start on
/// consecutive cycles in (core_id, request_id) order.
pub fn bank_schedule(
    array: &mut DataArrayState,
    accesses: &[(BankAccess, AddressParts)],
    now: u64,
) -> Vec<u64> {
    let mut order: Vec<usize> = (0..accesses.len()).collect();
    order.sort_by_key(|&i| accesses[i].0);
    let mut starts = vec![0u64; accesses.len()];
    for i in order {
        starts[i] = array.grant(accesses[i].1.set_index, now);
    }
    starts
}

/// Identifies one waiting request inside an MSHR sector fetch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MshrWaiter {
    pub request_id: u64,
}

/// One in-flight sector fetch of a line entry.
#[derive(Debug, Clone)]
pub struct SectorFetch {
    pub fetch_id: u64,
    pub waiters: Vec<MshrWaiter>,
}

/// Per-line MSHR entry: the set of sector fetches in flight plus any dirty
/// line displaced while a fetch was pending, whose write-back must wait for
/// the fetched data.
#[derive(Debug, Clone, Default)]
pub struct MshrLineEntry {
    pub sectors: BTreeMap<u64, SectorFetch>,
}

/// A fetch that could not allocate an MSHR slot yet.
#[derive(Debug, Clone)]
pub struct StalledFetch {
    pub line_address: u64,
    pub sector: u64,
    pub waiters: Vec<MshrWaiter>,
}

/// Miss-status holding registers of one cache: at most `capacity` distinct
/// outstanding lines; requests to an in-flight (line, sector) merge and all
/// complete when the fill returns.
#[derive(Debug, Clone)]
pub struct MshrState {
    pub capacity: usize,
    entries: BTreeMap<u64, MshrLineEntry>,
    stalled: VecDeque<StalledFetch>,
}

impl MshrState {
    pub fn new(capacity: usize) -> MshrState {
        MshrState {
            capacity,
            entries: BTreeMap::new(),
            stalled: VecDeque::new(),
        }
    }

    pub fn outstanding_lines(&self) -> usize {
        self.entries.len()
    }

    pub fn line_entry(&self, line_address: u64) -> Option<&MshrLineEntry> {
        self.entries.get(&line_address)
    }

    /// Whether (line, sector) has a fill in flight (allocated or stalled).
    pub fn sector_pending(&self, line_address: u64, sector: u64) -> bool {
        if let Some(e) = self.entries.get(&line_address) {
            if e.sectors.contains_key(&sector) {
                return true;
            }
        }
        self.stalled
            .iter()
            .any(|s| s.line_address == line_address && s.sector == sector)
    }

    pub fn line_pending(&self, line_address: u64) -> bool {
        self.entries.contains_key(&line_address)
            || self.stalled.iter().any(|s| s.line_address == line_address)
    }

    /// Joins an existing in-flight fetch for (line, sector). Returns false if
    /// none exists.
    pub fn merge(&mut self, line_address: u64, sector: u64, waiter: MshrWaiter) -> bool {
        if let Some(e) = self.entries.get_mut(&line_address) {
            if let Some(f) = e.sectors.get_mut(&sector) {
                f.waiters.push(waiter);
                return true;
            }
        }
        if let Some(s) = self
            .stalled
            .iter_mut()
            .find(|s| s.line_address == line_address && s.sector == sector)
        {
            s.waiters.push(waiter);
            return true;
        }
        false
    }

    /// Starts a new sector fetch, or queues it when the line would exceed
    /// capacity. Returns the fetch slot if admitted immediately.
    pub fn allocate(
        &mut self,
        line_address: u64,
        sector: u64,
        fetch_id: u64,
        waiter: MshrWaiter,
    ) -> Option<&mut SectorFetch> {
        debug_assert!(!self.sector_pending(line_address, sector));
        let have_line = self.entries.contains_key(&line_address);
        if !have_line && self.entries.len() >= self.capacity {
            self.stalled.push_back(StalledFetch {
                line_address,
                sector,
                waiters: vec![waiter],
            });
            return None;
        }
        let entry = self.entries.entry(line_address).or_default();
        entry.sectors.insert(
            sector,
            SectorFetch {
                fetch_id,
                waiters: vec![waiter],
            },
        );
        entry.sectors.get_mut(&sector)
    }

    /// Removes a completed sector fetch; returns its waiters and whether the
    /// whole line entry was freed.
    pub fn complete(&mut self, line_address: u64, sector: u64) -> (Vec<MshrWaiter>, bool) {
        let entry = self
            .entries
            .get_mut(&line_address)
            .expect("completing fetch for untracked line");
        let fetch = entry
            .sectors
            .remove(&sector)
            .expect("completing untracked sector fetch");
        let freed = entry.sectors.is_empty();
        if freed {
            self.entries.remove(&line_address);
        }
        (fetch.waiters, freed)
    }

    /// Admits stalled fetches in FIFO order while capacity allows. Each
    /// admitted item is returned so the caller can launch its fetch.
    pub fn admit_stalled(&mut self) -> Vec<StalledFetch> {
        let mut admitted = Vec::new();
        while let Some(front) = self.stalled.front() {
            let have_line = self.entries.contains_key(&front.line_address);
            if !have_line && self.entries.len() >= self.capacity {
                break;
            }
            let item = self.stalled.pop_front().expect("front exists");
            let entry = self.entries.entry(item.line_address).or_default();
            entry.sectors.insert(
                item.sector,
                SectorFetch {
                    fetch_id: u64::MAX, // caller assigns the real fetch id
                    waiters: item.waiters.clone(),
                },
            );
            admitted.push(item);
        }
        admitted
    }

    pub fn set_fetch_id(&mut self, line_address: u64, sector: u64, fetch_id: u64) {
        let f = self
            .entries
            .get_mut(&line_address)
            .and_then(|e| e.sectors.get_mut(&sector))
            .expect("fetch slot must exist");
        f.fetch_id = fetch_id;
    }

    pub fn has_stalled(&self) -> bool {
        !self.stalled.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn presence(bits: &[u8], hit: &[u8]) -> PresenceVector {
        PresenceVector {
            bits: bits.iter().map(|&b| b != 0).collect(),
            hit_sector: hit.iter().map(|&b| b != 0).collect(),
        }
    }

    #[test]
    fn remote_hit_goes_to_cache_two() {
        // presence [0,1] at the core whose local cache is index 0
        let p = presence(&[0, 1], &[0, 1]);
        assert_eq!(distribute(0, &p, &[0, 0]), RoutingDecision::RemoteHit(1));
    }

    #[test]
    fn local_copy_wins_over_remote() {
        let p = presence(&[1, 1], &[1, 1]);
        assert_eq!(distribute(0, &p, &[0, 0]), RoutingDecision::LocalHit);
        // even when the remote queue is shorter
        assert_eq!(distribute(0, &p, &[100, 0]), RoutingDecision::LocalHit);
    }

    #[test]
    fn all_miss_goes_to_l2() {
        let p = presence(&[0, 0], &[0, 0]);
        assert_eq!(distribute(0, &p, &[0, 0]), RoutingDecision::MissToL2);
    }

    #[test]
    fn line_present_without_sector_is_a_miss() {
        let p = presence(&[1, 1], &[0, 0]);
        assert_eq!(distribute(0, &p, &[0, 0]), RoutingDecision::MissToL2);
    }

    #[test]
    fn remote_tie_break_fewest_queued_then_lowest_id() {
        let p = presence(&[0, 1, 1, 1], &[0, 1, 1, 1]);
        assert_eq!(
            distribute(0, &p, &[0, 5, 2, 2]),
            RoutingDecision::RemoteHit(2)
        );
        assert_eq!(
            distribute(0, &p, &[0, 3, 3, 3]),
            RoutingDecision::RemoteHit(1)
        );
    }

    fn acc(core: u32, req: u64, set: u64) -> (BankAccess, AddressParts) {
        (
            BankAccess {
                core_id: core,
                request_id: req,
                set_index: set,
            },
            AddressParts {
                tag: 0,
                set_index: set,
                sector_index: 0,
                line_address: set,
            },
        )
    }

    #[test]
    fn distinct_banks_all_start_now() {
        let mut d = DataArrayState::new(0, 4);
        let batch = [acc(0, 0, 0), acc(1, 1, 1), acc(2, 2, 2), acc(3, 3, 3)];
        let starts = bank_schedule(&mut d, &batch, 10);
        assert_eq!(starts, vec![10, 10, 10, 10]);
    }

    #[test]
    fn same_bank_serializes_consecutively() {
        for k in [2usize, 4, 8] {
            let mut d = DataArrayState::new(0, 4);
            let batch: Vec<_> = (0..k).map(|i| acc(i as u32, i as u64, 4)).collect();
            let starts = bank_schedule(&mut d, &batch, 100);
            let expect: Vec<u64> = (0..k as u64).map(|i| 100 + i).collect();
            assert_eq!(starts, expect, "k={k}");
        }
    }

    #[test]
    fn mixed_pattern_matches_queue_replay_oracle() {
        // Oracle: one FIFO per bank, replayed in (core, req) order.
        let mut d = DataArrayState::new(0, 4);
        let mut lcg: u64 = 31;
        let mut batch = Vec::new();
        for i in 0..32u64 {
            lcg = lcg.wrapping_mul(6364136223846793005).wrapping_add(5);
            batch.push(acc(((lcg >> 4) % 6) as u32, i, (lcg >> 9) % 8));
        }
        let starts = bank_schedule(&mut d, &batch, 7);

        let mut order: Vec<usize> = (0..batch.len()).collect();
        order.sort_by_key(|&i| batch[i].0);
        let mut bank_next = [7u64; 4];
        for i in order {
            let bank = (batch[i].1.set_index % 4) as usize;
            assert_eq!(starts[i], bank_next[bank], "access {i}");
            bank_next[bank] += 1;
        }
    }

    #[test]
    fn grant_order_ties_by_core_then_request() {
        let mut d = DataArrayState::new(0, 1);
        let batch = [acc(2, 5, 0), acc(0, 9, 0), acc(0, 3, 0)];
        let starts = bank_schedule(&mut d, &batch, 0);
        // (core 0, req 3) first, (core 0, req 9) second, (core 2, req 5) last
        assert_eq!(starts, vec![2, 1, 0]);
    }

    #[test]
    fn queued_requests_counts_future_slots() {
        let mut d = DataArrayState::new(0, 2);
        assert_eq!(d.queued_requests(0), 0);
        d.grant(0, 0);
        d.grant(0, 0);
        d.grant(0, 0);
        // bank 0 next start is 3
        assert_eq!(d.queued_requests(0), 3);
        assert_eq!(d.queued_requests(2), 1);
        assert_eq!(d.queued_requests(5), 0);
    }

    #[test]
    fn mshr_merges_and_frees_lines() {
        let mut m = MshrState::new(2);
        assert!(m
            .allocate(10, 0, 1, MshrWaiter { request_id: 1 })
            .is_some());
        assert!(m.merge(10, 0, MshrWaiter { request_id: 2 }));
        assert!(!m.merge(10, 1, MshrWaiter { request_id: 3 }));
        assert!(m
            .allocate(10, 1, 2, MshrWaiter { request_id: 3 })
            .is_some());
        assert_eq!(m.outstanding_lines(), 1);

        let (w, freed) = m.complete(10, 0);
        assert_eq!(w.len(), 2);
        assert!(!freed);
        let (w, freed) = m.complete(10, 1);
        assert_eq!(w.len(), 1);
        assert!(freed);
        assert_eq!(m.outstanding_lines(), 0);
    }

    #[test]
    fn mshr_capacity_stalls_new_lines_fifo() {
        let mut m = MshrState::new(1);
        assert!(m.allocate(1, 0, 1, MshrWaiter { request_id: 1 }).is_some());
        assert!(m.allocate(2, 0, 2, MshrWaiter { request_id: 2 }).is_none());
        assert!(m.allocate(3, 0, 3, MshrWaiter { request_id: 3 }).is_none());
        // same sector of a stalled line merges into the stalled fetch
        assert!(m.merge(2, 0, MshrWaiter { request_id: 4 }));
        assert!(m.sector_pending(2, 0));

        m.complete(1, 0);
        let admitted = m.admit_stalled();
        assert_eq!(admitted.len(), 1);
        assert_eq!(admitted[0].line_address, 2);
        assert_eq!(admitted[0].waiters.len(), 2);
        assert!(m.has_stalled());
    }
}
