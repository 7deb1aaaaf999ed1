//! Decoupled per-cache tag arrays and the cluster-wide aggregated tag
//! comparison.
//!
//! Each set of a decoupled tag array sits on its own bank, so lookups that
//! target distinct sets never conflict, and one comparator group per core
//! lets every request in a cluster be compared against every tag array in
//! the same cycle. The aggregated comparison is therefore conflict-free: its
//! cycle cost is a flat `t_tag` charged by the engine regardless of how many
//! requests share a set index.

use crate::core::{AddressParts, CacheGeometry};
use std::fmt::Write as _;

/// One way of one set. An entry with no valid sectors is a free way.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TagEntry {
    pub tag: u64,
    /// Bit i set = sector i valid.
    pub sector_valid: u64,
    pub dirty: bool,
    /// Monotone access counter stamp; larger = more recently used.
    pub lru_stamp: u64,
}

impl TagEntry {
    pub fn invalid() -> TagEntry {
        TagEntry {
            tag: 0,
            sector_valid: 0,
            dirty: false,
            lru_stamp: 0,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.sector_valid != 0
    }

    pub fn sector_is_valid(&self, sector: u64) -> bool {
        self.sector_valid & (1 << sector) != 0
    }
}

/// Descriptor of a line displaced by an install.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvictedLine {
    pub line_address: u64,
    pub sector_valid: u64,
    pub dirty: bool,
}

/// Tag metadata of one cache, decoupled from its data array.
#[derive(Debug, Clone)]
pub struct TagArrayState {
    pub owner_cache_id: u32,
    sets: Vec<Vec<TagEntry>>,
    num_sets: u64,
    sectors_per_line: u64,
}

/// Raised when LRU maintenance is asked about a line that is not resident,
/// which signals an engine bookkeeping bug.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineAbsent {
    pub cache_id: u32,
    pub line_address: u64,
}

impl std::fmt::Display for LineAbsent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "cache {}: line {:#x} not resident",
            self.cache_id, self.line_address
        )
    }
}

impl std::error::Error for LineAbsent {}

impl TagArrayState {
    pub fn new(owner_cache_id: u32, geometry: &CacheGeometry) -> TagArrayState {
        let num_sets = geometry.sets();
        TagArrayState {
            owner_cache_id,
            sets: vec![vec![TagEntry::invalid(); geometry.ways as usize]; num_sets as usize],
            num_sets,
            sectors_per_line: geometry.sectors_per_line(),
        }
    }

    pub fn num_sets(&self) -> u64 {
        self.num_sets
    }

    pub fn ways(&self) -> usize {
        self.sets[0].len()
    }

    pub fn entry(&self, set: u64, way: usize) -> &TagEntry {
        &self.sets[set as usize][way]
    }

    /// Finds the way holding `parts`' tag, valid entries only.
    pub fn lookup(&self, parts: &AddressParts) -> Option<(usize, &TagEntry)> {
        self.sets[parts.set_index as usize]
            .iter()
            .enumerate()
            .find(|(_, e)| e.is_valid() && e.tag == parts.tag)
    }

    /// Line / sector presence for one request.
    pub fn probe(&self, parts: &AddressParts) -> (bool, bool) {
        match self.lookup(parts) {
            Some((_, e)) => (true, e.sector_is_valid(parts.sector_index)),
            None => (false, false),
        }
    }

    /// Victim way for a fill: the lowest-index free way if one exists, else
    /// the way with the minimal LRU stamp (ties to the lowest way index).
    pub fn lru_victim(&self, set_index: u64) -> usize {
        let set = &self.sets[set_index as usize];
        if let Some((w, _)) = set.iter().enumerate().find(|(_, e)| !e.is_valid()) {
            return w;
        }
        set.iter()
            .enumerate()
            .min_by_key(|(w, e)| (e.lru_stamp, *w))
            .map(|(w, _)| w)
            .expect("cache sets have at least one way")
    }

    /// Installs (or extends) the line for `parts`, marking `sector` valid.
    ///
    /// If the tag is already present the sector bit and LRU stamp are
    /// updated in place. Otherwise the LRU victim way is replaced by a fresh
    /// entry with only this sector valid, and a displaced dirty line is
    /// returned so the caller can write it back.
    pub fn install_line(
        &mut self,
        parts: &AddressParts,
        sector: u64,
        stamp: u64,
    ) -> Option<EvictedLine> {
        debug_assert!(sector < self.sectors_per_line);
        let set = parts.set_index;
        if let Some((way, _)) = self.lookup(parts) {
            let e = &mut self.sets[set as usize][way];
            e.sector_valid |= 1 << sector;
            e.lru_stamp = stamp;
            return None;
        }
        let way = self.lru_victim(set);
        let old = self.sets[set as usize][way];
        let evicted = if old.is_valid() {
            Some(EvictedLine {
                line_address: old.tag * self.num_sets + set,
                sector_valid: old.sector_valid,
                dirty: old.dirty,
            })
        } else {
            None
        };
        self.sets[set as usize][way] = TagEntry {
            tag: parts.tag,
            sector_valid: 1 << sector,
            dirty: false,
            lru_stamp: stamp,
        };
        evicted
    }

    /// Refreshes the LRU stamp of a resident line. Errors if the line is
    /// absent.
    pub fn touch(&mut self, parts: &AddressParts, stamp: u64) -> Result<(), LineAbsent> {
        let set = parts.set_index as usize;
        match self.sets[set]
            .iter_mut()
            .find(|e| e.is_valid() && e.tag == parts.tag)
        {
            Some(e) => {
                e.lru_stamp = stamp;
                Ok(())
            }
            None => Err(LineAbsent {
                cache_id: self.owner_cache_id,
                line_address: parts.line_address,
            }),
        }
    }

    /// Marks a resident line dirty. Errors if the line is absent.
    pub fn set_dirty(&mut self, parts: &AddressParts) -> Result<(), LineAbsent> {
        let set = parts.set_index as usize;
        match self.sets[set]
            .iter_mut()
            .find(|e| e.is_valid() && e.tag == parts.tag)
        {
            Some(e) => {
                e.dirty = true;
                Ok(())
            }
            None => Err(LineAbsent {
                cache_id: self.owner_cache_id,
                line_address: parts.line_address,
            }),
        }
    }

    /// One line of text per valid entry:
    /// `cache=<i> set=<s> way=<w> tag=<hex> sectors=<bitstring> dirty=<0|1> lru=<n>`
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (s, set) in self.sets.iter().enumerate() {
            for (w, e) in set.iter().enumerate() {
                if !e.is_valid() {
                    continue;
                }
                let mut bits = String::new();
                for i in (0..self.sectors_per_line).rev() {
                    bits.push(if e.sector_is_valid(i) { '1' } else { '0' });
                }
                writeln!(
                    out,
                    "cache={} set={} way={} tag={:#x} sectors={} dirty={} lru={}",
                    self.owner_cache_id,
                    s,
                    w,
                    e.tag,
                    bits,
                    u8::from(e.dirty),
                    e.lru_stamp
                )
                .expect("string write cannot fail");
            }
        }
        out
    }

    #[cfg(test)]
    fn sets_snapshot(&self) -> Vec<Vec<TagEntry>> {
        self.sets.clone()
    }
}

/// Per-request result of comparing one address against every tag array of a
/// cluster. `bits[i]` is line presence in array i; `hit_sector[i]` requires
/// the requested sector to be valid as well.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PresenceVector {
    pub bits: Vec<bool>,
    pub hit_sector: Vec<bool>,
}

impl PresenceVector {
    pub fn any_sector_hit(&self) -> bool {
        self.hit_sector.iter().any(|&b| b)
    }
}

/// Compares every request against every tag array in the cluster in the same
/// cycle. Results are independent of request ordering and of whether the
/// requests share a set index; the per-set banking plus tag selectors route
/// each set's tags to each request's comparator group without serialization.
pub fn aggregated_lookup(
    requests: &[(u32, AddressParts)],
    arrays: &[&TagArrayState],
) -> Vec<PresenceVector> {
    requests
        .iter()
        .map(|(_, parts)| {
            let mut bits = Vec::with_capacity(arrays.len());
            let mut hit_sector = Vec::with_capacity(arrays.len());
            for array in arrays {
                let (line, sector) = array.probe(parts);
                bits.push(line);
                hit_sector.push(sector);
            }
            PresenceVector { bits, hit_sector }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{decode_address, CacheGeometry};

    fn small_geometry() -> CacheGeometry {
        // 4 sets x 4 ways x 128 B lines, 4 sectors per line
        CacheGeometry {
            capacity_bytes: 2048,
            line_size: 128,
            sector_size: 32,
            ways: 4,
            data_banks: 2,
        }
    }

    fn parts_for_line(line: u64, g: &CacheGeometry) -> AddressParts {
        decode_address(line * g.line_size, g)
    }

    #[test]
    fn working_example_presence_vectors() {
        // Two 4-way arrays. tagA resident only in array 1 at set 0; tagB
        // resident in both arrays at set 1.
        let g = small_geometry();
        let mut a1 = TagArrayState::new(0, &g);
        let mut a2 = TagArrayState::new(1, &g);
        let req1 = parts_for_line(0xA * 4, &g); // set 0, tag 0xA
        let req2 = parts_for_line(0xB * 4 + 1, &g); // set 1, tag 0xB
        assert_eq!((req1.set_index, req1.tag), (0, 0xA));
        assert_eq!((req2.set_index, req2.tag), (1, 0xB));
        a1.install_line(&req1, 0, 1);
        a1.install_line(&req2, 0, 2);
        a2.install_line(&req2, 0, 1);

        let res = aggregated_lookup(&[(0, req1), (1, req2)], &[&a1, &a2]);
        assert_eq!(res[0].bits, vec![true, false]);
        assert_eq!(res[1].bits, vec![true, true]);
    }

    #[test]
    fn empty_arrays_give_all_zero_vectors() {
        let g = small_geometry();
        let a1 = TagArrayState::new(0, &g);
        let a2 = TagArrayState::new(1, &g);
        let req = parts_for_line(17, &g);
        let res = aggregated_lookup(&[(0, req)], &[&a1, &a2]);
        assert_eq!(res[0].bits, vec![false, false]);
        assert_eq!(res[0].hit_sector, vec![false, false]);
    }

    #[test]
    fn aggregated_matches_brute_force_scan_on_warm_state() {
        // 10 arrays warmed with an LCG-driven install sequence, then checked
        // bit-by-bit against a direct scan of each array's set.
        let g = small_geometry();
        let mut arrays: Vec<TagArrayState> = (0..10).map(|i| TagArrayState::new(i, &g)).collect();
        let mut x: u64 = 42;
        for step in 0..2000u64 {
            x = x
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            let array = (x >> 5) % 10;
            let line = (x >> 9) % 64;
            let sector = (x >> 17) % 4;
            let p = parts_for_line(line, &g);
            arrays[array as usize].install_line(&p, sector, step);
        }
        let refs: Vec<&TagArrayState> = arrays.iter().collect();
        for line in 0..64u64 {
            let p = parts_for_line(line, &g);
            let res = aggregated_lookup(&[(0, p)], &refs);
            for (i, a) in arrays.iter().enumerate() {
                let brute = (0..a.ways()).any(|w| {
                    let e = a.entry(p.set_index, w);
                    e.is_valid() && e.tag == p.tag
                });
                assert_eq!(res[0].bits[i], brute, "line {line} array {i}");
            }
        }
    }

    #[test]
    fn aggregated_equals_concatenated_single_lookups() {
        let g = small_geometry();
        let mut arrays: Vec<TagArrayState> = (0..4).map(|i| TagArrayState::new(i, &g)).collect();
        let mut x: u64 = 1234;
        for step in 0..500u64 {
            x = x.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
            let p = parts_for_line((x >> 7) % 32, &g);
            arrays[(x % 4) as usize].install_line(&p, (x >> 3) % 4, step);
        }
        let refs: Vec<&TagArrayState> = arrays.iter().collect();
        let reqs: Vec<(u32, AddressParts)> = (0..32u64)
            .map(|line| (0u32, parts_for_line(line, &g)))
            .collect();
        let batched = aggregated_lookup(&reqs, &refs);
        for (i, req) in reqs.iter().enumerate() {
            for (j, a) in refs.iter().enumerate() {
                let single = aggregated_lookup(std::slice::from_ref(req), &[a]);
                assert_eq!(batched[i].bits[j], single[0].bits[0]);
                assert_eq!(batched[i].hit_sector[j], single[0].hit_sector[0]);
            }
        }
    }

    #[test]
    fn hit_sector_implies_line_bit() {
        let g = small_geometry();
        let mut a = TagArrayState::new(0, &g);
        let p = parts_for_line(5, &g);
        a.install_line(&p, 2, 1);
        let mut probe = p;
        probe.sector_index = 2;
        let res = aggregated_lookup(&[(0, probe)], &[&a]);
        assert!(res[0].bits[0] && res[0].hit_sector[0]);
        probe.sector_index = 3;
        let res = aggregated_lookup(&[(0, probe)], &[&a]);
        assert!(res[0].bits[0] && !res[0].hit_sector[0]);
    }

    #[test]
    fn lru_victim_prefers_free_way() {
        let g = small_geometry();
        let mut a = TagArrayState::new(0, &g);
        for (i, line) in [0u64, 4, 8].iter().enumerate() {
            a.install_line(&parts_for_line(*line, &g), 0, i as u64 + 1);
        }
        assert_eq!(a.lru_victim(0), 3);
    }

    #[test]
    fn lru_victim_is_argmin_of_stamps() {
        let g = small_geometry();
        let mut a = TagArrayState::new(0, &g);
        for (i, stamp) in [9u64, 2, 5, 7].iter().enumerate() {
            a.install_line(&parts_for_line(i as u64 * 4, &g), 0, *stamp);
        }
        assert_eq!(a.lru_victim(0), 1);
    }

    /// Reference list-based LRU: front = most recent, evict from the back.
    struct ListLru {
        lines: Vec<u64>,
        ways: usize,
    }

    impl ListLru {
        fn access(&mut self, line: u64) -> Option<u64> {
            if let Some(pos) = self.lines.iter().position(|&l| l == line) {
                let l = self.lines.remove(pos);
                self.lines.insert(0, l);
                return None;
            }
            let evicted = if self.lines.len() == self.ways {
                self.lines.pop()
            } else {
                None
            };
            self.lines.insert(0, line);
            evicted
        }
    }

    #[test]
    fn randomized_accesses_match_list_lru_oracle() {
        let g = small_geometry();
        let mut a = TagArrayState::new(0, &g);
        // single set (set 0): lines that map there are multiples of 4
        let mut oracle = ListLru {
            lines: Vec::new(),
            ways: 4,
        };
        let mut x: u64 = 99;
        for step in 1..3000u64 {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(777);
            let line = ((x >> 11) % 12) * 4; // 12 distinct lines, all set 0
            let p = parts_for_line(line, &g);
            let expected_evict = oracle.access(line);
            let got = if a.lookup(&p).is_some() {
                a.touch(&p, step).unwrap();
                None
            } else {
                a.install_line(&p, 0, step).map(|e| e.line_address)
            };
            assert_eq!(got, expected_evict, "step {step}");
        }
    }

    #[test]
    fn install_into_empty_set() {
        let g = small_geometry();
        let mut a = TagArrayState::new(0, &g);
        let p = parts_for_line(8, &g);
        assert_eq!(a.install_line(&p, 1, 1), None);
        let (_, e) = a.lookup(&p).unwrap();
        assert_eq!(e.sector_valid.count_ones(), 1);
        assert!(e.sector_is_valid(1));
    }

    #[test]
    fn install_second_sector_extends_line() {
        let g = small_geometry();
        let mut a = TagArrayState::new(0, &g);
        let p = parts_for_line(8, &g);
        a.install_line(&p, 1, 1);
        assert_eq!(a.install_line(&p, 3, 2), None);
        let (_, e) = a.lookup(&p).unwrap();
        assert_eq!(e.sector_valid.count_ones(), 2);
        assert_eq!(e.lru_stamp, 2);
    }

    #[test]
    fn full_set_evicts_dirty_lru_victim() {
        let g = small_geometry();
        let mut a = TagArrayState::new(0, &g);
        // 64-install sequence into set 0; with nothing re-touched the victim
        // of install k (k >= 4) is the line installed at k-4.
        let mut installed: Vec<u64> = Vec::new();
        for k in 0..64u64 {
            let line = k * 4; // all set 0
            let p = parts_for_line(line, &g);
            let evicted = a.install_line(&p, 0, k + 1);
            if k < 4 {
                assert_eq!(evicted, None);
            } else {
                assert_eq!(evicted.unwrap().line_address, installed[(k - 4) as usize]);
            }
            installed.push(line);
        }
        // dirty victim: mark the current LRU dirty and force an eviction
        let lru_line = installed[60];
        a.set_dirty(&parts_for_line(lru_line, &g)).unwrap();
        let ev = a.install_line(&parts_for_line(64 * 4, &g), 0, 100).unwrap();
        assert_eq!(ev.line_address, lru_line);
        assert!(ev.dirty);
    }

    #[test]
    fn touched_line_survives_extra_eviction_round() {
        let g = small_geometry();
        let mut a = TagArrayState::new(0, &g);
        let mut stamp = 0u64;
        for line in 0..4u64 {
            stamp += 1;
            a.install_line(&parts_for_line(line * 4, &g), 0, stamp);
        }
        // touch line 0 so line 1 becomes LRU
        stamp += 1;
        a.touch(&parts_for_line(0, &g), stamp).unwrap();
        stamp += 1;
        let ev = a
            .install_line(&parts_for_line(16 * 4, &g), 0, stamp)
            .unwrap();
        assert_eq!(ev.line_address, 4); // line 1, not the touched line 0
        assert!(a.lookup(&parts_for_line(0, &g)).is_some());
    }

    #[test]
    fn touch_same_stamp_twice_is_idempotent() {
        let g = small_geometry();
        let mut a = TagArrayState::new(0, &g);
        let p = parts_for_line(8, &g);
        a.install_line(&p, 0, 1);
        a.touch(&p, 5).unwrap();
        let snapshot = a.sets_snapshot();
        a.touch(&p, 5).unwrap();
        assert_eq!(a.sets_snapshot(), snapshot);
    }

    #[test]
    fn touch_absent_line_errors() {
        let g = small_geometry();
        let mut a = TagArrayState::new(3, &g);
        let err = a.touch(&parts_for_line(8, &g), 1).unwrap_err();
        assert_eq!(err.cache_id, 3);
    }

    #[test]
    fn no_duplicate_tags_within_a_set() {
        let g = small_geometry();
        let mut a = TagArrayState::new(0, &g);
        let mut x: u64 = 5;
        for step in 0..5000u64 {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(12345);
            let line = (x >> 9) % 24;
            a.install_line(&parts_for_line(line, &g), (x >> 3) % 4, step);
            for s in 0..a.num_sets() {
                let mut tags: Vec<u64> = (0..a.ways())
                    .map(|w| a.entry(s, w))
                    .filter(|e| e.is_valid())
                    .map(|e| e.tag)
                    .collect();
                let n = tags.len();
                tags.sort_unstable();
                tags.dedup();
                assert_eq!(tags.len(), n, "duplicate tag in set {s}");
            }
        }
    }

    #[test]
    fn dump_format_one_line_per_valid_entry() {
        let g = small_geometry();
        let mut a = TagArrayState::new(2, &g);
        let p = parts_for_line(9, &g); // set 1, tag 2
        a.install_line(&p, 2, 7);
        a.set_dirty(&p).unwrap();
        let dump = a.dump();
        assert_eq!(dump.lines().count(), 1);
        assert_eq!(
            dump.trim_end(),
            "cache=2 set=1 way=0 tag=0x2 sectors=0100 dirty=1 lru=7"
        );
    }
}
