//! Covert-channel primitives built from simulated timing: Flush+Reload,
//! Evict+Reload, Evict+Time, and threshold calibration.
//!
//! These operate on the cache hierarchy directly, standing in for the
//! attacker-context instruction sequences that would perform the same
//! accesses; the cache and latency effects are identical either way.

use crate::mem::{
    congruent_addresses, Access, AccessKind, CacheHierarchy, EvictionArena, MemError, MemoryImage,
    PageTable,
};
use serde::Serialize;

/// Probe-array layout plus the hit/miss threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeConfig {
    /// Virtual base address of the probe array in the prober's context.
    pub probe_base: u64,
    pub stride: u64,
    pub entries: usize,
    /// Cycles; latencies below are classified cached. Calibrated when absent.
    pub threshold: Option<u64>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            probe_base: 0,
            stride: 512,
            entries: 256,
            threshold: None,
        }
    }
}

impl ProbeConfig {
    pub fn entry_addr(&self, i: usize) -> u64 {
        self.probe_base + i as u64 * self.stride
    }

    pub fn threshold_or_calibrated(&self, hierarchy: &CacheHierarchy) -> u64 {
        self.threshold
            .unwrap_or_else(|| calibrate_threshold(hierarchy))
    }
}

/// Midpoint between the L1 hit latency and DRAM latency. The deterministic
/// latency model needs no sampling: every hit is strictly below, every miss
/// strictly above.
pub fn calibrate_threshold(hierarchy: &CacheHierarchy) -> u64 {
    (hierarchy.config.l1.hit_latency + hierarchy.config.dram_latency) / 2
}

/// Per-entry reload latencies and their classification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProbeResult {
    pub latencies: Vec<u64>,
    pub hot_indices: Vec<usize>,
    /// The unique hot index, when exactly one entry was cached.
    pub best: Option<usize>,
}

impl ProbeResult {
    pub fn to_csv(&self, threshold: u64) -> String {
        let mut out = String::from("index,latency,hot\n");
        for (i, l) in self.latencies.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", i, l, (*l < threshold) as u8));
        }
        out
    }
}

/// Flush every probe-array line out of every cache level.
pub fn flush_probe_array(
    hierarchy: &mut CacheHierarchy,
    pt: &PageTable,
    probe: &ProbeConfig,
) -> Result<(), MemError> {
    for i in 0..probe.entries {
        let vaddr = probe.entry_addr(i);
        let phys = pt
            .translate(vaddr, Access::Read)
            .map_err(|_| MemError::Unmapped { addr: vaddr })?;
        hierarchy.flush_line(phys);
    }
    Ok(())
}

/// Read every probe entry once, in index order, classifying each latency
/// against the threshold. Entries map to distinct last-level sets by stride
/// choice, so the walk never evicts another probe line from the level that
/// decides hot versus cold.
pub fn reload_and_classify(
    hierarchy: &mut CacheHierarchy,
    memory: &mut MemoryImage,
    pt: &PageTable,
    probe: &ProbeConfig,
) -> Result<ProbeResult, MemError> {
    let threshold = probe.threshold_or_calibrated(hierarchy);
    let mut latencies = Vec::with_capacity(probe.entries);
    for i in 0..probe.entries {
        let vaddr = probe.entry_addr(i);
        let phys = pt
            .translate(vaddr, Access::Read)
            .map_err(|_| MemError::Unmapped { addr: vaddr })?;
        let res = hierarchy.access(memory, phys, 1, AccessKind::Read, None, true)?;
        latencies.push(res.latency);
    }
    let hot_indices: Vec<usize> = latencies
        .iter()
        .enumerate()
        .filter(|(_, l)| **l < threshold)
        .map(|(i, _)| i)
        .collect();
    let best = if hot_indices.len() == 1 {
        Some(hot_indices[0])
    } else {
        None
    };
    Ok(ProbeResult {
        latencies,
        hot_indices,
        best,
    })
}

/// Evict one line by reading congruent addresses from the arena, using a
/// dual-index walk (the second index trails the first) to favor LRU
/// replacement.
pub fn evict_line(
    hierarchy: &mut CacheHierarchy,
    memory: &mut MemoryImage,
    pt: &PageTable,
    arena: &EvictionArena,
    vaddr: u64,
) -> Result<(), MemError> {
    let count = hierarchy.config.llc.ways.max(hierarchy.config.l1.ways) + 1;
    let walk = congruent_addresses(hierarchy, pt, arena, vaddr, count)?;
    const TRAIL: usize = 4;
    for i in 0..walk.len() + TRAIL {
        if i < walk.len() {
            let phys = pt.translate(walk[i], Access::Read).expect("arena mapped");
            hierarchy.access(memory, phys, 1, AccessKind::Read, None, true)?;
        }
        if i >= TRAIL {
            let j = i - TRAIL;
            if j < walk.len() {
                let phys = pt.translate(walk[j], Access::Read).expect("arena mapped");
                hierarchy.access(memory, phys, 1, AccessKind::Read, None, true)?;
            }
        }
    }
    Ok(())
}

/// Blind eviction for a line whose physical placement the attacker cannot
/// address: read every arena page at the target's page offset (stride one
/// page), with the trailing second index. Covers every cache set that shares
/// the offset, so the target leaves the hierarchy no matter which physical
/// page backs it.
pub fn evict_by_page_offset(
    hierarchy: &mut CacheHierarchy,
    memory: &mut MemoryImage,
    pt: &PageTable,
    arena: &EvictionArena,
    offset_in_page: u64,
) -> Result<(), MemError> {
    let offset = offset_in_page % crate::mem::PAGE_SIZE;
    const TRAIL: usize = 4;
    let n = arena.pages as usize;
    let addr_of = |i: usize| arena.base + i as u64 * crate::mem::PAGE_SIZE + offset;
    for i in 0..n + TRAIL {
        if i < n {
            let phys = pt
                .translate(addr_of(i), Access::Read)
                .expect("arena mapped");
            hierarchy.access(memory, phys, 1, AccessKind::Read, None, true)?;
        }
        if i >= TRAIL && i - TRAIL < n {
            let phys = pt
                .translate(addr_of(i - TRAIL), Access::Read)
                .expect("arena mapped");
            hierarchy.access(memory, phys, 1, AccessKind::Read, None, true)?;
        }
    }
    Ok(())
}

/// Evict every probe line by set contention instead of flushing — the path
/// for a prober without a flush instruction.
pub fn evict_probe_array(
    hierarchy: &mut CacheHierarchy,
    memory: &mut MemoryImage,
    pt: &PageTable,
    arena: &EvictionArena,
    probe: &ProbeConfig,
) -> Result<(), MemError> {
    for i in 0..probe.entries {
        evict_line(hierarchy, memory, pt, arena, probe.entry_addr(i))?;
    }
    Ok(())
}

/// Reload-and-classify preceded by contention-based eviction on an earlier
/// pass; provided for parity with the flush-based pipeline.
pub fn evict_reload(
    hierarchy: &mut CacheHierarchy,
    memory: &mut MemoryImage,
    pt: &PageTable,
    arena: &EvictionArena,
    probe: &ProbeConfig,
) -> Result<ProbeResult, MemError> {
    evict_probe_array(hierarchy, memory, pt, arena, probe)?;
    reload_and_classify(hierarchy, memory, pt, probe)
}

/// Timing legs returned by an Evict+Time measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EvictTiming {
    pub t_evicted: u64,
    pub t_primed: u64,
}

impl EvictTiming {
    pub fn delta(&self) -> i64 {
        self.t_evicted as i64 - self.t_primed as i64
    }
}

/// Run a victim twice — once with `target_line` evicted, once primed — and
/// return the victim's total cycles for each leg. The victim runner receives
/// a hierarchy prepared by the caller and reports the cycles its timed
/// section consumed. `t_evicted > t_primed` exactly when the victim's
/// speculative read touches `target_line`.
pub fn evict_time<F>(
    hierarchy: &CacheHierarchy,
    target_line_phys: u64,
    mut victim_runner: F,
) -> EvictTiming
where
    F: FnMut(CacheHierarchy) -> u64,
{
    let mut evicted_leg = hierarchy.clone();
    evicted_leg.flush_line(target_line_phys);
    let t_evicted = victim_runner(evicted_leg);

    let mut primed_leg = hierarchy.clone();
    primed_leg.flush_line(target_line_phys);
    let mut scratch = MemoryImage::new();
    primed_leg
        .access(
            &mut scratch,
            target_line_phys,
            1,
            AccessKind::Read,
            None,
            true,
        )
        .expect("aligned probe access");
    let t_primed = victim_runner(primed_leg);

    EvictTiming {
        t_evicted,
        t_primed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mem::{CacheConfig, Level, PagePerms};

    fn setup() -> (CacheHierarchy, MemoryImage, PageTable, ProbeConfig) {
        let h = CacheHierarchy::new(CacheConfig::default()).unwrap();
        let m = MemoryImage::new();
        let mut pt = PageTable::new();
        // 256 entries x 512B = 32 pages.
        pt.map_range(0x40000, 0x40000, 32, PagePerms::R);
        let probe = ProbeConfig {
            probe_base: 0x40000,
            ..ProbeConfig::default()
        };
        (h, m, pt, probe)
    }

    #[test]
    fn calibration_defaults() {
        let h = CacheHierarchy::new(CacheConfig::default()).unwrap();
        assert_eq!(calibrate_threshold(&h), 102);
        let cfg = CacheConfig {
            dram_latency: 300,
            ..CacheConfig::default()
        };
        let h = CacheHierarchy::new(cfg).unwrap();
        assert_eq!(calibrate_threshold(&h), 152);
    }

    #[test]
    fn flush_then_reload_is_all_cold() {
        let (mut h, mut m, pt, probe) = setup();
        // Warm a few entries, then flush everything.
        for i in [0usize, 7, 200] {
            h.read(&mut m, probe.entry_addr(i), 1).unwrap();
        }
        flush_probe_array(&mut h, &pt, &probe).unwrap();
        let r = reload_and_classify(&mut h, &mut m, &pt, &probe).unwrap();
        assert!(r.hot_indices.is_empty());
        assert_eq!(r.best, None);
        assert!(r.latencies.iter().all(|l| *l == 200));
    }

    #[test]
    fn flush_is_idempotent() {
        let (mut h, mut m, pt, probe) = setup();
        h.read(&mut m, probe.entry_addr(3), 1).unwrap();
        flush_probe_array(&mut h, &pt, &probe).unwrap();
        let snapshot = h.clone();
        flush_probe_array(&mut h, &pt, &probe).unwrap();
        assert_eq!(h, snapshot);
    }

    #[test]
    fn single_touch_yields_unique_best() {
        let (mut h, mut m, pt, probe) = setup();
        flush_probe_array(&mut h, &pt, &probe).unwrap();
        // Victim touches entry 0x41.
        h.read(&mut m, probe.entry_addr(0x41), 1).unwrap();
        let r = reload_and_classify(&mut h, &mut m, &pt, &probe).unwrap();
        assert_eq!(r.hot_indices, vec![0x41]);
        assert_eq!(r.best, Some(0x41));
    }

    #[test]
    fn double_touch_is_ambiguous() {
        let (mut h, mut m, pt, probe) = setup();
        flush_probe_array(&mut h, &pt, &probe).unwrap();
        h.read(&mut m, probe.entry_addr(3), 1).unwrap();
        h.read(&mut m, probe.entry_addr(7), 1).unwrap();
        let r = reload_and_classify(&mut h, &mut m, &pt, &probe).unwrap();
        assert_eq!(r.hot_indices, vec![3, 7]);
        assert_eq!(r.best, None);
    }

    #[test]
    fn classification_is_exact() {
        // Zero-overlap: every latency is a configured level latency, never
        // the threshold itself, and hot iff below threshold iff not DRAM.
        let (mut h, mut m, pt, probe) = setup();
        flush_probe_array(&mut h, &pt, &probe).unwrap();
        h.read(&mut m, probe.entry_addr(9), 1).unwrap();
        let threshold = probe.threshold_or_calibrated(&h);
        let r = reload_and_classify(&mut h, &mut m, &pt, &probe).unwrap();
        for (i, l) in r.latencies.iter().enumerate() {
            assert!(matches!(*l, 4 | 12 | 40 | 200));
            assert_ne!(*l, threshold);
            assert_eq!(r.hot_indices.contains(&i), *l < threshold);
        }
    }

    fn arena_setup(pt: &mut PageTable) -> EvictionArena {
        let arena = EvictionArena {
            base: 0xA0_0000,
            pages: 18 * 64,
        };
        pt.map_range(arena.base, arena.base, arena.pages, PagePerms::R);
        arena
    }

    #[test]
    fn evict_line_pushes_to_dram() {
        let (mut h, mut m, mut pt, _) = setup();
        let arena = arena_setup(&mut pt);
        pt.map(0x9000, 0x9000, PagePerms::R);
        h.read(&mut m, 0x9040, 1).unwrap();
        assert_eq!(h.probe_level(0x9040), Level::L1);
        evict_line(&mut h, &mut m, &pt, &arena, 0x9040).unwrap();
        assert_eq!(h.probe_level(0x9040), Level::Dram);
    }

    #[test]
    fn evict_reload_matches_flush_reload() {
        let (mut h1, mut m1, mut pt, probe) = setup();
        let arena = arena_setup(&mut pt);
        // Flush-based pipeline.
        for i in [5usize, 77] {
            h1.read(&mut m1, probe.entry_addr(i), 1).unwrap();
        }
        flush_probe_array(&mut h1, &pt, &probe).unwrap();
        h1.read(&mut m1, probe.entry_addr(0x41), 1).unwrap();
        let flush_result = reload_and_classify(&mut h1, &mut m1, &pt, &probe).unwrap();

        // Eviction-based pipeline over the same history.
        let mut h2 = CacheHierarchy::new(CacheConfig::default()).unwrap();
        let mut m2 = MemoryImage::new();
        for i in [5usize, 77] {
            h2.read(&mut m2, probe.entry_addr(i), 1).unwrap();
        }
        evict_probe_array(&mut h2, &mut m2, &pt, &arena, &probe).unwrap();
        h2.read(&mut m2, probe.entry_addr(0x41), 1).unwrap();
        let evict_result = reload_and_classify(&mut h2, &mut m2, &pt, &probe).unwrap();

        assert_eq!(flush_result.hot_indices, evict_result.hot_indices);
        assert_eq!(flush_result.best, Some(0x41));
    }

    #[test]
    fn probe_walk_never_evicts_probe_lines() {
        // Stride/set arithmetic: with stride >= line size, the number of
        // probe lines falling into any single LLC set stays within its ways,
        // so a full reload cannot push another probe line to DRAM.
        let h = CacheHierarchy::new(CacheConfig::default()).unwrap();
        for stride in [512u64, 4096] {
            let probe = ProbeConfig {
                probe_base: 0x40000,
                stride,
                entries: 256,
                threshold: None,
            };
            let mut per_set: std::collections::HashMap<usize, usize> =
                std::collections::HashMap::new();
            for i in 0..probe.entries {
                let set = h.config.set_index(Level::Llc, probe.entry_addr(i));
                *per_set.entry(set).or_default() += 1;
            }
            assert!(
                per_set.values().all(|c| *c <= h.config.llc.ways),
                "stride {stride} overflows an LLC set"
            );
        }
    }
}
