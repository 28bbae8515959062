//! Set-associative multi-level cache hierarchy over a sparse flat memory.
//!
//! The model is deterministic: data always lives in the [`MemoryImage`];
//! cache levels track only line presence and strict-LRU recency, which decide
//! the latency of each access. Writes go straight through to memory.

use serde::Serialize;
use std::collections::HashMap;

pub const PAGE_SIZE: u64 = 4096;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MemError {
    #[error("access of size {size} at 0x{addr:x} straddles a {line}B line boundary")]
    LineStraddle { addr: u64, size: u64, line: u64 },
    #[error("zero-size access at 0x{addr:x}")]
    ZeroSize { addr: u64 },
    #[error("eviction arena has only {found} line(s) congruent to 0x{addr:x}, need {need}")]
    ArenaTooSmall {
        addr: u64,
        need: usize,
        found: usize,
    },
    #[error("virtual address 0x{addr:x} is not mapped for this access")]
    Unmapped { addr: u64 },
    #[error("invalid cache geometry: {0}")]
    BadGeometry(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LevelConfig {
    pub sets: usize,
    pub ways: usize,
    pub hit_latency: u64,
}

/// Geometry and latencies for the three cache levels plus DRAM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CacheConfig {
    pub line_size: u64,
    pub l1: LevelConfig,
    pub l2: LevelConfig,
    pub llc: LevelConfig,
    pub dram_latency: u64,
    pub inclusive: bool,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            line_size: 64,
            l1: LevelConfig {
                sets: 64,
                ways: 8,
                hit_latency: 4,
            },
            l2: LevelConfig {
                sets: 512,
                ways: 8,
                hit_latency: 12,
            },
            llc: LevelConfig {
                sets: 4096,
                ways: 16,
                hit_latency: 40,
            },
            dram_latency: 200,
            inclusive: true,
        }
    }
}

impl CacheConfig {
    pub fn validate(&self) -> Result<(), MemError> {
        if !self.line_size.is_power_of_two() {
            return Err(MemError::BadGeometry(
                "line_size must be a power of two".into(),
            ));
        }
        for lv in [&self.l1, &self.l2, &self.llc] {
            if lv.sets == 0 || !lv.sets.is_power_of_two() || lv.ways == 0 {
                return Err(MemError::BadGeometry(
                    "sets must be a nonzero power of two".into(),
                ));
            }
        }
        let increasing = self.l1.hit_latency < self.l2.hit_latency
            && self.l2.hit_latency < self.llc.hit_latency
            && self.llc.hit_latency < self.dram_latency;
        if !increasing {
            return Err(MemError::BadGeometry(
                "hit latencies must strictly increase L1 < L2 < LLC < DRAM".into(),
            ));
        }
        Ok(())
    }

    fn level(&self, lv: Level) -> &LevelConfig {
        match lv {
            Level::L1 => &self.l1,
            Level::L2 => &self.l2,
            Level::Llc => &self.llc,
            Level::Dram => unreachable!("DRAM is not a cache level"),
        }
    }

    pub fn latency_of(&self, lv: Level) -> u64 {
        match lv {
            Level::L1 => self.l1.hit_latency,
            Level::L2 => self.l2.hit_latency,
            Level::Llc => self.llc.hit_latency,
            Level::Dram => self.dram_latency,
        }
    }

    pub fn set_index(&self, lv: Level, addr: u64) -> usize {
        ((addr / self.line_size) % self.level(lv).sets as u64) as usize
    }

    fn tag(&self, lv: Level, addr: u64) -> u64 {
        addr / self.line_size / self.level(lv).sets as u64
    }

    pub fn line_base(&self, addr: u64) -> u64 {
        addr & !(self.line_size - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Level {
    L1,
    L2,
    Llc,
    Dram,
}

pub const CACHE_LEVELS: [Level; 3] = [Level::L1, Level::L2, Level::Llc];

impl Level {
    pub fn name(self) -> &'static str {
        match self {
            Level::L1 => "L1",
            Level::L2 => "L2",
            Level::Llc => "LLC",
            Level::Dram => "DRAM",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Read,
    Write,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessResult {
    pub value: Vec<u8>,
    pub latency: u64,
    pub hit_level: Level,
}

/// One cache level: per-set lists of tags ordered most-recently-used first.
#[derive(Debug, Clone, PartialEq, Eq)]
struct CacheLevel {
    ways: usize,
    sets: Vec<Vec<u64>>,
}

impl CacheLevel {
    fn new(cfg: &LevelConfig) -> Self {
        CacheLevel {
            ways: cfg.ways,
            sets: vec![Vec::new(); cfg.sets],
        }
    }

    fn holds(&self, set: usize, tag: u64) -> bool {
        self.sets[set].contains(&tag)
    }

    fn touch(&mut self, set: usize, tag: u64) {
        let s = &mut self.sets[set];
        if let Some(pos) = s.iter().position(|t| *t == tag) {
            s.remove(pos);
        }
        s.insert(0, tag);
    }

    /// Install as MRU; returns the evicted tag if the set overflowed.
    fn install(&mut self, set: usize, tag: u64) -> Option<u64> {
        self.touch(set, tag);
        if self.sets[set].len() > self.ways {
            self.sets[set].pop()
        } else {
            None
        }
    }

    fn remove(&mut self, set: usize, tag: u64) {
        self.sets[set].retain(|t| *t != tag);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct LevelStats {
    pub hits: u64,
    pub misses: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct CacheStats {
    pub l1: LevelStats,
    pub l2: LevelStats,
    pub llc: LevelStats,
}

impl CacheStats {
    pub fn to_csv(&self) -> String {
        format!(
            "level,hits,misses\nL1,{},{}\nL2,{},{}\nLLC,{},{}\n",
            self.l1.hits,
            self.l1.misses,
            self.l2.hits,
            self.l2.misses,
            self.llc.hits,
            self.llc.misses
        )
    }
}

/// Sparse physical memory. Reads of never-written addresses return 0.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MemoryImage {
    pages: HashMap<u64, Box<[u8]>>,
}

impl MemoryImage {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn read_byte(&self, addr: u64) -> u8 {
        match self.pages.get(&(addr / PAGE_SIZE)) {
            Some(p) => p[(addr % PAGE_SIZE) as usize],
            None => 0,
        }
    }

    pub fn read(&self, addr: u64, size: u64) -> Vec<u8> {
        (0..size).map(|i| self.read_byte(addr + i)).collect()
    }

    pub fn read_u64(&self, addr: u64) -> u64 {
        let mut v = [0u8; 8];
        for (i, b) in v.iter_mut().enumerate() {
            *b = self.read_byte(addr + i as u64);
        }
        u64::from_le_bytes(v)
    }

    pub fn write_byte(&mut self, addr: u64, value: u8) {
        let page = self
            .pages
            .entry(addr / PAGE_SIZE)
            .or_insert_with(|| vec![0u8; PAGE_SIZE as usize].into_boxed_slice());
        page[(addr % PAGE_SIZE) as usize] = value;
    }

    pub fn write(&mut self, addr: u64, bytes: &[u8]) {
        for (i, b) in bytes.iter().enumerate() {
            self.write_byte(addr + i as u64, *b);
        }
    }

    pub fn write_u64(&mut self, addr: u64, value: u64) {
        self.write(addr, &value.to_le_bytes());
    }
}

/// The cache hierarchy. Owned by one simulation run; never shared.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheHierarchy {
    pub config: CacheConfig,
    l1: CacheLevel,
    l2: CacheLevel,
    llc: CacheLevel,
    pub stats: CacheStats,
}

impl CacheHierarchy {
    pub fn new(config: CacheConfig) -> Result<Self, MemError> {
        config.validate()?;
        Ok(CacheHierarchy {
            l1: CacheLevel::new(&config.l1),
            l2: CacheLevel::new(&config.l2),
            llc: CacheLevel::new(&config.llc),
            config,
            stats: CacheStats::default(),
        })
    }

    fn level_mut(&mut self, lv: Level) -> &mut CacheLevel {
        match lv {
            Level::L1 => &mut self.l1,
            Level::L2 => &mut self.l2,
            Level::Llc => &mut self.llc,
            Level::Dram => unreachable!(),
        }
    }

    fn level_ref(&self, lv: Level) -> &CacheLevel {
        match lv {
            Level::L1 => &self.l1,
            Level::L2 => &self.l2,
            Level::Llc => &self.llc,
            Level::Dram => unreachable!(),
        }
    }

    /// Highest level currently holding the line containing `addr`, without
    /// perturbing any state.
    pub fn probe_level(&self, addr: u64) -> Level {
        for lv in CACHE_LEVELS {
            let set = self.config.set_index(lv, addr);
            let tag = self.config.tag(lv, addr);
            if self.level_ref(lv).holds(set, tag) {
                return lv;
            }
        }
        Level::Dram
    }

    /// Perform one timed access against the hierarchy and memory image.
    ///
    /// `fill = true` installs the line in every level up to L1 and promotes
    /// it to most-recently-used, evicting LRU victims. `fill = false` returns
    /// the data and latency but leaves the hierarchy (including recency and
    /// stats) byte-for-byte unchanged.
    pub fn access(
        &mut self,
        memory: &mut MemoryImage,
        addr: u64,
        size: u64,
        kind: AccessKind,
        data: Option<&[u8]>,
        fill: bool,
    ) -> Result<AccessResult, MemError> {
        if size == 0 {
            return Err(MemError::ZeroSize { addr });
        }
        let line = self.config.line_size;
        if addr % line + size > line {
            return Err(MemError::LineStraddle { addr, size, line });
        }

        let hit_level = self.probe_level(addr);
        let latency = self.config.latency_of(hit_level);

        if fill {
            match hit_level {
                Level::L1 => self.stats.l1.hits += 1,
                Level::L2 => {
                    self.stats.l1.misses += 1;
                    self.stats.l2.hits += 1;
                }
                Level::Llc => {
                    self.stats.l1.misses += 1;
                    self.stats.l2.misses += 1;
                    self.stats.llc.hits += 1;
                }
                Level::Dram => {
                    self.stats.l1.misses += 1;
                    self.stats.l2.misses += 1;
                    self.stats.llc.misses += 1;
                }
            }
            self.install_line(addr);
        }

        if kind == AccessKind::Write {
            if fill {
                let bytes = data.expect("write access requires data");
                assert!(bytes.len() as u64 == size, "write size mismatch");
                memory.write(addr, bytes);
            }
            return Ok(AccessResult {
                value: Vec::new(),
                latency,
                hit_level,
            });
        }

        Ok(AccessResult {
            value: memory.read(addr, size),
            latency,
            hit_level,
        })
    }

    /// Convenience read with fill.
    pub fn read(
        &mut self,
        memory: &mut MemoryImage,
        addr: u64,
        size: u64,
    ) -> Result<AccessResult, MemError> {
        self.access(memory, addr, size, AccessKind::Read, None, true)
    }

    fn install_line(&mut self, addr: u64) {
        // LLC first so inclusive back-invalidation cannot drop the line we are
        // about to install in L1/L2.
        let llc_set = self.config.set_index(Level::Llc, addr);
        let llc_tag = self.config.tag(Level::Llc, addr);
        if let Some(victim_tag) = self.llc.install(llc_set, llc_tag) {
            if self.config.inclusive {
                let victim_addr = (victim_tag * self.config.llc.sets as u64 + llc_set as u64)
                    * self.config.line_size;
                for lv in [Level::L1, Level::L2] {
                    let set = self.config.set_index(lv, victim_addr);
                    let tag = self.config.tag(lv, victim_addr);
                    self.level_mut(lv).remove(set, tag);
                }
            }
        }
        for lv in [Level::L2, Level::L1] {
            let set = self.config.set_index(lv, addr);
            let tag = self.config.tag(lv, addr);
            self.level_mut(lv).install(set, tag);
        }
    }

    /// Remove the line containing `addr` from every level. Flushing an absent
    /// line is a no-op.
    pub fn flush_line(&mut self, addr: u64) {
        for lv in CACHE_LEVELS {
            let set = self.config.set_index(lv, addr);
            let tag = self.config.tag(lv, addr);
            self.level_mut(lv).remove(set, tag);
        }
    }

    /// True when the two addresses fall in the same set at every cache level.
    pub fn congruent(&self, a: u64, b: u64) -> bool {
        CACHE_LEVELS
            .iter()
            .all(|lv| self.config.set_index(*lv, a) == self.config.set_index(*lv, b))
    }
}

/// Page permissions for one mapped virtual page.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PagePerms {
    pub read: bool,
    pub write: bool,
    pub execute: bool,
}

impl PagePerms {
    pub const R: PagePerms = PagePerms {
        read: true,
        write: false,
        execute: false,
    };
    pub const RW: PagePerms = PagePerms {
        read: true,
        write: true,
        execute: false,
    };
    pub const RX: PagePerms = PagePerms {
        read: true,
        write: false,
        execute: true,
    };

    pub fn allows(&self, kind: Access) -> bool {
        match kind {
            Access::Read => self.read,
            Access::Write => self.write,
            Access::Execute => self.execute,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Read,
    Write,
    Execute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MappedPage {
    pub phys_page: u64,
    pub perms: PagePerms,
}

/// Per-context virtual-to-physical mapping. Distinct contexts may map
/// different virtual pages onto the same physical page (shared pages).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PageTable {
    map: HashMap<u64, MappedPage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TranslateFault {
    Unmapped { vaddr: u64 },
    Permission { vaddr: u64 },
}

impl PageTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn map(&mut self, vaddr: u64, phys: u64, perms: PagePerms) {
        debug_assert_eq!(vaddr % PAGE_SIZE, 0);
        debug_assert_eq!(phys % PAGE_SIZE, 0);
        self.map.insert(
            vaddr / PAGE_SIZE,
            MappedPage {
                phys_page: phys / PAGE_SIZE,
                perms,
            },
        );
    }

    /// Map `pages` consecutive virtual pages starting at `vaddr` onto
    /// consecutive physical pages starting at `phys`.
    pub fn map_range(&mut self, vaddr: u64, phys: u64, pages: u64, perms: PagePerms) {
        for i in 0..pages {
            self.map(vaddr + i * PAGE_SIZE, phys + i * PAGE_SIZE, perms);
        }
    }

    pub fn translate(&self, vaddr: u64, kind: Access) -> Result<u64, TranslateFault> {
        let page = self
            .map
            .get(&(vaddr / PAGE_SIZE))
            .ok_or(TranslateFault::Unmapped { vaddr })?;
        if !page.perms.allows(kind) {
            return Err(TranslateFault::Permission { vaddr });
        }
        Ok(page.phys_page * PAGE_SIZE + vaddr % PAGE_SIZE)
    }

    pub fn is_mapped(&self, vaddr: u64) -> bool {
        self.map.contains_key(&(vaddr / PAGE_SIZE))
    }
}

/// A contiguous virtual range reserved for cache-set contention walks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvictionArena {
    pub base: u64,
    pub pages: u64,
}

/// Virtual addresses inside `arena` that map (through `pt`) onto the same
/// set as `vaddr` at every cache level.
///
/// The caller's arena must be mapped; candidates keep the in-line offset of
/// `vaddr` so reading all of them then probing `vaddr` produces a DRAM hit
/// whenever `count` exceeds the ways of every level.
pub fn congruent_addresses(
    hierarchy: &CacheHierarchy,
    pt: &PageTable,
    arena: &EvictionArena,
    vaddr: u64,
    count: usize,
) -> Result<Vec<u64>, MemError> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let target_phys = pt
        .translate(vaddr, Access::Read)
        .map_err(|_| MemError::ArenaTooSmall {
            addr: vaddr,
            need: count,
            found: 0,
        })?;
    let offset_in_page = vaddr % PAGE_SIZE;
    let mut out = Vec::with_capacity(count);
    for i in 0..arena.pages {
        let candidate = arena.base + i * PAGE_SIZE + offset_in_page;
        if let Ok(phys) = pt.translate(candidate, Access::Read) {
            if phys != target_phys && hierarchy.congruent(phys, target_phys) {
                out.push(candidate);
                if out.len() == count {
                    return Ok(out);
                }
            }
        }
    }
    Err(MemError::ArenaTooSmall {
        addr: vaddr,
        need: count,
        found: out.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fresh() -> (CacheHierarchy, MemoryImage) {
        (
            CacheHierarchy::new(CacheConfig::default()).unwrap(),
            MemoryImage::new(),
        )
    }

    #[test]
    fn cold_read_hits_dram() {
        let (mut h, mut m) = fresh();
        let r = h.read(&mut m, 0x1000, 1).unwrap();
        assert_eq!(r.hit_level, Level::Dram);
        assert_eq!(r.latency, 200);
        assert_eq!(r.value, vec![0]);
    }

    #[test]
    fn fill_then_hit_l1() {
        let (mut h, mut m) = fresh();
        m.write_byte(0x1000, 0x5a);
        h.read(&mut m, 0x1000, 1).unwrap();
        let r = h.read(&mut m, 0x1000, 1).unwrap();
        assert_eq!(r.hit_level, Level::L1);
        assert_eq!(r.latency, 4);
        assert_eq!(r.value, vec![0x5a]);
    }

    #[test]
    fn lru_eviction_after_ways_plus_one_conflicts() {
        // 8-way L1: reading 9 distinct lines congruent to A's L1 set evicts A
        // from L1. With the default inclusive geometry the 9 lines coexist in
        // L2/LLC, so A must also not be resurrected from there for the L1
        // check; probe L1 presence directly.
        let (mut h, mut m) = fresh();
        let a = 0x1_0000u64;
        h.read(&mut m, a, 1).unwrap();
        let l1_span = 64 * 64; // line_size * l1.sets
        for i in 1..=9u64 {
            h.read(&mut m, a + i * l1_span, 1).unwrap();
        }
        let set = h.config.set_index(Level::L1, a);
        let tag = h.config.tag(Level::L1, a);
        assert!(!h.l1.holds(set, tag), "A should be LRU-evicted from L1");
    }

    #[test]
    fn full_eviction_to_dram_via_llc_conflicts() {
        // Walk LLC-ways + 1 lines congruent at every level: A leaves the
        // whole hierarchy (inclusive back-invalidation included).
        let (mut h, mut m) = fresh();
        let a = 0x10_0000u64;
        let llc_span = 64 * 4096; // line_size * llc.sets; multiple of every level's span
        h.read(&mut m, a, 1).unwrap();
        for i in 1..=17u64 {
            h.read(&mut m, a + i * llc_span, 1).unwrap();
        }
        assert_eq!(h.probe_level(a), Level::Dram);
    }

    #[test]
    fn flush_line_granularity() {
        let (mut h, mut m) = fresh();
        h.read(&mut m, 0x2000, 1).unwrap();
        h.read(&mut m, 0x2040, 1).unwrap();
        h.flush_line(0x2000);
        assert_eq!(h.probe_level(0x2000), Level::Dram);
        assert_eq!(h.probe_level(0x2040), Level::L1);
    }

    #[test]
    fn flush_untouched_line_is_noop() {
        let (mut h, _m) = fresh();
        let before = h.clone();
        h.flush_line(0x3000);
        assert_eq!(h, before);
    }

    #[test]
    fn flush_then_reread_is_dram() {
        let (mut h, mut m) = fresh();
        h.read(&mut m, 0x4000, 1).unwrap();
        h.flush_line(0x4000);
        let r = h.read(&mut m, 0x4000, 1).unwrap();
        assert_eq!(r.hit_level, Level::Dram);
    }

    #[test]
    fn no_fill_access_is_pure() {
        let (mut h, mut m) = fresh();
        m.write_byte(0x5000, 9);
        h.read(&mut m, 0x5000, 1).unwrap();
        h.read(&mut m, 0x5040, 1).unwrap();
        let before = h.clone();
        for addr in [0x5000u64, 0x5040, 0x9000, 0x5000] {
            let r = h
                .access(&mut m, addr, 1, AccessKind::Read, None, false)
                .unwrap();
            assert_eq!(r.latency, h.config.latency_of(r.hit_level));
        }
        assert_eq!(h, before);
    }

    #[test]
    fn straddle_and_zero_size_rejected() {
        let (mut h, mut m) = fresh();
        assert!(matches!(
            h.read(&mut m, 0x103e, 8),
            Err(MemError::LineStraddle { .. })
        ));
        assert!(matches!(
            h.read(&mut m, 0x1000, 0),
            Err(MemError::ZeroSize { .. })
        ));
    }

    #[test]
    fn inclusive_llc_eviction_back_invalidates() {
        let (mut h, mut m) = fresh();
        let a = 0x20_0000u64;
        h.read(&mut m, a, 1).unwrap();
        assert_eq!(h.probe_level(a), Level::L1);
        let llc_span = 64 * 4096;
        for i in 1..=16u64 {
            h.read(&mut m, a + i * llc_span, 1).unwrap();
        }
        // A was the LRU line of a 16-way LLC set after 16 newer fills.
        assert_eq!(h.probe_level(a), Level::Dram);
    }

    #[test]
    fn congruent_addresses_share_sets() {
        let h = CacheHierarchy::new(CacheConfig::default()).unwrap();
        let mut pt = PageTable::new();
        // Identity-map an arena covering 18 LLC periods.
        let arena = EvictionArena {
            base: 0xA0_0000,
            pages: 18 * 64,
        };
        pt.map_range(arena.base, arena.base, arena.pages, PagePerms::R);
        pt.map(0x9000, 0x9000, PagePerms::R);
        let target_phys = pt.translate(0x9040, Access::Read).unwrap();
        let addrs = congruent_addresses(&h, &pt, &arena, 0x9040, 17).unwrap();
        assert_eq!(addrs.len(), 17);
        for a in &addrs {
            let pa = pt.translate(*a, Access::Read).unwrap();
            for lv in CACHE_LEVELS {
                assert_eq!(
                    h.config.set_index(lv, pa),
                    h.config.set_index(lv, target_phys),
                    "level {lv:?}"
                );
            }
        }
    }

    #[test]
    fn congruent_addresses_count_zero() {
        let h = CacheHierarchy::new(CacheConfig::default()).unwrap();
        let pt = PageTable::new();
        let arena = EvictionArena { base: 0, pages: 0 };
        assert_eq!(
            congruent_addresses(&h, &pt, &arena, 0x40, 0).unwrap(),
            Vec::<u64>::new()
        );
    }

    #[test]
    fn congruent_walk_evicts_target() {
        let (mut h, mut m) = fresh();
        let mut pt = PageTable::new();
        let arena = EvictionArena {
            base: 0xA0_0000,
            pages: 18 * 64,
        };
        pt.map_range(arena.base, arena.base, arena.pages, PagePerms::R);
        pt.map(0x9000, 0x9000, PagePerms::R);
        let target = 0x9040u64;
        h.read(&mut m, target, 1).unwrap();
        assert_eq!(h.probe_level(target), Level::L1);
        let addrs = congruent_addresses(&h, &pt, &arena, target, 17).unwrap();
        for a in addrs {
            let pa = pt.translate(a, Access::Read).unwrap();
            h.read(&mut m, pa, 1).unwrap();
        }
        assert_eq!(h.probe_level(target), Level::Dram);
    }

    #[test]
    fn arena_too_small_reported() {
        let h = CacheHierarchy::new(CacheConfig::default()).unwrap();
        let mut pt = PageTable::new();
        let arena = EvictionArena {
            base: 0xA0_0000,
            pages: 64,
        };
        pt.map_range(arena.base, arena.base, arena.pages, PagePerms::R);
        pt.map(0x9000, 0x9000, PagePerms::R);
        let err = congruent_addresses(&h, &pt, &arena, 0x9040, 17).unwrap_err();
        assert!(matches!(err, MemError::ArenaTooSmall { need: 17, .. }));
    }

    #[test]
    fn stats_csv_shape() {
        let (mut h, mut m) = fresh();
        h.read(&mut m, 0x1000, 1).unwrap();
        h.read(&mut m, 0x1000, 1).unwrap();
        let csv = h.stats.to_csv();
        assert!(csv.starts_with("level,hits,misses\n"));
        assert!(csv.contains("L1,1,1"));
    }

    #[test]
    fn determinism_identical_traces() {
        let run = || {
            let (mut h, mut m) = fresh();
            let mut results = Vec::new();
            for i in 0..200u64 {
                let addr = ((i * 0x419) % 0x10000) & !1;
                results.push(h.read(&mut m, addr, 1).unwrap());
            }
            (h, results)
        };
        let (h1, r1) = run();
        let (h2, r2) = run();
        assert_eq!(r1, r2);
        assert_eq!(h1, h2);
    }

    mod lru_reference {
        use super::*;

        /// Brute-force single-level LRU model: per set, a recency-ordered list
        /// replayed from scratch.
        struct RefLevel {
            sets: usize,
            ways: usize,
            line: u64,
            recency: Vec<Vec<u64>>,
        }

        impl RefLevel {
            fn new(sets: usize, ways: usize, line: u64) -> Self {
                RefLevel {
                    sets,
                    ways,
                    line,
                    recency: vec![Vec::new(); sets],
                }
            }

            fn access(&mut self, addr: u64) -> bool {
                let set = ((addr / self.line) % self.sets as u64) as usize;
                let tag = addr / self.line / self.sets as u64;
                let list = &mut self.recency[set];
                let hit = list.iter().position(|t| *t == tag);
                if let Some(p) = hit {
                    list.remove(p);
                }
                list.insert(0, tag);
                list.truncate(self.ways);
                hit.is_some()
            }

            fn holds(&self, addr: u64) -> bool {
                let set = ((addr / self.line) % self.sets as u64) as usize;
                let tag = addr / self.line / self.sets as u64;
                self.recency[set].contains(&tag)
            }
        }

        proptest::proptest! {
            #[test]
            fn lru_law_matches_reference(trace in proptest::collection::vec(0u64..0x8000, 1..64)) {
                // Non-inclusive so L1 sees no back-invalidation and behaves as
                // an independent strict-LRU level the reference can mirror.
                let cfg = CacheConfig {
                    inclusive: false,
                    ..CacheConfig::default()
                };
                let mut h = CacheHierarchy::new(cfg).unwrap();
                let mut m = MemoryImage::new();
                let mut reference = RefLevel::new(cfg.l1.sets, cfg.l1.ways, cfg.line_size);
                for a in &trace {
                    let addr = a & !0x3f;
                    let hit = h.read(&mut m, addr, 1).unwrap().hit_level == Level::L1;
                    let ref_hit = reference.access(addr);
                    proptest::prop_assert_eq!(hit, ref_hit, "L1 hit mismatch at 0x{:x}", addr);
                }
                for a in &trace {
                    let addr = a & !0x3f;
                    proptest::prop_assert_eq!(
                        h.probe_level(addr) == Level::L1,
                        reference.holds(addr)
                    );
                }
            }

            #[test]
            fn no_fill_purity_holds(
                warm in proptest::collection::vec(0u64..0x8000, 0..32),
                probes in proptest::collection::vec(0u64..0x8000, 1..32),
            ) {
                let mut h = CacheHierarchy::new(CacheConfig::default()).unwrap();
                let mut m = MemoryImage::new();
                for a in warm {
                    h.read(&mut m, a & !0x3f, 1).unwrap();
                }
                let before = h.clone();
                for a in probes {
                    h.access(&mut m, a & !0x3f, 1, AccessKind::Read, None, false).unwrap();
                }
                proptest::prop_assert_eq!(h, before);
            }
        }
    }
}
