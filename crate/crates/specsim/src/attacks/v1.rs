//! Conditional-branch misprediction scenario: a victim routine guards an
//! array read with a bounds check; the driver trains the check taken, makes
//! the bound uncached, then calls once with an out-of-bounds index that
//! resolves to a planted secret byte. The transient double load encodes that
//! byte in probe-array cache state.

use super::{
    stride_shift, AttackReport, ByteOutcome, Layout, Scenario, ScenarioConfig, ScenarioError,
    SplitMix, Variant,
};
use crate::channels::{evict_line, evict_probe_array};
use crate::channels::{flush_probe_array, reload_and_classify, ProbeResult};
use crate::isa::assemble;
use crate::mem::CacheHierarchy;
use crate::mem::{Access, EvictionArena, Level, PagePerms, PageTable, PAGE_SIZE};
use crate::mitigations::insert_fences;
use crate::pipeline::{ContextDescriptor, RunOptions, Simulation, Stop};
use crate::predictor::PredictorState;
use std::fmt::Write as _;

const ARRAY1_LEN: usize = 16;

/// Build the single-context conditional-branch scenario. The driver loops
/// `CALL victim; YIELD`, so every segment between stops is exactly one victim
/// call with the index register set by the orchestrator.
pub fn build_v1(config: &ScenarioConfig) -> Result<Scenario, ScenarioError> {
    if config.secret.is_empty() {
        return Err(ScenarioError::Config("secret must be non-empty".into()));
    }
    if config.training_passes == 0 {
        return Err(ScenarioError::Config("training_passes must be >= 1".into()));
    }
    let mut layout = Layout::default();
    let shift = stride_shift(config.probe.stride)?;
    layout.probe_base = config.probe.probe_base_or(layout.probe_base);

    let probe_bytes = config.probe.entries as u64 * config.probe.stride;
    let probe_pages = probe_bytes.div_ceil(PAGE_SIZE);

    // The secret must stay clear of every probe-array cache set: eviction
    // walks hammer those sets and would keep un-warming the secret line.
    check_secret_placement(config, &layout)?;

    let mut src = String::new();
    let w = &mut src;
    // Driver: one victim call per yield boundary; r20 holds the index.
    writeln!(w, ".org 0x{:x}", layout.driver_base).unwrap();
    writeln!(w, "d_loop: CALL victim").unwrap();
    writeln!(w, "YIELD").unwrap();
    writeln!(w, "JMP d_loop").unwrap();

    // Victim: bounds-checked double load, Listing-1 shape. The bound check
    // carries its memory operand so its resolution waits on the bound line.
    writeln!(w, ".org 0x{:x}", layout.victim_base).unwrap();
    writeln!(w, "victim: MOVI r21, 0x{:x}", layout.array1).unwrap();
    writeln!(w, "MOVI r22, 0x{:x}", layout.probe_base).unwrap();
    writeln!(w, "BLT r20, [0x{:x}], body", layout.array1_size_addr).unwrap();
    writeln!(w, "RET").unwrap();
    writeln!(w, "body:").unwrap();
    for _ in 0..config.pad {
        writeln!(w, "ADD r19, r19, 1").unwrap();
    }
    writeln!(w, "LOAD r23, [r21 + r20*1]").unwrap();
    writeln!(w, "SHL r23, r23, {shift}").unwrap();
    writeln!(w, "LOAD r24, [r22 + r23*1]").unwrap();
    writeln!(w, "RET").unwrap();

    // Data: in-bounds array, its size byte, and the planted secret.
    writeln!(w, ".org 0x{:x}", layout.array1).unwrap();
    let cells: Vec<String> = (0..ARRAY1_LEN).map(|i| i.to_string()).collect();
    writeln!(w, ".byte {}", cells.join(", ")).unwrap();
    writeln!(w, ".org 0x{:x}", layout.array1_size_addr).unwrap();
    writeln!(w, ".byte {ARRAY1_LEN}").unwrap();
    writeln!(w, ".org 0x{:x}", layout.secret_addr).unwrap();
    let secret_cells: Vec<String> = config.secret.iter().map(|b| b.to_string()).collect();
    writeln!(w, ".byte {}", secret_cells.join(", ")).unwrap();

    let mut program = assemble(&src)?;
    if config.mitigations.fence_after_branches {
        program = insert_fences(&program)?;
    }

    // Identity-mapped context. The eviction arena is mapped even for the
    // flush variant; only the evict variant walks it.
    let arena = EvictionArena {
        base: layout.arena_base,
        pages: 18 * (config.cache.line_size * config.cache.llc.sets as u64 / PAGE_SIZE).max(1),
    };
    layout.arena_pages = arena.pages;
    let mut pt = PageTable::new();
    pt.map_range(layout.driver_base, layout.driver_base, 1, PagePerms::RX);
    pt.map_range(layout.victim_base, layout.victim_base, 1, PagePerms::RX);
    pt.map_range(
        layout.array1 & !(PAGE_SIZE - 1),
        layout.array1 & !(PAGE_SIZE - 1),
        1,
        PagePerms::R,
    );
    pt.map_range(
        layout.probe_base,
        layout.probe_base,
        probe_pages,
        PagePerms::R,
    );
    pt.map_range(arena.base, arena.base, arena.pages, PagePerms::R);

    let ctx = ContextDescriptor {
        page_table: pt,
        entry: program.entry,
        reg_seed: Vec::new(),
        clflush_allowed: config.variant == Variant::V1Flush,
        arena: Some(arena),
    };
    let mut sim_config = config.sim.clone();
    sim_config.contexts = vec![ctx];

    Ok(Scenario {
        programs: vec![program],
        sim_config,
        layout,
        config: config.clone(),
    })
}

fn check_secret_placement(config: &ScenarioConfig, layout: &Layout) -> Result<(), ScenarioError> {
    let page_base = layout.secret_addr & !(PAGE_SIZE - 1);
    let end = layout.secret_addr + config.secret.len() as u64;
    if end > page_base + PAGE_SIZE {
        return Err(ScenarioError::SecretPlacement(format!(
            "secret of {} bytes overruns the data page",
            config.secret.len()
        )));
    }
    let line = config.cache.line_size;
    let llc_sets = config.cache.llc.sets as u64;
    let probe_sets: std::collections::HashSet<u64> = (0..config.probe.entries as u64)
        .map(|i| (layout.probe_base / line + i * (config.probe.stride / line)) % llc_sets)
        .collect();
    let mut addr = layout.secret_addr & !(line - 1);
    while addr < end {
        if probe_sets.contains(&((addr / line) % llc_sets)) {
            return Err(ScenarioError::SecretPlacement(format!(
                "secret line 0x{addr:x} shares a cache set with the probe array"
            )));
        }
        addr += line;
    }
    // The bound byte must also stay clear: the evict variant hammers each
    // probe set, and evicting the bound's set from under it is expected, but
    // the converse (probe walks evicting the bound mid-phase) is ordered
    // around; only the secret is load-bearing here.
    Ok(())
}

impl crate::channels::ProbeConfig {
    fn probe_base_or(&self, fallback: u64) -> u64 {
        if self.probe_base == 0 {
            fallback
        } else {
            self.probe_base
        }
    }
}

/// One byte's attack session over a fresh simulation: training calls, the
/// cache-preparation phase, one malicious call, then the probe.
pub struct V1Session {
    pub sim: Simulation,
    layout: Layout,
    config: ScenarioConfig,
    rng: SplitMix,
    byte_index: usize,
}

impl V1Session {
    pub fn new(scenario: &Scenario, byte_index: usize) -> Result<Self, ScenarioError> {
        let secret_line_stride = scenario.config.cache.line_size;
        let secret_addr = scenario.layout.secret_addr + byte_index as u64;
        let watch_lines = vec![secret_addr & !(secret_line_stride - 1)];
        let sim = Simulation::new(
            scenario.sim_config.clone(),
            &scenario.programs,
            CacheHierarchy::new(scenario.config.cache)?,
            PredictorState::new(scenario.config.predictor),
            scenario.config.mitigations,
            RunOptions {
                watch_lines,
                ..RunOptions::default()
            },
        )?;
        Ok(V1Session {
            sim,
            layout: scenario.layout,
            config: scenario.config.clone(),
            rng: SplitMix(scenario.config.seed ^ (byte_index as u64).wrapping_mul(0xD6E8_FEB8)),
            byte_index,
        })
    }

    pub fn target_addr(&self) -> u64 {
        self.layout.secret_addr + self.byte_index as u64
    }

    pub fn malicious_index(&self) -> u64 {
        self.target_addr().wrapping_sub(self.layout.array1)
    }

    /// Physical probe line a leaked byte value lands on.
    pub fn hot_line_for(&self, value: u8) -> u64 {
        let vaddr = self.layout.probe_base + value as u64 * self.config.probe.stride;
        self.sim
            .context_page_table(0)
            .translate(vaddr, Access::Read)
            .expect("probe array mapped")
    }

    fn one_call(&mut self, index: u64) -> Result<(), ScenarioError> {
        self.sim.poke_reg(0, 20, index);
        match self.sim.run_to_stop()? {
            Stop::Yield { .. } => Ok(()),
            Stop::AllHalted => Err(ScenarioError::Fault("driver halted unexpectedly".into())),
            Stop::Fault(f) => Err(ScenarioError::Fault(format!("victim faulted: {f:?}"))),
        }
    }

    pub fn train_once(&mut self) -> Result<(), ScenarioError> {
        let idx = self.rng.next_u64() % ARRAY1_LEN as u64;
        self.one_call(idx)
    }

    /// Make the bound and the probe array uncached, by flush or by set
    /// contention depending on the variant.
    pub fn prepare_cache(&mut self) -> Result<(), ScenarioError> {
        let pt = self.sim.context_page_table(0).clone();
        let size_phys = pt
            .translate(self.layout.array1_size_addr, Access::Read)
            .expect("bound mapped");
        match self.config.variant {
            Variant::V1Flush => {
                let probe = self.probe_cfg();
                self.sim.hierarchy.flush_line(size_phys);
                flush_probe_array(&mut self.sim.hierarchy, &pt, &probe)?;
            }
            Variant::V1Evict => {
                let probe = self.probe_cfg();
                let arena = self.sim.context_arena(0).expect("arena mapped");
                evict_line(
                    &mut self.sim.hierarchy,
                    &mut self.sim.memory,
                    &pt,
                    &arena,
                    self.layout.array1_size_addr,
                )?;
                evict_probe_array(
                    &mut self.sim.hierarchy,
                    &mut self.sim.memory,
                    &pt,
                    &arena,
                    &probe,
                )?;
            }
            Variant::V2Btb => unreachable!("v1 session"),
        }
        Ok(())
    }

    pub fn malicious_call(&mut self) -> Result<(), ScenarioError> {
        self.one_call(self.malicious_index())
    }

    pub fn probe(&mut self) -> Result<ProbeResult, ScenarioError> {
        let pt = self.sim.context_page_table(0).clone();
        let probe = self.probe_cfg();
        Ok(reload_and_classify(
            &mut self.sim.hierarchy,
            &mut self.sim.memory,
            &pt,
            &probe,
        )?)
    }

    fn probe_cfg(&self) -> crate::channels::ProbeConfig {
        crate::channels::ProbeConfig {
            probe_base: self.layout.probe_base,
            ..self.config.probe
        }
    }

    /// Cache level currently holding the probe line for `value`, without
    /// disturbing anything.
    pub fn residency_of(&self, value: u8) -> Level {
        self.sim.hierarchy.probe_level(self.hot_line_for(value))
    }

    /// Run one attempt: train, prepare the cache, one malicious call, probe.
    pub fn attempt(&mut self) -> Result<ProbeResult, ScenarioError> {
        for _ in 0..self.config.training_passes {
            self.train_once()?;
        }
        self.prepare_cache()?;
        self.malicious_call()?;
        self.probe()
    }

    /// Architectural reads of the watched secret line that retired.
    pub fn retired_secret_reads(&self) -> u64 {
        let line = self.target_addr() & !(self.config.cache.line_size - 1);
        self.sim
            .trace(None)
            .watch
            .get(&line)
            .map(|w| w.retired_reads)
            .unwrap_or(0)
    }
}

/// Recover every secret byte. With mitigations off and default geometry the
/// recovery is exact; an ambiguous byte after all attempts is recorded as 0.
pub fn run_v1(scenario: &Scenario) -> Result<AttackReport, ScenarioError> {
    let mut bytes = Vec::with_capacity(scenario.config.secret.len());
    let mut total_cycles = 0u64;
    for i in 0..scenario.config.secret.len() {
        let mut session = V1Session::new(scenario, i)?;
        let mut outcome = ByteOutcome {
            target: session.target_addr(),
            value: 0,
            correct: false,
            attempts: scenario.config.attempts_per_byte,
        };
        for attempt in 1..=scenario.config.attempts_per_byte {
            let result = session.attempt()?;
            if let Some(best) = result.best {
                outcome.value = best as u8;
                outcome.correct = best as u8 == scenario.config.secret[i];
                outcome.attempts = attempt;
                break;
            }
        }
        total_cycles += session.sim.cycle();
        bytes.push(outcome);
    }
    Ok(AttackReport::from_bytes(
        scenario.config.variant.name(),
        &scenario.config.secret,
        bytes,
        total_cycles,
        scenario.config.mitigations,
        scenario.config.seed,
    ))
}
