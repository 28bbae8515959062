//! Indirect-branch poisoning scenario: the attacker context executes indirect
//! jumps whose pc aliases the victim's (equal low observed address bits),
//! steering the shared BTB toward a two-load gadget in a page both contexts
//! map. With the victim's jump-target word evicted, the victim speculatively
//! runs the gadget with attacker-influenced registers and leaks a chosen
//! victim-private byte into the shared probe array.

use super::{
    stride_shift, AttackReport, ByteOutcome, Layout, Scenario, ScenarioConfig, ScenarioError,
    Variant,
};
use crate::channels::{evict_by_page_offset, flush_probe_array, reload_and_classify, ProbeResult};
use crate::isa::assemble;
use crate::mem::{Access, CacheHierarchy, EvictionArena, PagePerms, PageTable, PAGE_SIZE};
use crate::mitigations::insert_fences;
use crate::pipeline::{ContextDescriptor, RunOptions, Simulation, Stop};
use crate::predictor::PredictorState;
use std::fmt::Write as _;

/// The two-instruction leak pattern: a load folding attacker-addressed memory
/// into R2, then a load from the address R2 selects. The scale step between
/// them spreads byte values across probe lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GadgetSpec {
    pub r1_reg: u8,
    pub r2_reg: u8,
    /// Index register folded into the first load's address (paper-shaped
    /// base+index+displacement addressing).
    pub index_reg: u8,
    pub index_seed: u64,
    pub displacement: i64,
    pub gadget_addr: u64,
}

pub fn default_gadget() -> GadgetSpec {
    GadgetSpec {
        r1_reg: 1,
        r2_reg: 2,
        index_reg: 4,
        index_seed: 3,
        displacement: 0x1BD0,
        gadget_addr: Layout::default().gadget_addr,
    }
}

const VICTIM_CTX: usize = 0;
const ATTACKER_CTX: usize = 1;

/// Attacker-private scratch addresses that keep its own architectural gadget
/// executions (during training) off every line the attack measures.
const SCRATCH_PAGE: u64 = 0x7000;
const SCRATCH1: u64 = 0x7040;
const SCRATCH2: u64 = 0x7400;

pub fn build_v2(config: &ScenarioConfig, gadget: &GadgetSpec) -> Result<Scenario, ScenarioError> {
    if config.variant != Variant::V2Btb {
        return Err(ScenarioError::Config("variant must be v2-btb".into()));
    }
    if config.secret.is_empty() {
        return Err(ScenarioError::Config("secret must be non-empty".into()));
    }
    let mut layout = Layout {
        gadget_addr: gadget.gadget_addr,
        ..Layout::default()
    };
    let shift = stride_shift(config.probe.stride)?;
    if !layout.probe_base.is_multiple_of(config.probe.stride) {
        return Err(ScenarioError::Config(
            "probe base must be stride-aligned for the scale step".into(),
        ));
    }
    // Low observed bits must match for BTB aliasing; anything above may
    // differ (the trainer lives one 2^20 region up).
    let observe_mask = (1u64 << config.predictor.observe_bits) - 1;
    if layout.trainer_jump_pc & observe_mask != layout.victim_jump_pc & observe_mask {
        return Err(ScenarioError::Config(
            "trainer jump must alias the victim jump in the observed bits".into(),
        ));
    }
    // The blind eviction walk for the jump-target word hammers every set that
    // shares its page offset; keep those sets disjoint from the probe sets.
    let line = config.cache.line_size;
    if (layout.jump_target_word % PAGE_SIZE / line).is_multiple_of(config.probe.stride / line) {
        return Err(ScenarioError::Config(
            "jump-target word page offset collides with probe sets".into(),
        ));
    }

    // Victim: an input-driven indirect jump in an infinite yield loop. The
    // jump-target word lives in victim-private memory; its legitimate target
    // is v_cont.
    let mut vsrc = String::new();
    let w = &mut vsrc;
    writeln!(w, ".org 0x{:x}", layout.victim_base).unwrap();
    writeln!(w, "v_loop: YIELD").unwrap();
    writeln!(w, "JMPM [0x{:x}]", layout.jump_target_word).unwrap();
    writeln!(w, "ADD r0, r0, r0").unwrap();
    writeln!(w, "ADD r0, r0, r0").unwrap();
    writeln!(w, "v_cont: JMP v_loop").unwrap();
    // Shared gadget page.
    writeln!(w, ".org 0x{:x}", layout.gadget_addr).unwrap();
    writeln!(
        w,
        "gadget: ADD r{}, r{}, [r{} + r{}*1 + 0x{:x}]",
        gadget.r2_reg, gadget.r2_reg, gadget.r1_reg, gadget.index_reg, gadget.displacement
    )
    .unwrap();
    writeln!(w, "SHL r{}, r{}, {shift}", gadget.r2_reg, gadget.r2_reg).unwrap();
    writeln!(w, "LOAD r5, [r{} + 0]", gadget.r2_reg).unwrap();
    writeln!(w, "RET").unwrap();
    // Victim-private data: the jump-target word and the secret.
    writeln!(w, ".org 0x{:x}", layout.jump_target_word).unwrap();
    let cont = layout_v_cont(&layout);
    let cells: Vec<String> = cont.to_le_bytes().iter().map(|b| b.to_string()).collect();
    writeln!(w, ".byte {}", cells.join(", ")).unwrap();
    writeln!(w, ".org 0x{:x}", layout.secret_addr).unwrap();
    let secret_cells: Vec<String> = config.secret.iter().map(|b| b.to_string()).collect();
    writeln!(w, ".byte {}", secret_cells.join(", ")).unwrap();
    writeln!(w, ".entry 0x{:x}", layout.victim_base).unwrap();

    // Attacker: aliasing indirect jumps through the gadget, with register
    // values that keep its own architectural gadget runs on private scratch
    // lines, then a yield handing the core to the victim.
    let passes = config.training_passes.max(1);
    let a_entry = layout.trainer_jump_pc - 0x20;
    let scratch1_comp = SCRATCH1
        .wrapping_sub(gadget.index_seed)
        .wrapping_sub(gadget.displacement as u64);
    let mut asrc = String::new();
    let w = &mut asrc;
    writeln!(w, ".org 0x{a_entry:x}").unwrap();
    writeln!(w, "a_entry: MOVI r31, 0x{:x}", layout.trainer_jump_pc + 4).unwrap();
    writeln!(w, "MOVI r8, {passes}").unwrap();
    writeln!(w, "MOVI r9, 0x{:x}", layout.gadget_addr).unwrap();
    writeln!(
        w,
        "a_loop: MOVI r{}, {}",
        gadget.index_reg, gadget.index_seed
    )
    .unwrap();
    writeln!(w, "MOVI r{}, 0x{scratch1_comp:x}", gadget.r1_reg).unwrap();
    writeln!(w, "MOVI r{}, 0x{:x}", gadget.r2_reg, SCRATCH2 >> shift).unwrap();
    writeln!(w, "ADD r0, r0, r0").unwrap();
    writeln!(w, "ADD r0, r0, r0").unwrap();
    writeln!(w, "JMPR r9").unwrap(); // must land at trainer_jump_pc
    writeln!(w, "SUB r8, r8, 1").unwrap();
    writeln!(w, "BLT r0, r8, a_loop").unwrap();
    writeln!(w, "YIELD").unwrap();
    writeln!(w, "JMP a_entry").unwrap();

    // The fence transform models the defender compiling the victim; the
    // attacker's own code is never fenced.
    let mut victim_prog = assemble(&vsrc)?;
    let attacker_prog = assemble(&asrc)?;
    if config.mitigations.fence_after_branches {
        victim_prog = insert_fences(&victim_prog)?;
    }

    // The generated trainer jump must sit exactly at the aliasing pc.
    let jmpr_at = attacker_prog
        .text
        .iter()
        .find(|(_, i)| i.opcode == crate::isa::Opcode::Jmpr)
        .map(|(a, _)| *a);
    if jmpr_at != Some(layout.trainer_jump_pc) {
        return Err(ScenarioError::Config(format!(
            "trainer jump landed at {jmpr_at:?}, expected 0x{:x}",
            layout.trainer_jump_pc
        )));
    }

    let probe_bytes = config.probe.entries as u64 * config.probe.stride;
    let probe_pages = probe_bytes.div_ceil(PAGE_SIZE);
    let arena = EvictionArena {
        base: layout.arena_base,
        pages: 18 * (config.cache.line_size * config.cache.llc.sets as u64 / PAGE_SIZE).max(1),
    };
    layout.arena_pages = arena.pages;

    // Victim context: private text, jump word, and secret; shared gadget and
    // probe pages.
    let mut vpt = PageTable::new();
    vpt.map_range(layout.victim_base, layout.victim_base, 1, PagePerms::RX);
    vpt.map_range(layout.gadget_addr, layout.gadget_addr, 1, PagePerms::RX);
    let jt_page = layout.jump_target_word & !(PAGE_SIZE - 1);
    vpt.map_range(jt_page, jt_page, 1, PagePerms::R);
    let secret_page = layout.secret_addr & !(PAGE_SIZE - 1);
    vpt.map_range(secret_page, secret_page, 1, PagePerms::R);
    vpt.map_range(
        layout.probe_base,
        layout.probe_base,
        probe_pages,
        PagePerms::R,
    );

    // Attacker context: its own text and scratch, the shared gadget and probe
    // pages, and the eviction arena. The victim's jump word and secret are
    // not mapped here at all.
    let mut apt = PageTable::new();
    let atext_page = a_entry & !(PAGE_SIZE - 1);
    apt.map_range(atext_page, atext_page, 2, PagePerms::RX);
    apt.map_range(layout.gadget_addr, layout.gadget_addr, 1, PagePerms::RX);
    apt.map_range(SCRATCH_PAGE, SCRATCH_PAGE, 1, PagePerms::R);
    apt.map_range(
        layout.probe_base,
        layout.probe_base,
        probe_pages,
        PagePerms::R,
    );
    apt.map_range(arena.base, arena.base, arena.pages, PagePerms::R);

    let victim_ctx = ContextDescriptor {
        page_table: vpt,
        entry: victim_prog.entry,
        reg_seed: vec![(gadget.index_reg, gadget.index_seed)],
        clflush_allowed: false,
        arena: None,
    };
    let attacker_ctx = ContextDescriptor {
        page_table: apt,
        entry: attacker_prog.entry,
        reg_seed: Vec::new(),
        clflush_allowed: true,
        arena: Some(arena),
    };

    let mut sim_config = config.sim.clone();
    sim_config.contexts = vec![victim_ctx, attacker_ctx];

    Ok(Scenario {
        programs: vec![victim_prog, attacker_prog],
        sim_config,
        layout,
        config: config.clone(),
    })
}

fn layout_v_cont(layout: &Layout) -> u64 {
    layout.victim_base + 0x10
}

/// Cross-context session: per attempt, the host prepares the caches and the
/// victim's input registers, the attacker context trains the BTB and yields,
/// the victim runs one poisoned indirect jump, and the host probes.
pub struct V2Session {
    pub sim: Simulation,
    layout: Layout,
    config: ScenarioConfig,
    gadget: GadgetSpec,
    byte_index: usize,
    /// Skip evicting the jump-target word (paired-control runs).
    pub skip_jt_eviction: bool,
}

impl V2Session {
    pub fn new(scenario: &Scenario, byte_index: usize) -> Result<Self, ScenarioError> {
        Self::with_gadget(scenario, &default_gadget(), byte_index)
    }

    pub fn with_gadget(
        scenario: &Scenario,
        gadget: &GadgetSpec,
        byte_index: usize,
    ) -> Result<Self, ScenarioError> {
        let line = scenario.config.cache.line_size;
        let secret_addr = scenario.layout.secret_addr + byte_index as u64;
        let mut sim = Simulation::new(
            scenario.sim_config.clone(),
            &scenario.programs,
            CacheHierarchy::new(scenario.config.cache)?,
            PredictorState::new(scenario.config.predictor),
            scenario.config.mitigations,
            RunOptions {
                watch_lines: vec![secret_addr & !(line - 1)],
                ..RunOptions::default()
            },
        )?;
        // The victim parks at its initial YIELD; the attacker is then the
        // active context, suspended at its entry.
        match sim.run_to_stop()? {
            Stop::Yield {
                yielded,
                switched_to,
            } => {
                debug_assert_eq!(yielded, VICTIM_CTX);
                debug_assert_eq!(switched_to, ATTACKER_CTX);
            }
            other => {
                return Err(ScenarioError::Config(format!(
                    "victim failed to reach its first yield: {other:?}"
                )))
            }
        }
        Ok(V2Session {
            sim,
            layout: scenario.layout,
            config: scenario.config.clone(),
            gadget: *gadget,
            byte_index,
            skip_jt_eviction: false,
        })
    }

    pub fn target_addr(&self) -> u64 {
        self.layout.secret_addr + self.byte_index as u64
    }

    pub fn hot_line_for(&self, value: u8) -> u64 {
        let vaddr = self.layout.probe_base + value as u64 * self.config.probe.stride;
        self.sim
            .context_page_table(ATTACKER_CTX)
            .translate(vaddr, Access::Read)
            .expect("probe array mapped")
    }

    fn probe_cfg(&self) -> crate::channels::ProbeConfig {
        crate::channels::ProbeConfig {
            probe_base: self.layout.probe_base,
            ..self.config.probe
        }
    }

    /// Host phase: flush the shared probe lines (the attacker can flush DLL
    /// lines it maps), evict the victim's private jump-target word by blind
    /// set contention through the attacker's arena, and plant the victim's
    /// input registers.
    pub fn prepare(&mut self) -> Result<(), ScenarioError> {
        let apt = self.sim.context_page_table(ATTACKER_CTX).clone();
        let probe = self.probe_cfg();
        flush_probe_array(&mut self.sim.hierarchy, &apt, &probe)?;

        if !self.skip_jt_eviction {
            // The attacker cannot address the victim's physical page; it
            // reads its whole arena at the word's page offset instead.
            let arena = self.sim.context_arena(ATTACKER_CTX).expect("arena mapped");
            evict_by_page_offset(
                &mut self.sim.hierarchy,
                &mut self.sim.memory,
                &apt,
                &arena,
                self.layout.jump_target_word % PAGE_SIZE,
            )?;
            let jt_phys = self
                .sim
                .context_page_table(VICTIM_CTX)
                .translate(self.layout.jump_target_word, Access::Read)
                .expect("victim maps its jump word");
            debug_assert_eq!(
                self.sim.hierarchy.probe_level(jt_phys),
                crate::mem::Level::Dram,
                "blind eviction must cover the jump-target word"
            );
        }

        // Attacker-chosen victim register values (externally supplied input
        // the victim happens to hold in registers at its indirect call).
        let r1 = self
            .target_addr()
            .wrapping_sub(self.gadget.displacement as u64)
            .wrapping_sub(self.gadget.index_seed);
        let shift = self.config.probe.stride.trailing_zeros();
        let r2 = self.layout.probe_base >> shift;
        self.sim.poke_reg(VICTIM_CTX, self.gadget.r1_reg, r1);
        self.sim.poke_reg(VICTIM_CTX, self.gadget.r2_reg, r2);
        Ok(())
    }

    /// Attacker trains the BTB through aliasing jumps, then yields.
    pub fn train(&mut self) -> Result<(), ScenarioError> {
        match self.sim.run_to_stop()? {
            Stop::Yield {
                yielded,
                switched_to,
            } => {
                debug_assert_eq!(yielded, ATTACKER_CTX);
                debug_assert_eq!(switched_to, VICTIM_CTX);
                Ok(())
            }
            other => Err(ScenarioError::Config(format!(
                "attacker training did not yield: {other:?}"
            ))),
        }
    }

    /// Victim runs one loop iteration: the poisoned indirect jump.
    pub fn victim_iteration(&mut self) -> Result<(), ScenarioError> {
        match self.sim.run_to_stop()? {
            Stop::Yield {
                yielded,
                switched_to,
            } => {
                debug_assert_eq!(yielded, VICTIM_CTX);
                debug_assert_eq!(switched_to, ATTACKER_CTX);
                Ok(())
            }
            other => Err(ScenarioError::Config(format!(
                "victim iteration did not yield: {other:?}"
            ))),
        }
    }

    pub fn probe(&mut self) -> Result<ProbeResult, ScenarioError> {
        let apt = self.sim.context_page_table(ATTACKER_CTX).clone();
        let probe = self.probe_cfg();
        Ok(reload_and_classify(
            &mut self.sim.hierarchy,
            &mut self.sim.memory,
            &apt,
            &probe,
        )?)
    }

    pub fn attempt(&mut self) -> Result<ProbeResult, ScenarioError> {
        self.prepare()?;
        self.train()?;
        self.victim_iteration()?;
        self.probe()
    }

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

pub fn run_v2(scenario: &Scenario) -> Result<AttackReport, ScenarioError> {
    let mut bytes = Vec::with_capacity(scenario.config.secret.len());
    let mut total_cycles = 0u64;
    for i in 0..scenario.config.secret.len() {
        let mut session = V2Session::new(scenario, i)?;
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
