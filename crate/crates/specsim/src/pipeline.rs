//! The speculative out-of-order core: fetch follows the predictors, a
//! checkpoint is pushed at every predicted branch, instructions execute when
//! operands are ready, retirement is in order, and a misprediction squashes
//! everything younger while restoring architectural state — but never cache
//! state. An in-order reference interpreter ([`interpret_in_order`]) defines
//! the architectural semantics the speculative engine must preserve.

use crate::isa::{
    Instruction, MemOperand, Opcode, Operand, Program, INSTR_WIDTH, LINK_REG, NUM_REGS,
};
use crate::mem::{
    Access, AccessKind, CacheHierarchy, EvictionArena, MemoryImage, PageTable, TranslateFault,
};
use crate::mitigations::MitigationOptions;
use crate::predictor::{BranchClass, Prediction, PredictorState};
use serde::Serialize;
use std::collections::{HashMap, VecDeque};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("watchdog timeout after {cycles} cycles")]
    Timeout { cycles: u64 },
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("programs place two instructions at physical address 0x{0:x}")]
    TextCollision(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FaultKind {
    Unmapped { vaddr: u64 },
    Permission { vaddr: u64 },
    Fetch { vaddr: u64 },
    FlushDenied { vaddr: u64 },
    Misaligned { vaddr: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FaultRecord {
    pub ctx: usize,
    pub pc: u64,
    pub cycle: u64,
    pub kind: FaultKind,
}

/// Architectural register state of one context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ArchState {
    pub regs: [u64; NUM_REGS],
    pub pc: u64,
    pub cycle: u64,
    pub halted: bool,
    pub faulted: Option<FaultRecord>,
}

impl Default for ArchState {
    fn default() -> Self {
        ArchState {
            regs: [0; NUM_REGS],
            pc: 0,
            cycle: 0,
            halted: false,
            faulted: None,
        }
    }
}

/// One schedulable context: a page table, an entry point, initial register
/// values, and capability flags. Two contexts may map distinct virtual pages
/// onto the same physical page; that sharing is what makes cross-context
/// cache channels possible.
#[derive(Debug, Clone, Default)]
pub struct ContextDescriptor {
    pub page_table: PageTable,
    pub entry: u64,
    pub reg_seed: Vec<(u8, u64)>,
    pub clflush_allowed: bool,
    pub arena: Option<EvictionArena>,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Reorder-buffer budget: at most this many instructions in flight.
    pub rob_size: usize,
    pub alu_latency: u64,
    pub mul_latency: u64,
    pub max_cycles: u64,
    pub contexts: Vec<ContextDescriptor>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            rob_size: 192,
            alu_latency: 1,
            mul_latency: 4,
            max_cycles: 50_000_000,
            contexts: Vec::new(),
        }
    }
}

/// Knobs that change what the run records or how prediction behaves, without
/// changing the modeled machine.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub record_events: bool,
    /// Stall fetch at every branch until it resolves: no speculation at all.
    pub perfect_prediction: bool,
    /// Physical line base addresses to count accesses against.
    pub watch_lines: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Fetch,
    Issue,
    Complete,
    Squash,
    Retire,
    Switch,
}

#[derive(Debug, Clone, Serialize)]
pub struct Event {
    pub cycle: u64,
    pub ctx: usize,
    pub seq: u64,
    pub event: EventKind,
    pub pc: u64,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct WatchCounters {
    /// Issued data reads of this line while younger than an unresolved branch.
    pub speculative_reads: u64,
    /// Data reads of this line by instructions that retired.
    pub retired_reads: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Trace {
    pub final_states: Vec<ArchState>,
    pub total_cycles: u64,
    pub retired: u64,
    pub squashed: u64,
    pub fault: Option<FaultRecord>,
    /// Maximum simultaneously in-flight instructions younger than an
    /// unresolved branch.
    pub max_spec_depth: usize,
    /// Data reads issued while younger than an unresolved branch.
    pub spec_read_issues: u64,
    pub watch: HashMap<u64, WatchCounters>,
    pub events: Vec<Event>,
}

/// Where a [`Simulation::run_to_stop`] call stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stop {
    /// A YIELD retired in `yielded` and control switched to `switched_to`.
    Yield {
        yielded: usize,
        switched_to: usize,
    },
    AllHalted,
    Fault(FaultRecord),
}

/// `run()` outcome: the trace, plus how the run ended.
pub fn squash_depth_report(trace: &Trace) -> usize {
    trace.max_spec_depth
}

// ---------------------------------------------------------------------------
// Engine internals

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SrcState {
    Ready(u64),
    Pending(u64),
}

#[derive(Debug, Clone)]
struct RobEntry {
    seq: u64,
    pc: u64,
    instr: Instruction,
    /// Captured register sources: (reg, state).
    srcs: Vec<(u8, SrcState)>,
    deps: usize,
    issued: bool,
    completed: bool,
    completion_cycle: u64,
    /// Register writeback, filled at issue.
    result: Option<(u8, u64)>,
    /// Completed store: physical address and byte.
    store: Option<(u64, u8)>,
    /// Physical line touched by a data read, for watch accounting.
    read_line: Option<u64>,
    /// Fault to surface if this entry retires.
    pending_fault: Option<FaultKind>,
    /// Prediction made at fetch, for branches that push a checkpoint.
    predicted_next: Option<u64>,
    branch_class: Option<BranchClass>,
    /// Resolved actual next pc, filled at completion for branches.
    actual_next: Option<u64>,
    actual_taken: bool,
    actual_target: u64,
}

#[derive(Debug, Clone)]
struct Checkpoint {
    branch_seq: u64,
    regs: [u64; NUM_REGS],
    producers: [Option<u64>; NUM_REGS],
    ghr_shadow: u64,
    #[allow(dead_code)]
    creation_cycle: u64,
}

#[derive(Debug, Clone)]
struct CoreState {
    arch: ArchState,
    fetch_pc: u64,
    fetch_blocked: bool,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    config: SimConfig,
    mitigations: MitigationOptions,
    options: RunOptions,
    pub predictors: PredictorState,
    pub hierarchy: CacheHierarchy,
    pub memory: MemoryImage,
    instrs: HashMap<u64, Instruction>,
    cores: Vec<CoreState>,
    active: usize,
    rob: VecDeque<RobEntry>,
    checkpoints: Vec<Checkpoint>,
    producers: [Option<u64>; NUM_REGS],
    spec_ghr: u64,
    cycle: u64,
    next_seq: u64,
    /// Fetch stalls until this cycle (misprediction redirect drain).
    fetch_resume_cycle: u64,
    fetch_fault: Option<FaultRecord>,
    retired: u64,
    squashed: u64,
    max_spec_depth: usize,
    spec_read_issues: u64,
    watch: HashMap<u64, WatchCounters>,
    events: Vec<Event>,
}

/// Load every context's program into physical memory: text decoded into a
/// physical-address-indexed instruction store, data materialized in the
/// memory image.
fn load_programs(
    programs: &[Program],
    contexts: &[ContextDescriptor],
) -> Result<(HashMap<u64, Instruction>, MemoryImage), SimError> {
    let mut instrs: HashMap<u64, Instruction> = HashMap::new();
    let mut memory = MemoryImage::new();
    for (prog, ctx) in programs.iter().zip(contexts) {
        for (vaddr, instr) in &prog.text {
            let phys = ctx
                .page_table
                .translate(*vaddr, Access::Execute)
                .map_err(|_| {
                    SimError::Config(format!("text page not executable at 0x{vaddr:x}"))
                })?;
            if let Some(existing) = instrs.get(&phys) {
                if existing != instr {
                    return Err(SimError::TextCollision(phys));
                }
            }
            instrs.insert(phys, instr.clone());
        }
        for (vaddr, bytes) in &prog.data {
            for (i, b) in bytes.iter().enumerate() {
                let va = vaddr + i as u64;
                let phys = ctx
                    .page_table
                    .translate(va, Access::Read)
                    .map_err(|_| SimError::Config(format!("data page not mapped at 0x{va:x}")))?;
                memory.write_byte(phys, *b);
            }
        }
    }
    Ok((instrs, memory))
}

impl Simulation {
    pub fn new(
        config: SimConfig,
        programs: &[Program],
        hierarchy: CacheHierarchy,
        predictors: PredictorState,
        mitigations: MitigationOptions,
        options: RunOptions,
    ) -> Result<Self, SimError> {
        if config.rob_size == 0 {
            return Err(SimError::Config("rob_size must be at least 1".into()));
        }
        if config.contexts.is_empty() || programs.len() != config.contexts.len() {
            return Err(SimError::Config(
                "one program per context is required".into(),
            ));
        }
        let (instrs, memory) = load_programs(programs, &config.contexts)?;
        let cores = config
            .contexts
            .iter()
            .map(|c| {
                let mut arch = ArchState {
                    pc: c.entry,
                    ..ArchState::default()
                };
                for (r, v) in &c.reg_seed {
                    if *r != 0 && (*r as usize) < NUM_REGS {
                        arch.regs[*r as usize] = *v;
                    }
                }
                CoreState {
                    fetch_pc: c.entry,
                    fetch_blocked: false,
                    arch,
                }
            })
            .collect();
        let spec_ghr = predictors.ghr();
        let watch = options
            .watch_lines
            .iter()
            .map(|l| (hierarchy.config.line_base(*l), WatchCounters::default()))
            .collect();
        Ok(Simulation {
            config,
            mitigations,
            options,
            predictors,
            hierarchy,
            memory,
            instrs,
            cores,
            active: 0,
            rob: VecDeque::new(),
            checkpoints: Vec::new(),
            producers: [None; NUM_REGS],
            spec_ghr,
            cycle: 0,
            next_seq: 0,
            fetch_resume_cycle: 0,
            fetch_fault: None,
            retired: 0,
            squashed: 0,
            max_spec_depth: 0,
            spec_read_issues: 0,
            watch,
            events: Vec::new(),
        })
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn active_context(&self) -> usize {
        self.active
    }

    /// Architectural register of a context. Between stops the ROB is empty,
    /// so the live register file is the architectural one.
    pub fn read_reg(&self, ctx: usize, reg: u8) -> u64 {
        self.cores[ctx].arch.regs[reg as usize]
    }

    /// Write a register of a context. Only meaningful at a stop boundary
    /// (ROB drained); models externally supplied input values.
    pub fn poke_reg(&mut self, ctx: usize, reg: u8, value: u64) {
        assert!(self.rob.is_empty(), "poke_reg requires a stop boundary");
        if reg != 0 {
            self.cores[ctx].arch.regs[reg as usize] = value;
        }
    }

    pub fn context_page_table(&self, ctx: usize) -> &PageTable {
        &self.config.contexts[ctx].page_table
    }

    /// Toggle no-speculation mode; takes effect from the next fetch.
    pub fn set_perfect_prediction(&mut self, on: bool) {
        self.options.perfect_prediction = on;
    }

    /// Toggle event-log recording for subsequent cycles.
    pub fn set_record_events(&mut self, on: bool) {
        self.options.record_events = on;
    }

    pub fn context_arena(&self, ctx: usize) -> Option<EvictionArena> {
        self.config.contexts[ctx].arena
    }

    fn event(&mut self, seq: u64, kind: EventKind, pc: u64, detail: impl FnOnce() -> String) {
        if self.options.record_events {
            self.events.push(Event {
                cycle: self.cycle,
                ctx: self.active,
                seq,
                event: kind,
                pc,
                detail: detail(),
            });
        }
    }

    /// Run until a YIELD retires, every context halts, a fault retires, or
    /// the watchdog trips.
    pub fn run_to_stop(&mut self) -> Result<Stop, SimError> {
        loop {
            if self.cores.iter().all(|c| c.arch.halted) {
                return Ok(Stop::AllHalted);
            }
            self.cycle += 1;
            if self.cycle > self.config.max_cycles {
                return Err(SimError::Timeout { cycles: self.cycle });
            }
            self.step_completions();
            if let Some(stop) = self.step_retire() {
                return Ok(stop);
            }
            self.step_issue();
            self.step_fetch();
            // Architectural fetch fault: raises once the ROB drains.
            if let Some(fault) = self.fetch_fault {
                if self.rob.is_empty() && self.checkpoints.is_empty() {
                    self.cores[self.active].arch.faulted = Some(fault);
                    return Ok(Stop::Fault(fault));
                }
            }
        }
    }

    /// Run to completion (all contexts halted or a retired fault), rotating
    /// through contexts at every YIELD.
    pub fn run(&mut self) -> Result<Trace, SimError> {
        loop {
            match self.run_to_stop()? {
                Stop::Yield { .. } => continue,
                Stop::AllHalted => return Ok(self.trace(None)),
                Stop::Fault(f) => return Ok(self.trace(Some(f))),
            }
        }
    }

    pub fn trace(&self, fault: Option<FaultRecord>) -> Trace {
        let mut final_states: Vec<ArchState> = Vec::with_capacity(self.cores.len());
        for core in &self.cores {
            let mut st = core.arch.clone();
            st.cycle = self.cycle;
            final_states.push(st);
        }
        Trace {
            final_states,
            total_cycles: self.cycle,
            retired: self.retired,
            squashed: self.squashed,
            fault,
            max_spec_depth: self.max_spec_depth,
            spec_read_issues: self.spec_read_issues,
            watch: self.watch.clone(),
            events: self.events.clone(),
        }
    }

    // -- cycle phases -------------------------------------------------------

    fn step_completions(&mut self) {
        loop {
            // Oldest due entry first; resolving a branch may squash the rest.
            let idx = self
                .rob
                .iter()
                .position(|e| e.issued && !e.completed && e.completion_cycle <= self.cycle);
            let Some(idx) = idx else { break };
            let seq = self.rob[idx].seq;
            self.complete_entry(seq);
        }
    }

    fn complete_entry(&mut self, seq: u64) {
        let idx = self.rob.iter().position(|e| e.seq == seq).unwrap();
        self.rob[idx].completed = true;
        let result = self.rob[idx].result;
        let pc = self.rob[idx].pc;
        let class = self.rob[idx].branch_class;
        self.event(seq, EventKind::Complete, pc, String::new);

        // Register writeback: live regfile if still the newest producer,
        // checkpoint snapshots that recorded this producer, and waiting
        // dependents either way.
        if let Some((reg, value)) = result {
            let r = reg as usize;
            if self.producers[r] == Some(seq) {
                self.cores[self.active].arch.regs[r] = value;
                self.producers[r] = None;
            }
            for cp in &mut self.checkpoints {
                if cp.producers[r] == Some(seq) {
                    cp.regs[r] = value;
                    cp.producers[r] = None;
                }
            }
            for e in self.rob.iter_mut() {
                if !e.issued {
                    for (sr, state) in e.srcs.iter_mut() {
                        if *sr == reg && *state == SrcState::Pending(seq) {
                            *state = SrcState::Ready(value);
                            e.deps -= 1;
                        }
                    }
                }
            }
        }

        if class.is_some() {
            self.resolve_branch(seq);
        }
    }

    fn resolve_branch(&mut self, seq: u64) {
        let idx = self.rob.iter().position(|e| e.seq == seq).unwrap();
        let entry = &self.rob[idx];
        let class = entry.branch_class.unwrap();
        let pc = entry.pc;
        let actual_next = entry.actual_next.expect("branch resolved without target");
        let actual_taken = entry.actual_taken;
        let actual_target = entry.actual_target;
        let predicted_next = entry.predicted_next;

        // Predictor updates apply only at architecturally non-speculative
        // resolution: no strictly older branch still unresolved.
        let oldest_unresolved = self.checkpoints.first().map(|c| c.branch_seq);
        let non_speculative =
            oldest_unresolved.map(|b| b >= seq).unwrap_or(true) && !self.options.perfect_prediction;
        if non_speculative {
            self.predictors
                .update(pc, actual_taken, actual_target, class);
        }

        // Branches that never pushed a checkpoint (direct CALL) are done.
        let Some(cp_idx) = self.checkpoints.iter().position(|c| c.branch_seq == seq) else {
            return;
        };
        let cp = self.checkpoints[cp_idx].clone();
        let mispredicted = predicted_next != Some(actual_next);
        if !mispredicted {
            self.checkpoints.remove(cp_idx);
            return;
        }

        // Squash everything younger, restore the checkpoint, redirect fetch.
        self.checkpoints.truncate(cp_idx);
        let mut drain_until = self.cycle;
        let squashed: Vec<RobEntry> = {
            let keep = self
                .rob
                .iter()
                .position(|e| e.seq > seq)
                .unwrap_or(self.rob.len());
            self.rob.split_off(keep).into()
        };
        for e in &squashed {
            if e.issued && !e.completed {
                drain_until = drain_until.max(e.completion_cycle);
            }
            self.squashed += 1;
            self.event(e.seq, EventKind::Squash, e.pc, String::new);
        }
        self.cores[self.active].arch.regs = cp.regs;
        self.producers = cp.producers;
        if class == BranchClass::Conditional {
            self.spec_ghr = self.predictors.shift_history(cp.ghr_shadow, actual_taken);
        }
        self.cores[self.active].fetch_pc = actual_next;
        self.cores[self.active].fetch_blocked = false;
        self.fetch_fault = None;
        // Outstanding squashed memory accesses drain before fetch redirects.
        self.fetch_resume_cycle = self.fetch_resume_cycle.max(drain_until + 1);
    }

    fn step_retire(&mut self) -> Option<Stop> {
        while let Some(front) = self.rob.front() {
            if !front.completed {
                return None;
            }
            let entry = self.rob.pop_front().unwrap();
            self.retired += 1;
            self.event(entry.seq, EventKind::Retire, entry.pc, String::new);

            if let Some(kind) = entry.pending_fault {
                let fault = FaultRecord {
                    ctx: self.active,
                    pc: entry.pc,
                    cycle: self.cycle,
                    kind,
                };
                self.cores[self.active].arch.faulted = Some(fault);
                self.cores[self.active].arch.pc = entry.pc;
                return Some(Stop::Fault(fault));
            }

            if let Some(line) = entry.read_line {
                if let Some(w) = self.watch.get_mut(&line) {
                    w.retired_reads += 1;
                }
            }

            // Stores drain to memory and the hierarchy at retirement.
            if let Some((phys, byte)) = entry.store {
                let data = [byte];
                let _ = self.hierarchy.access(
                    &mut self.memory,
                    phys,
                    1,
                    AccessKind::Write,
                    Some(&data),
                    true,
                );
            }

            // Committed pc advances to the next architectural instruction.
            let next_pc = entry.actual_next.unwrap_or(entry.pc + INSTR_WIDTH);
            self.cores[self.active].arch.pc = next_pc;

            match entry.instr.opcode {
                Opcode::Halt => {
                    // A halted context parks at its HALT instruction.
                    self.cores[self.active].arch.pc = entry.pc;
                    self.cores[self.active].arch.halted = true;
                    self.cores[self.active].fetch_blocked = true;
                    if self.cores.iter().all(|c| c.arch.halted) {
                        return Some(Stop::AllHalted);
                    }
                    let from = self.active;
                    self.switch_context();
                    self.event(entry.seq, EventKind::Switch, entry.pc, String::new);
                    return Some(Stop::Yield {
                        yielded: from,
                        switched_to: self.active,
                    });
                }
                Opcode::Yield => {
                    let from = self.active;
                    self.cores[from].fetch_pc = entry.pc + INSTR_WIDTH;
                    self.cores[from].fetch_blocked = false;
                    self.switch_context();
                    self.event(entry.seq, EventKind::Switch, entry.pc, String::new);
                    return Some(Stop::Yield {
                        yielded: from,
                        switched_to: self.active,
                    });
                }
                _ => {}
            }
        }
        None
    }

    fn switch_context(&mut self) {
        debug_assert!(self.rob.is_empty(), "switch with in-flight instructions");
        debug_assert!(self.checkpoints.is_empty());
        self.producers = [None; NUM_REGS];
        if self.mitigations.flush_on_switch {
            self.predictors.flush();
        }
        self.spec_ghr = self.predictors.ghr();
        let n = self.cores.len();
        for i in 1..=n {
            let candidate = (self.active + i) % n;
            if !self.cores[candidate].arch.halted {
                self.active = candidate;
                return;
            }
        }
    }

    fn step_issue(&mut self) {
        // Issue every ready entry, oldest first. Collect seqs first: issuing
        // mutates the hierarchy and entry state.
        let mut ready: Vec<u64> = Vec::new();
        let mut oldest_unretired_fence: Option<u64> = None;
        let mut oldest_incomplete_store: Option<u64> = None;
        for e in self.rob.iter() {
            if e.instr.opcode == Opcode::Fence && oldest_unretired_fence.is_none() {
                oldest_unretired_fence = Some(e.seq);
            }
            if e.instr.opcode == Opcode::Store && !e.completed && oldest_incomplete_store.is_none()
            {
                oldest_incomplete_store = Some(e.seq);
            }
            if e.issued || e.deps > 0 {
                continue;
            }
            // FENCE: no younger instruction issues until it retires.
            if let Some(f) = oldest_unretired_fence {
                if f < e.seq {
                    continue;
                }
            }
            // Data reads wait for every older store to have its address and
            // data (conservative ordering; values forward from the buffer).
            if reads_data(&e.instr) {
                if let Some(s) = oldest_incomplete_store {
                    if s < e.seq {
                        continue;
                    }
                }
            }
            ready.push(e.seq);
        }
        for seq in ready {
            self.issue_entry(seq);
        }
    }

    fn is_speculative(&self, seq: u64) -> bool {
        self.checkpoints
            .first()
            .map(|c| c.branch_seq < seq)
            .unwrap_or(false)
    }

    fn issue_entry(&mut self, seq: u64) {
        let idx = self.rob.iter().position(|e| e.seq == seq).unwrap();
        let speculative = self.is_speculative(seq);
        let entry = &self.rob[idx];
        let pc = entry.pc;
        let instr = entry.instr.clone();
        let srcs: HashMap<u8, u64> = entry
            .srcs
            .iter()
            .map(|(r, s)| match s {
                SrcState::Ready(v) => (*r, *v),
                SrcState::Pending(_) => unreachable!("issue with pending source"),
            })
            .collect();
        let reg = |r: u8| -> u64 {
            if r == 0 {
                0
            } else {
                *srcs.get(&r).expect("source register not captured")
            }
        };
        let ea = |m: &MemOperand| -> u64 {
            let base = m.base.map(&reg).unwrap_or(0);
            let index = m
                .index
                .map(|(r, s)| reg(r).wrapping_mul(s as u64))
                .unwrap_or(0);
            base.wrapping_add(index).wrapping_add(m.disp as u64)
        };

        let alu_lat = self.config.alu_latency;
        let mut latency = alu_lat;
        let mut result: Option<(u8, u64)> = None;
        let mut store: Option<(u64, u8)> = None;
        let mut pending_fault: Option<FaultKind> = None;
        let mut read_line: Option<u64> = None;
        let mut actual = (false, 0u64, None::<u64>);
        let mut issue_detail = String::new();

        // A data read through the cache: translate, access, account.
        let do_read = |sim: &mut Simulation,
                       vaddr: u64,
                       size: u64,
                       fault_out: &mut Option<FaultKind>,
                       line_out: &mut Option<u64>,
                       detail: &mut String|
         -> (u64, u64) {
            let pt = &sim.config.contexts[sim.active].page_table;
            match pt.translate(vaddr, Access::Read) {
                Ok(phys) => {
                    let fill = !(sim.mitigations.no_spec_fill && speculative);
                    let res = sim
                        .hierarchy
                        .access(&mut sim.memory, phys, size, AccessKind::Read, None, fill)
                        .expect("scenario code must keep accesses line-aligned");
                    let value = if size == 8 {
                        u64::from_le_bytes(res.value.clone().try_into().unwrap())
                    } else {
                        res.value[0] as u64
                    };
                    let value = sim.forward_stores(seq, phys, size, value);
                    let line = sim.hierarchy.config.line_base(phys);
                    *line_out = Some(line);
                    sim.note_read(line, speculative);
                    if sim.options.record_events {
                        *detail = format!(
                            "addr=0x{phys:x} lvl={} lat={} spec={}",
                            res.hit_level.name(),
                            res.latency,
                            speculative as u8
                        );
                    }
                    (value, res.latency)
                }
                Err(f) => {
                    *fault_out = Some(match f {
                        TranslateFault::Unmapped { vaddr } => FaultKind::Unmapped { vaddr },
                        TranslateFault::Permission { vaddr } => FaultKind::Permission { vaddr },
                    });
                    (0, 1)
                }
            }
        };

        match instr.opcode {
            op if op.is_alu() => {
                let (rd, rs1) = match (&instr.operands[0], &instr.operands[1]) {
                    (Operand::Reg(d), Operand::Reg(s)) => (*d, *s),
                    _ => unreachable!(),
                };
                let a = reg(rs1);
                let (b, lat_extra) = match &instr.operands[2] {
                    Operand::Reg(r) => (reg(*r), 0),
                    Operand::Imm(v) => (*v as u64, 0),
                    Operand::Mem(m) => {
                        let (v, l) = do_read(
                            self,
                            ea(m),
                            1,
                            &mut pending_fault,
                            &mut read_line,
                            &mut issue_detail,
                        );
                        (v, l)
                    }
                };
                let value = alu_op(op, a, b);
                let base = if op == Opcode::Mul {
                    self.config.mul_latency
                } else {
                    alu_lat
                };
                latency = base + lat_extra;
                result = Some((rd, value));
            }
            Opcode::Movi => {
                let (rd, v) = match (&instr.operands[0], &instr.operands[1]) {
                    (Operand::Reg(d), Operand::Imm(v)) => (*d, *v as u64),
                    _ => unreachable!(),
                };
                result = Some((rd, v));
            }
            Opcode::Load => {
                let rd = match &instr.operands[0] {
                    Operand::Reg(d) => *d,
                    _ => unreachable!(),
                };
                let m = instr.mem_operand().unwrap();
                let (v, l) = do_read(
                    self,
                    ea(m),
                    1,
                    &mut pending_fault,
                    &mut read_line,
                    &mut issue_detail,
                );
                latency = l;
                result = Some((rd, v));
            }
            Opcode::Store => {
                let rs = match &instr.operands[0] {
                    Operand::Reg(s) => *s,
                    _ => unreachable!(),
                };
                let m = instr.mem_operand().unwrap();
                let vaddr = ea(m);
                let pt = &self.config.contexts[self.active].page_table;
                match pt.translate(vaddr, Access::Write) {
                    Ok(phys) => store = Some((phys, reg(rs) as u8)),
                    Err(TranslateFault::Unmapped { vaddr }) => {
                        pending_fault = Some(FaultKind::Unmapped { vaddr })
                    }
                    Err(TranslateFault::Permission { vaddr }) => {
                        pending_fault = Some(FaultKind::Permission { vaddr })
                    }
                }
            }
            Opcode::Beq | Opcode::Blt => {
                let rs1 = match &instr.operands[0] {
                    Operand::Reg(r) => *r,
                    _ => unreachable!(),
                };
                let target = match instr.operands.last() {
                    Some(Operand::Imm(t)) => *t as u64,
                    _ => unreachable!(),
                };
                let a = reg(rs1);
                let b = match &instr.operands[1] {
                    Operand::Reg(r) => reg(*r),
                    Operand::Imm(v) => *v as u64,
                    Operand::Mem(m) => {
                        let (v, l) = do_read(
                            self,
                            ea(m),
                            1,
                            &mut pending_fault,
                            &mut read_line,
                            &mut issue_detail,
                        );
                        latency = l;
                        v
                    }
                };
                let taken = match instr.opcode {
                    Opcode::Beq => a == b,
                    Opcode::Blt => a < b,
                    _ => unreachable!(),
                };
                let next = if taken { target } else { pc + INSTR_WIDTH };
                actual = (
                    taken,
                    if taken { target } else { pc + INSTR_WIDTH },
                    Some(next),
                );
            }
            Opcode::Jmp => {
                let t = imm_operand(&instr, 0);
                actual = (true, t, Some(t));
            }
            Opcode::Call => {
                let t = imm_operand(&instr, 0);
                result = Some((LINK_REG, pc + INSTR_WIDTH));
                actual = (true, t, Some(t));
            }
            Opcode::Jmpr => {
                let t = match &instr.operands[0] {
                    Operand::Reg(r) => reg(*r),
                    _ => unreachable!(),
                };
                actual = (true, t, Some(t));
            }
            Opcode::Jmpm => {
                let m = instr.mem_operand().unwrap();
                let vaddr = ea(m);
                // Target words are 8 bytes and must be 8-aligned (keeps them
                // inside one cache line).
                if vaddr % 8 != 0 {
                    pending_fault = Some(FaultKind::Misaligned { vaddr });
                    actual = (true, pc + INSTR_WIDTH, Some(pc + INSTR_WIDTH));
                } else {
                    let (t, l) = do_read(
                        self,
                        vaddr,
                        8,
                        &mut pending_fault,
                        &mut read_line,
                        &mut issue_detail,
                    );
                    latency = l;
                    actual = (true, t, Some(t));
                }
            }
            Opcode::Ret => {
                let t = reg(LINK_REG);
                actual = (true, t, Some(t));
            }
            Opcode::Clflush => {
                let m = instr.mem_operand().unwrap();
                let vaddr = ea(m);
                if !self.config.contexts[self.active].clflush_allowed {
                    pending_fault = Some(FaultKind::FlushDenied { vaddr });
                } else {
                    let pt = &self.config.contexts[self.active].page_table;
                    match pt.translate(vaddr, Access::Read) {
                        Ok(phys) => self.hierarchy.flush_line(phys),
                        Err(TranslateFault::Unmapped { vaddr }) => {
                            pending_fault = Some(FaultKind::Unmapped { vaddr })
                        }
                        Err(TranslateFault::Permission { vaddr }) => {
                            pending_fault = Some(FaultKind::Permission { vaddr })
                        }
                    }
                }
            }
            Opcode::Rdcycle => {
                let rd = match &instr.operands[0] {
                    Operand::Reg(d) => *d,
                    _ => unreachable!(),
                };
                result = Some((rd, self.cycle));
            }
            Opcode::Fence | Opcode::Yield | Opcode::Halt => {}
            _ => unreachable!(),
        }

        let entry = self.rob.iter_mut().find(|e| e.seq == seq).unwrap();
        entry.issued = true;
        entry.completion_cycle = self.cycle + latency.max(1);
        entry.result = result;
        entry.store = store;
        entry.pending_fault = entry.pending_fault.take().or(pending_fault);
        entry.read_line = read_line;
        if entry.branch_class.is_some() {
            entry.actual_taken = actual.0;
            entry.actual_target = actual.1;
            entry.actual_next = actual.2;
        }
        self.event(seq, EventKind::Issue, pc, move || issue_detail);
    }

    /// Forward bytes from completed older stores over a loaded value.
    fn forward_stores(&self, load_seq: u64, phys: u64, size: u64, loaded: u64) -> u64 {
        let mut bytes = loaded.to_le_bytes();
        for e in self.rob.iter() {
            if e.seq >= load_seq {
                break;
            }
            if let Some((saddr, sbyte)) = e.store {
                if e.completed && saddr >= phys && saddr < phys + size {
                    bytes[(saddr - phys) as usize] = sbyte;
                }
            }
        }
        u64::from_le_bytes(bytes)
    }

    fn note_read(&mut self, line: u64, speculative: bool) {
        if speculative {
            self.spec_read_issues += 1;
            if let Some(w) = self.watch.get_mut(&line) {
                w.speculative_reads += 1;
            }
        }
    }

    fn step_fetch(&mut self) {
        if self.cycle < self.fetch_resume_cycle {
            return;
        }
        let core = &self.cores[self.active];
        if core.fetch_blocked || core.arch.halted || self.fetch_fault.is_some() {
            return;
        }
        if self.rob.len() >= self.config.rob_size {
            return;
        }
        // Perfect prediction: hold fetch while any branch is unresolved.
        if self.options.perfect_prediction
            && self
                .rob
                .iter()
                .any(|e| e.branch_class.is_some() && !e.completed)
        {
            return;
        }

        let pc = core.fetch_pc;
        let pt = &self.config.contexts[self.active].page_table;
        let instr = match pt.translate(pc, Access::Execute) {
            Ok(phys) => self.instrs.get(&phys).cloned(),
            Err(_) => None,
        };
        let Some(instr) = instr else {
            if self.checkpoints.is_empty() {
                self.fetch_fault = Some(FaultRecord {
                    ctx: self.active,
                    pc,
                    cycle: self.cycle,
                    kind: FaultKind::Fetch { vaddr: pc },
                });
            }
            // On a speculative path, stall until the misprediction resolves.
            return;
        };

        let seq = self.next_seq;
        self.next_seq += 1;

        // Capture register sources.
        let mut srcs: Vec<(u8, SrcState)> = Vec::new();
        let mut deps = 0;
        for r in source_regs(&instr) {
            if r == 0 || srcs.iter().any(|(sr, _)| *sr == r) {
                continue;
            }
            let state = match self.producers[r as usize] {
                Some(pseq) => {
                    let producer = self.rob.iter().find(|e| e.seq == pseq);
                    match producer {
                        Some(p) if p.completed => SrcState::Ready(p.result.unwrap().1),
                        Some(_) => {
                            deps += 1;
                            SrcState::Pending(pseq)
                        }
                        None => SrcState::Ready(self.cores[self.active].arch.regs[r as usize]),
                    }
                }
                None => SrcState::Ready(self.cores[self.active].arch.regs[r as usize]),
            };
            srcs.push((r, state));
        }

        let class = branch_class(&instr);
        let mut predicted_next = None;

        // Control flow decides the next fetch pc.
        let next_fetch = match class {
            Some(BranchClass::Direct) | Some(BranchClass::Call) => imm_operand(&instr, 0),
            Some(c) => {
                let prediction: Prediction = if self.options.perfect_prediction {
                    // Unreachable in practice: fetch stalls on unresolved
                    // branches above, and this branch itself blocks the next
                    // fetch until resolved; predict fall-through.
                    Prediction {
                        taken: false,
                        target: None,
                        source: crate::predictor::PredictionSource::StaticNotTaken,
                    }
                } else {
                    self.predictors.predict_with_history(pc, c, self.spec_ghr)
                };
                let next = prediction.next_pc(pc);
                predicted_next = Some(next);
                self.checkpoints.push(Checkpoint {
                    branch_seq: seq,
                    regs: self.cores[self.active].arch.regs,
                    producers: self.producers,
                    ghr_shadow: self.spec_ghr,
                    creation_cycle: self.cycle,
                });
                if c == BranchClass::Conditional && !self.options.perfect_prediction {
                    self.spec_ghr = self
                        .predictors
                        .shift_history(self.spec_ghr, prediction.taken);
                }
                next
            }
            None => pc + INSTR_WIDTH,
        };

        // Direct branches are never mispredicted; record their next pc for
        // retirement bookkeeping.
        let (branch_class_rec, predicted_rec) = match class {
            Some(BranchClass::Direct) | Some(BranchClass::Call) => (class, Some(next_fetch)),
            Some(_) => (class, predicted_next),
            None => (None, None),
        };

        // Register destination becomes the newest producer.
        if let Some(rd) = dest_reg(&instr) {
            if rd != 0 {
                self.producers[rd as usize] = Some(seq);
            }
        }

        if matches!(instr.opcode, Opcode::Yield | Opcode::Halt) {
            self.cores[self.active].fetch_blocked = true;
        }
        self.cores[self.active].fetch_pc = next_fetch;

        if self.options.record_events {
            let fmt = instr.to_string();
            self.event(seq, EventKind::Fetch, pc, move || fmt);
        }
        self.rob.push_back(RobEntry {
            seq,
            pc,
            instr,
            srcs,
            deps,
            issued: false,
            completed: false,
            completion_cycle: u64::MAX,
            result: None,
            store: None,
            read_line: None,
            pending_fault: None,
            predicted_next: predicted_rec,
            branch_class: branch_class_rec,
            actual_next: None,
            actual_taken: false,
            actual_target: 0,
        });

        // In-flight instructions younger than the oldest unresolved branch.
        if let Some(cp) = self.checkpoints.first() {
            let oldest = cp.branch_seq;
            let depth = self.rob.iter().filter(|e| e.seq > oldest).count();
            self.max_spec_depth = self.max_spec_depth.max(depth);
        }
    }
}

fn alu_op(op: Opcode, a: u64, b: u64) -> u64 {
    match op {
        Opcode::Add => a.wrapping_add(b),
        Opcode::Sub => a.wrapping_sub(b),
        Opcode::Mul => a.wrapping_mul(b),
        Opcode::And => a & b,
        Opcode::Or => a | b,
        Opcode::Xor => a ^ b,
        Opcode::Shl => a.wrapping_shl((b & 63) as u32),
        Opcode::Shr => a.wrapping_shr((b & 63) as u32),
        _ => unreachable!(),
    }
}

fn imm_operand(instr: &Instruction, idx: usize) -> u64 {
    match &instr.operands[idx] {
        Operand::Imm(v) => *v as u64,
        _ => unreachable!("operand {idx} of {} is not an immediate", instr),
    }
}

fn branch_class(instr: &Instruction) -> Option<BranchClass> {
    Some(match instr.opcode {
        Opcode::Beq | Opcode::Blt => BranchClass::Conditional,
        Opcode::Jmpr | Opcode::Jmpm => BranchClass::Indirect,
        Opcode::Jmp => BranchClass::Direct,
        Opcode::Call => BranchClass::Call,
        Opcode::Ret => BranchClass::Return,
        _ => return None,
    })
}

/// True for instructions that read data memory at issue.
fn reads_data(instr: &Instruction) -> bool {
    match instr.opcode {
        Opcode::Load | Opcode::Jmpm => true,
        Opcode::Store | Opcode::Clflush => false,
        _ => instr.mem_operand().is_some(),
    }
}

fn dest_reg(instr: &Instruction) -> Option<u8> {
    match instr.opcode {
        op if op.is_alu() => match instr.operands[0] {
            Operand::Reg(r) => Some(r),
            _ => None,
        },
        Opcode::Movi | Opcode::Load | Opcode::Rdcycle => match instr.operands[0] {
            Operand::Reg(r) => Some(r),
            _ => None,
        },
        Opcode::Call => Some(LINK_REG),
        _ => None,
    }
}

/// Register sources an instruction reads (for operand capture).
fn source_regs(instr: &Instruction) -> Vec<u8> {
    let mut out = Vec::new();
    let mem = |m: &MemOperand, out: &mut Vec<u8>| {
        if let Some(b) = m.base {
            out.push(b);
        }
        if let Some((i, _)) = m.index {
            out.push(i);
        }
    };
    match instr.opcode {
        op if op.is_alu() => {
            if let Operand::Reg(r) = instr.operands[1] {
                out.push(r);
            }
            match &instr.operands[2] {
                Operand::Reg(r) => out.push(*r),
                Operand::Mem(m) => mem(m, &mut out),
                Operand::Imm(_) => {}
            }
        }
        Opcode::Load | Opcode::Jmpm | Opcode::Clflush => {
            if let Some(m) = instr.mem_operand() {
                mem(m, &mut out);
            }
        }
        Opcode::Store => {
            if let Operand::Reg(r) = instr.operands[0] {
                out.push(r);
            }
            if let Some(m) = instr.mem_operand() {
                mem(m, &mut out);
            }
        }
        Opcode::Beq | Opcode::Blt => {
            if let Operand::Reg(r) = instr.operands[0] {
                out.push(r);
            }
            match &instr.operands[1] {
                Operand::Reg(r) => out.push(*r),
                Operand::Mem(m) => mem(m, &mut out),
                Operand::Imm(_) => {}
            }
        }
        Opcode::Jmpr => {
            if let Operand::Reg(r) = instr.operands[0] {
                out.push(r);
            }
        }
        Opcode::Ret => out.push(LINK_REG),
        _ => {}
    }
    out
}

// ---------------------------------------------------------------------------
// In-order reference interpreter

/// Outcome of the in-order oracle: final architectural state per context and
/// the final memory image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleOutcome {
    pub states: Vec<ArchState>,
    pub memory: MemoryImage,
}

/// Execute strictly in program order with no prediction and no cache model:
/// all loads are functional, RDCYCLE returns 0, faults raise at the faulting
/// instruction. Cooperative round-robin at YIELD, matching the pipeline's
/// scheduling.
pub fn interpret_in_order(
    programs: &[Program],
    config: &SimConfig,
) -> Result<OracleOutcome, SimError> {
    let (instrs, mut memory) = load_programs(programs, &config.contexts)?;
    let mut states: Vec<ArchState> = config
        .contexts
        .iter()
        .map(|c| {
            let mut st = ArchState {
                pc: c.entry,
                ..ArchState::default()
            };
            for (r, v) in &c.reg_seed {
                if *r != 0 && (*r as usize) < NUM_REGS {
                    st.regs[*r as usize] = *v;
                }
            }
            st
        })
        .collect();

    let mut active = 0usize;
    let mut steps: u64 = 0;
    'outer: loop {
        if states.iter().all(|s| s.halted) {
            break;
        }
        if states[active].halted {
            active = (active + 1) % states.len();
            continue;
        }
        steps += 1;
        if steps > config.max_cycles {
            return Err(SimError::Timeout { cycles: steps });
        }

        let st = &mut states[active];
        let ctx = &config.contexts[active];
        let pc = st.pc;
        let fault = |kind: FaultKind, st: &mut ArchState| {
            st.faulted = Some(FaultRecord {
                ctx: active,
                pc,
                cycle: 0,
                kind,
            });
            st.halted = true;
        };

        let phys = match ctx.page_table.translate(pc, Access::Execute) {
            Ok(p) => p,
            Err(_) => {
                fault(FaultKind::Fetch { vaddr: pc }, st);
                break 'outer;
            }
        };
        let Some(instr) = instrs.get(&phys) else {
            fault(FaultKind::Fetch { vaddr: pc }, st);
            break 'outer;
        };

        let reg = |r: u8, st: &ArchState| if r == 0 { 0 } else { st.regs[r as usize] };
        let ea = |m: &MemOperand, st: &ArchState| -> u64 {
            let base = m.base.map(|r| reg(r, st)).unwrap_or(0);
            let index = m
                .index
                .map(|(r, s)| reg(r, st).wrapping_mul(s as u64))
                .unwrap_or(0);
            base.wrapping_add(index).wrapping_add(m.disp as u64)
        };
        let translate_fault = |f: TranslateFault| match f {
            TranslateFault::Unmapped { vaddr } => FaultKind::Unmapped { vaddr },
            TranslateFault::Permission { vaddr } => FaultKind::Permission { vaddr },
        };

        let mut next_pc = pc + INSTR_WIDTH;
        let mut write_rd: Option<(u8, u64)> = None;

        match instr.opcode {
            op if op.is_alu() => {
                let (rd, rs1) = match (&instr.operands[0], &instr.operands[1]) {
                    (Operand::Reg(d), Operand::Reg(s)) => (*d, *s),
                    _ => unreachable!(),
                };
                let a = reg(rs1, st);
                let b = match &instr.operands[2] {
                    Operand::Reg(r) => reg(*r, st),
                    Operand::Imm(v) => *v as u64,
                    Operand::Mem(m) => match ctx.page_table.translate(ea(m, st), Access::Read) {
                        Ok(p) => memory.read_byte(p) as u64,
                        Err(f) => {
                            fault(translate_fault(f), st);
                            break 'outer;
                        }
                    },
                };
                write_rd = Some((rd, alu_op(op, a, b)));
            }
            Opcode::Movi => {
                if let (Operand::Reg(d), Operand::Imm(v)) = (&instr.operands[0], &instr.operands[1])
                {
                    write_rd = Some((*d, *v as u64));
                }
            }
            Opcode::Load => {
                let rd = match instr.operands[0] {
                    Operand::Reg(r) => r,
                    _ => unreachable!(),
                };
                let m = instr.mem_operand().unwrap();
                match ctx.page_table.translate(ea(m, st), Access::Read) {
                    Ok(p) => write_rd = Some((rd, memory.read_byte(p) as u64)),
                    Err(f) => {
                        fault(translate_fault(f), st);
                        break 'outer;
                    }
                }
            }
            Opcode::Store => {
                let rs = match instr.operands[0] {
                    Operand::Reg(r) => r,
                    _ => unreachable!(),
                };
                let m = instr.mem_operand().unwrap();
                match ctx.page_table.translate(ea(m, st), Access::Write) {
                    Ok(p) => memory.write_byte(p, reg(rs, st) as u8),
                    Err(f) => {
                        fault(translate_fault(f), st);
                        break 'outer;
                    }
                }
            }
            Opcode::Beq | Opcode::Blt => {
                let rs1 = match instr.operands[0] {
                    Operand::Reg(r) => r,
                    _ => unreachable!(),
                };
                let target = match instr.operands.last() {
                    Some(Operand::Imm(t)) => *t as u64,
                    _ => unreachable!(),
                };
                let a = reg(rs1, st);
                let b = match &instr.operands[1] {
                    Operand::Reg(r) => reg(*r, st),
                    Operand::Imm(v) => *v as u64,
                    Operand::Mem(m) => match ctx.page_table.translate(ea(m, st), Access::Read) {
                        Ok(p) => memory.read_byte(p) as u64,
                        Err(f) => {
                            fault(translate_fault(f), st);
                            break 'outer;
                        }
                    },
                };
                let taken = match instr.opcode {
                    Opcode::Beq => a == b,
                    Opcode::Blt => a < b,
                    _ => unreachable!(),
                };
                if taken {
                    next_pc = target;
                }
            }
            Opcode::Jmp => next_pc = imm_operand(instr, 0),
            Opcode::Call => {
                write_rd = Some((LINK_REG, pc + INSTR_WIDTH));
                next_pc = imm_operand(instr, 0);
            }
            Opcode::Jmpr => {
                next_pc = match instr.operands[0] {
                    Operand::Reg(r) => reg(r, st),
                    _ => unreachable!(),
                };
            }
            Opcode::Jmpm => {
                let m = instr.mem_operand().unwrap();
                let vaddr = ea(m, st);
                if vaddr % 8 != 0 {
                    fault(FaultKind::Misaligned { vaddr }, st);
                    break 'outer;
                }
                match ctx.page_table.translate(vaddr, Access::Read) {
                    Ok(p) => next_pc = memory.read_u64(p),
                    Err(f) => {
                        fault(translate_fault(f), st);
                        break 'outer;
                    }
                }
            }
            Opcode::Ret => next_pc = reg(LINK_REG, st),
            Opcode::Clflush => {
                let m = instr.mem_operand().unwrap();
                let vaddr = ea(m, st);
                if !ctx.clflush_allowed {
                    fault(FaultKind::FlushDenied { vaddr }, st);
                    break 'outer;
                }
                if let Err(f) = ctx.page_table.translate(vaddr, Access::Read) {
                    fault(translate_fault(f), st);
                    break 'outer;
                }
            }
            Opcode::Rdcycle => {
                if let Operand::Reg(r) = instr.operands[0] {
                    write_rd = Some((r, 0));
                }
            }
            Opcode::Fence => {}
            Opcode::Yield => {
                st.pc = next_pc;
                active = (active + 1) % states.len();
                continue;
            }
            Opcode::Halt => {
                st.halted = true;
                st.pc = pc;
                active = (active + 1) % states.len();
                continue;
            }
            _ => unreachable!(),
        }

        if let Some((rd, v)) = write_rd {
            if rd != 0 {
                st.regs[rd as usize] = v;
            }
        }
        st.pc = next_pc;
    }

    Ok(OracleOutcome { states, memory })
}
