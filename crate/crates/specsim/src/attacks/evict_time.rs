//! Evict+Time recovery: instead of probing cache contents, time the victim
//! itself. A mispredicted guard sends the victim speculatively through a
//! secret-indexed read; a squash cannot complete until outstanding memory
//! traffic drains, so the victim's total cycle count reveals whether the
//! secret-selected line was cached when it started. This works even when
//! speculative fills are suppressed, which is what makes fill-buffering an
//! insufficient countermeasure.

use super::{stride_shift, Layout, ScenarioConfig, ScenarioError};
use crate::channels::{evict_time, flush_probe_array};
use crate::isa::assemble;
use crate::mem::{Access, CacheHierarchy, PagePerms, PageTable, PAGE_SIZE};
use crate::pipeline::{ContextDescriptor, RunOptions, SimConfig, Simulation, Stop};
use crate::predictor::PredictorState;
use serde::Serialize;
use std::fmt::Write as _;

const COND_ADDR: u64 = 0x8100;
const TAIL_ADDR: u64 = 0x8180;
const GUARD_BOUND: u8 = 16;

#[derive(Debug, Clone, Serialize)]
pub struct EvictTimeOutcome {
    pub recovered: Vec<u8>,
    pub accuracy: f64,
    /// Smallest t_evicted - t_primed observed on the secret-matching line.
    pub min_matching_delta: i64,
    /// Largest |t_evicted - t_primed| observed on any non-matching line.
    pub max_nonmatching_delta: i64,
}

struct EtScenario {
    program: crate::isa::Program,
    sim_config: SimConfig,
    layout: Layout,
}

fn build_et(config: &ScenarioConfig) -> Result<EtScenario, ScenarioError> {
    let layout = Layout::default();
    let shift = stride_shift(config.probe.stride)?;

    let mut src = String::new();
    let w = &mut src;
    writeln!(w, ".org 0x{:x}", layout.victim_base).unwrap();
    // r17: secret pointer (externally set). r16: guard input. r21: probe
    // base (seeded). The secret-derived index is the victim's own data flow
    // and computes ahead of the guard; only the array read itself sits
    // behind the mispredicted branch, so it issues before the (cached)
    // guard bound resolves.
    writeln!(w, "et_loop: LOAD r18, [r17 + 0]").unwrap();
    writeln!(w, "SHL r19, r18, {shift}").unwrap();
    writeln!(w, "ADD r0, r0, r0").unwrap();
    writeln!(w, "BLT r16, [0x{COND_ADDR:x}], et_body").unwrap();
    writeln!(w, "JMP et_out").unwrap();
    writeln!(w, "et_body: LOAD r20, [r21 + r19*1]").unwrap();
    writeln!(w, "et_out: LOAD r22, [0x{TAIL_ADDR:x}]").unwrap();
    writeln!(w, "YIELD").unwrap();
    writeln!(w, "JMP et_loop").unwrap();
    writeln!(w, ".org 0x{COND_ADDR:x}").unwrap();
    writeln!(w, ".byte {GUARD_BOUND}").unwrap();
    writeln!(w, ".org 0x{:x}", layout.secret_addr).unwrap();
    let cells: Vec<String> = config.secret.iter().map(|b| b.to_string()).collect();
    writeln!(w, ".byte {}", cells.join(", ")).unwrap();

    let program = assemble(&src)?;
    let probe_bytes = config.probe.entries as u64 * config.probe.stride;
    let probe_pages = probe_bytes.div_ceil(PAGE_SIZE);
    let mut pt = PageTable::new();
    pt.map_range(layout.victim_base, layout.victim_base, 1, PagePerms::RX);
    let data_page = COND_ADDR & !(PAGE_SIZE - 1);
    pt.map_range(data_page, data_page, 1, PagePerms::R);
    pt.map_range(
        layout.probe_base,
        layout.probe_base,
        probe_pages,
        PagePerms::R,
    );

    let ctx = ContextDescriptor {
        page_table: pt,
        entry: program.entry,
        reg_seed: vec![(21, layout.probe_base)],
        clflush_allowed: false,
        arena: None,
    };
    let mut sim_config = config.sim.clone();
    sim_config.contexts = vec![ctx];
    Ok(EtScenario {
        program,
        sim_config,
        layout,
    })
}

/// The Evict+Time victim program, exposed for corpus round-trip checks.
pub fn evict_time_program(config: &ScenarioConfig) -> Result<crate::isa::Program, ScenarioError> {
    build_et(config).map(|s| s.program)
}

/// One victim loop iteration; returns the cycles it consumed.
fn run_iteration(
    sim: &mut Simulation,
    guard_input: u8,
    secret_ptr: u64,
) -> Result<u64, ScenarioError> {
    sim.poke_reg(0, 16, guard_input as u64);
    sim.poke_reg(0, 17, secret_ptr);
    let before = sim.cycle();
    match sim.run_to_stop()? {
        Stop::Yield { .. } => Ok(sim.cycle() - before),
        other => Err(ScenarioError::Fault(format!(
            "victim iteration stopped unexpectedly: {other:?}"
        ))),
    }
}

/// Recover the secret through victim timing alone. Per byte: train the guard
/// taken, flush the probe-candidate lines, then for each candidate value run
/// the evicted and primed legs on clones of the trained state and compare
/// total victim cycles.
pub fn run_evict_time(config: &ScenarioConfig) -> Result<EvictTimeOutcome, ScenarioError> {
    let scenario = build_et(config)?;
    let probe = crate::channels::ProbeConfig {
        probe_base: scenario.layout.probe_base,
        ..config.probe
    };
    let mut recovered = Vec::with_capacity(config.secret.len());
    let mut min_matching = i64::MAX;
    let mut max_nonmatching = 0i64;

    for i in 0..config.secret.len() {
        let secret_ptr = scenario.layout.secret_addr + i as u64;
        let mut sim = Simulation::new(
            scenario.sim_config.clone(),
            std::slice::from_ref(&scenario.program),
            CacheHierarchy::new(config.cache)?,
            PredictorState::new(config.predictor),
            config.mitigations,
            RunOptions::default(),
        )?;
        // Train the guard taken until the history fixed point saturates.
        for _ in 0..config.training_passes {
            run_iteration(&mut sim, 0, secret_ptr)?;
        }
        // Baseline: every candidate line cold; training touched the
        // secret-selected one architecturally.
        let pt = sim.context_page_table(0).clone();
        flush_probe_array(&mut sim.hierarchy, &pt, &probe)?;

        let base = sim;
        let mut best: Option<(usize, i64)> = None;
        let mut deltas = Vec::with_capacity(probe.entries);
        for g in 0..probe.entries {
            let target_phys = pt
                .translate(probe.entry_addr(g), Access::Read)
                .expect("probe mapped");
            let timing = evict_time(&base.hierarchy, target_phys, |prepared| {
                let mut leg = base.clone();
                leg.hierarchy = prepared;
                run_iteration(&mut leg, u8::MAX, secret_ptr).expect("measured leg")
            });
            let delta = timing.delta();
            deltas.push(delta);
            if delta > 0 && best.map(|(_, d)| delta > d).unwrap_or(true) {
                best = Some((g, delta));
            }
        }
        let value = best.map(|(g, _)| g as u8).unwrap_or(0);
        recovered.push(value);
        for (g, delta) in deltas.iter().enumerate() {
            if g as u8 == config.secret[i] {
                min_matching = min_matching.min(*delta);
            } else {
                max_nonmatching = max_nonmatching.max(delta.abs());
            }
        }
    }

    let correct = recovered
        .iter()
        .zip(&config.secret)
        .filter(|(a, b)| a == b)
        .count();
    Ok(EvictTimeOutcome {
        accuracy: correct as f64 / config.secret.len().max(1) as f64,
        recovered,
        min_matching_delta: if min_matching == i64::MAX {
            0
        } else {
            min_matching
        },
        max_nonmatching_delta: max_nonmatching,
    })
}
