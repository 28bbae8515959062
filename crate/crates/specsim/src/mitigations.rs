//! Countermeasure toggles and program transforms, plus the overhead report
//! that prices each of them against the attacks they block.

use crate::isa::{Instruction, Opcode, Operand, Program, INSTR_WIDTH};
use serde::Serialize;
use std::collections::BTreeMap;

/// Mitigation switches consumed by the pipeline and scenario runners.
/// All default off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct MitigationOptions {
    /// Apply the fence-insertion transform to every program before running.
    pub fence_after_branches: bool,
    /// Flush all predictor state on every context switch.
    pub flush_on_switch: bool,
    /// Speculatively issued loads produce data and latency but install
    /// nothing in the cache.
    pub no_spec_fill: bool,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TransformError {
    #[error("fence insertion would overflow into another segment at 0x{addr:x}")]
    Overflow { addr: u64 },
}

/// Insert a FENCE immediately after every conditional branch and at every
/// conditional-branch target, re-fixing labels and branch/call targets.
///
/// Indirect branches are left alone. Architectural semantics are unchanged;
/// immediates that happen to encode text addresses (e.g. a MOVI holding a
/// jump target for JMPR) are not rewritten.
pub fn insert_fences(program: &Program) -> Result<Program, TransformError> {
    let has_conditional = program
        .text
        .iter()
        .any(|(_, i)| i.opcode.is_conditional_branch());
    if !has_conditional {
        return Ok(program.clone());
    }

    // Insertion points in the old address space: after each conditional
    // branch (fall-through edge) and at each conditional target (taken edge).
    let mut points: Vec<u64> = Vec::new();
    for (addr, instr) in &program.text {
        if instr.opcode.is_conditional_branch() {
            points.push(addr + INSTR_WIDTH);
            if let Some(Operand::Imm(t)) = instr.operands.last() {
                points.push(*t as u64);
            }
        }
    }
    points.sort_unstable();
    points.dedup();

    // Rebuild each contiguous text run, splicing fences in. Runs grow in
    // place from their own start address.
    let fence = Instruction::new(Opcode::Fence, vec![]).expect("FENCE has no operands");
    let mut text: Vec<(u64, Instruction)> = Vec::new();
    let mut remap: BTreeMap<u64, u64> = BTreeMap::new(); // old addr -> new addr
    let mut i = 0;
    while i < program.text.len() {
        // One run: instructions at consecutive 4-byte addresses.
        let run_start = program.text[i].0;
        let mut run_end_idx = i;
        while run_end_idx + 1 < program.text.len()
            && program.text[run_end_idx + 1].0 == program.text[run_end_idx].0 + INSTR_WIDTH
        {
            run_end_idx += 1;
        }
        let run_end = program.text[run_end_idx].0 + INSTR_WIDTH;

        let mut cursor = run_start;
        for (old_addr, instr) in &program.text[i..=run_end_idx] {
            // References to this address land on the fence (when one is
            // inserted here) and fall through into the instruction, so the
            // taken edge of a branch executes its target fence.
            remap.insert(*old_addr, cursor);
            if points.binary_search(old_addr).is_ok() {
                text.push((cursor, fence.clone()));
                cursor += INSTR_WIDTH;
            }
            text.push((cursor, instr.clone()));
            cursor += INSTR_WIDTH;
        }
        // Fall-through point just past the run's last instruction (a branch
        // ending its run).
        if points.binary_search(&run_end).is_ok() {
            text.push((cursor, fence.clone()));
            cursor += INSTR_WIDTH;
        }
        remap.insert(run_end, cursor);
        i = run_end_idx + 1;
    }

    let remap_addr = |old: u64| -> u64 { remap.get(&old).copied().unwrap_or(old) };

    // Re-fix control-flow targets (instruction-address immediates).
    for (_, instr) in &mut text {
        match instr.opcode {
            Opcode::Jmp | Opcode::Call => {
                if let Operand::Imm(t) = &mut instr.operands[0] {
                    *t = remap_addr(*t as u64) as i64;
                }
            }
            Opcode::Beq | Opcode::Blt => {
                if let Some(Operand::Imm(t)) = instr.operands.last_mut() {
                    *t = remap_addr(*t as u64) as i64;
                }
            }
            _ => {}
        }
    }

    let labels: BTreeMap<String, u64> = program
        .labels
        .iter()
        .map(|(name, addr)| (name.clone(), remap_addr(*addr)))
        .collect();

    let out = Program {
        text,
        data: program.data.clone(),
        labels,
        entry: remap_addr(program.entry),
    };

    // Text growth must not run into data or a following text run.
    let ranges = out.occupied_ranges();
    for w in ranges.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(TransformError::Overflow { addr: w[1].0 });
        }
    }
    Ok(out)
}

/// One row of the mitigation overhead table.
#[derive(Debug, Clone, Serialize)]
pub struct OverheadRow {
    pub options: MitigationOptions,
    pub accuracy: f64,
    pub cycles: u64,
    pub slowdown: f64,
}

/// Run the scenario once per options entry and price each row against the
/// all-off baseline. `slowdown = cycles / baseline_cycles`; accuracy comes
/// from the attack report under those options.
pub fn overhead_report(
    config: &crate::attacks::ScenarioConfig,
    options_grid: &[MitigationOptions],
) -> Result<Vec<OverheadRow>, crate::attacks::ScenarioError> {
    let baseline_cfg = crate::attacks::ScenarioConfig {
        mitigations: MitigationOptions::default(),
        ..config.clone()
    };
    let baseline = crate::attacks::run(&baseline_cfg)?;
    let mut rows = Vec::with_capacity(options_grid.len());
    for options in options_grid {
        let report = if *options == MitigationOptions::default() {
            baseline.clone()
        } else {
            let cfg = crate::attacks::ScenarioConfig {
                mitigations: *options,
                ..config.clone()
            };
            crate::attacks::run(&cfg)?
        };
        rows.push(OverheadRow {
            options: *options,
            accuracy: report.accuracy,
            cycles: report.simulated_cycles,
            slowdown: report.simulated_cycles as f64 / baseline.simulated_cycles.max(1) as f64,
        });
    }
    Ok(rows)
}

pub fn overhead_csv(rows: &[OverheadRow]) -> String {
    let mut out = String::from("fence,flush,nofill,accuracy,cycles,slowdown\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.4},{},{:.4}\n",
            r.options.fence_after_branches as u8,
            r.options.flush_on_switch as u8,
            r.options.no_spec_fill as u8,
            r.accuracy,
            r.cycles,
            r.slowdown
        ));
    }
    out
}
