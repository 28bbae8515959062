//! Disassembler: renders a [`Program`] back to assembly text such that
//! reassembling yields an equal `Program` (instructions, data, labels, entry).

use super::{Instruction, MemOperand, Operand, Program, INSTR_WIDTH};
use std::collections::BTreeMap;
use std::fmt::Write;

fn fmt_num(v: i64) -> String {
    if (-4096..4096).contains(&v) {
        format!("{v}")
    } else if v < 0 {
        format!("-0x{:x}", v.unsigned_abs())
    } else {
        format!("0x{v:x}")
    }
}

fn fmt_mem(m: &MemOperand) -> String {
    let mut parts = Vec::new();
    if let Some(b) = m.base {
        parts.push(format!("r{b}"));
    }
    if let Some((i, s)) = m.index {
        parts.push(format!("r{i}*{s}"));
    }
    if m.disp != 0 || parts.is_empty() {
        parts.push(fmt_num(m.disp));
    }
    format!("[{}]", parts.join(" + "))
}

fn fmt_operand(op: &Operand) -> String {
    match op {
        Operand::Reg(r) => format!("r{r}"),
        Operand::Imm(v) => fmt_num(*v),
        Operand::Mem(m) => fmt_mem(m),
    }
}

pub(crate) fn fmt_instruction(instr: &Instruction) -> String {
    let ops: Vec<String> = instr.operands.iter().map(fmt_operand).collect();
    if ops.is_empty() {
        instr.opcode.mnemonic().to_string()
    } else {
        format!("{} {}", instr.opcode.mnemonic(), ops.join(", "))
    }
}

impl std::fmt::Display for Instruction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&fmt_instruction(self))
    }
}

enum Item<'a> {
    Instr(&'a Instruction),
    Data(&'a [u8]),
}

/// Render `program` as assembly text. Labels are re-emitted at their
/// addresses (data runs are split where a label lands inside them) and an
/// `.entry` directive is added when the entry is not the first instruction.
pub fn disassemble(program: &Program) -> String {
    // Labels grouped by address, names sorted for determinism.
    let mut labels_at: BTreeMap<u64, Vec<&str>> = BTreeMap::new();
    for (name, addr) in &program.labels {
        labels_at.entry(*addr).or_default().push(name);
    }

    let mut items: BTreeMap<u64, Item> = BTreeMap::new();
    for (addr, instr) in &program.text {
        items.insert(*addr, Item::Instr(instr));
    }
    for (start, bytes) in &program.data {
        // Split data runs at label addresses so labels can be emitted in place.
        let end = *start + bytes.len() as u64;
        let mut cuts: Vec<u64> = labels_at.range(start + 1..end).map(|(a, _)| *a).collect();
        cuts.push(end);
        let mut at = *start;
        for cut in cuts {
            items.insert(
                at,
                Item::Data(&bytes[(at - start) as usize..(cut - start) as usize]),
            );
            at = cut;
        }
    }

    let mut out = String::new();
    let first_instr = program.text.first().map(|(a, _)| *a);
    if first_instr != Some(program.entry) {
        writeln!(out, ".entry 0x{:x}", program.entry).unwrap();
    }

    // Walk item starts and label addresses together in address order.
    let mut stops: Vec<u64> = items
        .keys()
        .copied()
        .chain(labels_at.keys().copied())
        .collect();
    stops.sort_unstable();
    stops.dedup();

    let mut cursor: Option<u64> = None;
    for addr in stops {
        if cursor != Some(addr) {
            writeln!(out, ".org 0x{addr:x}").unwrap();
            cursor = Some(addr);
        }
        if let Some(names) = labels_at.get(&addr) {
            for name in names {
                writeln!(out, "{name}:").unwrap();
            }
        }
        match items.get(&addr) {
            Some(Item::Instr(instr)) => {
                writeln!(out, "    {}", fmt_instruction(instr)).unwrap();
                cursor = Some(addr + INSTR_WIDTH);
            }
            Some(Item::Data(bytes)) => {
                for chunk in bytes.chunks(16) {
                    let cells: Vec<String> = chunk.iter().map(|b| format!("0x{b:02x}")).collect();
                    writeln!(out, "    .byte {}", cells.join(", ")).unwrap();
                }
                cursor = Some(addr + bytes.len() as u64);
            }
            None => {}
        }
    }

    out
}
