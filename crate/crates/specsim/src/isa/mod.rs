//! Toy ISA: fixed 4-byte instruction width, 32 64-bit registers with a
//! hard-wired zero register, byte-addressable memory.
//!
//! Programs are authored as assembly text (see [`assemble`]) and carried
//! around as decoded [`Instruction`] lists; there is no binary encoding.

mod parse;
mod print;

pub use parse::{assemble, AsmError};
pub use print::disassemble;

use std::collections::BTreeMap;

/// Instructions occupy 4 bytes of the text segment each.
pub const INSTR_WIDTH: u64 = 4;

/// Number of architectural registers. `r0` reads as zero and ignores writes.
pub const NUM_REGS: usize = 32;

/// Link register written by CALL and consumed by RET.
pub const LINK_REG: u8 = 31;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Opcode {
    Add,
    Sub,
    Mul,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Movi,
    Load,
    Store,
    Beq,
    Blt,
    Jmp,
    Jmpr,
    Jmpm,
    Call,
    Ret,
    Clflush,
    Rdcycle,
    Fence,
    Yield,
    Halt,
}

impl Opcode {
    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Add => "ADD",
            Opcode::Sub => "SUB",
            Opcode::Mul => "MUL",
            Opcode::And => "AND",
            Opcode::Or => "OR",
            Opcode::Xor => "XOR",
            Opcode::Shl => "SHL",
            Opcode::Shr => "SHR",
            Opcode::Movi => "MOVI",
            Opcode::Load => "LOAD",
            Opcode::Store => "STORE",
            Opcode::Beq => "BEQ",
            Opcode::Blt => "BLT",
            Opcode::Jmp => "JMP",
            Opcode::Jmpr => "JMPR",
            Opcode::Jmpm => "JMPM",
            Opcode::Call => "CALL",
            Opcode::Ret => "RET",
            Opcode::Clflush => "CLFLUSH",
            Opcode::Rdcycle => "RDCYCLE",
            Opcode::Fence => "FENCE",
            Opcode::Yield => "YIELD",
            Opcode::Halt => "HALT",
        }
    }

    pub fn is_alu(self) -> bool {
        matches!(
            self,
            Opcode::Add
                | Opcode::Sub
                | Opcode::Mul
                | Opcode::And
                | Opcode::Or
                | Opcode::Xor
                | Opcode::Shl
                | Opcode::Shr
        )
    }

    pub fn is_conditional_branch(self) -> bool {
        matches!(self, Opcode::Beq | Opcode::Blt)
    }
}

/// Memory operand: `[base + index*scale + disp]`, every term optional.
/// Scale is 1, 2, 4, or 8.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MemOperand {
    pub base: Option<u8>,
    pub index: Option<(u8, u8)>,
    pub disp: i64,
}

impl MemOperand {
    pub fn base(reg: u8) -> Self {
        MemOperand {
            base: Some(reg),
            ..Default::default()
        }
    }

    pub fn base_disp(reg: u8, disp: i64) -> Self {
        MemOperand {
            base: Some(reg),
            disp,
            ..Default::default()
        }
    }

    pub fn abs(disp: i64) -> Self {
        MemOperand {
            disp,
            ..Default::default()
        }
    }

    pub fn base_index(reg: u8, index: u8, scale: u8) -> Self {
        MemOperand {
            base: Some(reg),
            index: Some((index, scale)),
            disp: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operand {
    Reg(u8),
    Imm(i64),
    Mem(MemOperand),
}

/// One decoded instruction. Operand count and kinds are validated against the
/// opcode signature at construction ([`Instruction::new`]) and by the
/// assembler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub opcode: Opcode,
    pub operands: Vec<Operand>,
}

/// What an operand slot may hold, per the opcode signature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Reg,
    Imm,
    Mem,
    /// Register, immediate, or memory source (ALU second source, branch
    /// compare source).
    Src,
}

fn signature(op: Opcode) -> &'static [Slot] {
    use Slot::*;
    match op {
        Opcode::Add
        | Opcode::Sub
        | Opcode::Mul
        | Opcode::And
        | Opcode::Or
        | Opcode::Xor
        | Opcode::Shl
        | Opcode::Shr => &[Reg, Reg, Src],
        Opcode::Movi => &[Reg, Imm],
        Opcode::Load => &[Reg, Mem],
        Opcode::Store => &[Reg, Mem],
        Opcode::Beq | Opcode::Blt => &[Reg, Src, Imm],
        Opcode::Jmp | Opcode::Call => &[Imm],
        Opcode::Jmpr => &[Reg],
        Opcode::Jmpm | Opcode::Clflush => &[Mem],
        Opcode::Rdcycle => &[Reg],
        Opcode::Ret | Opcode::Fence | Opcode::Yield | Opcode::Halt => &[],
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum InstrError {
    #[error("{opcode:?} expects {expected} operand(s), got {got}")]
    OperandCount {
        opcode: Opcode,
        expected: usize,
        got: usize,
    },
    #[error("{opcode:?} operand {position} has the wrong kind")]
    OperandKind { opcode: Opcode, position: usize },
    #[error("register id {0} out of range 0..32")]
    BadRegister(u8),
    #[error("memory operand scale {0} is not 1, 2, 4, or 8")]
    BadScale(u8),
}

fn check_reg(r: u8) -> Result<(), InstrError> {
    if (r as usize) < NUM_REGS {
        Ok(())
    } else {
        Err(InstrError::BadRegister(r))
    }
}

fn check_mem(m: &MemOperand) -> Result<(), InstrError> {
    if let Some(b) = m.base {
        check_reg(b)?;
    }
    if let Some((i, s)) = m.index {
        check_reg(i)?;
        if !matches!(s, 1 | 2 | 4 | 8) {
            return Err(InstrError::BadScale(s));
        }
    }
    Ok(())
}

impl Instruction {
    pub fn new(opcode: Opcode, operands: Vec<Operand>) -> Result<Self, InstrError> {
        let sig = signature(opcode);
        if operands.len() != sig.len() {
            return Err(InstrError::OperandCount {
                opcode,
                expected: sig.len(),
                got: operands.len(),
            });
        }
        for (position, (slot, op)) in sig.iter().zip(&operands).enumerate() {
            let ok = match (slot, op) {
                (Slot::Reg, Operand::Reg(r)) => {
                    check_reg(*r)?;
                    true
                }
                (Slot::Imm, Operand::Imm(_)) => true,
                (Slot::Mem, Operand::Mem(m)) => {
                    check_mem(m)?;
                    true
                }
                (Slot::Src, Operand::Reg(r)) => {
                    check_reg(*r)?;
                    true
                }
                (Slot::Src, Operand::Imm(_)) => true,
                (Slot::Src, Operand::Mem(m)) => {
                    check_mem(m)?;
                    true
                }
                _ => false,
            };
            if !ok {
                return Err(InstrError::OperandKind { opcode, position });
            }
        }
        Ok(Instruction { opcode, operands })
    }

    /// The memory operand this instruction reads or writes through, if any.
    pub fn mem_operand(&self) -> Option<&MemOperand> {
        self.operands.iter().find_map(|op| match op {
            Operand::Mem(m) => Some(m),
            _ => None,
        })
    }
}

/// An assembled program: decoded instructions at explicit virtual addresses,
/// raw data segments, resolved labels, and the entry point.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Program {
    /// Sorted by address; consecutive instructions are `INSTR_WIDTH` apart
    /// within a run.
    pub text: Vec<(u64, Instruction)>,
    /// Maximal contiguous runs of data bytes, sorted by address.
    pub data: Vec<(u64, Vec<u8>)>,
    pub labels: BTreeMap<String, u64>,
    pub entry: u64,
}

impl Program {
    /// Address ranges occupied by text and data, for overlap checks.
    pub fn occupied_ranges(&self) -> Vec<(u64, u64)> {
        let mut out: Vec<(u64, u64)> = self
            .text
            .iter()
            .map(|(a, _)| (*a, *a + INSTR_WIDTH))
            .chain(self.data.iter().map(|(a, d)| (*a, *a + d.len() as u64)))
            .collect();
        out.sort_unstable();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signature_rejects_wrong_kinds() {
        let err = Instruction::new(Opcode::Movi, vec![Operand::Imm(1), Operand::Imm(2)]);
        assert_eq!(
            err,
            Err(InstrError::OperandKind {
                opcode: Opcode::Movi,
                position: 0
            })
        );
        let err = Instruction::new(Opcode::Add, vec![Operand::Reg(1), Operand::Reg(2)]);
        assert!(matches!(err, Err(InstrError::OperandCount { .. })));
    }

    #[test]
    fn signature_accepts_src_variants() {
        for src in [
            Operand::Reg(2),
            Operand::Imm(-7),
            Operand::Mem(MemOperand::abs(0x100)),
        ] {
            Instruction::new(Opcode::Add, vec![Operand::Reg(1), Operand::Reg(1), src]).unwrap();
            Instruction::new(Opcode::Blt, vec![Operand::Reg(1), src, Operand::Imm(0x40)]).unwrap();
        }
    }

    #[test]
    fn register_range_checked() {
        let err = Instruction::new(Opcode::Jmpr, vec![Operand::Reg(32)]);
        assert_eq!(err, Err(InstrError::BadRegister(32)));
    }

    #[test]
    fn scale_checked() {
        let err = Instruction::new(
            Opcode::Load,
            vec![
                Operand::Reg(1),
                Operand::Mem(MemOperand {
                    base: Some(1),
                    index: Some((2, 3)),
                    disp: 0,
                }),
            ],
        );
        assert_eq!(err, Err(InstrError::BadScale(3)));
    }
}
