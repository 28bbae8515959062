//! Assembler for the toy ISA.
//!
//! Grammar: one statement per line; `label:` prefixes; mnemonics and register
//! names are case-insensitive; registers `r0`..`r31`; immediates decimal or
//! `0x` hex (optionally negative); memory operands `[rB + rI*s + d]` with
//! scale in {1,2,4,8} and any term omissible; directives `.org <addr>`,
//! `.byte <b0, b1, ...>`, `.fill <count>, <byte>`, `.entry <addr|label>`;
//! comments run from `;` to end of line.
//!
//! Label references are accepted wherever an immediate or displacement is
//! expected and resolve to the label's address.

use super::{InstrError, Instruction, MemOperand, Opcode, Operand, Program, INSTR_WIDTH};
use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum AsmError {
    #[error("line {line}, col {col}: syntax error: {msg}")]
    Syntax {
        line: usize,
        col: usize,
        msg: String,
    },
    #[error("line {line}: duplicate label `{name}`")]
    DuplicateLabel { line: usize, name: String },
    #[error("line {line}: unresolved label `{name}`")]
    UnresolvedLabel { line: usize, name: String },
    #[error("line {line}: {source}")]
    Operand { line: usize, source: InstrError },
    #[error("line {line}: overlapping segments at 0x{addr:x}")]
    Overlap { line: usize, addr: u64 },
    #[error("line {line}: instruction address 0x{addr:x} does not advance the text segment")]
    TextOrder { line: usize, addr: u64 },
    #[error("line {line}: instruction address 0x{addr:x} is not 4-byte aligned")]
    Misaligned { line: usize, addr: u64 },
    #[error("line {line}: entry 0x{addr:x} is not an instruction address")]
    EntryOutsideText { line: usize, addr: u64 },
    #[error("program has no instructions and no explicit entry")]
    Empty,
}

/// A number, or a label reference to be resolved in the second pass.
#[derive(Debug, Clone)]
enum NumOrLabel {
    Num(i64),
    Label(String),
}

#[derive(Debug, Clone)]
enum RawOperand {
    Reg(u8),
    Imm(NumOrLabel),
    Mem {
        base: Option<u8>,
        index: Option<(u8, u8)>,
        disp: NumOrLabel,
    },
}

struct Line<'a> {
    no: usize,
    body: &'a str,
}

struct Cursor<'a> {
    line: &'a Line<'a>,
    rest: &'a str,
}

impl<'a> Cursor<'a> {
    fn new(line: &'a Line<'a>) -> Self {
        Cursor {
            line,
            rest: line.body,
        }
    }

    fn col(&self) -> usize {
        self.line.body.len() - self.rest.len() + 1
    }

    fn err(&self, msg: impl Into<String>) -> AsmError {
        AsmError::Syntax {
            line: self.line.no,
            col: self.col(),
            msg: msg.into(),
        }
    }

    fn skip_ws(&mut self) {
        self.rest = self.rest.trim_start();
    }

    fn eof(&mut self) -> bool {
        self.skip_ws();
        self.rest.is_empty()
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if let Some(r) = self.rest.strip_prefix(c) {
            self.rest = r;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), AsmError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.err(format!("expected `{c}`")))
        }
    }

    /// Identifier-ish token: alphanumerics, `_`, `.`.
    fn word(&mut self) -> Option<&'a str> {
        self.skip_ws();
        let end = self
            .rest
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '.'))
            .unwrap_or(self.rest.len());
        if end == 0 {
            return None;
        }
        let (w, r) = self.rest.split_at(end);
        self.rest = r;
        Some(w)
    }

    fn number(&mut self) -> Result<i64, AsmError> {
        self.skip_ws();
        let neg = self.rest.starts_with('-');
        let body = if neg { &self.rest[1..] } else { self.rest };
        let (digits, radix) = if let Some(hex) = body.strip_prefix("0x").or(body.strip_prefix("0X"))
        {
            (hex, 16)
        } else {
            (body, 10)
        };
        let end = digits
            .find(|c: char| !c.is_ascii_hexdigit())
            .unwrap_or(digits.len());
        if end == 0 {
            return Err(self.err("expected a number"));
        }
        let text = &digits[..end];
        let mag = u64::from_str_radix(text, radix)
            .map_err(|e| self.err(format!("bad number `{text}`: {e}")))?;
        let consumed = (if neg { 1 } else { 0 }) + (body.len() - digits.len()) + end;
        self.rest = &self.rest[consumed..];
        let v = mag as i64;
        Ok(if neg { v.wrapping_neg() } else { v })
    }
}

fn parse_reg(word: &str) -> Option<u8> {
    let rest = word.strip_prefix(['r', 'R'])?;
    let n: u8 = rest.parse().ok()?;
    if (n as usize) < super::NUM_REGS && (rest.len() == 1 || !rest.starts_with('0')) {
        Some(n)
    } else {
        None
    }
}

fn mnemonic(word: &str) -> Option<Opcode> {
    Some(match word.to_ascii_uppercase().as_str() {
        "ADD" => Opcode::Add,
        "SUB" => Opcode::Sub,
        "MUL" => Opcode::Mul,
        "AND" => Opcode::And,
        "OR" => Opcode::Or,
        "XOR" => Opcode::Xor,
        "SHL" => Opcode::Shl,
        "SHR" => Opcode::Shr,
        "MOVI" => Opcode::Movi,
        "LOAD" => Opcode::Load,
        "STORE" => Opcode::Store,
        "BEQ" => Opcode::Beq,
        "BLT" => Opcode::Blt,
        "JMP" => Opcode::Jmp,
        "JMPR" => Opcode::Jmpr,
        "JMPM" => Opcode::Jmpm,
        "CALL" => Opcode::Call,
        "RET" => Opcode::Ret,
        "CLFLUSH" => Opcode::Clflush,
        "RDCYCLE" => Opcode::Rdcycle,
        "FENCE" => Opcode::Fence,
        "YIELD" => Opcode::Yield,
        "HALT" => Opcode::Halt,
        _ => return None,
    })
}

fn parse_num_or_label(cur: &mut Cursor) -> Result<NumOrLabel, AsmError> {
    cur.skip_ws();
    let first = cur.rest.chars().next();
    match first {
        Some(c) if c == '-' || c.is_ascii_digit() => Ok(NumOrLabel::Num(cur.number()?)),
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {
            let w = cur.word().unwrap();
            Ok(NumOrLabel::Label(w.to_string()))
        }
        _ => Err(cur.err("expected a number or label")),
    }
}

/// `[rB + rI*s + d]` — terms in any mix, separated by `+`.
fn parse_mem(cur: &mut Cursor) -> Result<RawOperand, AsmError> {
    cur.expect('[')?;
    let mut base: Option<u8> = None;
    let mut index: Option<(u8, u8)> = None;
    let mut disp = NumOrLabel::Num(0);
    let mut saw_disp = false;
    loop {
        cur.skip_ws();
        let is_reg_term = cur
            .rest
            .strip_prefix(['r', 'R'])
            .map(|r| r.starts_with(|c: char| c.is_ascii_digit()))
            .unwrap_or(false);
        if is_reg_term {
            let w = cur.word().unwrap();
            let r = parse_reg(w).ok_or_else(|| cur.err(format!("bad register `{w}`")))?;
            if cur.eat('*') {
                let s = cur.number()?;
                if index.is_some() {
                    return Err(cur.err("duplicate index term"));
                }
                index = Some((r, s as u8));
            } else if base.is_none() {
                base = Some(r);
            } else if index.is_none() {
                index = Some((r, 1));
            } else {
                return Err(cur.err("too many register terms"));
            }
        } else {
            if saw_disp {
                return Err(cur.err("duplicate displacement"));
            }
            disp = parse_num_or_label(cur)?;
            saw_disp = true;
        }
        if cur.eat(']') {
            break;
        }
        cur.expect('+')?;
    }
    Ok(RawOperand::Mem { base, index, disp })
}

fn parse_operand(cur: &mut Cursor) -> Result<RawOperand, AsmError> {
    cur.skip_ws();
    if cur.rest.starts_with('[') {
        return parse_mem(cur);
    }
    let first = cur.rest.chars().next();
    match first {
        Some(c) if c == '-' || c.is_ascii_digit() => {
            Ok(RawOperand::Imm(NumOrLabel::Num(cur.number()?)))
        }
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {
            let w = cur.word().unwrap();
            if let Some(r) = parse_reg(w) {
                Ok(RawOperand::Reg(r))
            } else {
                Ok(RawOperand::Imm(NumOrLabel::Label(w.to_string())))
            }
        }
        _ => Err(cur.err("expected an operand")),
    }
}

enum Stmt {
    Instr(Opcode, Vec<RawOperand>),
    Org(u64),
    Bytes(Vec<u8>),
    Fill(u64, u8),
    Entry(NumOrLabel),
}

fn parse_statement(cur: &mut Cursor) -> Result<Option<Stmt>, AsmError> {
    if cur.eof() {
        return Ok(None);
    }
    let word = cur.word().ok_or_else(|| cur.err("expected a statement"))?;
    if let Some(dir) = word.strip_prefix('.') {
        let stmt = match dir.to_ascii_lowercase().as_str() {
            "org" => Stmt::Org(cur.number()? as u64),
            "byte" => {
                let mut bytes = vec![cur.number()? as u8];
                while cur.eat(',') {
                    bytes.push(cur.number()? as u8);
                }
                Stmt::Bytes(bytes)
            }
            "fill" => {
                let count = cur.number()? as u64;
                cur.expect(',')?;
                let byte = cur.number()? as u8;
                Stmt::Fill(count, byte)
            }
            "entry" => Stmt::Entry(parse_num_or_label(cur)?),
            other => return Err(cur.err(format!("unknown directive `.{other}`"))),
        };
        return Ok(Some(stmt));
    }
    let op = mnemonic(word).ok_or_else(|| cur.err(format!("unknown mnemonic `{word}`")))?;
    let mut operands = Vec::new();
    if !cur.eof() {
        operands.push(parse_operand(cur)?);
        while cur.eat(',') {
            operands.push(parse_operand(cur)?);
        }
    }
    if !cur.eof() {
        return Err(cur.err("trailing input after statement"));
    }
    Ok(Some(Stmt::Instr(op, operands)))
}

/// Assemble source text into a [`Program`]. The entry point defaults to the
/// first instruction in source order; `.entry` overrides it.
pub fn assemble(source: &str) -> Result<Program, AsmError> {
    struct PendingInstr {
        line: usize,
        addr: u64,
        opcode: Opcode,
        operands: Vec<RawOperand>,
    }

    let mut labels: BTreeMap<String, u64> = BTreeMap::new();
    let mut pending: Vec<PendingInstr> = Vec::new();
    let mut data: Vec<(u64, Vec<u8>)> = Vec::new();
    let mut addr: u64 = 0;
    let mut entry: Option<NumOrLabel> = None;
    let mut entry_line = 0usize;
    let mut last_text_end: Option<u64> = None;

    let mut push_data = |addr: u64, bytes: &mut dyn Iterator<Item = u8>| match data.last_mut() {
        Some((start, run)) if *start + run.len() as u64 == addr => run.extend(bytes),
        _ => data.push((addr, bytes.collect())),
    };

    for (idx, raw_line) in source.lines().enumerate() {
        let body = raw_line.split(';').next().unwrap_or("");
        let line = Line { no: idx + 1, body };
        let mut cur = Cursor::new(&line);

        // Label prefixes: `name:` repeated.
        loop {
            cur.skip_ws();
            let before = cur.rest;
            if let Some(w) = cur.word() {
                if cur.eat(':') {
                    if parse_reg(w).is_some() || w.starts_with('.') {
                        return Err(cur.err(format!("`{w}` cannot be used as a label")));
                    }
                    if labels.insert(w.to_string(), addr).is_some() {
                        return Err(AsmError::DuplicateLabel {
                            line: line.no,
                            name: w.to_string(),
                        });
                    }
                    continue;
                }
            }
            cur.rest = before;
            break;
        }

        match parse_statement(&mut cur)? {
            None => {}
            Some(Stmt::Org(a)) => addr = a,
            Some(Stmt::Bytes(bytes)) => {
                let len = bytes.len() as u64;
                push_data(addr, &mut bytes.into_iter());
                addr += len;
            }
            Some(Stmt::Fill(count, byte)) => {
                push_data(addr, &mut std::iter::repeat_n(byte, count as usize));
                addr += count;
            }
            Some(Stmt::Entry(e)) => {
                entry = Some(e);
                entry_line = line.no;
            }
            Some(Stmt::Instr(opcode, operands)) => {
                if !addr.is_multiple_of(INSTR_WIDTH) {
                    return Err(AsmError::Misaligned {
                        line: line.no,
                        addr,
                    });
                }
                if let Some(end) = last_text_end {
                    if addr < end {
                        return Err(AsmError::TextOrder {
                            line: line.no,
                            addr,
                        });
                    }
                }
                pending.push(PendingInstr {
                    line: line.no,
                    addr,
                    opcode,
                    operands,
                });
                addr += INSTR_WIDTH;
                last_text_end = Some(addr);
            }
        }
    }

    let resolve = |nl: &NumOrLabel, line: usize| -> Result<i64, AsmError> {
        match nl {
            NumOrLabel::Num(n) => Ok(*n),
            NumOrLabel::Label(name) => {
                labels
                    .get(name)
                    .map(|a| *a as i64)
                    .ok_or_else(|| AsmError::UnresolvedLabel {
                        line,
                        name: name.clone(),
                    })
            }
        }
    };

    let mut text = Vec::with_capacity(pending.len());
    for p in pending {
        let mut ops = Vec::with_capacity(p.operands.len());
        for raw in &p.operands {
            ops.push(match raw {
                RawOperand::Reg(r) => Operand::Reg(*r),
                RawOperand::Imm(nl) => Operand::Imm(resolve(nl, p.line)?),
                RawOperand::Mem { base, index, disp } => Operand::Mem(MemOperand {
                    base: *base,
                    index: *index,
                    disp: resolve(disp, p.line)?,
                }),
            });
        }
        let instr = Instruction::new(p.opcode, ops).map_err(|source| AsmError::Operand {
            line: p.line,
            source,
        })?;
        text.push((p.addr, instr));
    }

    let entry = match entry {
        Some(nl) => {
            let addr = resolve(&nl, entry_line)? as u64;
            if !text.iter().any(|(a, _)| *a == addr) {
                return Err(AsmError::EntryOutsideText {
                    line: entry_line,
                    addr,
                });
            }
            addr
        }
        None => text.first().map(|(a, _)| *a).ok_or(AsmError::Empty)?,
    };

    // Canonical order regardless of source .org order; merge runs that
    // became adjacent.
    data.sort_by_key(|(a, _)| *a);
    let mut merged: Vec<(u64, Vec<u8>)> = Vec::with_capacity(data.len());
    for (addr, bytes) in data {
        match merged.last_mut() {
            Some((start, run)) if *start + run.len() as u64 == addr => run.extend(bytes),
            _ => merged.push((addr, bytes)),
        }
    }

    let program = Program {
        text,
        data: merged,
        labels,
        entry,
    };

    // Overlap check across all occupied byte ranges.
    let ranges = program.occupied_ranges();
    for w in ranges.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(AsmError::Overlap {
                line: 0,
                addr: w[1].0,
            });
        }
    }

    Ok(program)
}
