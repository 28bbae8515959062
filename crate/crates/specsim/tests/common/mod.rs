#![allow(dead_code)] // each test binary uses a different subset

//! Shared helpers for integration tests: a deterministic random-program
//! generator whose output always terminates (forward-only control flow) and
//! never faults (memory confined to a mapped sandbox page).

use specsim::isa::{assemble, Program};
use specsim::mem::{PagePerms, PageTable};
use specsim::pipeline::{ContextDescriptor, SimConfig};

pub const TEXT_BASE: u64 = 0x1000;
pub const SANDBOX: u64 = 0x9000;

pub struct SplitMix(pub u64);

impl SplitMix {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn below(&mut self, n: u64) -> u64 {
        self.next_u64() % n
    }
}

/// Generate a random single-context program: arithmetic over r1..r12,
/// forward branches and jumps, sandboxed loads/stores, occasional fences,
/// flushes, calls into a leaf, and yields. No RDCYCLE (the in-order oracle
/// pins it to zero).
pub fn random_program(seed: u64) -> String {
    random_program_opts(seed, true)
}

/// `allow_jmpr = false` keeps text addresses out of immediates, the domain
/// the fence-insertion transform is defined over.
pub fn random_program_opts(seed: u64, allow_jmpr: bool) -> String {
    let mut rng = SplitMix(seed);
    let body_len = 20 + rng.below(40) as usize;
    let mut lines: Vec<String> = Vec::new();

    // Seed registers with a mix of small and wide values.
    for r in 1..=8 {
        let v = match rng.below(4) {
            0 => rng.below(64) as i64,
            1 => -(rng.below(64) as i64),
            2 => rng.next_u64() as i64,
            _ => (rng.below(0xFFFF) as i64) << 8,
        };
        lines.push(format!("MOVI r{r}, {v}"));
    }
    lines.push(format!("MOVI r15, 0x{SANDBOX:x}"));

    let reg = |rng: &mut SplitMix| 1 + rng.below(12);
    let sandbox_abs = |rng: &mut SplitMix| SANDBOX + rng.below(0xFF0);

    // Body is built from atomic groups; control flow only ever targets a
    // group start (the label), so a multi-instruction group can never be
    // entered halfway (which could otherwise run a JMPR with a stale target
    // register and jump backwards).
    let mut body: Vec<String> = Vec::new();
    while body.len() < body_len {
        let i = body.len();
        let fwd = |rng: &mut SplitMix, i: usize| {
            let skip = 1 + rng.below(6) as usize;
            format!("B_{}", (i + 1 + skip).min(body_len))
        };
        match rng.below(20) {
            0..=7 => {
                let ops = ["ADD", "SUB", "MUL", "AND", "OR", "XOR", "SHL", "SHR"];
                let op = ops[rng.below(8) as usize];
                let rd = reg(&mut rng);
                let rs = reg(&mut rng);
                let src = match rng.below(3) {
                    0 => format!("r{}", reg(&mut rng)),
                    1 => format!("{}", rng.next_u64() as i64 % 0x1000),
                    _ => format!("[0x{:x}]", sandbox_abs(&mut rng)),
                };
                body.push(format!("{op} r{rd}, r{rs}, {src}"));
            }
            8..=10 => {
                let rd = reg(&mut rng);
                if rng.below(2) == 0 {
                    body.push(format!("LOAD r{rd}, [0x{:x}]", sandbox_abs(&mut rng)));
                } else {
                    // Register-relative access masked into the sandbox.
                    let rs = reg(&mut rng);
                    body.push(format!("AND r14, r{rs}, 0xFF0\nLOAD r{rd}, [r15 + r14*1]"));
                }
            }
            11..=13 => {
                let rs = reg(&mut rng);
                if rng.below(2) == 0 {
                    body.push(format!("STORE r{rs}, [0x{:x}]", sandbox_abs(&mut rng)));
                } else {
                    let ri = reg(&mut rng);
                    body.push(format!("AND r14, r{ri}, 0xFF0\nSTORE r{rs}, [r15 + r14*1]"));
                }
            }
            14..=16 => {
                let op = if rng.below(2) == 0 { "BEQ" } else { "BLT" };
                let rs = reg(&mut rng);
                let src = match rng.below(3) {
                    0 => format!("r{}", reg(&mut rng)),
                    1 => format!("{}", rng.below(128)),
                    _ => format!("[0x{:x}]", sandbox_abs(&mut rng)),
                };
                let target = fwd(&mut rng, i);
                body.push(format!("{op} r{rs}, {src}, {target}"));
            }
            17 => {
                let target = fwd(&mut rng, i);
                if !allow_jmpr || rng.below(2) == 0 {
                    body.push(format!("JMP {target}"));
                } else {
                    body.push(format!("MOVI r13, {target}\nJMPR r13"));
                }
            }
            18 => body.push(format!("CLFLUSH [0x{:x}]", sandbox_abs(&mut rng))),
            _ => body.push(if rng.below(2) == 0 {
                "FENCE".to_string()
            } else {
                "YIELD".to_string()
            }),
        }
    }

    let use_call = rng.below(4) == 0;
    let mut src = String::new();
    src.push_str(&format!(".org 0x{TEXT_BASE:x}\n"));
    for l in &lines {
        src.push_str(l);
        src.push('\n');
    }
    if use_call {
        src.push_str("CALL leaf\n");
    }
    for (i, group) in body.iter().enumerate() {
        src.push_str(&format!("B_{i}:\n{group}\n"));
    }
    // Forward targets may overshoot the body; park them all at the exit.
    for extra in body.len()..body.len() + 8 {
        src.push_str(&format!("B_{extra}:\n"));
    }
    src.push_str("HALT\n");
    if use_call {
        src.push_str("leaf: ADD r9, r9, 77\nXOR r10, r9, r1\nRET\n");
    }
    src
}

pub fn test_context(program: &Program) -> ContextDescriptor {
    let mut pt = PageTable::new();
    pt.map_range(TEXT_BASE, TEXT_BASE, 2, PagePerms::RX);
    pt.map_range(SANDBOX, SANDBOX, 1, PagePerms::RW);
    ContextDescriptor {
        page_table: pt,
        entry: program.entry,
        reg_seed: Vec::new(),
        clflush_allowed: true,
        arena: None,
    }
}

pub fn test_config(program: &Program, rob_size: usize) -> SimConfig {
    SimConfig {
        rob_size,
        max_cycles: 2_000_000,
        contexts: vec![test_context(program)],
        ..SimConfig::default()
    }
}

pub fn assemble_random(seed: u64) -> Program {
    let src = random_program(seed);
    assemble(&src).unwrap_or_else(|e| panic!("seed {seed}: {e}\n{src}"))
}

pub fn assemble_random_no_jmpr(seed: u64) -> Program {
    let src = random_program_opts(seed, false);
    assemble(&src).unwrap_or_else(|e| panic!("seed {seed}: {e}\n{src}"))
}
