//! A deterministic simulator of a small speculative out-of-order core, plus the
//! cache side-channel toolkit needed to demonstrate transient-execution leaks
//! end to end: covert-channel primitives, attack scenario builders, and
//! mitigation toggles with measurable cost.
//!
//! The crate is organized around the pieces a scenario needs:
//!
//! - [`isa`]: the toy instruction set and its assembler/disassembler.
//! - [`mem`]: set-associative multi-level cache hierarchy over sparse memory.
//! - [`predictor`]: BTB, gshare direction predictor, and return stack, shared
//!   across contexts by construction.
//! - [`pipeline`]: the speculative core (checkpoint/squash, in-order retire)
//!   and an in-order reference interpreter used as a correctness oracle.
//! - [`channels`]: Flush+Reload, Evict+Reload, and Evict+Time primitives.
//! - [`attacks`]: end-to-end scenarios that plant a secret, mistrain the
//!   predictors, and recover the secret through the cache.
//! - [`mitigations`]: fence insertion, predictor flushing, speculative-fill
//!   suppression, and the overhead report comparing them.
//! - [`cli`]: scenario config files, presets, and the `specsim` binary logic.

pub mod attacks;
pub mod channels;
pub mod cli;
pub mod isa;
pub mod mem;
pub mod mitigations;
pub mod pipeline;
pub mod predictor;
