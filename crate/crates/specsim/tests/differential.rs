//! Differential testing: the speculative out-of-order engine must leave
//! exactly the architectural state the in-order reference interpreter
//! computes, for any program — squashes may perturb caches, never registers
//! or memory.

mod common;

use common::{assemble_random, assemble_random_no_jmpr, test_config};
use specsim::mem::{CacheConfig, CacheHierarchy};
use specsim::mitigations::{insert_fences, MitigationOptions};
use specsim::pipeline::{interpret_in_order, RunOptions, Simulation};
use specsim::predictor::{PredictorConfig, PredictorState};

fn run_both(
    seed: u64,
    rob_size: usize,
) -> (
    specsim::pipeline::Trace,
    specsim::pipeline::OracleOutcome,
    Simulation,
) {
    let program = assemble_random(seed);
    let config = test_config(&program, rob_size);
    let oracle = interpret_in_order(std::slice::from_ref(&program), &config)
        .unwrap_or_else(|e| panic!("seed {seed}: oracle failed: {e}"));
    let mut sim = Simulation::new(
        config,
        std::slice::from_ref(&program),
        CacheHierarchy::new(CacheConfig::default()).unwrap(),
        PredictorState::new(PredictorConfig::default()),
        MitigationOptions::default(),
        RunOptions::default(),
    )
    .unwrap();
    let trace = sim
        .run()
        .unwrap_or_else(|e| panic!("seed {seed}: speculative run failed: {e}"));
    (trace, oracle, sim)
}

/// 1000 randomized programs, speculative vs in-order: registers, memory,
/// halt state, and program counter must all agree.
#[test]
fn squash_purity_1000_programs() {
    let mut mispredictions_seen = 0u64;
    for seed in 0..1000u64 {
        let (trace, oracle, sim) = run_both(seed, 192);
        assert!(trace.fault.is_none(), "seed {seed}: unexpected fault");
        assert!(oracle.states[0].faulted.is_none());
        assert_eq!(
            trace.final_states[0].regs, oracle.states[0].regs,
            "seed {seed}: register divergence"
        );
        assert_eq!(
            trace.final_states[0].pc, oracle.states[0].pc,
            "seed {seed}: pc divergence"
        );
        assert_eq!(trace.final_states[0].halted, oracle.states[0].halted);
        assert_eq!(sim.memory, oracle.memory, "seed {seed}: memory divergence");
        mispredictions_seen += trace.squashed;
    }
    assert!(
        mispredictions_seen > 0,
        "corpus never exercised a squash; generator is broken"
    );
}

/// The same corpus under a tiny reorder buffer:window pressure changes timing
/// and squash interleavings, never architecture.
#[test]
fn squash_purity_small_windows() {
    for seed in 0..200u64 {
        for rob in [2usize, 5, 31] {
            let (trace, oracle, sim) = run_both(seed.wrapping_mul(7919), rob);
            assert_eq!(
                trace.final_states[0].regs, oracle.states[0].regs,
                "seed {seed} rob {rob}: register divergence"
            );
            assert_eq!(sim.memory, oracle.memory, "seed {seed} rob {rob}");
        }
    }
}

/// The random corpus also exercises the assembler round-trip law.
#[test]
fn random_corpus_roundtrips() {
    for seed in 0..200u64 {
        let src = common::random_program(seed);
        let program = specsim::isa::assemble(&src).unwrap();
        let text = specsim::isa::disassemble(&program);
        let back =
            specsim::isa::assemble(&text).unwrap_or_else(|e| panic!("seed {seed}: {e}\n{text}"));
        assert_eq!(back, program, "seed {seed}");
    }
}

/// Fence insertion preserves architectural semantics on the random corpus
/// (restricted to its domain: no text addresses smuggled through immediates).
#[test]
fn fence_transform_preserves_semantics() {
    for seed in 0..300u64 {
        let program = assemble_random_no_jmpr(seed);
        let fenced = match insert_fences(&program) {
            Ok(p) => p,
            // Rare: a branch at the very end of the text run has no room.
            Err(_) => continue,
        };
        let config = test_config(&program, 192);
        let fenced_config = test_config(&fenced, 192);
        let base = interpret_in_order(std::slice::from_ref(&program), &config).unwrap();
        let transformed =
            interpret_in_order(std::slice::from_ref(&fenced), &fenced_config).unwrap();
        assert_eq!(
            base.states[0].regs, transformed.states[0].regs,
            "seed {seed}: fence transform changed registers"
        );
        assert_eq!(base.memory, transformed.memory, "seed {seed}");

        // And the speculative engine agrees with the oracle on the fenced
        // program too.
        let mut sim = Simulation::new(
            fenced_config,
            std::slice::from_ref(&fenced),
            CacheHierarchy::new(CacheConfig::default()).unwrap(),
            PredictorState::new(PredictorConfig::default()),
            MitigationOptions::default(),
            RunOptions::default(),
        )
        .unwrap();
        let trace = sim.run().unwrap();
        assert_eq!(trace.final_states[0].regs, transformed.states[0].regs);
    }
}
