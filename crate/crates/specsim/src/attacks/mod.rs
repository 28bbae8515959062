//! End-to-end transient-execution attack scenarios: program builders that
//! plant a secret in a victim, orchestrators that mistrain the predictors and
//! drive the covert channel, and reports of what was recovered at what cost.

mod evict_time;
mod sweep;
mod v1;
mod v2;

pub use evict_time::{evict_time_program, run_evict_time, EvictTimeOutcome};
pub use sweep::{sweep_csv, sweep_speculation_window, SweepPoint};
pub use v1::{build_v1, run_v1, V1Session};
pub use v2::{build_v2, default_gadget, run_v2, GadgetSpec, V2Session};

use crate::channels::ProbeConfig;
use crate::isa::Program;
use crate::mem::CacheConfig;
use crate::mitigations::MitigationOptions;
use crate::pipeline::{SimConfig, SimError};
use crate::predictor::PredictorConfig;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Variant {
    V1Flush,
    V1Evict,
    V2Btb,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::V1Flush => "v1-flush",
            Variant::V1Evict => "v1-evict",
            Variant::V2Btb => "v2-btb",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "v1-flush" | "v1_flush" | "v1" => Variant::V1Flush,
            "v1-evict" | "v1_evict" => Variant::V1Evict,
            "v2-btb" | "v2_btb" | "v2" => Variant::V2Btb,
            _ => return None,
        })
    }
}

/// Everything a scenario needs: the secret, the phase counts, and the
/// configuration of each simulated component.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub variant: Variant,
    pub secret: Vec<u8>,
    /// Predictor warm-up calls per attempt. The gshare history register must
    /// reach its all-taken fixed point (history_bits shifts) before counter
    /// training becomes effective, so this needs history_bits + margin.
    pub training_passes: u32,
    pub attempts_per_byte: u32,
    /// Filler instructions between the bounds check and the leaking loads.
    pub pad: usize,
    /// Also run the Evict+Time recovery alongside Flush+Reload.
    pub evict_time: bool,
    pub probe: ProbeConfig,
    pub cache: CacheConfig,
    pub predictor: PredictorConfig,
    pub sim: SimConfig,
    pub mitigations: MitigationOptions,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            variant: Variant::V1Flush,
            secret: b"secret".to_vec(),
            training_passes: 12,
            attempts_per_byte: 3,
            pad: 0,
            evict_time: false,
            probe: ProbeConfig::default(),
            cache: CacheConfig::default(),
            predictor: PredictorConfig::default(),
            sim: SimConfig::default(),
            mitigations: MitigationOptions::default(),
            seed: 1,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("scenario config invalid: {0}")]
    Config(String),
    #[error("secret must live in victim-readable memory: {0}")]
    SecretPlacement(String),
    #[error("simulation faulted: {0}")]
    Fault(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Mem(#[from] crate::mem::MemError),
    #[error("assembly of generated scenario program failed: {0}")]
    Asm(#[from] crate::isa::AsmError),
    #[error(transparent)]
    Transform(#[from] crate::mitigations::TransformError),
}

/// Fixed virtual/physical addresses shared by the scenario builders.
/// Set-index collisions between these and the probe array are checked at
/// build time.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Layout {
    pub driver_base: u64,
    pub victim_base: u64,
    pub array1: u64,
    pub array1_size_addr: u64,
    pub secret_addr: u64,
    pub probe_base: u64,
    pub arena_base: u64,
    pub arena_pages: u64,
    /// V2 only: the victim's indirect-jump target word, the gadget, and the
    /// aliasing trainer jump.
    pub jump_target_word: u64,
    pub gadget_addr: u64,
    pub trainer_jump_pc: u64,
    pub victim_jump_pc: u64,
}

impl Default for Layout {
    fn default() -> Self {
        Layout {
            driver_base: 0x1000,
            victim_base: 0x2000,
            array1: 0x8000,
            array1_size_addr: 0x8100,
            secret_addr: 0x8240,
            probe_base: 0x40000,
            arena_base: 0xA0_0000,
            arena_pages: 0,
            jump_target_word: 0x9040,
            gadget_addr: 0x6000,
            trainer_jump_pc: 0x102004,
            victim_jump_pc: 0x2004,
        }
    }
}

/// A built scenario: one program per context plus the address map.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub programs: Vec<Program>,
    pub sim_config: SimConfig,
    pub layout: Layout,
    pub config: ScenarioConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct ByteOutcome {
    pub target: u64,
    pub value: u8,
    pub correct: bool,
    pub attempts: u32,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttackReport {
    pub variant: String,
    pub accuracy: f64,
    pub recovered: String,
    pub bytes: Vec<ByteOutcome>,
    pub simulated_cycles: u64,
    /// Recovered bytes per million simulated cycles.
    #[serde(rename = "bandwidth")]
    pub bandwidth_bytes_per_mcycle: f64,
    pub mitigations: MitigationOptions,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evict_time: Option<EvictTimeOutcome>,
}

impl AttackReport {
    pub fn from_bytes(
        variant: &str,
        secret: &[u8],
        bytes: Vec<ByteOutcome>,
        simulated_cycles: u64,
        mitigations: MitigationOptions,
        seed: u64,
    ) -> Self {
        let correct = bytes.iter().filter(|b| b.correct).count();
        let accuracy = correct as f64 / secret.len().max(1) as f64;
        let recovered_bytes: Vec<u8> = bytes.iter().map(|b| b.value).collect();
        let recovered = String::from_utf8_lossy(&recovered_bytes).into_owned();
        let bandwidth = if simulated_cycles == 0 {
            0.0
        } else {
            secret.len() as f64 / simulated_cycles as f64 * 1_000_000.0
        };
        AttackReport {
            variant: variant.to_string(),
            accuracy,
            recovered,
            bytes,
            simulated_cycles,
            bandwidth_bytes_per_mcycle: bandwidth,
            mitigations,
            seed,
            evict_time: None,
        }
    }
}

/// Build the scenario for `config.variant`.
pub fn build(config: &ScenarioConfig) -> Result<Scenario, ScenarioError> {
    match config.variant {
        Variant::V1Flush | Variant::V1Evict => build_v1(config),
        Variant::V2Btb => build_v2(config, &default_gadget()),
    }
}

/// Build and run the scenario, including the Evict+Time leg when configured.
pub fn run(config: &ScenarioConfig) -> Result<AttackReport, ScenarioError> {
    let scenario = build(config)?;
    let mut report = match config.variant {
        Variant::V1Flush | Variant::V1Evict => run_v1(&scenario)?,
        Variant::V2Btb => run_v2(&scenario)?,
    };
    if config.evict_time {
        report.evict_time = Some(run_evict_time(config)?);
    }
    Ok(report)
}

/// Deterministic split-mix generator for training-index sequences.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SplitMix(pub u64);

impl SplitMix {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

/// log2 of a power-of-two stride; scenario builders reject other strides.
pub(crate) fn stride_shift(stride: u64) -> Result<u32, ScenarioError> {
    if !stride.is_power_of_two() {
        return Err(ScenarioError::Config(format!(
            "probe stride {stride} must be a power of two"
        )));
    }
    Ok(stride.trailing_zeros())
}
