//! Branch prediction state: a direct-mapped BTB with partial tags, a gshare
//! direction predictor, and a bounded return stack.
//!
//! The state carries no context or process identifier anywhere — it is global
//! across contexts by construction, and the BTB/tag arithmetic observes only
//! the low `observe_bits` of a branch pc, so two pcs that agree in those bits
//! alias to the same entry no matter who installed it.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictorConfig {
    /// Total low virtual-address bits the predictor can see.
    pub observe_bits: u32,
    pub btb_index_bits: u32,
    pub btb_tag_bits: u32,
    pub history_bits: u32,
    pub pht_entries: usize,
    pub rsb_depth: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            observe_bits: 20,
            btb_index_bits: 12,
            btb_tag_bits: 8,
            history_bits: 8,
            pht_entries: 4096,
            rsb_depth: 16,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.btb_index_bits + self.btb_tag_bits > self.observe_bits {
            return Err(format!(
                "btb_index_bits ({}) + btb_tag_bits ({}) exceed observe_bits ({})",
                self.btb_index_bits, self.btb_tag_bits, self.observe_bits
            ));
        }
        if !self.pht_entries.is_power_of_two() {
            return Err("pht_entries must be a power of two".into());
        }
        Ok(())
    }

    pub fn btb_entries(&self) -> usize {
        1 << self.btb_index_bits
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchClass {
    Conditional,
    Indirect,
    Call,
    Return,
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PredictionSource {
    Btb,
    PhtFallthrough,
    Rsb,
    StaticNotTaken,
}

/// A prediction. `target = None` means fall-through (pc + 4).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prediction {
    pub taken: bool,
    pub target: Option<u64>,
    pub source: PredictionSource,
}

impl Prediction {
    pub fn next_pc(&self, pc: u64) -> u64 {
        self.target.unwrap_or(pc + crate::isa::INSTR_WIDTH)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct BtbEntry {
    tag: u64,
    target: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictorState {
    pub config: PredictorConfig,
    btb: Vec<Option<BtbEntry>>,
    pht: Vec<u8>,
    ghr: u64,
    rsb: Vec<u64>,
}

impl PredictorState {
    pub fn new(config: PredictorConfig) -> Self {
        // Counters initialize to 1: weakly not-taken.
        PredictorState {
            btb: vec![None; config.btb_entries()],
            pht: vec![1; config.pht_entries],
            ghr: 0,
            rsb: Vec::with_capacity(config.rsb_depth),
            config,
        }
    }

    fn observed(&self, pc: u64) -> u64 {
        pc & ((1u64 << self.config.observe_bits) - 1)
    }

    /// BTB index: word-aligned low observed bits of pc.
    pub fn btb_index(&self, pc: u64) -> usize {
        ((self.observed(pc) >> 2) & ((1u64 << self.config.btb_index_bits) - 1)) as usize
    }

    fn btb_tag(&self, pc: u64) -> u64 {
        (self.observed(pc) >> (2 + self.config.btb_index_bits))
            & ((1u64 << self.config.btb_tag_bits) - 1)
    }

    fn pht_index(&self, pc: u64, ghr: u64) -> usize {
        let mask = (self.config.pht_entries - 1) as u64;
        (((self.observed(pc) >> 2) ^ ghr) & mask) as usize
    }

    fn ghr_mask(&self) -> u64 {
        (1u64 << self.config.history_bits) - 1
    }

    pub fn ghr(&self) -> u64 {
        self.ghr
    }

    pub fn shift_history(&self, ghr: u64, taken: bool) -> u64 {
        ((ghr << 1) | taken as u64) & self.ghr_mask()
    }

    fn btb_lookup(&self, pc: u64) -> Option<u64> {
        self.btb[self.btb_index(pc)]
            .filter(|e| e.tag == self.btb_tag(pc))
            .map(|e| e.target)
    }

    /// Predict using the committed global history.
    pub fn predict(&self, pc: u64, class: BranchClass) -> Prediction {
        self.predict_with_history(pc, class, self.ghr)
    }

    /// Predict with an explicit history value. The pipeline passes its
    /// speculative history shadow here so in-flight predictions see predicted
    /// outcomes of older, still-unresolved conditionals.
    pub fn predict_with_history(&self, pc: u64, class: BranchClass, ghr: u64) -> Prediction {
        match class {
            BranchClass::Conditional => {
                let taken = self.pht[self.pht_index(pc, ghr)] >= 2;
                if taken {
                    match self.btb_lookup(pc) {
                        Some(target) => Prediction {
                            taken: true,
                            target: Some(target),
                            source: PredictionSource::Btb,
                        },
                        None => Prediction {
                            taken: true,
                            target: None,
                            source: PredictionSource::PhtFallthrough,
                        },
                    }
                } else {
                    Prediction {
                        taken: false,
                        target: None,
                        source: PredictionSource::PhtFallthrough,
                    }
                }
            }
            BranchClass::Indirect => match self.btb_lookup(pc) {
                Some(target) => Prediction {
                    taken: true,
                    target: Some(target),
                    source: PredictionSource::Btb,
                },
                None => Prediction {
                    taken: true,
                    target: None,
                    source: PredictionSource::StaticNotTaken,
                },
            },
            BranchClass::Return => match self.rsb.last() {
                Some(target) => Prediction {
                    taken: true,
                    target: Some(*target),
                    source: PredictionSource::Rsb,
                },
                None => Prediction {
                    taken: true,
                    target: None,
                    source: PredictionSource::StaticNotTaken,
                },
            },
            // Direct targets are decoded; nothing to predict.
            BranchClass::Call | BranchClass::Direct => Prediction {
                taken: true,
                target: None,
                source: PredictionSource::StaticNotTaken,
            },
        }
    }

    /// Record a resolved branch. Updates happen whether or not the target is
    /// mapped or legal in the updater's context — training through jumps to
    /// illegal destinations still installs BTB entries.
    pub fn update(&mut self, pc: u64, taken: bool, actual_target: u64, class: BranchClass) {
        match class {
            BranchClass::Conditional => {
                let idx = self.pht_index(pc, self.ghr);
                if taken {
                    self.pht[idx] = (self.pht[idx] + 1).min(3);
                } else {
                    self.pht[idx] = self.pht[idx].saturating_sub(1);
                }
                self.ghr = self.shift_history(self.ghr, taken);
                if taken {
                    self.btb_install(pc, actual_target);
                }
            }
            BranchClass::Indirect => {
                self.btb_install(pc, actual_target);
            }
            BranchClass::Call => {
                self.btb_install(pc, actual_target);
                if self.rsb.len() == self.config.rsb_depth {
                    self.rsb.remove(0);
                }
                self.rsb.push(pc + crate::isa::INSTR_WIDTH);
            }
            BranchClass::Return => {
                self.rsb.pop();
            }
            BranchClass::Direct => {}
        }
    }

    fn btb_install(&mut self, pc: u64, target: u64) {
        let idx = self.btb_index(pc);
        self.btb[idx] = Some(BtbEntry {
            tag: self.btb_tag(pc),
            target,
        });
    }

    /// Clear everything: BTB, counters back to weakly not-taken, history,
    /// return stack.
    pub fn flush(&mut self) {
        self.btb.iter_mut().for_each(|e| *e = None);
        self.pht.iter_mut().for_each(|c| *c = 1);
        self.ghr = 0;
        self.rsb.clear();
    }

    /// BTB contents as CSV `index,tag,target`.
    pub fn btb_dump_csv(&self) -> String {
        let mut out = String::from("index,tag,target\n");
        for (i, e) in self.btb.iter().enumerate() {
            if let Some(e) = e {
                out.push_str(&format!("{},0x{:x},0x{:x}\n", i, e.tag, e.target));
            }
        }
        out
    }
}
