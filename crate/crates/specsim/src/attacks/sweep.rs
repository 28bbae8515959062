//! Speculation-window sweep: how recovery accuracy depends on the
//! reorder-buffer budget when filler instructions separate the bounds check
//! from the leaking loads.

use super::{build_v1, run_v1, ScenarioConfig, ScenarioError};
use serde::Serialize;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SweepPoint {
    pub window: usize,
    pub pad: usize,
    pub accuracy: f64,
    pub cycles: u64,
}

/// Run the v1 scenario across a grid of window sizes and pad lengths.
/// Accuracy is monotone non-decreasing in the window at fixed pad: the leak
/// needs the branch, the pad, and the three-instruction chain in flight at
/// once.
pub fn sweep_speculation_window(
    config: &ScenarioConfig,
    windows: &[usize],
    pads: &[usize],
) -> Result<Vec<SweepPoint>, ScenarioError> {
    let mut points = Vec::with_capacity(windows.len() * pads.len());
    for &pad in pads {
        for &window in windows {
            let mut cfg = config.clone();
            cfg.pad = pad;
            cfg.sim.rob_size = window;
            let scenario = build_v1(&cfg)?;
            let report = run_v1(&scenario)?;
            points.push(SweepPoint {
                window,
                pad,
                accuracy: report.accuracy,
                cycles: report.simulated_cycles,
            });
        }
    }
    Ok(points)
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("window,pad,accuracy,cycles\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{:.4},{}\n",
            p.window, p.pad, p.accuracy, p.cycles
        ));
    }
    out
}
