//! Python bindings for the specsim simulator: presets, scenario runs, window
//! sweeps, and the assembler, with reports passed as JSON strings.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use std::collections::HashMap;

use specsim::attacks::{self, ScenarioConfig};
use specsim::cli::{apply_kv, preset, DOCUMENTED_KEYS, PRESETS};

fn config_for(
    preset_name: &str,
    overrides: Option<HashMap<String, String>>,
) -> PyResult<ScenarioConfig> {
    let mut cfg = preset(preset_name).map_err(|e| PyValueError::new_err(e.to_string()))?;
    if let Some(overrides) = overrides {
        // Deterministic application order.
        let mut pairs: Vec<(String, String)> = overrides.into_iter().collect();
        pairs.sort();
        for (key, value) in pairs {
            apply_kv(&mut cfg, &key, &value).map_err(|e| PyValueError::new_err(e.to_string()))?;
        }
    }
    Ok(cfg)
}

#[pyo3::pymodule]
mod specsim_py {
    use super::*;

    /// Names of the builtin scenario presets.
    #[pyfunction]
    fn presets() -> Vec<String> {
        PRESETS.iter().map(|(n, _)| n.to_string()).collect()
    }

    /// Config keys accepted by scenario files and overrides.
    #[pyfunction]
    fn documented_keys() -> Vec<String> {
        DOCUMENTED_KEYS.iter().map(|k| k.to_string()).collect()
    }

    /// Run a preset (with optional `section.key -> value` overrides) and
    /// return the attack report as a JSON string.
    #[pyfunction]
    #[pyo3(signature = (preset_name, overrides=None))]
    fn run_preset(
        preset_name: &str,
        overrides: Option<HashMap<String, String>>,
    ) -> PyResult<String> {
        let cfg = config_for(preset_name, overrides)?;
        let report = attacks::run(&cfg).map_err(|e| PyValueError::new_err(e.to_string()))?;
        serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Sweep the speculation window for the v1 scenario; returns JSON rows
    /// of `{window, pad, accuracy, cycles}`.
    #[pyfunction]
    #[pyo3(signature = (preset_name, windows, pads, overrides=None))]
    fn sweep_preset(
        preset_name: &str,
        windows: Vec<usize>,
        pads: Vec<usize>,
        overrides: Option<HashMap<String, String>>,
    ) -> PyResult<String> {
        let cfg = config_for(preset_name, overrides)?;
        let points = attacks::sweep_speculation_window(&cfg, &windows, &pads)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        serde_json::to_string(&points).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Assemble source text and return its canonical disassembly; raises
    /// ValueError with line/column detail on bad input.
    #[pyfunction]
    fn canonicalize_asm(source: &str) -> PyResult<String> {
        let program =
            specsim::isa::assemble(source).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(specsim::isa::disassemble(&program))
    }

    /// The calibrated hit/miss threshold for the default cache geometry.
    #[pyfunction]
    fn default_threshold() -> PyResult<u64> {
        let hierarchy = specsim::mem::CacheHierarchy::new(specsim::mem::CacheConfig::default())
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(specsim::channels::calibrate_threshold(&hierarchy))
    }
}
