//! Command-line runner: scenario config files, embedded presets, attack and
//! sweep execution, and artifact emission (report, histogram, trace, BTB
//! dump).
//!
//! Config files are flat `section.key = value` text; `--set` overrides use
//! the same grammar. Every key in [`DOCUMENTED_KEYS`] is settable both ways.

use crate::attacks::{self, ScenarioConfig, ScenarioError, Variant};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

pub const PRESETS: &[(&str, &str)] = &[
    ("v1", include_str!("../presets/v1.cfg")),
    ("v1-evict", include_str!("../presets/v1-evict.cfg")),
    ("v2", include_str!("../presets/v2.cfg")),
    ("v1-evicttime", include_str!("../presets/v1-evicttime.cfg")),
];

/// Every config key reachable from a scenario file or `--set` override.
pub const DOCUMENTED_KEYS: &[&str] = &[
    "scenario.variant",
    "scenario.secret",
    "scenario.training_passes",
    "scenario.attempts_per_byte",
    "scenario.pad",
    "scenario.evict_time",
    "scenario.seed",
    "probe.stride",
    "probe.entries",
    "probe.threshold",
    "cache.line_size",
    "cache.l1_sets",
    "cache.l1_ways",
    "cache.l1_latency",
    "cache.l2_sets",
    "cache.l2_ways",
    "cache.l2_latency",
    "cache.llc_sets",
    "cache.llc_ways",
    "cache.llc_latency",
    "cache.dram_latency",
    "cache.inclusive",
    "predictor.observe_bits",
    "predictor.btb_index_bits",
    "predictor.btb_tag_bits",
    "predictor.history_bits",
    "predictor.pht_entries",
    "predictor.rsb_depth",
    "sim.rob_size",
    "sim.alu_latency",
    "sim.mul_latency",
    "sim.max_cycles",
    "mitigations.fence_after_branches",
    "mitigations.flush_on_switch",
    "mitigations.no_spec_fill",
];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

impl CliError {
    /// 1 for configuration problems, 2 for simulation faults and timeouts.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => 1,
            CliError::Scenario(e) => match e {
                ScenarioError::Fault(_) | ScenarioError::Sim(_) => 2,
                _ => 1,
            },
        }
    }
}

fn parse_u64(key: &str, value: &str) -> Result<u64, CliError> {
    let v = value.trim();
    let parsed = if let Some(hex) = v.strip_prefix("0x").or(v.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16)
    } else {
        v.parse()
    };
    parsed.map_err(|_| CliError::Config(format!("{key}: expected a number, got `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value.trim() {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        other => Err(CliError::Config(format!(
            "{key}: expected true/false, got `{other}`"
        ))),
    }
}

fn parse_secret(value: &str) -> Vec<u8> {
    if let Some(hex) = value.strip_prefix("hex:") {
        let digits: Vec<u8> = hex
            .as_bytes()
            .iter()
            .copied()
            .filter(|b| !b.is_ascii_whitespace())
            .collect();
        let mut out = Vec::with_capacity(digits.len() / 2);
        for pair in digits.chunks(2) {
            if pair.len() == 2 {
                let s = std::str::from_utf8(pair).unwrap_or("00");
                out.push(u8::from_str_radix(s, 16).unwrap_or(0));
            }
        }
        out
    } else {
        value.as_bytes().to_vec()
    }
}

/// Apply one `section.key = value` setting.
pub fn apply_kv(cfg: &mut ScenarioConfig, key: &str, value: &str) -> Result<(), CliError> {
    let value = value.trim();
    match key {
        "scenario.variant" => {
            cfg.variant = Variant::parse(value)
                .ok_or_else(|| CliError::Config(format!("unknown variant `{value}`")))?;
        }
        "scenario.secret" => cfg.secret = parse_secret(value),
        "scenario.training_passes" => cfg.training_passes = parse_u64(key, value)? as u32,
        "scenario.attempts_per_byte" => cfg.attempts_per_byte = parse_u64(key, value)? as u32,
        "scenario.pad" => cfg.pad = parse_u64(key, value)? as usize,
        "scenario.evict_time" => cfg.evict_time = parse_bool(key, value)?,
        "scenario.seed" => cfg.seed = parse_u64(key, value)?,
        "probe.stride" => cfg.probe.stride = parse_u64(key, value)?,
        "probe.entries" => cfg.probe.entries = parse_u64(key, value)? as usize,
        "probe.threshold" => cfg.probe.threshold = Some(parse_u64(key, value)?),
        "cache.line_size" => cfg.cache.line_size = parse_u64(key, value)?,
        "cache.l1_sets" => cfg.cache.l1.sets = parse_u64(key, value)? as usize,
        "cache.l1_ways" => cfg.cache.l1.ways = parse_u64(key, value)? as usize,
        "cache.l1_latency" => cfg.cache.l1.hit_latency = parse_u64(key, value)?,
        "cache.l2_sets" => cfg.cache.l2.sets = parse_u64(key, value)? as usize,
        "cache.l2_ways" => cfg.cache.l2.ways = parse_u64(key, value)? as usize,
        "cache.l2_latency" => cfg.cache.l2.hit_latency = parse_u64(key, value)?,
        "cache.llc_sets" => cfg.cache.llc.sets = parse_u64(key, value)? as usize,
        "cache.llc_ways" => cfg.cache.llc.ways = parse_u64(key, value)? as usize,
        "cache.llc_latency" => cfg.cache.llc.hit_latency = parse_u64(key, value)?,
        "cache.dram_latency" => cfg.cache.dram_latency = parse_u64(key, value)?,
        "cache.inclusive" => cfg.cache.inclusive = parse_bool(key, value)?,
        "predictor.observe_bits" => cfg.predictor.observe_bits = parse_u64(key, value)? as u32,
        "predictor.btb_index_bits" => cfg.predictor.btb_index_bits = parse_u64(key, value)? as u32,
        "predictor.btb_tag_bits" => cfg.predictor.btb_tag_bits = parse_u64(key, value)? as u32,
        "predictor.history_bits" => cfg.predictor.history_bits = parse_u64(key, value)? as u32,
        "predictor.pht_entries" => cfg.predictor.pht_entries = parse_u64(key, value)? as usize,
        "predictor.rsb_depth" => cfg.predictor.rsb_depth = parse_u64(key, value)? as usize,
        "sim.rob_size" => cfg.sim.rob_size = parse_u64(key, value)? as usize,
        "sim.alu_latency" => cfg.sim.alu_latency = parse_u64(key, value)?,
        "sim.mul_latency" => cfg.sim.mul_latency = parse_u64(key, value)?,
        "sim.max_cycles" => cfg.sim.max_cycles = parse_u64(key, value)?,
        "mitigations.fence_after_branches" => {
            cfg.mitigations.fence_after_branches = parse_bool(key, value)?
        }
        "mitigations.flush_on_switch" => cfg.mitigations.flush_on_switch = parse_bool(key, value)?,
        "mitigations.no_spec_fill" => cfg.mitigations.no_spec_fill = parse_bool(key, value)?,
        other => return Err(CliError::Config(format!("unknown config key `{other}`"))),
    }
    Ok(())
}

/// Parse flat `section.key = value` text into a config, starting from
/// defaults. `#` and `;` start comments.
pub fn parse_config_text(text: &str) -> Result<ScenarioConfig, CliError> {
    let mut cfg = ScenarioConfig::default();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split(['#', ';']).next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", no + 1)))?;
        apply_kv(&mut cfg, key.trim(), value)?;
    }
    Ok(cfg)
}

pub fn preset(name: &str) -> Result<ScenarioConfig, CliError> {
    let text = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            CliError::Config(format!(
                "unknown preset `{name}` (available: {})",
                names.join(", ")
            ))
        })?;
    parse_config_text(text)
}

#[derive(Debug, Parser)]
#[command(
    name = "specsim",
    about = "Speculative out-of-order core simulator with cache side-channel attack scenarios"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one attack scenario and report what it recovered.
    Run(RunArgs),
    /// Run the v1 scenario across a window/pad grid.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Builtin scenario: v1, v1-evict, v2, v1-evicttime.
    #[arg(long)]
    preset: Option<String>,
    /// Scenario config file (flat `section.key = value` lines).
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Override one config key, repeatable: --set cache.dram_latency=300
    #[arg(long = "set")]
    set: Vec<String>,
    /// Override scenario.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Watchdog limit; overrides sim.max_cycles.
    #[arg(long)]
    max_cycles: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Artifacts to write under --out: report,histogram,trace,btb.
    #[arg(long, value_delimiter = ',', default_value = "report")]
    emit: Vec<String>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Window sizes to sweep.
    #[arg(long, value_delimiter = ',', default_value = "1,8,64,192,256")]
    windows: Vec<usize>,
    /// Pad lengths to sweep.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pads: Vec<usize>,
}

fn load_config(common: &CommonArgs) -> Result<ScenarioConfig, CliError> {
    let mut cfg = match (&common.preset, &common.scenario) {
        (Some(name), None) => preset(name)?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
                path: path.clone(),
                source,
            })?;
            parse_config_text(&text)?
        }
        (None, None) => preset("v1")?,
        (Some(_), Some(_)) => {
            return Err(CliError::Config(
                "--preset and --scenario are mutually exclusive".into(),
            ))
        }
    };
    for kv in &common.set {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{kv}`")))?;
        apply_kv(&mut cfg, key.trim(), value)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(mc) = common.max_cycles {
        cfg.sim.max_cycles = mc;
    }
    Ok(cfg)
}

fn write_artifact(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|source| CliError::Io { path, source })
}

/// Instrumented single-byte session used for histogram/trace/btb artifacts.
fn emit_instrumented(
    cfg: &ScenarioConfig,
    dir: &Path,
    want_histogram: bool,
    want_trace: bool,
    want_btb: bool,
) -> Result<(), CliError> {
    let scenario = attacks::build(cfg)?;
    let (probe_csv, trace_lines, btb_csv) = match cfg.variant {
        Variant::V2Btb => {
            let mut session = attacks::V2Session::new(&scenario, 0)?;
            session.sim.set_record_events(want_trace);
            let mut last = None;
            for _ in 0..cfg.attempts_per_byte {
                let r = session.attempt()?;
                let done = r.best.is_some();
                last = Some(r);
                if done {
                    break;
                }
            }
            let threshold = cfg.probe.threshold_or_calibrated(&session.sim.hierarchy);
            (
                last.map(|r| r.to_csv(threshold)),
                trace_jsonl(&session.sim),
                session.sim.predictors.btb_dump_csv(),
            )
        }
        _ => {
            let mut session = attacks::V1Session::new(&scenario, 0)?;
            session.sim.set_record_events(want_trace);
            let mut last = None;
            for _ in 0..cfg.attempts_per_byte {
                let r = session.attempt()?;
                let done = r.best.is_some();
                last = Some(r);
                if done {
                    break;
                }
            }
            let threshold = cfg.probe.threshold_or_calibrated(&session.sim.hierarchy);
            (
                last.map(|r| r.to_csv(threshold)),
                trace_jsonl(&session.sim),
                session.sim.predictors.btb_dump_csv(),
            )
        }
    };
    if want_histogram {
        if let Some(csv) = probe_csv {
            write_artifact(dir, "histogram.csv", &csv)?;
        }
    }
    if want_trace {
        write_artifact(dir, "trace.jsonl", &trace_lines)?;
    }
    if want_btb {
        write_artifact(dir, "btb.csv", &btb_csv)?;
    }
    Ok(())
}

fn trace_jsonl(sim: &crate::pipeline::Simulation) -> String {
    let trace = sim.trace(None);
    let mut out = String::new();
    for event in &trace.events {
        out.push_str(&serde_json::to_string(event).expect("event serializes"));
        out.push('\n');
    }
    out
}

fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.common)?;
    let report = attacks::run(&cfg)?;
    println!(
        "variant={} accuracy={:.2} cycles={}",
        report.variant, report.accuracy, report.simulated_cycles
    );
    if let Some(dir) = &args.common.out {
        let emit = &args.emit;
        if emit.iter().any(|e| e == "report") {
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            write_artifact(dir, "report.json", &json)?;
        }
        let want_histogram = emit.iter().any(|e| e == "histogram");
        let want_trace = emit.iter().any(|e| e == "trace");
        let want_btb = emit.iter().any(|e| e == "btb");
        if want_histogram || want_trace || want_btb {
            emit_instrumented(&cfg, dir, want_histogram, want_trace, want_btb)?;
        }
        if let Some(unknown) = emit
            .iter()
            .find(|e| !matches!(e.as_str(), "report" | "histogram" | "trace" | "btb"))
        {
            return Err(CliError::Config(format!("unknown emit flag `{unknown}`")));
        }
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.common)?;
    // Grid points are independent simulations; run them on worker threads
    // and collect in index order.
    let grid: Vec<(usize, usize)> = args
        .pads
        .iter()
        .flat_map(|p| args.windows.iter().map(move |w| (*w, *p)))
        .collect();
    let mut points: Vec<Option<attacks::SweepPoint>> = vec![None; grid.len()];
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(grid.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<std::sync::Mutex<Option<Result<attacks::SweepPoint, ScenarioError>>>> =
        grid.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= grid.len() {
                    break;
                }
                let (window, pad) = grid[i];
                let point = attacks::sweep_speculation_window(&cfg, &[window], &[pad])
                    .map(|mut v| v.remove(0));
                *results[i].lock().unwrap() = Some(point);
            });
        }
    });
    for (i, cell) in results.into_iter().enumerate() {
        let point = cell
            .into_inner()
            .unwrap()
            .expect("worker filled every cell")?;
        points[i] = Some(point);
    }
    let points: Vec<attacks::SweepPoint> = points.into_iter().map(|p| p.unwrap()).collect();
    let csv = attacks::sweep_csv(&points);
    print!("{csv}");
    if let Some(dir) = &args.common.out {
        write_artifact(dir, "sweep.csv", &csv)?;
    }
    Ok(())
}

/// Entry point used by the `specsim` binary; returns the process exit code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own help/version output with code 0.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
