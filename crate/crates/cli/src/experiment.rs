//! Training runs with a manifest, and checkpoint evaluation.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::ControlFlow;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use lctt_core::diff::checkpoint;
use lctt_core::protocol::{mean_redundant_observation_ratio, StepTrace};
use lctt_core::trainer::{
    evaluate_episodes, run::thread_pool, summarize, train, EvalSummary, LogRow, RunStatus, TrainOutcome,
};
use lctt_core::{Error, Result, RunSpec};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn version() -> &'static str {
    env!("LCTT_VERSION")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub status: RunStatus,
    pub version: String,
    pub seed: u64,
    pub label: String,
    pub config: RunConfig,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub env_steps: Option<u64>,
    pub episodes: Option<u64>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn write_manifest(out_dir: &Path, m: &Manifest) -> Result<()> {
    let tmp = out_dir.join(format!("{MANIFEST_FILE}.tmp"));
    fs::write(&tmp, serde_json::to_string_pretty(m)? + "\n")?;
    fs::rename(tmp, out_dir.join(MANIFEST_FILE))?;
    Ok(())
}

pub fn read_manifest(out_dir: &Path) -> Result<Manifest> {
    Ok(serde_json::from_str(&fs::read_to_string(out_dir.join(MANIFEST_FILE))?)?)
}

/// Train `config` with master seed `seed` into `out_dir`. The manifest says
/// "incomplete" until the run reaches its step budget.
pub fn run_experiment(
    config: &RunConfig,
    seed: u64,
    out_dir: &Path,
    on_row: impl FnMut(&LogRow) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    let spec = config.to_spec(Some(seed))?;
    fs::create_dir_all(out_dir)?;
    let mut echo = config.clone();
    echo.seed = seed;
    let mut manifest = Manifest {
        status: RunStatus::Incomplete,
        version: version().to_string(),
        seed,
        label: spec.label.clone(),
        config: echo,
        started_unix: now(),
        finished_unix: None,
        env_steps: None,
        episodes: None,
    };
    write_manifest(out_dir, &manifest)?;
    let outcome = train(&spec, out_dir, on_row)?;
    manifest.status = outcome.status;
    manifest.finished_unix = Some(now());
    manifest.env_steps = Some(outcome.env_steps);
    manifest.episodes = Some(outcome.episodes);
    write_manifest(out_dir, &manifest)?;
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub checkpoint: String,
    #[serde(flatten)]
    pub summary: EvalSummary,
}

/// Greedy evaluation of a checkpoint. Optionally writes every step trace as
/// JSON lines.
pub fn eval_checkpoint(ckpt: &Path, spec: &RunSpec, episodes: usize, dump_trace: Option<&Path>) -> Result<EvalReport> {
    let params = checkpoint::load(ckpt)?;
    let dims = spec.dims();
    dims.check(&params)?;
    let pool = thread_pool()?;
    let records = evaluate_episodes(&params, dims, &spec.env, spec.n_leaders, episodes, spec.seed(), 0, &pool)?;
    if let Some(path) = dump_trace {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for trace in records.iter().flat_map(|r| r.traces()) {
            serde_json::to_writer(&mut w, trace)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    Ok(EvalReport { label: spec.label.clone(), checkpoint: ckpt.display().to_string(), summary: summarize(&records) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RddReport {
    pub steps: usize,
    pub mean_rdd: f64,
}

/// Mean per-step redundant observation ratio of a JSON-lines trace file.
pub fn rdd_from_trace(path: &Path) -> Result<RddReport> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut traces = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let trace: StepTrace =
            serde_json::from_str(&line).map_err(|e| Error::Protocol(format!("{}:{}: {e}", path.display(), i + 1)))?;
        trace.validate()?;
        traces.push(trace);
    }
    Ok(RddReport { steps: traces.len(), mean_rdd: mean_redundant_observation_ratio(&traces) })
}
