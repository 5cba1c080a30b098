//! Parameter sweeps over (strategy, Δ, K), result tables, and the closed-form
//! latency tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envs::{TaskName, TaskSpec};
use crate::error::{Error, Result};
use crate::policy::{ChunkPolicy, FlowPolicy};
use crate::runtime::{self, EpisodeResult, RunConfig, Strategy, TimingMode, DEFAULT_TICK_MS};

pub const CSV_HEADER: &str =
    "task,strategy,delta,K,q,success_rate,mean_steps,mean_discontinuity,mean_reaction_ticks,analytic_time_ms";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Δ = 1 with K from 1 to 8.
    Horizon,
    /// Δ from 0 to 4 with K = max(Δ, 1).
    Delay,
    Custom,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "horizon" => Ok(Preset::Horizon),
            "delay" => Ok(Preset::Delay),
            "custom" => Ok(Preset::Custom),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPoint {
    pub delta: u64,
    #[serde(rename = "K")]
    pub k: usize,
}

fn default_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}

fn default_episodes() -> usize {
    64
}

fn one() -> u64 {
    1
}

fn default_tick_ms() -> f64 {
    DEFAULT_TICK_MS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub preset: Preset,
    pub tasks: Vec<TaskName>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    /// Episode seeds are `seed, seed + 1, …`.
    #[serde(default)]
    pub seed: u64,
    /// Checkpoint paths keyed by `"task"` or `"task/strategy"`; the more
    /// specific key wins.
    #[serde(default)]
    pub checkpoints: BTreeMap<String, PathBuf>,
    /// Macro-action size; checkpoints must be trained on matching data.
    #[serde(default = "one")]
    pub q: u64,
    /// Points for the custom preset; ignored otherwise.
    #[serde(default)]
    pub points: Vec<SweepPoint>,
    #[serde(default = "default_tick_ms")]
    pub tick_ms: f64,
}

impl SweepSpec {
    pub fn preset(preset: Preset, tasks: Vec<TaskName>) -> Self {
        SweepSpec {
            preset,
            tasks,
            strategies: default_strategies(),
            episodes: default_episodes(),
            seed: 0,
            checkpoints: BTreeMap::new(),
            q: 1,
            points: Vec::new(),
            tick_ms: DEFAULT_TICK_MS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes < 1 {
            return Err(Error::Config("episodes must be at least 1".into()));
        }
        if self.tasks.is_empty() || self.strategies.is_empty() {
            return Err(Error::Config("tasks and strategies must be non-empty".into()));
        }
        if self.q < 1 {
            return Err(Error::InvalidQuantization(0));
        }
        if self.preset == Preset::Custom && self.points.is_empty() {
            return Err(Error::Config("custom preset needs points".into()));
        }
        if !(self.tick_ms > 0.0) {
            return Err(Error::Config("tick_ms must be positive".into()));
        }
        Ok(())
    }

    pub fn points(&self) -> Vec<SweepPoint> {
        match self.preset {
            Preset::Horizon => (1..=8).map(|k| SweepPoint { delta: 1, k }).collect(),
            Preset::Delay => (0..=4).map(|d| SweepPoint { delta: d, k: (d as usize).max(1) }).collect(),
            Preset::Custom => self.points.clone(),
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.episodes as u64).map(|i| self.seed + i).collect()
    }

    pub fn checkpoint_for(&self, task: TaskName, strategy: Strategy) -> Result<&Path> {
        let specific = format!("{}/{}", task.as_str(), strategy.as_str());
        self.checkpoints
            .get(&specific)
            .or_else(|| self.checkpoints.get(task.as_str()))
            .map(PathBuf::as_path)
            .ok_or_else(|| Error::Config(format!("no checkpoint configured for {specific}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub task: TaskName,
    pub strategy: Strategy,
    pub delta: u64,
    #[serde(rename = "K")]
    pub k: usize,
    pub q: u64,
    pub success_rate: f64,
    pub mean_steps: f64,
    pub mean_discontinuity: Option<f64>,
    pub mean_reaction_ticks: Option<f64>,
    pub analytic_time_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

/// Evaluates one `(task, strategy, Δ, K, q)` point over `seeds`, returning
/// the aggregate row (arithmetic means over episodes) and every episode.
#[allow(clippy::too_many_arguments)]
pub fn run_point<P: ChunkPolicy + ?Sized>(
    task: &TaskSpec,
    policy: &P,
    strategy: Strategy,
    delta: u64,
    k: usize,
    q: u64,
    tick_ms: f64,
    seeds: &[u64],
) -> Result<(ResultRow, Vec<EpisodeResult>)> {
    let env = task.quantized(q)?;
    let cfg = RunConfig { tick_ms, ..RunConfig::new(strategy, delta, k) };
    let results = runtime::evaluate(&env, policy, &cfg, seeds)?;
    let s = runtime::summarize(&results);
    let mode = if strategy.is_async() { TimingMode::Async } else { TimingMode::Sync };
    let exec_ms = k as f64 * tick_ms;
    let row = ResultRow {
        task: task.name,
        strategy,
        delta,
        k,
        q,
        success_rate: s.success_rate,
        mean_steps: s.mean_steps,
        mean_discontinuity: s.mean_discontinuity,
        mean_reaction_ticks: s.mean_reaction_ticks,
        analytic_time_ms: runtime::time_per_chunk(exec_ms, delta as f64 * tick_ms, k, delta as usize, mode),
    };
    Ok((row, results))
}

/// Runs the sweep with policies supplied by `policy_for`. Sync is always
/// evaluated at Δ = 0 with the point's K; duplicate rows collapse. Rows are
/// ordered by (task, strategy, Δ, K, q).
pub fn run_sweep_with<'p, P, F>(spec: &SweepSpec, mut policy_for: F) -> Result<ResultTable>
where
    P: ChunkPolicy + ?Sized + 'p,
    F: FnMut(TaskName, Strategy) -> Result<&'p P>,
{
    spec.validate()?;
    let seeds = spec.seeds();
    let mut rows = BTreeMap::new();
    for &name in &spec.tasks {
        let task = TaskSpec::preset(name);
        for &strategy in &spec.strategies {
            let policy = policy_for(name, strategy)?;
            for p in spec.points() {
                let delta = if strategy == Strategy::Sync { 0 } else { p.delta };
                let key = (name, strategy, delta, p.k, spec.q);
                if rows.contains_key(&key) {
                    continue;
                }
                let (row, _) = run_point(&task, policy, strategy, delta, p.k, spec.q, spec.tick_ms, &seeds)?;
                rows.insert(key, row);
            }
        }
    }
    Ok(ResultTable { rows: rows.into_values().collect() })
}

/// Loads every checkpoint the sweep needs, then runs it.
pub fn run_sweep(spec: &SweepSpec) -> Result<ResultTable> {
    spec.validate()?;
    let mut loaded: BTreeMap<PathBuf, FlowPolicy> = BTreeMap::new();
    for &task in &spec.tasks {
        for &strategy in &spec.strategies {
            let path = spec.checkpoint_for(task, strategy)?.to_path_buf();
            if !loaded.contains_key(&path) {
                let policy = FlowPolicy::load(&path)?;
                loaded.insert(path, policy);
            }
        }
    }
    run_sweep_with(spec, |task, strategy| {
        let path = spec.checkpoint_for(task, strategy)?;
        Ok(&loaded[path])
    })
}

impl ResultTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record(CSV_HEADER.split(','))
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Config(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn emit_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn emit_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn get(&self, task: TaskName, strategy: Strategy, delta: u64, k: usize) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.task == task && r.strategy == strategy && r.delta == delta && r.k == k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReactionRow {
    pub device: String,
    pub exec_ms: f64,
    pub inf_ms: f64,
    pub sync_ms: f64,
    pub async_ms: f64,
    pub speedup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkTimeRow {
    pub exec_ms: f64,
    pub inf_ms: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub delay: usize,
    pub sync_ms: f64,
    pub async_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticReport {
    pub reaction: Vec<ReactionRow>,
    pub chunk_time: Vec<ChunkTimeRow>,
}

/// Measured inference latencies of a 500 ms chunk (K = 25 at 50 Hz) on three
/// GPUs.
pub const REACTION_INPUTS: [(&str, f64, f64); 3] =
    [("RTX 5090", 500.0, 30.4), ("RTX 4090", 500.0, 36.1), ("RTX 5070", 500.0, 64.1)];

/// 103 ms inference against 166 ms for K = 5 actions at 30 Hz.
pub const CHUNK_TIME_INPUTS: (f64, f64, usize) = (166.0, 103.0, 5);

pub fn reaction_row(device: &str, exec_ms: f64, inf_ms: f64) -> ReactionRow {
    let sync_ms = runtime::max_reaction_latency(exec_ms, inf_ms, TimingMode::Sync);
    let async_ms = runtime::max_reaction_latency(exec_ms, inf_ms, TimingMode::Async);
    let speedup = if async_ms > 0.0 { sync_ms / async_ms } else { f64::INFINITY };
    ReactionRow { device: device.to_string(), exec_ms, inf_ms, sync_ms, async_ms, speedup }
}

pub fn chunk_time_row(exec_ms: f64, inf_ms: f64, k: usize, delay: usize) -> ChunkTimeRow {
    ChunkTimeRow {
        exec_ms,
        inf_ms,
        k,
        delay,
        sync_ms: runtime::time_per_chunk(exec_ms, inf_ms, k, delay, TimingMode::Sync),
        async_ms: runtime::time_per_chunk(exec_ms, inf_ms, k, delay, TimingMode::Async),
    }
}

pub fn analytic_tables() -> AnalyticReport {
    let (exec, inf, k) = CHUNK_TIME_INPUTS;
    AnalyticReport {
        reaction: REACTION_INPUTS.iter().map(|(d, e, i)| reaction_row(d, *e, *i)).collect(),
        chunk_time: (0..=k).map(|delay| chunk_time_row(exec, inf, k, delay)).collect(),
    }
}

impl AnalyticReport {
    pub fn render(&self) -> String {
        let mut out = String::from("max reaction latency (ms)\n");
        out += "device      exec    inf     sync    async   speedup\n";
        for r in &self.reaction {
            out += &format!(
                "{:<11} {:<7.1} {:<7.1} {:<7.1} {:<7.1} {:.1}x\n",
                r.device, r.exec_ms, r.inf_ms, r.sync_ms, r.async_ms, r.speedup
            );
        }
        out += "\ntime per chunk (ms)\n";
        out += "exec    inf     K  delay  sync    async\n";
        for r in &self.chunk_time {
            out += &format!(
                "{:<7.1} {:<7.1} {:<2} {:<6} {:<7.1} {:.1}\n",
                r.exec_ms, r.inf_ms, r.k, r.delay, r.sync_ms, r.async_ms
            );
        }
        out
    }
}
