//! Demonstration trajectories, temporal-offset training samples, action
//! quantization, and the JSON-lines dataset format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{self, TaskName, TaskSpec};
use crate::error::{Error, Result};
use crate::types::{Action, Observation, RobotState};

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub obs: Observation,
    pub state: RobotState,
    pub action: Action,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub task: TaskName,
    pub seed: u64,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Robot state at index `k`, extended past the end by holding the state
    /// reached after the final action.
    pub fn state_at(&self, k: usize) -> RobotState {
        match self.steps.get(k) {
            Some(s) => s.state.clone(),
            None => {
                let last = self.steps.last().expect("non-empty trajectory");
                last.state.advanced(&last.action)
            }
        }
    }

    /// Action at index `k`, or zero past the end.
    pub fn action_at(&self, k: usize) -> Action {
        match self.steps.get(k) {
            Some(s) => s.action.clone(),
            None => Action::zeros(self.steps[0].action.0.len()),
        }
    }

    /// Index of the first step violating `s[t+1] = s[t] + a[t]`.
    pub fn delta_violation(&self) -> Option<usize> {
        self.steps.windows(2).position(|w| w[0].state.advanced(&w[0].action) != w[1].state)
    }
}

/// Records one expert episode; episodes the expert fails are rejected.
pub fn record_trajectory(task: &TaskSpec, seed: u64) -> Result<Trajectory> {
    let states = envs::expert_rollout(task, seed)?;
    if !envs::is_success(task, &states) {
        return Err(Error::DemoRejected(seed));
    }
    let steps = states
        .windows(2)
        .map(|w| Step {
            obs: envs::observe(task, &w[0]),
            state: w[0].robot.clone(),
            action: Action(w[1].robot.0.iter().zip(&w[0].robot.0).map(|(b, a)| b - a).collect()),
        })
        .collect();
    Ok(Trajectory { task: task.name, seed, steps })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationReport {
    pub attempted: usize,
    pub accepted: usize,
}

impl GenerationReport {
    pub fn success_rate(&self) -> f64 {
        self.accepted as f64 / self.attempted.max(1) as f64
    }
}

/// Records `episodes` successful demos from consecutive seeds starting at
/// `seed`, skipping rejected ones.
pub fn generate_dataset(task: &TaskSpec, episodes: usize, seed: u64) -> Result<(Dataset, GenerationReport)> {
    let mut trajectories = Vec::with_capacity(episodes);
    let mut attempted = 0usize;
    let limit = episodes.saturating_mul(10).max(10);
    while trajectories.len() < episodes {
        if attempted >= limit {
            return Err(Error::Config(format!(
                "expert succeeded on only {} of {attempted} episodes",
                trajectories.len()
            )));
        }
        match record_trajectory(task, seed.wrapping_add(attempted as u64)) {
            Ok(t) => trajectories.push(t),
            Err(Error::DemoRejected(_)) => {}
            Err(e) => return Err(e),
        }
        attempted += 1;
    }
    let report = GenerationReport { attempted, accepted: trajectories.len() };
    Ok((Dataset { trajectories }, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OffsetSample {
    pub obs: Observation,
    pub state: RobotState,
    pub target_chunk: Vec<Action>,
    pub delta: usize,
}

/// Pairs the observation at `t` with the state and `h` actions starting at
/// `t + delta`, zero-padding actions past the end.
pub fn make_offset_sample(traj: &Trajectory, t: usize, delta: usize, h: usize) -> Result<OffsetSample> {
    if t >= traj.len() {
        return Err(Error::Index { index: t, len: traj.len() });
    }
    let start = t + delta;
    Ok(OffsetSample {
        obs: traj.steps[t].obs.clone(),
        state: traj.state_at(start),
        target_chunk: (start..start + h).map(|k| traj.action_at(k)).collect(),
        delta,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn num_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// Uniform `(trajectory, t)` over all recorded steps.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(usize, usize)> {
        let total = self.num_steps();
        if total == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut k = rng.random_range(0..total);
        for (i, t) in self.trajectories.iter().enumerate() {
            if k < t.len() {
                return Ok((i, k));
            }
            k -= t.len();
        }
        unreachable!("index within total")
    }
}

/// Draws δ in `0..=delta_max`, uniformly or by the given relative weights.
pub fn sample_delta<R: Rng + ?Sized>(delta_max: usize, weights: Option<&[f64]>, rng: &mut R) -> usize {
    match weights {
        None => rng.random_range(0..=delta_max),
        Some(w) => {
            let total: f64 = w.iter().sum();
            let mut x = rng.random_range(0.0..total);
            for (d, wi) in w.iter().enumerate() {
                if x < *wi {
                    return d;
                }
                x -= wi;
            }
            delta_max
        }
    }
}

pub fn validate_delta_weights(delta_max: usize, weights: &[f64]) -> Result<()> {
    if weights.len() != delta_max + 1 {
        return Err(Error::Config(format!(
            "delta_weights needs {} entries, got {}",
            delta_max + 1,
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config("delta_weights must be non-negative with positive sum".into()));
    }
    Ok(())
}

pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    batch_size: usize,
    delta_max: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<Vec<OffsetSample>> {
    sample_batch_weighted(dataset, batch_size, delta_max, None, horizon, rng)
}

pub fn sample_batch_weighted<R: Rng + ?Sized>(
    dataset: &Dataset,
    batch_size: usize,
    delta_max: usize,
    weights: Option<&[f64]>,
    horizon: usize,
    rng: &mut R,
) -> Result<Vec<OffsetSample>> {
    if let Some(w) = weights {
        validate_delta_weights(delta_max, w)?;
    }
    (0..batch_size)
        .map(|_| {
            let (i, t) = dataset.sample_index(rng)?;
            let delta = sample_delta(delta_max, weights, rng);
            make_offset_sample(&dataset.trajectories[i], t, delta, horizon)
        })
        .collect()
}

/// Merges blocks of `q` steps into macro-steps: actions are block sums,
/// observations and states are taken at block starts. Observation ticks are
/// renumbered to macro ticks.
pub fn quantize_trajectory(traj: &Trajectory, q: usize) -> Result<Trajectory> {
    if q < 1 {
        return Err(Error::InvalidQuantization(q));
    }
    let steps = traj
        .steps
        .chunks_exact(q)
        .enumerate()
        .map(|(i, block)| {
            let mut sum = block[0].action.clone();
            for s in &block[1..] {
                for (acc, v) in sum.0.iter_mut().zip(&s.action.0) {
                    *acc += v;
                }
            }
            let mut obs = block[0].obs.clone();
            obs.captured_at = i as u64;
            Step { obs, state: block[0].state.clone(), action: sum }
        })
        .collect();
    Ok(Trajectory { task: traj.task, seed: traj.seed, steps })
}

pub fn quantize_dataset(dataset: &Dataset, q: usize) -> Result<Dataset> {
    let trajectories = dataset.trajectories.iter().map(|t| quantize_trajectory(t, q)).collect::<Result<_>>()?;
    Ok(Dataset { trajectories })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRecord {
    o: Vec<f64>,
    o_tick: u64,
    s: Vec<f64>,
    a: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryRecord {
    task: TaskName,
    seed: u64,
    steps: Vec<StepRecord>,
}

impl From<&Trajectory> for TrajectoryRecord {
    fn from(t: &Trajectory) -> Self {
        TrajectoryRecord {
            task: t.task,
            seed: t.seed,
            steps: t
                .steps
                .iter()
                .map(|s| StepRecord {
                    o: s.obs.features.clone(),
                    o_tick: s.obs.captured_at,
                    s: s.state.0.clone(),
                    a: s.action.0.clone(),
                })
                .collect(),
        }
    }
}

impl From<TrajectoryRecord> for Trajectory {
    fn from(r: TrajectoryRecord) -> Self {
        Trajectory {
            task: r.task,
            seed: r.seed,
            steps: r
                .steps
                .into_iter()
                .map(|s| Step {
                    obs: Observation { features: s.o, captured_at: s.o_tick },
                    state: RobotState(s.s),
                    action: Action(s.a),
                })
                .collect(),
        }
    }
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in &dataset.trajectories {
        let line = serde_json::to_string(&TrajectoryRecord::from(t)).expect("trajectory serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads a JSON-lines dataset, rejecting malformed lines and trajectories
/// that are not delta-consistent. Blank lines are skipped.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Missing(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let mut trajectories = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { path: path.display().to_string(), line: i + 1, msg };
        let rec: TrajectoryRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let traj = Trajectory::from(rec);
        if traj.is_empty() {
            return Err(parse_err("trajectory has no steps".into()));
        }
        let dim = traj.steps[0].state.dim();
        if traj.steps.iter().any(|s| s.state.dim() != dim || s.action.0.len() != dim) {
            return Err(parse_err("inconsistent state/action dimensions".into()));
        }
        if let Some(step) = traj.delta_violation() {
            return Err(Error::DeltaConsistency { traj: trajectories.len(), step });
        }
        trajectories.push(traj);
    }
    Ok(Dataset { trajectories })
}
