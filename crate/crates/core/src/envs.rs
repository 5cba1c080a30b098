//! Deterministic point-mass tasks with delta-action kinematics.
//!
//! All positions and admissible actions live on a dyadic grid of
//! [`GRID_RESOLUTION`], so sums of states and actions are exact in `f64`. The
//! robot pose is never part of the observation: observations carry only the
//! target (and its velocity for moving targets).

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Action, Observation, RobotState, Tick};

/// Spacing of the position/action lattice (2^-20).
pub const GRID_RESOLUTION: f64 = 1.0 / 1_048_576.0;

pub fn snap(x: f64) -> f64 {
    (x / GRID_RESOLUTION).round() * GRID_RESOLUTION
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskName {
    Reach,
    Chase,
    Catch,
}

impl TaskName {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskName::Reach => "reach",
            TaskName::Chase => "chase",
            TaskName::Catch => "catch",
        }
    }
}

impl std::str::FromStr for TaskName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reach" => Ok(TaskName::Reach),
            "chase" => Ok(TaskName::Chase),
            "catch" => Ok(TaskName::Catch),
            other => Err(Error::InvalidTask(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub state: usize,
    pub obs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    /// Per-coordinate limit on one tick's delta action.
    pub action: f64,
    /// Half-width of the box the robot starts in, centred on the origin.
    pub start: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetMotion {
    /// Initial target distance from the robot, sampled uniformly.
    pub distance: [f64; 2],
    /// Target speed per tick, sampled uniformly; `[0, 0]` for a static target.
    pub speed: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertSpec {
    pub gain: f64,
    /// Ticks of target extrapolation the expert aims ahead.
    pub lead: u64,
}

/// Overrides applied to the target at `tick`; absent fields are unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetEvent {
    pub tick: Tick,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: TaskName,
    pub dims: Dims,
    pub bounds: Bounds,
    pub episode_len: u64,
    pub success_radius: f64,
    /// Consecutive in-radius ticks required for reach/chase success.
    pub hold_ticks: u64,
    pub target: TargetMotion,
    pub expert: ExpertSpec,
    #[serde(default)]
    pub event_schedule: Vec<TargetEvent>,
    /// Micro-ticks advanced per env tick; 1 unless running quantized.
    #[serde(default = "one")]
    pub time_scale: u64,
}

fn one() -> u64 {
    1
}

impl TaskSpec {
    pub fn reach() -> Self {
        TaskSpec {
            name: TaskName::Reach,
            dims: Dims { state: 2, obs: 2 },
            bounds: Bounds { action: 0.25, start: 1.0 },
            episode_len: 60,
            success_radius: 0.3,
            hold_ticks: 10,
            target: TargetMotion { distance: [3.0, 6.0], speed: [0.0, 0.0] },
            expert: ExpertSpec { gain: 1.0, lead: 0 },
            event_schedule: Vec::new(),
            time_scale: 1,
        }
    }

    pub fn chase() -> Self {
        TaskSpec {
            name: TaskName::Chase,
            dims: Dims { state: 2, obs: 4 },
            bounds: Bounds { action: 0.5, start: 1.0 },
            episode_len: 60,
            success_radius: 0.3,
            hold_ticks: 10,
            target: TargetMotion { distance: [3.0, 5.0], speed: [0.02, 0.05] },
            expert: ExpertSpec { gain: 1.0, lead: 1 },
            event_schedule: Vec::new(),
            time_scale: 1,
        }
    }

    /// Fast target that changes course mid-episode; success is judged only
    /// at the final tick.
    pub fn catch() -> Self {
        TaskSpec {
            name: TaskName::Catch,
            dims: Dims { state: 2, obs: 4 },
            bounds: Bounds { action: 0.5, start: 1.0 },
            episode_len: 40,
            success_radius: 0.5,
            hold_ticks: 1,
            target: TargetMotion { distance: [3.0, 5.0], speed: [0.05, 0.08] },
            expert: ExpertSpec { gain: 1.0, lead: 1 },
            event_schedule: vec![TargetEvent { tick: 20, position: None, velocity: Some(vec![-0.0625, 0.0625]) }],
            time_scale: 1,
        }
    }

    pub fn preset(name: TaskName) -> Self {
        match name {
            TaskName::Reach => Self::reach(),
            TaskName::Chase => Self::chase(),
            TaskName::Catch => Self::catch(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTask(m));
        if self.dims.state == 0 {
            return bad("state dimension must be positive".into());
        }
        let want_obs = match self.name {
            TaskName::Reach => self.dims.state,
            TaskName::Chase | TaskName::Catch => 2 * self.dims.state,
        };
        if self.dims.obs != want_obs {
            return bad(format!("{} needs obs dim {want_obs}, got {}", self.name.as_str(), self.dims.obs));
        }
        if !(self.bounds.action > 0.0) {
            return bad("action bound must be positive".into());
        }
        if !(self.success_radius > 0.0) {
            return bad("success radius must be positive".into());
        }
        if self.episode_len == 0 || self.time_scale == 0 {
            return bad("episode_len and time_scale must be positive".into());
        }
        let [dlo, dhi] = self.target.distance;
        let [slo, shi] = self.target.speed;
        if !(0.0 <= dlo && dlo <= dhi && 0.0 <= slo && slo <= shi) {
            return bad("target ranges must be ordered and non-negative".into());
        }
        for e in &self.event_schedule {
            if e.tick >= self.episode_len * self.time_scale {
                return bad(format!("event tick {} not before episode end", e.tick));
            }
            for v in e.position.iter().chain(&e.velocity) {
                if v.len() != self.dims.state {
                    return bad("event vector has wrong dimension".into());
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: TaskSpec = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("task spec serializes")
    }

    /// The same task run with macro-actions of `q` micro-steps: the action
    /// bound scales by `q`, time-based lengths shrink by `q`.
    pub fn quantized(&self, q: u64) -> Result<TaskSpec> {
        if q == 0 {
            return Err(Error::InvalidQuantization(0));
        }
        let mut t = self.clone();
        t.time_scale = self.time_scale * q;
        t.bounds.action = self.bounds.action * q as f64;
        t.episode_len = self.episode_len / q;
        t.hold_ticks = self.hold_ticks.div_ceil(q).max(1);
        t.validate()?;
        Ok(t)
    }

    /// Clamps to the action bound and snaps to the grid; idempotent.
    pub fn admissible(&self, a: &Action) -> Action {
        let b = snap(self.bounds.action);
        Action(a.0.iter().map(|v| snap(*v).clamp(-b, b)).collect())
    }

    pub fn has_events(&self) -> bool {
        !self.event_schedule.is_empty()
    }

    /// Env tick at which an event scheduled at micro tick `t` becomes visible.
    pub fn event_env_tick(&self, t: Tick) -> Tick {
        t.div_ceil(self.time_scale)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub robot: RobotState,
    pub target: Vec<f64>,
    pub velocity: Vec<f64>,
    pub tick: Tick,
    pub rng_seed: u64,
}

fn random_unit<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn uniform<R: Rng>(lo: f64, hi: f64, rng: &mut R) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

pub fn reset(task: &TaskSpec, seed: u64) -> (EnvState, Observation, RobotState) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = task.dims.state;
    let start: Vec<f64> =
        (0..d).map(|_| snap(uniform(-task.bounds.start, task.bounds.start, &mut rng))).collect();
    let dir = random_unit(d, &mut rng);
    let dist = uniform(task.target.distance[0], task.target.distance[1], &mut rng);
    let target: Vec<f64> = start.iter().zip(&dir).map(|(s, u)| snap(s + dist * u)).collect();
    let vdir = random_unit(d, &mut rng);
    let speed = uniform(task.target.speed[0], task.target.speed[1], &mut rng);
    let velocity: Vec<f64> = vdir.iter().map(|u| snap(speed * u)).collect();
    let mut state = EnvState { robot: RobotState(start), target, velocity, tick: 0, rng_seed: seed };
    apply_events(task, &mut state);
    let obs = observe(task, &state);
    let robot = state.robot.clone();
    (state, obs, robot)
}

fn apply_events(task: &TaskSpec, state: &mut EnvState) {
    for e in &task.event_schedule {
        if task.event_env_tick(e.tick) == state.tick {
            if let Some(p) = &e.position {
                state.target = p.iter().map(|v| snap(*v)).collect();
            }
            if let Some(v) = &e.velocity {
                state.velocity = v.iter().map(|x| snap(*x)).collect();
            }
        }
    }
}

/// Advances one tick: clipped delta action on the robot, target along its
/// path, then any event scheduled for the new tick.
pub fn step(task: &TaskSpec, state: &EnvState, a: &Action) -> Result<EnvState> {
    if state.tick >= task.episode_len {
        return Err(Error::EpisodeOver(state.tick));
    }
    let a = task.admissible(a);
    let q = task.time_scale as f64;
    let mut next = EnvState {
        robot: state.robot.advanced(&a),
        target: state.target.iter().zip(&state.velocity).map(|(p, v)| p + v * q).collect(),
        velocity: state.velocity.clone(),
        tick: state.tick + 1,
        rng_seed: state.rng_seed,
    };
    apply_events(task, &mut next);
    Ok(next)
}

pub fn observe(task: &TaskSpec, state: &EnvState) -> Observation {
    let mut features = state.target.clone();
    if task.name != TaskName::Reach {
        features.extend_from_slice(&state.velocity);
    }
    Observation { features, captured_at: state.tick }
}

/// Proportional controller toward the target extrapolated `lead` micro-ticks
/// ahead, scaled into the action bound.
pub fn expert_action(task: &TaskSpec, state: &EnvState) -> Action {
    let lead = (task.expert.lead * task.time_scale) as f64;
    let mut delta: Vec<f64> = state
        .target
        .iter()
        .zip(&state.velocity)
        .zip(&state.robot.0)
        .map(|((p, v), r)| task.expert.gain * (p + v * lead - r))
        .collect();
    let peak = delta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let bound = task.bounds.action;
    if peak > bound {
        for v in &mut delta {
            *v *= bound / peak;
        }
    }
    task.admissible(&Action(delta))
}

/// First env tick at which the success condition is met, if any.
///
/// Reach/chase: the tick completing a run of `hold_ticks` consecutive
/// in-radius states. Catch: the final tick, if in radius there.
pub fn success_tick(task: &TaskSpec, states: &[EnvState]) -> Option<Tick> {
    let inside = |s: &EnvState| s.robot.distance(&s.target) <= task.success_radius;
    match task.name {
        TaskName::Catch => {
            let last = states.last()?;
            (last.tick == task.episode_len && inside(last)).then_some(last.tick)
        }
        TaskName::Reach | TaskName::Chase => {
            let mut run = 0;
            for s in states {
                run = if inside(s) { run + 1 } else { 0 };
                if run >= task.hold_ticks {
                    return Some(s.tick);
                }
            }
            None
        }
    }
}

pub fn is_success(task: &TaskSpec, states: &[EnvState]) -> bool {
    success_tick(task, states).is_some()
}

/// Runs the expert for a whole episode, returning every visited state.
pub fn expert_rollout(task: &TaskSpec, seed: u64) -> Result<Vec<EnvState>> {
    let (mut s, _, _) = reset(task, seed);
    let mut states = vec![s.clone()];
    while s.tick < task.episode_len {
        let a = expert_action(task, &s);
        s = step(task, &s, &a)?;
        states.push(s.clone());
    }
    Ok(states)
}
