//! Tick-level executor for chunked policies under inference delay.
//!
//! Inference "takes" `Δ` ticks of the logical clock. Four strategies decide
//! what the controller does while a chunk is being computed and how the new
//! chunk is conditioned and entered:
//!
//! - `Sync` holds the robot still for `Δ` ticks, then runs `K` actions.
//! - `NaiveAsync` keeps executing the old chunk and conditions the new one
//!   on the state at inference start.
//! - `RtcStyle` also conditions on that state but freezes the `Δ` actions
//!   still to run as the new chunk's prefix and enters it after them.
//! - `Vlash` conditions on the state rolled forward by the pending actions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{self, EnvState, TaskSpec};
use crate::error::{Error, Result};
use crate::policy::ChunkPolicy;
use crate::types::{l2, Action, ActionChunk, LatencyModel, Observation, RobotState, Tick};

/// Default control period: 30 Hz.
pub const DEFAULT_TICK_MS: f64 = 1000.0 / 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "sync")]
    Sync,
    #[serde(rename = "naive")]
    NaiveAsync,
    #[serde(rename = "rtc")]
    RtcStyle,
    #[serde(rename = "vlash")]
    Vlash,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Sync, Strategy::NaiveAsync, Strategy::RtcStyle, Strategy::Vlash];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Sync => "sync",
            Strategy::NaiveAsync => "naive",
            Strategy::RtcStyle => "rtc",
            Strategy::Vlash => "vlash",
        }
    }

    pub fn is_async(&self) -> bool {
        *self != Strategy::Sync
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sync" => Ok(Strategy::Sync),
            "naive" => Ok(Strategy::NaiveAsync),
            "rtc" => Ok(Strategy::RtcStyle),
            "vlash" => Ok(Strategy::Vlash),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Sums the pending delta actions onto `state`, in order.
pub fn rollforward(state: &RobotState, pending: &[Action]) -> RobotState {
    pending.iter().fold(state.clone(), |s, a| s.advanced(a))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub exec_horizon: usize,
    /// Planned inference delay `Δ` comes from `latency.delta_ticks`.
    pub latency: LatencyModel,
    pub tick_ms: f64,
}

impl RunConfig {
    pub fn new(strategy: Strategy, delta: u64, exec_horizon: usize) -> Self {
        RunConfig { strategy, exec_horizon, latency: LatencyModel::fixed(delta), tick_ms: DEFAULT_TICK_MS }
    }

    pub fn delta(&self) -> u64 {
        self.latency.delta_ticks
    }

    /// Actions executed from each inpainted chunk: `min(K, H − Δ)`.
    pub fn rtc_window(&self, horizon: usize) -> usize {
        self.exec_horizon.min(horizon.saturating_sub(self.delta() as usize))
    }

    pub fn validate(&self, horizon: usize) -> Result<()> {
        let k = self.exec_horizon;
        if k < 1 || k > horizon {
            return Err(Error::InvalidHorizon(format!("execution horizon {k} outside 1..={horizon}")));
        }
        if !(self.tick_ms > 0.0) {
            return Err(Error::Config("tick_ms must be positive".into()));
        }
        let delta = self.delta() as usize;
        if self.strategy.is_async() && delta > k {
            return Err(Error::InfeasibleSchedule { delta, k });
        }
        if self.strategy == Strategy::RtcStyle && delta > 0 && self.rtc_window(horizon) < delta {
            return Err(Error::InfeasibleSchedule { delta, k });
        }
        Ok(())
    }
}

/// One controller tick. Idle ticks (no chunk) hold the robot still.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: Tick,
    pub action: Action,
    pub chunk: Option<usize>,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub launched_at: Tick,
    pub obs_captured_at: Tick,
    /// Tick inference actually finished (never after `planned_handoff`).
    pub ready_at: Tick,
    pub planned_handoff: Tick,
    pub conditioning_state: RobotState,
    /// The chunk after admissibility projection.
    pub actions: Vec<Action>,
    pub first_executed: Option<Tick>,
    /// True robot state when the chunk's first action ran.
    pub state_at_handoff: Option<RobotState>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub ticks: Vec<TickRecord>,
    pub chunks: Vec<ChunkRecord>,
    #[serde(skip)]
    pub states: Vec<EnvState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub seed: u64,
    pub success: bool,
    /// Executed (non-idle) actions up to completion.
    pub steps: u64,
    /// Success tick, or episode length on failure.
    pub completion_tick: Tick,
    pub wall_model_ms: f64,
    pub idle_ticks: u64,
    pub handoffs: u64,
    pub switch_discontinuity: Option<f64>,
    pub reaction_latency_ticks: Option<u64>,
}

/// Mean L2 jump between consecutive executed actions that come from
/// different chunks; idle ticks are skipped.
pub fn switch_discontinuity(log: &EpisodeLog) -> (u64, Option<f64>) {
    let mut prev: Option<&TickRecord> = None;
    let (mut n, mut total) = (0u64, 0.0);
    for r in log.ticks.iter().filter(|r| r.chunk.is_some()) {
        if let Some(p) = prev {
            if p.chunk != r.chunk {
                n += 1;
                total += l2(&p.action.0, &r.action.0);
            }
        }
        prev = Some(r);
    }
    (n, (n > 0).then(|| total / n as f64))
}

/// Ticks from each scheduled event until the first action of a chunk whose
/// observation was captured at or after it; the maximum over events. `None`
/// when some event is never reacted to within the episode.
pub fn measure_reaction(task: &TaskSpec, log: &EpisodeLog) -> Result<Option<u64>> {
    if !task.has_events() {
        return Err(Error::NoEvent);
    }
    let mut executed: Vec<&ChunkRecord> = log.chunks.iter().filter(|c| c.first_executed.is_some()).collect();
    executed.sort_by_key(|c| c.first_executed);
    let mut worst = 0;
    for e in &task.event_schedule {
        let te = task.event_env_tick(e.tick);
        match executed.iter().find(|c| c.obs_captured_at >= te) {
            Some(c) => worst = worst.max(c.first_executed.unwrap() - te),
            None => return Ok(None),
        }
    }
    Ok(Some(worst))
}

struct Executor<'a, P: ChunkPolicy + ?Sized> {
    task: &'a TaskSpec,
    policy: &'a P,
    cfg: &'a RunConfig,
    seed: u64,
    state: EnvState,
    log: EpisodeLog,
    latency_rng: ChaCha8Rng,
}

impl<'a, P: ChunkPolicy + ?Sized> Executor<'a, P> {
    fn done(&self) -> bool {
        self.state.tick >= self.task.episode_len
    }

    /// Every inference draws from its own stream keyed by (seed, index), so
    /// strategies that launch the same inferences sample the same noise.
    fn infer(&mut self, cond: RobotState, frozen: &[Action]) -> Result<(usize, ActionChunk)> {
        let obs: Observation = envs::observe(self.task, &self.state);
        let id = self.log.chunks.len();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id as u64 + 1);
        let raw = if frozen.is_empty() {
            self.policy.sample_chunk(&obs, &cond, &mut rng)?
        } else {
            self.policy.sample_chunk_inpaint(&obs, &cond, frozen, &mut rng)?
        };
        let actions: Vec<Action> = raw.iter().map(|a| self.task.admissible(a)).collect();
        let launched_at = self.state.tick;
        let actual = self.cfg.latency.sample_actual(&mut self.latency_rng);
        self.log.chunks.push(ChunkRecord {
            launched_at,
            obs_captured_at: obs.captured_at,
            ready_at: launched_at + actual,
            planned_handoff: launched_at + self.cfg.delta(),
            conditioning_state: cond,
            actions: actions.clone(),
            first_executed: None,
            state_at_handoff: None,
        });
        Ok((id, ActionChunk::new(actions, launched_at, self.cfg.exec_horizon)?))
    }

    fn apply(&mut self, action: Action, chunk: Option<usize>, index: usize) -> Result<()> {
        if let Some(id) = chunk {
            let rec = &mut self.log.chunks[id];
            if rec.first_executed.is_none() {
                rec.first_executed = Some(self.state.tick);
                rec.state_at_handoff = Some(self.state.robot.clone());
            }
        }
        self.log.ticks.push(TickRecord { tick: self.state.tick, action: action.clone(), chunk, index });
        self.state = envs::step(self.task, &self.state, &action)?;
        self.log.states.push(self.state.clone());
        Ok(())
    }

    fn idle(&mut self, ticks: u64) -> Result<()> {
        for _ in 0..ticks {
            if self.done() {
                break;
            }
            self.apply(Action::zeros(self.task.dims.state), None, 0)?;
        }
        Ok(())
    }

    fn run_sync(&mut self) -> Result<()> {
        while !self.done() {
            let s = self.state.robot.clone();
            let (id, mut chunk) = self.infer(s, &[])?;
            self.idle(self.cfg.delta())?;
            for i in 0..chunk.exec_horizon {
                if self.done() {
                    break;
                }
                let a = chunk.take_next().expect("index below K").clone();
                self.apply(a, Some(id), i)?;
            }
        }
        Ok(())
    }

    fn run_async(&mut self) -> Result<()> {
        let delta = self.cfg.delta() as usize;
        let strategy = self.cfg.strategy;
        let s = self.state.robot.clone();
        let (mut id, mut chunk) = self.infer(s, &[])?;
        self.idle(delta as u64)?;
        let mut window = chunk.exec_horizon;
        loop {
            let start = chunk.cursor;
            let mut next = None;
            for j in 0..=window {
                if window - j == delta && !self.done() {
                    let pending = &chunk.actions[start + j..start + window];
                    let now = self.state.robot.clone();
                    let launched = match strategy {
                        Strategy::Vlash => {
                            let cond = rollforward(&now, pending);
                            self.infer(cond, &[])?
                        }
                        Strategy::RtcStyle => {
                            let frozen = pending.to_vec();
                            self.infer(now, &frozen)?
                        }
                        _ => self.infer(now, &[])?,
                    };
                    next = Some(launched);
                }
                if j == window || self.done() {
                    break;
                }
                let a = chunk.take_next().expect("window within chunk").clone();
                self.apply(a, Some(id), start + j)?;
            }
            match next {
                Some((nid, mut nchunk)) if !self.done() => {
                    if strategy == Strategy::RtcStyle {
                        nchunk.seek(delta);
                        window = self.cfg.rtc_window(nchunk.horizon());
                    } else {
                        window = nchunk.exec_horizon;
                    }
                    id = nid;
                    chunk = nchunk;
                }
                _ => return Ok(()),
            }
        }
    }
}

/// Runs one full episode. The policy's chunks are made admissible on
/// receipt, so the commanded actions are exactly the ones the env applies.
pub fn run_episode_logged<P: ChunkPolicy + ?Sized>(
    task: &TaskSpec,
    policy: &P,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(EpisodeResult, EpisodeLog)> {
    cfg.validate(policy.horizon())?;
    let (state, _, _) = envs::reset(task, seed);
    let mut latency_rng = ChaCha8Rng::seed_from_u64(seed);
    latency_rng.set_stream(0);
    let mut ex = Executor {
        task,
        policy,
        cfg,
        seed,
        log: EpisodeLog { states: vec![state.clone()], ..EpisodeLog::default() },
        state,
        latency_rng,
    };
    match cfg.strategy {
        Strategy::Sync => ex.run_sync()?,
        _ => ex.run_async()?,
    }
    let log = ex.log;
    let success_tick = envs::success_tick(task, &log.states);
    let completion_tick = success_tick.unwrap_or(task.episode_len);
    let steps = log.ticks.iter().filter(|r| r.chunk.is_some() && r.tick < completion_tick).count() as u64;
    let idle_ticks = log.ticks.iter().filter(|r| r.chunk.is_none()).count() as u64;
    let (handoffs, disc) = switch_discontinuity(&log);
    let reaction = if task.has_events() { measure_reaction(task, &log)? } else { None };
    let result = EpisodeResult {
        seed,
        success: success_tick.is_some(),
        steps,
        completion_tick,
        wall_model_ms: completion_tick as f64 * cfg.tick_ms,
        idle_ticks,
        handoffs,
        switch_discontinuity: disc,
        reaction_latency_ticks: reaction,
    };
    Ok((result, log))
}

pub fn run_episode<P: ChunkPolicy + ?Sized>(
    task: &TaskSpec,
    policy: &P,
    cfg: &RunConfig,
    seed: u64,
) -> Result<EpisodeResult> {
    run_episode_logged(task, policy, cfg, seed).map(|(r, _)| r)
}

/// Runs on the task with macro-actions of `q` micro-steps; every controller
/// tick applies one macro-action, so `steps` counts macro-steps.
pub fn run_with_quantization<P: ChunkPolicy + ?Sized>(
    task: &TaskSpec,
    policy: &P,
    cfg: &RunConfig,
    q: u64,
    seed: u64,
) -> Result<EpisodeResult> {
    run_episode(&task.quantized(q)?, policy, cfg, seed)
}

/// Runs episodes for every seed in parallel; results keep seed order.
pub fn evaluate<P: ChunkPolicy + ?Sized>(
    task: &TaskSpec,
    policy: &P,
    cfg: &RunConfig,
    seeds: &[u64],
) -> Result<Vec<EpisodeResult>> {
    cfg.validate(policy.horizon())?;
    seeds.par_iter().map(|&s| run_episode(task, policy, cfg, s)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_steps: f64,
    pub mean_wall_model_ms: f64,
    pub mean_idle_ticks: f64,
    pub mean_discontinuity: Option<f64>,
    pub mean_reaction_ticks: Option<f64>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, sum) = values.fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    (n > 0).then(|| sum / n as f64)
}

pub fn summarize(results: &[EpisodeResult]) -> Summary {
    let mean = |f: &dyn Fn(&EpisodeResult) -> f64| mean_of(results.iter().map(f)).unwrap_or(0.0);
    Summary {
        episodes: results.len(),
        success_rate: mean(&|r| r.success as u8 as f64),
        mean_steps: mean(&|r| r.steps as f64),
        mean_wall_model_ms: mean(&|r| r.wall_model_ms),
        mean_idle_ticks: mean(&|r| r.idle_ticks as f64),
        mean_discontinuity: mean_of(results.iter().filter_map(|r| r.switch_discontinuity)),
        mean_reaction_ticks: mean_of(results.iter().filter_map(|r| r.reaction_latency_ticks.map(|t| t as f64))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimingMode {
    Sync,
    Async,
}

/// Wall time per executed chunk. Async overlaps inference with the last
/// `delay` of the `k` actions.
pub fn time_per_chunk(exec_ms: f64, inf_ms: f64, k: usize, delay: usize, mode: TimingMode) -> f64 {
    match mode {
        TimingMode::Sync => exec_ms + inf_ms,
        TimingMode::Async => exec_ms + (inf_ms - exec_ms / k as f64 * delay as f64).max(0.0),
    }
}

/// Worst-case time from an event to acting on it.
pub fn max_reaction_latency(exec_ms: f64, inf_ms: f64, mode: TimingMode) -> f64 {
    match mode {
        TimingMode::Sync => exec_ms + inf_ms,
        TimingMode::Async => inf_ms,
    }
}

/// A scripted stand-in policy: plans `H` expert actions assuming the target
/// keeps its observed velocity. Inpainting plans the suffix from the state
/// reached after the frozen prefix.
#[derive(Clone, Debug)]
pub struct ExpertPlanner {
    pub task: TaskSpec,
    pub horizon: usize,
}

impl ExpertPlanner {
    pub fn new(task: &TaskSpec, horizon: usize) -> Self {
        ExpertPlanner { task: task.clone(), horizon }
    }

    fn plan(&self, obs: &Observation, state: &RobotState, frozen: &[Action]) -> Result<Vec<Action>> {
        if frozen.len() > self.horizon {
            return Err(Error::PrefixTooLong { prefix: frozen.len(), horizon: self.horizon });
        }
        let d = self.task.dims.state;
        let velocity = if obs.features.len() >= 2 * d { obs.features[d..2 * d].to_vec() } else { vec![0.0; d] };
        let mut sim = EnvState {
            robot: state.clone(),
            target: obs.features[..d].to_vec(),
            velocity,
            tick: 0,
            rng_seed: 0,
        };
        let mut plan = frozen.to_vec();
        let advance = |sim: &mut EnvState, a: &Action| {
            let q = self.task.time_scale as f64;
            sim.robot = sim.robot.advanced(a);
            for (p, v) in sim.target.iter_mut().zip(&sim.velocity) {
                *p += v * q;
            }
        };
        for a in frozen {
            advance(&mut sim, a);
        }
        while plan.len() < self.horizon {
            let a = envs::expert_action(&self.task, &sim);
            advance(&mut sim, &a);
            plan.push(a);
        }
        Ok(plan)
    }
}

impl ChunkPolicy for ExpertPlanner {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn sample_chunk(&self, obs: &Observation, state: &RobotState, _rng: &mut ChaCha8Rng) -> Result<Vec<Action>> {
        self.plan(obs, state, &[])
    }

    fn sample_chunk_inpaint(
        &self,
        obs: &Observation,
        state: &RobotState,
        frozen: &[Action],
        _rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Action>> {
        self.plan(obs, state, frozen)
    }
}
