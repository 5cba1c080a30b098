//! Shared domain types: the logical control clock, the three signal channels
//! (state, observation, action), action chunks, and their timing intervals.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One controller period. Wall time is `value / control_rate_hz`.
pub type Tick = u64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RobotState(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Action(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub features: Vec<f64>,
    pub captured_at: Tick,
}

impl RobotState {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Applies a delta action.
    pub fn advanced(&self, a: &Action) -> RobotState {
        RobotState(self.0.iter().zip(&a.0).map(|(s, d)| s + d).collect())
    }

    pub fn distance(&self, other: &[f64]) -> f64 {
        l2(&self.0, other)
    }
}

impl Action {
    pub fn zeros(dim: usize) -> Self {
        Action(vec![0.0; dim])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Half-open tick window `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub start: Tick,
    pub end: Tick,
}

impl Interval {
    pub fn width(&self) -> u64 {
        self.end - self.start
    }

    pub fn contains(&self, t: Tick) -> bool {
        self.start <= t && t < self.end
    }

    pub fn shifted(&self, by: u64) -> Interval {
        Interval { start: self.start + by, end: self.end + by }
    }
}

/// Window in which a chunk issued at `t` is planned to run.
pub fn prediction_interval(t: Tick, k: i64) -> Result<Interval> {
    if k < 1 {
        return Err(Error::InvalidHorizon(format!("execution horizon {k} < 1")));
    }
    Ok(Interval { start: t, end: t + k as u64 })
}

/// Window in which a chunk issued at `t` actually runs after `delta` ticks of
/// inference.
pub fn execution_interval(t: Tick, k: i64, delta: i64) -> Result<Interval> {
    if delta < 0 {
        return Err(Error::InvalidDelay(format!("delay {delta} < 0")));
    }
    Ok(prediction_interval(t, k)?.shifted(delta as u64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    pub actions: Vec<Action>,
    pub issued_at: Tick,
    pub exec_horizon: usize,
    pub cursor: usize,
}

impl ActionChunk {
    pub fn new(actions: Vec<Action>, issued_at: Tick, exec_horizon: usize) -> Result<Self> {
        if actions.is_empty() {
            return Err(Error::InvalidHorizon("empty chunk".into()));
        }
        if exec_horizon < 1 || exec_horizon > actions.len() {
            return Err(Error::InvalidHorizon(format!(
                "execution horizon {exec_horizon} outside 1..={}",
                actions.len()
            )));
        }
        Ok(Self { actions, issued_at, exec_horizon, cursor: 0 })
    }

    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    /// Unexecuted suffix `[cursor, H)`.
    pub fn remaining(&self) -> &[Action] {
        &self.actions[self.cursor..]
    }

    /// Moves the cursor, saturating at `H`.
    pub fn seek(&mut self, index: usize) {
        self.cursor = index.min(self.actions.len());
    }

    /// Returns the action under the cursor and advances it.
    pub fn take_next(&mut self) -> Option<&Action> {
        let a = self.actions.get(self.cursor)?;
        self.cursor += 1;
        Some(a)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatencyMode {
    Fixed,
    Jitter,
}

/// Inference delay in ticks. In jitter mode the actual delay varies in
/// `[delta_ticks - jitter_max, delta_ticks]` while the handoff is always
/// planned at `delta_ticks`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub mode: LatencyMode,
    pub delta_ticks: u64,
    pub jitter_max: u64,
}

impl LatencyModel {
    pub fn fixed(delta_ticks: u64) -> Self {
        Self { mode: LatencyMode::Fixed, delta_ticks, jitter_max: 0 }
    }

    pub fn jitter(delta_ticks: u64, jitter_max: u64) -> Self {
        Self { mode: LatencyMode::Jitter, delta_ticks, jitter_max }
    }

    pub fn planned_handoff(&self) -> u64 {
        self.delta_ticks
    }

    pub fn sample_actual<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match self.mode {
            LatencyMode::Fixed => self.delta_ticks,
            LatencyMode::Jitter => {
                let low = self.delta_ticks.saturating_sub(self.jitter_max);
                rng.random_range(low..=self.delta_ticks)
            }
        }
    }
}
