//! One-dimensional point-mass tasks.
//!
//! All tasks share the same dynamics; a task only changes how the reward is
//! computed. Goal-velocity tasks reward tracking a target speed, goal-direction
//! tasks reward moving forward (`+1`) or backward (`-1`).

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskFamily {
    GoalVelocity,
    GoalDirection,
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskFamily::GoalVelocity => "goal_velocity",
            TaskFamily::GoalDirection => "goal_direction",
        })
    }
}

impl FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "goal_velocity" => Ok(TaskFamily::GoalVelocity),
            "goal_direction" => Ok(TaskFamily::GoalDirection),
            other => Err(Error::InvalidTask(format!("unknown task family `{other}`"))),
        }
    }
}

/// One task: a family and its scalar parameter (target velocity or direction).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskSpec {
    family: TaskFamily,
    parameter: f64,
}

impl TaskSpec {
    pub fn new(family: TaskFamily, parameter: f64) -> Result<Self> {
        match family {
            TaskFamily::GoalVelocity if !(parameter.is_finite() && parameter >= 0.0) => Err(
                Error::InvalidTask(format!("goal velocity must be finite and >= 0, got {parameter}")),
            ),
            TaskFamily::GoalDirection if parameter != 1.0 && parameter != -1.0 => Err(
                Error::InvalidTask(format!("goal direction must be -1 or +1, got {parameter}")),
            ),
            _ => Ok(Self { family, parameter }),
        }
    }

    pub fn goal_velocity(v: f64) -> Result<Self> {
        Self::new(TaskFamily::GoalVelocity, v)
    }

    pub fn goal_direction(d: f64) -> Result<Self> {
        Self::new(TaskFamily::GoalDirection, d)
    }

    pub fn family(&self) -> TaskFamily {
        self.family
    }

    pub fn parameter(&self) -> f64 {
        self.parameter
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub dt: f64,
    pub v_max: f64,
    pub c_ctrl: f64,
    pub horizon: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            v_max: 3.0,
            c_ctrl: 0.01,
            horizon: 100,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.dt > 0.0
            && self.dt.is_finite()
            && self.v_max > 0.0
            && self.v_max.is_finite()
            && self.c_ctrl >= 0.0
            && self.c_ctrl.is_finite()
            && self.horizon >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid environment constants {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvState {
    pub position: f64,
    pub velocity: f64,
    pub step_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub next_state: EnvState,
    pub reward: f64,
    pub done: bool,
}

/// Point mass with clipped acceleration and clipped speed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointMass {
    pub config: EnvConfig,
}

impl PointMass {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    /// Observation handed to the policy.
    pub fn observe(&self, state: &EnvState) -> [f64; 1] {
        [state.velocity]
    }

    pub fn reset<R: Rng + ?Sized>(&self, _task: &TaskSpec, rng: &mut R) -> EnvState {
        EnvState {
            position: 0.0,
            velocity: rng.random_range(-0.05..=0.05),
            step_index: 0,
        }
    }

    pub fn step(&self, state: &EnvState, action: f64, task: &TaskSpec) -> Result<StepOutcome> {
        let cfg = &self.config;
        if state.step_index >= cfg.horizon {
            return Err(Error::EpisodeFinished(state.step_index));
        }
        let a = action.clamp(-1.0, 1.0);
        let v = (state.velocity + cfg.dt * a).clamp(-cfg.v_max, cfg.v_max);
        let x = state.position + cfg.dt * v;
        let control = cfg.c_ctrl * a * a;
        let reward = match task.family {
            TaskFamily::GoalVelocity => -(v - task.parameter).abs() - control,
            TaskFamily::GoalDirection => task.parameter * v - control,
        };
        let step_index = state.step_index + 1;
        Ok(StepOutcome {
            next_state: EnvState {
                position: x,
                velocity: v,
                step_index,
            },
            reward,
            done: step_index == cfg.horizon,
        })
    }
}

/// Sampling law over tasks: uniform on `[low, high]` for goal velocity,
/// uniform on `{-1, +1}` for goal direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskDistribution {
    pub family: TaskFamily,
    pub low: f64,
    pub high: f64,
}

impl TaskDistribution {
    pub fn new(family: TaskFamily, low: f64, high: f64) -> Result<Self> {
        let d = Self { family, low, high };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.low.is_finite() && self.high.is_finite() && self.low <= self.high) {
            return Err(Error::InvalidDistribution(format!(
                "need finite low <= high, got [{}, {}]",
                self.low, self.high
            )));
        }
        if self.family == TaskFamily::GoalVelocity && self.low < 0.0 {
            return Err(Error::InvalidDistribution(format!(
                "goal velocities must be >= 0, got low = {}",
                self.low
            )));
        }
        Ok(())
    }

    pub fn sample_tasks<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<TaskSpec>> {
        self.validate()?;
        if n == 0 {
            return Err(Error::InvalidArgument("cannot sample zero tasks".into()));
        }
        (0..n)
            .map(|_| match self.family {
                TaskFamily::GoalVelocity => {
                    let v = if self.low == self.high {
                        self.low
                    } else {
                        rng.random_range(self.low..=self.high)
                    };
                    TaskSpec::goal_velocity(v)
                }
                TaskFamily::GoalDirection => {
                    TaskSpec::goal_direction(if rng.random_bool(0.5) { 1.0 } else { -1.0 })
                }
            })
            .collect()
    }
}

/// Evenly spaced tasks `low, low + step, ...` up to `high` (inclusive within
/// 1e-9). Goal direction always yields the two tasks `-1, +1`.
pub fn task_grid(family: TaskFamily, low: f64, high: f64, step: f64) -> Result<Vec<TaskSpec>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("grid step must be > 0, got {step}")));
    }
    if family == TaskFamily::GoalDirection {
        return Ok(vec![TaskSpec::goal_direction(-1.0)?, TaskSpec::goal_direction(1.0)?]);
    }
    if !(low.is_finite() && high.is_finite() && low <= high) {
        return Err(Error::InvalidArgument(format!("need low <= high, got [{low}, {high}]")));
    }
    let count = ((high - low) / step + 1e-9).floor() as usize + 1;
    (0..count)
        .map(|i| {
            // snap to 1e-9 so that e.g. 0.1 * 3 prints as 0.3
            let p = ((low + i as f64 * step) * 1e9).round() / 1e9;
            TaskSpec::new(family, p.min(high))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::RngStream;

    fn env() -> PointMass {
        PointMass::default()
    }

    #[test]
    fn reset_examples() {
        let task = TaskSpec::goal_velocity(1.0).unwrap();
        for seed in 0..50 {
            let s = env().reset(&task, &mut RngStream::new(seed).rng());
            assert!(s.velocity.abs() <= 0.05);
            assert_eq!(s.position, 0.0);
            assert_eq!(s.step_index, 0);
            let again = env().reset(&task, &mut RngStream::new(seed).rng());
            assert_eq!(s, again);
        }
    }

    fn at_rest(v: f64) -> EnvState {
        EnvState {
            position: 0.0,
            velocity: v,
            step_index: 0,
        }
    }

    #[test]
    fn step_examples() {
        let vel1 = TaskSpec::goal_velocity(1.0).unwrap();
        let out = env().step(&at_rest(0.0), 0.0, &vel1).unwrap();
        assert_eq!(out.next_state.velocity, 0.0);
        assert_eq!(out.reward, -1.0);

        let fwd = TaskSpec::goal_direction(1.0).unwrap();
        let out = env().step(&at_rest(0.5), 0.0, &fwd).unwrap();
        assert_eq!(out.next_state.velocity, 0.5);
        assert_eq!(out.reward, 0.5);

        let vel0 = TaskSpec::goal_velocity(0.0).unwrap();
        let out = env().step(&at_rest(0.0), 2.0, &vel0).unwrap();
        assert!((out.next_state.velocity - 0.1).abs() < 1e-15);
        assert!((out.reward - -0.11).abs() < 1e-15);
    }

    #[test]
    fn stepping_past_horizon_fails() {
        let task = TaskSpec::goal_velocity(1.0).unwrap();
        let mut s = at_rest(0.0);
        for t in 0..100 {
            let out = env().step(&s, 0.3, &task).unwrap();
            assert_eq!(out.done, t == 99);
            s = out.next_state;
        }
        assert!(matches!(env().step(&s, 0.0, &task), Err(Error::EpisodeFinished(100))));
    }

    #[test]
    fn task_invariants() {
        assert!(TaskSpec::goal_direction(0.5).is_err());
        assert!(TaskSpec::goal_velocity(-0.1).is_err());
        assert!(TaskSpec::goal_velocity(f64::NAN).is_err());
        assert!(TaskSpec::goal_direction(-1.0).is_ok());
    }

    #[test]
    fn sampling_examples() {
        let mut rng = RngStream::new(1).rng();
        let d = TaskDistribution::new(TaskFamily::GoalVelocity, 0.0, 2.0).unwrap();
        let tasks = d.sample_tasks(100, &mut rng).unwrap();
        assert_eq!(tasks.len(), 100);
        assert!(tasks.iter().all(|t| (0.0..=2.0).contains(&t.parameter())));

        let d = TaskDistribution::new(TaskFamily::GoalDirection, -1.0, 1.0).unwrap();
        let tasks = d.sample_tasks(100, &mut rng).unwrap();
        assert!(tasks.iter().all(|t| t.parameter() == 1.0 || t.parameter() == -1.0));
        assert!(tasks.iter().any(|t| t.parameter() == 1.0));
        assert!(tasks.iter().any(|t| t.parameter() == -1.0));

        assert!(d.sample_tasks(0, &mut rng).is_err());
        assert!(TaskDistribution::new(TaskFamily::GoalVelocity, 2.0, 1.0).is_err());
    }

    #[test]
    fn grid_examples() {
        assert_eq!(task_grid(TaskFamily::GoalVelocity, 0.0, 3.0, 0.1).unwrap().len(), 31);
        let g = task_grid(TaskFamily::GoalVelocity, 0.6, 1.1, 0.1).unwrap();
        let p: Vec<f64> = g.iter().map(|t| t.parameter()).collect();
        assert_eq!(p, vec![0.6, 0.7, 0.8, 0.9, 1.0, 1.1]);
        let g = task_grid(TaskFamily::GoalDirection, 0.0, 3.0, 0.01).unwrap();
        let p: Vec<f64> = g.iter().map(|t| t.parameter()).collect();
        assert_eq!(p, vec![-1.0, 1.0]);
        assert!(task_grid(TaskFamily::GoalVelocity, 0.0, 1.0, 0.0).is_err());
        assert!(task_grid(TaskFamily::GoalVelocity, 0.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn dynamics_do_not_depend_on_family() {
        let vel = TaskSpec::goal_velocity(0.7).unwrap();
        let dir = TaskSpec::goal_direction(-1.0).unwrap();
        let mut rng = RngStream::new(9).rng();
        for _ in 0..200 {
            let s = EnvState {
                position: rng.random_range(-5.0..5.0),
                velocity: rng.random_range(-3.0..3.0),
                step_index: rng.random_range(0..100),
            };
            let a = rng.random_range(-3.0..3.0);
            let x = env().step(&s, a, &vel).unwrap();
            let y = env().step(&s, a, &dir).unwrap();
            assert_eq!(x.next_state, y.next_state);
            assert_eq!(x.done, y.done);
            assert!(x.reward <= 0.0);
            assert!(y.reward <= env().config.v_max);
        }
    }

    #[test]
    fn bang_bang_controller_tracks_goal() {
        let e = env();
        for v_goal in [0.0, 0.35, 1.0, 1.75, 2.5] {
            let task = TaskSpec::goal_velocity(v_goal).unwrap();
            let mut s = e.reset(&task, &mut RngStream::new(3).rng());
            let burn_in = (v_goal / e.config.dt).ceil() as usize;
            for t in 0..e.horizon() {
                let gap = v_goal - s.velocity;
                let a = (gap / e.config.dt).clamp(-1.0, 1.0);
                let out = e.step(&s, a, &task).unwrap();
                if t > burn_in {
                    assert!((out.next_state.velocity - v_goal).abs() < e.config.dt);
                }
                s = out.next_state;
            }
        }
    }
}
