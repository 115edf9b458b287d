//! Trajectory collection and discounted returns.

use std::fmt::Write as _;

use metaadapt_autodiff::Array;

use crate::env::{PointMass, TaskSpec};
use crate::policy::{GaussianMlp, PolicyParams};
use crate::{Error, Result, RngStream};

/// One episode. `rewards[t]` is the reward received after `actions[t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub obs_dim: usize,
    pub action_dim: usize,
    /// Row-major `[len, obs_dim]`.
    pub observations: Vec<f64>,
    /// Row-major `[len, action_dim]`, as sampled (before any clipping).
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Discounted return from the first step.
    pub fn return_from_start(&self, gamma: f64) -> Result<f64> {
        Ok(discounted_return_series(self, gamma)?.values[0])
    }
}

/// `values[t] = rewards[t] + gamma * values[t + 1]`, truncated at the episode end.
#[derive(Clone, Debug, PartialEq)]
pub struct ReturnSeries {
    pub values: Vec<f64>,
}

pub fn discounted_return_series(traj: &Trajectory, gamma: f64) -> Result<ReturnSeries> {
    if traj.rewards.is_empty() {
        return Err(Error::Empty("trajectory has no rewards"));
    }
    let mut values = vec![0.0; traj.rewards.len()];
    let mut acc = 0.0;
    for (v, r) in values.iter_mut().zip(&traj.rewards).rev() {
        acc = r + gamma * acc;
        *v = acc;
    }
    Ok(ReturnSeries { values })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutConfig {
    pub num_trajectories: usize,
    pub gamma: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            num_trajectories: 20,
            gamma: 0.95,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_trajectories == 0 {
            return Err(Error::InvalidArgument("num_trajectories must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!("gamma must be in [0, 1], got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Trajectories gathered on one task with one parameter snapshot.
///
/// Trajectories are weighted `1/N` unless explicit weights are attached
/// (exact enumeration uses outcome probabilities).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: Option<TaskSpec>,
    pub trajectories: Vec<Trajectory>,
    pub behavior_params_digest: String,
    weights: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(task: Option<TaskSpec>, trajectories: Vec<Trajectory>, behavior_params_digest: String) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::Empty("dataset has no trajectories"));
        }
        let (o, a) = (trajectories[0].obs_dim, trajectories[0].action_dim);
        for t in &trajectories {
            if t.obs_dim != o
                || t.action_dim != a
                || t.observations.len() != t.len() * o
                || t.actions.len() != t.len() * a
                || t.is_empty()
            {
                return Err(Error::Shape("inconsistent trajectory layout".into()));
            }
        }
        Ok(Self {
            task,
            trajectories,
            behavior_params_digest,
            weights: None,
        })
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.trajectories.len() || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument("one finite non-negative weight per trajectory".into()));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        match &self.weights {
            Some(w) => w.clone(),
            None => vec![1.0 / self.trajectories.len() as f64; self.trajectories.len()],
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.trajectories[0].obs_dim
    }

    pub fn action_dim(&self) -> usize {
        self.trajectories[0].action_dim
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// Per-trajectory returns from the first step.
    pub fn returns(&self, gamma: f64) -> Result<Vec<f64>> {
        self.trajectories.iter().map(|t| t.return_from_start(gamma)).collect()
    }

    /// Weighted mean of [`Dataset::returns`].
    pub fn mean_return(&self, gamma: f64) -> Result<f64> {
        Ok(self.returns(gamma)?.iter().zip(self.weights()).map(|(g, w)| g * w).sum())
    }

    /// All observation rows stacked, `[total_steps, obs_dim]`.
    pub fn observation_matrix(&self) -> Array {
        let data = self.trajectories.iter().flat_map(|t| t.observations.iter().copied()).collect();
        Array::matrix(self.total_steps(), self.obs_dim(), data).expect("validated layout")
    }

    /// All action rows stacked, `[total_steps, action_dim]`.
    pub fn action_matrix(&self) -> Array {
        let data = self.trajectories.iter().flat_map(|t| t.actions.iter().copied()).collect();
        Array::matrix(self.total_steps(), self.action_dim(), data).expect("validated layout")
    }

    /// One row per step: `traj_id,t,obs_0..,action_0..,reward`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("traj_id,t");
        for j in 0..self.obs_dim() {
            write!(out, ",obs_{j}").unwrap();
        }
        for j in 0..self.action_dim() {
            write!(out, ",action_{j}").unwrap();
        }
        out.push_str(",reward\n");
        for (i, traj) in self.trajectories.iter().enumerate() {
            for t in 0..traj.len() {
                write!(out, "{i},{t}").unwrap();
                for v in &traj.observations[t * traj.obs_dim..(t + 1) * traj.obs_dim] {
                    write!(out, ",{v:?}").unwrap();
                }
                for v in &traj.actions[t * traj.action_dim..(t + 1) * traj.action_dim] {
                    write!(out, ",{v:?}").unwrap();
                }
                writeln!(out, ",{:?}", traj.rewards[t]).unwrap();
            }
        }
        out
    }
}

/// A single episode; `stream` drives both the initial state and the action noise.
pub fn rollout_episode(
    env: &PointMass,
    task: &TaskSpec,
    policy: &GaussianMlp,
    params: &PolicyParams,
    stream: &RngStream,
) -> Result<Trajectory> {
    let mut rng = stream.rng();
    let horizon = env.horizon();
    let mut traj = Trajectory {
        obs_dim: policy.obs_dim,
        action_dim: policy.action_dim,
        observations: Vec::with_capacity(horizon * policy.obs_dim),
        actions: Vec::with_capacity(horizon * policy.action_dim),
        rewards: Vec::with_capacity(horizon),
    };
    let mut state = env.reset(task, &mut rng);
    loop {
        let obs = env.observe(&state);
        let dist = policy.action_distribution(params, &obs)?;
        let action = dist.sample(&mut rng);
        let out = env.step(&state, action[0], task)?;
        traj.observations.extend_from_slice(&obs);
        traj.actions.extend_from_slice(&action);
        traj.rewards.push(out.reward);
        state = out.next_state;
        if out.done {
            return Ok(traj);
        }
    }
}

/// `num_trajectories` episodes; trajectory `i` uses `stream.child(i)`.
pub fn collect_dataset(
    env: &PointMass,
    task: &TaskSpec,
    policy: &GaussianMlp,
    params: &PolicyParams,
    cfg: &RolloutConfig,
    stream: &RngStream,
) -> Result<Dataset> {
    cfg.validate()?;
    if policy.obs_dim != 1 || policy.action_dim != 1 {
        return Err(Error::Shape("point-mass policies map 1 observation to 1 action".into()));
    }
    let trajectories = (0..cfg.num_trajectories)
        .map(|i| rollout_episode(env, task, policy, params, &stream.child(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(Some(*task), trajectories, params.digest())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj(rewards: Vec<f64>) -> Trajectory {
        Trajectory {
            obs_dim: 1,
            action_dim: 1,
            observations: vec![0.0; rewards.len()],
            actions: vec![0.0; rewards.len()],
            rewards,
        }
    }

    #[test]
    fn return_examples() {
        let r = discounted_return_series(&traj(vec![1.0, 1.0, 1.0]), 0.9).unwrap();
        let want = [2.71, 1.9, 1.0];
        for (a, b) in r.values.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let rewards = vec![0.3, -2.0, 5.0];
        assert_eq!(discounted_return_series(&traj(rewards.clone()), 0.0).unwrap().values, rewards);

        let r = discounted_return_series(&traj(vec![1.0; 100]), 0.95).unwrap();
        let closed = (1.0 - 0.95f64.powi(100)) / 0.05;
        assert!((r.values[0] - closed).abs() < 1e-10);
        assert!((r.values[0] - 19.8815).abs() < 1e-4);

        assert!(discounted_return_series(&traj(vec![]), 0.9).is_err());
    }

    fn zero_policy() -> (GaussianMlp, PolicyParams) {
        let m = GaussianMlp::new(1, 1, vec![4]).unwrap();
        let mut v = vec![0.0; crate::PolicyModel::manifest(&m).total_len()];
        *v.last_mut().unwrap() = -20.0;
        let p = PolicyParams::unflatten(crate::PolicyModel::manifest(&m), v).unwrap();
        (m, p)
    }

    #[test]
    fn dataset_collection() {
        let env = PointMass::default();
        let task = TaskSpec::goal_velocity(1.0).unwrap();
        let (m, p) = zero_policy();
        let cfg = RolloutConfig::default();
        let d = collect_dataset(&env, &task, &m, &p, &cfg, &RngStream::new(3)).unwrap();
        assert_eq!(d.len(), 20);
        for t in &d.trajectories {
            assert_eq!(t.len(), 100);
            // velocity never moves from its initial draw, so reward = -|v0 - 1|
            for r in &t.rewards {
                assert!((r + 1.0).abs() <= 0.05 + 1e-6, "{r}");
            }
        }
        let again = collect_dataset(&env, &task, &m, &p, &cfg, &RngStream::new(3)).unwrap();
        assert_eq!(d, again);
        assert_eq!(d.behavior_params_digest, p.digest());
    }

    #[test]
    fn csv_export_has_one_row_per_step() {
        let d = Dataset::new(None, vec![traj(vec![1.0, 2.0]), traj(vec![3.0, 4.0])], String::new()).unwrap();
        let csv = d.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "traj_id,t,obs_0,action_0,reward");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[4], "1,1,0.0,0.0,4.0");
    }

    proptest! {
        #[test]
        fn recursion_identity_and_direct_sum(
            rewards in proptest::collection::vec(-10.0f64..10.0, 1..60),
            gamma in 0.0f64..=1.0,
            c in 0.01f64..5.0,
        ) {
            let r = discounted_return_series(&traj(rewards.clone()), gamma).unwrap();
            let h = rewards.len();
            prop_assert_eq!(r.values[h - 1], rewards[h - 1]);
            for (t, w) in r.values.windows(2).enumerate() {
                prop_assert!((w[0] - (rewards[t] + gamma * w[1])).abs() < 1e-12);
            }
            let direct: f64 = rewards.iter().enumerate().map(|(k, x)| gamma.powi(k as i32) * x).sum();
            prop_assert!((r.values[0] - direct).abs() < 1e-10);
            let scaled: Vec<f64> = rewards.iter().map(|x| x * c).collect();
            let rs = discounted_return_series(&traj(scaled), gamma).unwrap();
            for (a, b) in rs.values.iter().zip(&r.values) {
                prop_assert!((a - c * b).abs() <= 1e-9 * (1.0 + (c * b).abs()));
            }
        }
    }
}
