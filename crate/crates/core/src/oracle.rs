//! Exact enumeration on tiny tabular MDPs with a softmax policy.
//!
//! Every trajectory and its probability is listed, so expectations that the
//! sampled estimators approximate can be computed exactly. Expected losses
//! weight trajectories by their probabilities under the policy that would have
//! sampled them; like the sampled estimator, those weights are constants in
//! the graph. [`exact_expected_return`] is the exception: its probabilities are
//! differentiable, so its gradient is the true policy gradient.

use metaadapt_autodiff::{Array, Bindings, Graph, NodeId};

use crate::maml::{reinforce_loss, Baseline, MetaProblem};
use crate::policy::{Manifest, PolicyModel, PolicyParams};
use crate::rollout::{Dataset, Trajectory};
use crate::{Error, Result, RngStream};

pub const MAX_OUTCOMES: u128 = 1_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct EnumerableMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    /// `[s][a][s']`, row-major.
    pub transitions: Vec<f64>,
    /// `[s][a]`, row-major.
    pub rewards: Vec<f64>,
    pub initial: Vec<f64>,
    pub gamma: f64,
}

impl EnumerableMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        horizon: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        initial: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        let mdp = Self {
            n_states,
            n_actions,
            horizon,
            transitions,
            rewards,
            initial,
            gamma,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        let (s, a) = (self.n_states, self.n_actions);
        if !(1..=4).contains(&s) || !(1..=3).contains(&a) || !(1..=4).contains(&self.horizon) {
            return Err(Error::InvalidArgument(format!(
                "enumerable MDPs need 1-4 states, 1-3 actions and horizon 1-4, got {s}, {a}, {}",
                self.horizon
            )));
        }
        if self.transitions.len() != s * a * s || self.rewards.len() != s * a || self.initial.len() != s {
            return Err(Error::Shape("MDP tables do not match the state/action counts".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        let row_ok = |row: &[f64]| row.iter().all(|p| *p >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() <= 1e-12;
        if !row_ok(&self.initial) || !self.transitions.chunks(s).all(row_ok) {
            return Err(Error::InvalidDistribution("probability rows must be non-negative and sum to 1".into()));
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidArgument("rewards must be finite".into()));
        }
        Ok(())
    }

    /// One state, two arms paying 1 and 0, horizon 1.
    pub fn bandit() -> Self {
        Self::new(1, 2, 1, vec![1.0, 1.0], vec![1.0, 0.0], vec![1.0], 0.9).expect("valid bandit")
    }

    /// Two states; action 0 stays, action 1 switches. State 1 pays for staying.
    pub fn two_state_chain() -> Self {
        Self::new(
            2,
            2,
            3,
            vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0],
            vec![0.0, 0.1, 1.0, -0.2],
            vec![1.0, 0.0],
            0.9,
        )
        .expect("valid chain")
    }

    /// Two states with noisy transitions and a random start.
    pub fn stochastic_two_state() -> Self {
        Self::new(
            2,
            2,
            3,
            vec![0.8, 0.2, 0.3, 0.7, 0.5, 0.5, 0.1, 0.9],
            vec![0.2, -0.5, 1.0, 0.3],
            vec![0.6, 0.4],
            0.95,
        )
        .expect("valid stochastic MDP")
    }

    fn p(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transitions[(s * self.n_actions + a) * self.n_states + next]
    }

    fn r(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.n_actions + a]
    }

    /// Upper bound on the number of enumerated outcomes.
    pub fn outcome_count(&self) -> u128 {
        let branch = (self.n_actions * self.n_states) as u128;
        let steps = self.horizon.max(1) as u32;
        branch.saturating_pow(steps - 1).saturating_mul((self.n_states * self.n_actions) as u128)
    }
}

/// Softmax policy over a per-state logit table. Observations and actions are
/// one-hot rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CategoricalPolicy {
    pub n_states: usize,
    pub n_actions: usize,
}

impl CategoricalPolicy {
    pub fn for_mdp(mdp: &EnumerableMdp) -> Self {
        Self {
            n_states: mdp.n_states,
            n_actions: mdp.n_actions,
        }
    }

    pub fn params(&self, logits: Vec<f64>) -> Result<PolicyParams> {
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidArgument("logits must be finite".into()));
        }
        PolicyParams::unflatten(self.manifest(), logits)
    }

    /// Action probabilities `[s][a]`.
    pub fn probabilities(&self, params: &PolicyParams) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_states * self.n_actions);
        for row in params.flatten().chunks(self.n_actions) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exp.iter().sum();
            out.extend(exp.iter().map(|e| e / z));
        }
        out
    }

    /// Log-softmax table `[S, A]` as a graph node.
    pub fn log_softmax(&self, graph: &mut Graph, logits: NodeId) -> Result<NodeId> {
        let ones_col = graph.constant(Array::filled(&[self.n_actions, 1], 1.0));
        let ones_row = graph.constant(Array::filled(&[1, self.n_actions], 1.0));
        let e = graph.exp(logits);
        let z = graph.matmul(e, ones_col)?;
        let lse = graph.log(z);
        let lse = graph.matmul(lse, ones_row)?;
        Ok(graph.sub(logits, lse)?)
    }
}

impl PolicyModel for CategoricalPolicy {
    fn manifest(&self) -> Manifest {
        Manifest::new(vec![("logits".to_string(), vec![self.n_states, self.n_actions])])
    }

    fn log_prob_batch(
        &self,
        graph: &mut Graph,
        params: &[NodeId],
        observations: &Array,
        actions: &Array,
    ) -> Result<NodeId> {
        let batch = observations.shape()[0];
        if observations.shape() != [batch, self.n_states] || actions.shape() != [batch, self.n_actions] {
            return Err(Error::Shape("expected one-hot state and action rows".into()));
        }
        let logits = *params.first().ok_or(Error::Shape("missing logits tensor".into()))?;
        let obs = graph.constant(observations.clone());
        let ls = self.log_softmax(graph, logits)?;
        let ls_rows = graph.matmul(obs, ls)?;
        let act = graph.constant(actions.clone());
        let picked = graph.mul(ls_rows, act)?;
        let ones = graph.constant(Array::filled(&[self.n_actions, 1], 1.0));
        Ok(graph.matmul(picked, ones)?)
    }
}

/// A trajectory together with its visited `(state, action)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// Probability contributed by the initial distribution and transitions.
    pub env_probability: f64,
    /// Full probability under the enumerating policy.
    pub probability: f64,
}

impl Outcome {
    pub fn trajectory(&self, mdp: &EnumerableMdp) -> Trajectory {
        let one_hot = |i: usize, n: usize| (0..n).map(move |j| if i == j { 1.0 } else { 0.0 });
        Trajectory {
            obs_dim: mdp.n_states,
            action_dim: mdp.n_actions,
            observations: self.states.iter().flat_map(|&s| one_hot(s, mdp.n_states)).collect(),
            actions: self.actions.iter().flat_map(|&a| one_hot(a, mdp.n_actions)).collect(),
            rewards: self.rewards.clone(),
        }
    }

    /// `sum_t gamma^t r_t`.
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        self.rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
    }
}

/// All trajectories with non-zero probability under `params`.
pub fn enumerate_trajectories(mdp: &EnumerableMdp, params: &PolicyParams) -> Result<Vec<Outcome>> {
    let count = mdp.outcome_count();
    if count > MAX_OUTCOMES {
        return Err(Error::TooManyOutcomes(count));
    }
    mdp.validate()?;
    let policy = CategoricalPolicy::for_mdp(mdp);
    if params.manifest() != &policy.manifest() {
        return Err(Error::Shape("logit table does not match the MDP".into()));
    }
    let pi = policy.probabilities(params);
    let mut out = Vec::new();
    let mut prefix = Outcome {
        states: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
        env_probability: 1.0,
        probability: 1.0,
    };
    for s in 0..mdp.n_states {
        let p0 = mdp.initial[s];
        if p0 > 0.0 {
            extend(mdp, &pi, s, p0, p0, &mut prefix, &mut out);
        }
    }
    Ok(out)
}

fn extend(
    mdp: &EnumerableMdp,
    pi: &[f64],
    state: usize,
    env_p: f64,
    p: f64,
    prefix: &mut Outcome,
    out: &mut Vec<Outcome>,
) {
    for a in 0..mdp.n_actions {
        let pa = pi[state * mdp.n_actions + a];
        if pa == 0.0 {
            continue;
        }
        prefix.states.push(state);
        prefix.actions.push(a);
        prefix.rewards.push(mdp.r(state, a));
        if prefix.states.len() == mdp.horizon {
            out.push(Outcome {
                env_probability: env_p,
                probability: p * pa,
                ..prefix.clone()
            });
        } else {
            for next in 0..mdp.n_states {
                let pn = mdp.p(state, a, next);
                if pn > 0.0 {
                    extend(mdp, pi, next, env_p * pn, p * pa * pn, prefix, out);
                }
            }
        }
        prefix.states.pop();
        prefix.actions.pop();
        prefix.rewards.pop();
    }
}

/// Visit counts `[S, A]` of one outcome, optionally weighted per step.
fn step_table(mdp: &EnumerableMdp, o: &Outcome, weight: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut table = vec![0.0; mdp.n_states * mdp.n_actions];
    for (t, (&s, &a)) in o.states.iter().zip(&o.actions).enumerate() {
        table[s * mdp.n_actions + a] += weight(t);
    }
    table
}

/// Expected surrogate `-E[sum_t gamma^t G_t log pi(a_t|s_t)]` over all
/// trajectories, with trajectory probabilities taken under `behavior`.
pub fn exact_surrogate_loss(
    graph: &mut Graph,
    mdp: &EnumerableMdp,
    logits: NodeId,
    behavior: &PolicyParams,
) -> Result<NodeId> {
    let policy = CategoricalPolicy::for_mdp(mdp);
    let mut coef = vec![0.0; mdp.n_states * mdp.n_actions];
    for o in enumerate_trajectories(mdp, behavior)? {
        let h = o.rewards.len();
        let mut g = vec![0.0; h];
        let mut acc = 0.0;
        for t in (0..h).rev() {
            acc = o.rewards[t] + mdp.gamma * acc;
            g[t] = acc;
        }
        let table = step_table(mdp, &o, |t| mdp.gamma.powi(t as i32) * g[t]);
        for (c, v) in coef.iter_mut().zip(table) {
            *c += o.probability * v;
        }
    }
    let ls = policy.log_softmax(graph, logits)?;
    let c = graph.constant(Array::matrix(mdp.n_states, mdp.n_actions, coef)?);
    let weighted = graph.mul(c, ls)?;
    let total = graph.sum(weighted);
    Ok(graph.neg(total))
}

/// `E[G_0]` with policy probabilities differentiable in `logits`. The set of
/// enumerated trajectories is taken from `support`, which must give every
/// action positive probability.
pub fn exact_expected_return(
    graph: &mut Graph,
    mdp: &EnumerableMdp,
    logits: NodeId,
    support: &PolicyParams,
) -> Result<NodeId> {
    let policy = CategoricalPolicy::for_mdp(mdp);
    let ls = policy.log_softmax(graph, logits)?;
    let mut total: Option<NodeId> = None;
    for o in enumerate_trajectories(mdp, support)? {
        let counts = graph.constant(Array::matrix(
            mdp.n_states,
            mdp.n_actions,
            step_table(mdp, &o, |_| 1.0),
        )?);
        let log_pi = graph.mul(counts, ls)?;
        let log_pi = graph.sum(log_pi);
        let pi = graph.exp(log_pi);
        let term = graph.scale(pi, o.env_probability * o.discounted_return(mdp.gamma));
        total = Some(match total {
            None => term,
            Some(t) => graph.add(t, term)?,
        });
    }
    total.ok_or(Error::Empty("no trajectories"))
}

/// Bind `logits` as a parameter tensor named "logits".
pub fn bind_logits(graph: &mut Graph, bindings: &mut Bindings, params: &PolicyParams) -> Result<NodeId> {
    Ok(params.bind(graph, bindings)?[0])
}

/// Exact one-step meta-loss: `theta' = theta - alpha * grad(exact surrogate)`,
/// value = exact surrogate at `theta'` (trajectory weights under `theta'`).
pub fn exact_meta_loss(
    graph: &mut Graph,
    bindings: &Bindings,
    mdp: &EnumerableMdp,
    logits: NodeId,
    alpha: f64,
    first_order: bool,
) -> Result<NodeId> {
    let policy = CategoricalPolicy::for_mdp(mdp);
    let theta = graph.evaluate_one(logits, bindings)?;
    let theta = policy.params(theta.into_data())?;
    let inner = exact_surrogate_loss(graph, mdp, logits, &theta)?;
    let mut grad = graph.gradient(inner, &[logits])?[0];
    if first_order {
        let g = graph.evaluate_one(grad, bindings)?;
        grad = graph.constant(g);
    }
    let step = graph.scale(grad, alpha);
    let adapted = graph.sub(logits, step)?;
    let adapted_values = policy.params(graph.evaluate_one(adapted, bindings)?.into_data())?;
    exact_surrogate_loss(graph, mdp, adapted, &adapted_values)
}

fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Worst relative disagreement between three computations of the policy
/// gradient at `params`: the probability-weighted sum of single-trajectory
/// REINFORCE gradients, the gradient of [`exact_surrogate_loss`], and the
/// negated gradient of [`exact_expected_return`].
pub fn estimator_consistency_check(mdp: &EnumerableMdp, params: &PolicyParams) -> Result<f64> {
    let policy = CategoricalPolicy::for_mdp(mdp);
    let outcomes = enumerate_trajectories(mdp, params)?;

    let mut weighted = vec![0.0; params.len()];
    for o in &outcomes {
        let mut graph = Graph::new();
        let mut bindings = Bindings::new();
        let nodes = params.bind(&mut graph, &mut bindings)?;
        let data = Dataset::new(None, vec![o.trajectory(mdp)], params.digest())?;
        let loss = reinforce_loss(&mut graph, &policy, &nodes, &data, mdp.gamma, Baseline::None)?;
        let g = graph.gradient(loss, &nodes)?[0];
        let g = graph.evaluate_one(g, &bindings)?;
        for (w, v) in weighted.iter_mut().zip(g.data()) {
            *w += o.probability * v;
        }
    }

    let mut graph = Graph::new();
    let mut bindings = Bindings::new();
    let logits = bind_logits(&mut graph, &mut bindings, params)?;
    let surrogate = exact_surrogate_loss(&mut graph, mdp, logits, params)?;
    let j = exact_expected_return(&mut graph, mdp, logits, params)?;
    let gs = graph.gradient(surrogate, &[logits])?[0];
    let gj = graph.gradient(j, &[logits])?[0];
    let values = graph.evaluate(&[gs, gj], &bindings)?;
    let exact = values[0].data();
    let true_grad: Vec<f64> = values[1].data().iter().map(|v| -v).collect();
    Ok(max_rel_err(&weighted, exact).max(max_rel_err(exact, &true_grad)))
}

/// [`MetaProblem`] whose "datasets" are full enumerations weighted by exact
/// probabilities, so the sampled meta-gradient code runs without noise.
#[derive(Clone, Debug)]
pub struct EnumeratedProblem {
    pub mdp: EnumerableMdp,
    pub policy: CategoricalPolicy,
}

impl EnumeratedProblem {
    pub fn new(mdp: EnumerableMdp) -> Self {
        let policy = CategoricalPolicy::for_mdp(&mdp);
        Self { mdp, policy }
    }
}

impl MetaProblem for EnumeratedProblem {
    type Task = ();
    type Model = CategoricalPolicy;

    fn model(&self) -> &CategoricalPolicy {
        &self.policy
    }

    fn collect(&self, _task: &(), params: &PolicyParams, _num: usize, _stream: &RngStream) -> Result<Dataset> {
        let outcomes = enumerate_trajectories(&self.mdp, params)?;
        let weights = outcomes.iter().map(|o| o.probability).collect();
        let trajectories = outcomes.iter().map(|o| o.trajectory(&self.mdp)).collect();
        Dataset::new(None, trajectories, params.digest())?.with_weights(weights)
    }
}
