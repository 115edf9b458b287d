//! REINFORCE surrogate, one-step inner adaptation and the second-order
//! meta-gradient.
//!
//! The adapted parameters are graph expressions of the initial parameters, so
//! differentiating the post-adaptation loss with respect to the initial
//! parameters flows through the inner gradient step (Hessian-vector terms
//! included). The dependence of the sampling distributions on the parameters
//! is ignored, as in the usual MAML estimator.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use metaadapt_autodiff::{Array, Bindings, Graph, NodeId};
use rayon::prelude::*;

use crate::env::{PointMass, TaskDistribution, TaskSpec};
use crate::policy::{GaussianMlp, PolicyModel, PolicyParams};
use crate::rng::tags;
use crate::rollout::{collect_dataset, discounted_return_series, Dataset, RolloutConfig};
use crate::{Error, Result, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    None,
    /// Subtract the dataset-mean return from the first step.
    MeanReturn,
    /// Subtract the per-step mean return across trajectories, then scale to
    /// unit variance over the dataset.
    Standardized,
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Baseline::None),
            "mean_return" => Ok(Baseline::MeanReturn),
            "standardized" => Ok(Baseline::Standardized),
            other => Err(Error::InvalidArgument(format!("unknown baseline `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptConfig {
    pub alpha: f64,
    /// Treat the inner gradient as a constant.
    pub first_order: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            first_order: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OuterOptimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OuterOptimizer {
    fn default() -> Self {
        OuterOptimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaConfig {
    pub meta_batch_size: usize,
    pub iterations: usize,
    pub outer_lr: f64,
    pub optimizer: OuterOptimizer,
    pub grad_clip_norm: Option<f64>,
    pub baseline: Baseline,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            meta_batch_size: 20,
            iterations: 500,
            outer_lr: 1e-3,
            optimizer: OuterOptimizer::default(),
            grad_clip_norm: Some(10.0),
            baseline: Baseline::Standardized,
        }
    }
}

/// Everything one meta-training step needs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MamlConfig {
    pub rollout: RolloutConfig,
    pub adapt: AdaptConfig,
    pub meta: MetaConfig,
}

impl MamlConfig {
    pub fn validate(&self) -> Result<()> {
        self.rollout.validate()?;
        if !(self.adapt.alpha >= 0.0 && self.adapt.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha must be >= 0, got {}", self.adapt.alpha)));
        }
        let m = &self.meta;
        if m.meta_batch_size == 0 {
            return Err(Error::InvalidArgument("meta_batch_size must be >= 1".into()));
        }
        if !(m.outer_lr >= 0.0 && m.outer_lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("outer lr must be >= 0, got {}", m.outer_lr)));
        }
        if let Some(c) = m.grad_clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::InvalidArgument(format!("grad_clip_norm must be > 0, got {c}")));
            }
        }
        if let OuterOptimizer::Adam { beta1, beta2, eps } = m.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                return Err(Error::InvalidArgument("invalid Adam hyper-parameters".into()));
            }
        }
        Ok(())
    }
}

/// A task distribution together with a way to gather data on its tasks.
pub trait MetaProblem: Sync {
    type Task: Clone + Send + Sync;
    type Model: PolicyModel;

    fn model(&self) -> &Self::Model;

    fn collect(&self, task: &Self::Task, params: &PolicyParams, num: usize, stream: &RngStream) -> Result<Dataset>;
}

#[derive(Clone, Debug)]
pub struct PointMassProblem {
    pub env: PointMass,
    pub policy: GaussianMlp,
}

impl PointMassProblem {
    pub fn new(env: PointMass, hidden: Vec<usize>) -> Result<Self> {
        Ok(Self {
            env,
            policy: GaussianMlp::new(1, 1, hidden)?,
        })
    }
}

impl MetaProblem for PointMassProblem {
    type Task = TaskSpec;
    type Model = GaussianMlp;

    fn model(&self) -> &GaussianMlp {
        &self.policy
    }

    fn collect(&self, task: &TaskSpec, params: &PolicyParams, num: usize, stream: &RngStream) -> Result<Dataset> {
        let cfg = RolloutConfig {
            num_trajectories: num,
            gamma: 1.0,
        };
        collect_dataset(&self.env, task, &self.policy, params, &cfg, stream)
    }
}

/// Per-step weights `w_i * gamma^t * (G_t - b)` of the surrogate, stacked
/// like [`Dataset::observation_matrix`].
pub fn surrogate_coefficients(dataset: &Dataset, gamma: f64, baseline: Baseline) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset has no trajectories"));
    }
    let weights = dataset.weights();
    let mut returns = dataset
        .trajectories
        .iter()
        .map(|t| discounted_return_series(t, gamma).map(|r| r.values))
        .collect::<Result<Vec<_>>>()?;
    match baseline {
        Baseline::None => {}
        Baseline::MeanReturn => {
            let b = dataset.mean_return(gamma)?;
            returns.iter_mut().flatten().for_each(|g| *g -= b);
        }
        Baseline::Standardized => standardize(&mut returns),
    }
    let mut coef = Vec::with_capacity(dataset.total_steps());
    for (values, w) in returns.into_iter().zip(weights) {
        let mut discount = 1.0;
        for g in values {
            coef.push(w * discount * g);
            discount *= gamma;
        }
    }
    Ok(coef)
}

/// Centre each time step on its mean over the trajectories that reach it,
/// then divide everything by the pooled standard deviation. A spread at
/// rounding level means the returns carry no signal, and everything is zeroed.
fn standardize(returns: &mut [Vec<f64>]) {
    let scale = returns.iter().flatten().fold(0.0f64, |m, g| m.max(g.abs()));
    let horizon = returns.iter().map(Vec::len).max().unwrap_or(0);
    for t in 0..horizon {
        let column: Vec<f64> = returns.iter().filter_map(|r| r.get(t).copied()).collect();
        let mean = column.iter().sum::<f64>() / column.len() as f64;
        returns.iter_mut().filter_map(|r| r.get_mut(t)).for_each(|g| *g -= mean);
    }
    let n = returns.iter().map(Vec::len).sum::<usize>() as f64;
    let std = (returns.iter().flatten().map(|g| g * g).sum::<f64>() / n).sqrt();
    let factor = if std > 1e-12 * scale { 1.0 / std } else { 0.0 };
    returns.iter_mut().flatten().for_each(|g| *g *= factor);
}

/// `-(sum_i w_i sum_t gamma^t G_t^(i) log pi(a_t^(i) | s_t^(i)))` with
/// `w_i = 1/N` for sampled data. Returns are constants in the graph.
pub fn reinforce_loss<M: PolicyModel + ?Sized>(
    graph: &mut Graph,
    model: &M,
    params: &[NodeId],
    dataset: &Dataset,
    gamma: f64,
    baseline: Baseline,
) -> Result<NodeId> {
    let coef = surrogate_coefficients(dataset, gamma, baseline)?;
    let log_probs = model.log_prob_batch(graph, params, &dataset.observation_matrix(), &dataset.action_matrix())?;
    let c = graph.constant(Array::matrix(coef.len(), 1, coef)?);
    let weighted = graph.mul(c, log_probs)?;
    let total = graph.sum(weighted);
    Ok(graph.neg(total))
}

/// `params - alpha * d loss / d params` as graph nodes.
///
/// With `alpha == 0` the parameter nodes themselves are returned. With
/// `first_order` the gradient is evaluated at `bindings` and inserted as a
/// constant.
pub fn adapt_from_loss(
    graph: &mut Graph,
    params: &[NodeId],
    loss: NodeId,
    cfg: &AdaptConfig,
    bindings: &Bindings,
) -> Result<Vec<NodeId>> {
    if cfg.alpha == 0.0 {
        return Ok(params.to_vec());
    }
    let mut grads = graph.gradient(loss, params)?;
    if cfg.first_order {
        let values = graph.evaluate(&grads, bindings)?;
        grads = values.into_iter().map(|v| graph.constant(v)).collect();
    }
    params
        .iter()
        .zip(grads)
        .map(|(&p, g)| {
            let step = graph.scale(g, cfg.alpha);
            Ok(graph.sub(p, step)?)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn inner_adapt<M: PolicyModel + ?Sized>(
    graph: &mut Graph,
    model: &M,
    params: &[NodeId],
    dataset: &Dataset,
    cfg: &AdaptConfig,
    gamma: f64,
    baseline: Baseline,
    bindings: &Bindings,
) -> Result<Vec<NodeId>> {
    if cfg.alpha == 0.0 {
        return Ok(params.to_vec());
    }
    let loss = reinforce_loss(graph, model, params, dataset, gamma, baseline)?;
    adapt_from_loss(graph, params, loss, cfg, bindings)
}

/// Numeric adapted parameters for `dataset`.
pub fn adapted_params<M: PolicyModel + ?Sized>(
    model: &M,
    params: &PolicyParams,
    dataset: &Dataset,
    cfg: &MamlConfig,
) -> Result<PolicyParams> {
    let mut graph = Graph::new();
    let mut bindings = Bindings::new();
    let nodes = params.bind(&mut graph, &mut bindings)?;
    let adapt = AdaptConfig {
        first_order: true,
        ..cfg.adapt
    };
    let adapted = inner_adapt(
        &mut graph,
        model,
        &nodes,
        dataset,
        &adapt,
        cfg.rollout.gamma,
        cfg.meta.baseline,
        &bindings,
    )?;
    let values = graph.evaluate(&adapted, &bindings)?;
    PolicyParams::from_arrays(params.manifest(), values)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TaskDiagnostics {
    /// Mean undiscounted return of the adaptation data (pre-update policy).
    pub pre_return: f64,
    /// Mean undiscounted return of the evaluation data (adapted policy).
    pub post_return: f64,
}

/// Post-adaptation loss of one task as a graph in the initial parameters.
pub struct OuterLoss {
    pub graph: Graph,
    pub bindings: Bindings,
    pub params: Vec<NodeId>,
    pub adapted: Vec<NodeId>,
    pub adapted_values: PolicyParams,
    pub loss: NodeId,
    pub adaptation_data: Dataset,
    pub evaluation_data: Dataset,
    pub diagnostics: TaskDiagnostics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskGradient {
    pub loss: f64,
    pub gradient: Vec<f64>,
    pub diagnostics: TaskDiagnostics,
}

impl OuterLoss {
    /// Value and gradient of `root` (a scalar node of this graph) with
    /// respect to the initial parameters.
    pub fn value_and_gradient(&mut self, root: NodeId) -> Result<(f64, Vec<f64>)> {
        let grads = self.graph.gradient(root, &self.params)?;
        let mut roots = Vec::with_capacity(grads.len() + 1);
        roots.push(root);
        roots.extend(grads);
        let values = self.graph.evaluate(&roots, &self.bindings)?;
        let mut it = values.into_iter();
        let value = it.next().and_then(|v| v.item()).ok_or(Error::Shape("loss is not scalar".into()))?;
        let gradient = it.flat_map(Array::into_data).collect();
        Ok((value, gradient))
    }

    pub fn gradient(&mut self) -> Result<TaskGradient> {
        let (loss, gradient) = self.value_and_gradient(self.loss)?;
        Ok(TaskGradient {
            loss,
            gradient,
            diagnostics: self.diagnostics,
        })
    }
}

/// Sample `D` under `params`, adapt, sample `D'` under the adapted
/// parameters and build `L(theta'; D')` as a graph in `theta`.
pub fn outer_loss_for_task<P: MetaProblem>(
    problem: &P,
    params: &PolicyParams,
    task: &P::Task,
    cfg: &MamlConfig,
    stream: &RngStream,
) -> Result<OuterLoss> {
    outer_loss_with_streams(
        problem,
        params,
        task,
        cfg,
        &stream.child(tags::ADAPT_DATA),
        &stream.child(tags::OUTER_DATA),
    )
}

/// [`outer_loss_for_task`] with explicit streams for the two datasets.
pub fn outer_loss_with_streams<P: MetaProblem>(
    problem: &P,
    params: &PolicyParams,
    task: &P::Task,
    cfg: &MamlConfig,
    adapt_stream: &RngStream,
    outer_stream: &RngStream,
) -> Result<OuterLoss> {
    let n = cfg.rollout.num_trajectories;
    let gamma = cfg.rollout.gamma;
    let model = problem.model();
    let mut graph = Graph::new();
    let mut bindings = Bindings::new();
    let nodes = params.bind(&mut graph, &mut bindings)?;

    let adaptation_data = problem.collect(task, params, n, adapt_stream)?;
    let adapted = inner_adapt(
        &mut graph,
        model,
        &nodes,
        &adaptation_data,
        &cfg.adapt,
        gamma,
        cfg.meta.baseline,
        &bindings,
    )?;
    let adapted_values = if cfg.adapt.alpha == 0.0 {
        params.clone()
    } else {
        PolicyParams::from_arrays(params.manifest(), graph.evaluate(&adapted, &bindings)?)?
    };
    let evaluation_data = problem.collect(task, &adapted_values, n, outer_stream)?;
    let loss = reinforce_loss(&mut graph, model, &adapted, &evaluation_data, gamma, cfg.meta.baseline)?;
    let diagnostics = TaskDiagnostics {
        pre_return: adaptation_data.mean_return(1.0)?,
        post_return: evaluation_data.mean_return(1.0)?,
    };
    Ok(OuterLoss {
        graph,
        bindings,
        params: nodes,
        adapted,
        adapted_values,
        loss,
        adaptation_data,
        evaluation_data,
        diagnostics,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaGradient {
    /// Mean task gradient, after clipping.
    pub gradient: Vec<f64>,
    /// Norm before clipping.
    pub grad_norm: f64,
    pub loss: f64,
    pub pre_return: f64,
    pub post_return: f64,
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescale `v` in place to norm `max_norm` when it is longer.
pub fn clip_by_norm(v: &mut [f64], max_norm: f64) -> f64 {
    let norm = l2_norm(v);
    if norm > max_norm {
        let s = max_norm / norm;
        v.iter_mut().for_each(|x| *x *= s);
    }
    norm
}

/// Average a list of per-task results in task order.
pub(crate) fn reduce_task_gradients(
    results: Vec<TaskGradient>,
    grad_clip_norm: Option<f64>,
) -> MetaGradient {
    let m = results.len() as f64;
    let dim = results[0].gradient.len();
    let mut gradient = vec![0.0; dim];
    let (mut loss, mut pre, mut post) = (0.0, 0.0, 0.0);
    for r in &results {
        for (acc, g) in gradient.iter_mut().zip(&r.gradient) {
            *acc += g;
        }
        loss += r.loss;
        pre += r.diagnostics.pre_return;
        post += r.diagnostics.post_return;
    }
    gradient.iter_mut().for_each(|g| *g /= m);
    let grad_norm = match grad_clip_norm {
        Some(c) => clip_by_norm(&mut gradient, c),
        None => l2_norm(&gradient),
    };
    MetaGradient {
        gradient,
        grad_norm,
        loss: loss / m,
        pre_return: pre / m,
        post_return: post / m,
    }
}

/// Mean outer-loss gradient over `tasks`; task `i` uses `stream.child(i)`.
pub fn meta_gradient<P: MetaProblem>(
    problem: &P,
    params: &PolicyParams,
    tasks: &[P::Task],
    cfg: &MamlConfig,
    stream: &RngStream,
) -> Result<MetaGradient> {
    let streams: Vec<RngStream> = (0..tasks.len()).map(|i| stream.child(i as u64)).collect();
    meta_gradient_with_streams(problem, params, tasks, cfg, &streams)
}

pub fn meta_gradient_with_streams<P: MetaProblem>(
    problem: &P,
    params: &PolicyParams,
    tasks: &[P::Task],
    cfg: &MamlConfig,
    streams: &[RngStream],
) -> Result<MetaGradient> {
    if tasks.is_empty() {
        return Err(Error::Empty("meta-batch has no tasks"));
    }
    if streams.len() != tasks.len() {
        return Err(Error::InvalidArgument("one stream per task".into()));
    }
    let results = tasks
        .par_iter()
        .zip(streams.par_iter())
        .enumerate()
        .map(|(i, (task, s))| {
            outer_loss_for_task(problem, params, task, cfg, s)
                .and_then(|mut o| o.gradient())
                .map_err(|e| task_error(0, i, e))
                .and_then(|r| check_task_result(r, i))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(reduce_task_gradients(results, cfg.meta.grad_clip_norm))
}

pub(crate) fn check_task_result(r: TaskGradient, task: usize) -> Result<TaskGradient> {
    let what = if !r.loss.is_finite() {
        "outer loss"
    } else if r.gradient.iter().any(|g| !g.is_finite()) {
        "meta-gradient"
    } else {
        return Ok(r);
    };
    Err(Error::NonFinite {
        what,
        iteration: 0,
        task,
    })
}

pub(crate) fn task_error(iteration: usize, task: usize, e: Error) -> Error {
    match e {
        Error::TaskFailed { source, task, .. } => Error::TaskFailed {
            iteration,
            task,
            source,
        },
        other => Error::TaskFailed {
            iteration,
            task,
            source: Box::new(other),
        },
    }
}

/// Outer-loop optimizer state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OuterOptimizer,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OuterOptimizer, lr: f64, dim: usize) -> Self {
        Self {
            kind,
            lr,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    /// Descent step on `params` along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self.kind {
            OuterOptimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OuterOptimizer::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for (i, (p, g)) in params.iter_mut().zip(grad).enumerate() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    *p -= self.lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingLogRecord {
    pub iteration: usize,
    pub pre_return: f64,
    pub post_return: f64,
    pub outer_loss: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

pub const TRAINING_LOG_HEADER: &str = "iter,pre_return,post_return,outer_loss,grad_norm,wall_ms";

/// Training log as CSV. Without `wall_clock` the `wall_ms` column is written
/// as 0 so the file depends only on the seed.
pub fn training_log_csv(records: &[TrainingLogRecord], wall_clock: bool) -> String {
    let mut out = String::from(TRAINING_LOG_HEADER);
    out.push('\n');
    for r in records {
        writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{}",
            r.iteration,
            r.pre_return,
            r.post_return,
            r.outer_loss,
            r.grad_norm,
            if wall_clock { r.wall_ms } else { 0 }
        )
        .unwrap();
    }
    out
}

/// Generic outer loop: per iteration, sample tasks, ask `step` for a
/// meta-gradient and apply the optimizer.
pub fn meta_train_with<T>(
    init: PolicyParams,
    meta: &MetaConfig,
    stream: &RngStream,
    mut sample_tasks: impl FnMut(&RngStream) -> Result<Vec<T>>,
    mut step: impl FnMut(usize, &PolicyParams, &[T], &RngStream) -> Result<MetaGradient>,
) -> Result<(PolicyParams, Vec<TrainingLogRecord>)> {
    let mut params = init;
    let mut optimizer = Optimizer::new(meta.optimizer, meta.outer_lr, params.len());
    let mut log = Vec::with_capacity(meta.iterations);
    let iterations = stream.child(tags::ITERATIONS);
    for it in 0..meta.iterations {
        let started = Instant::now();
        let it_stream = iterations.child(it as u64);
        let tasks = sample_tasks(&it_stream.child(tags::TASKS))?;
        let mg = step(it, &params, &tasks, &it_stream.child(tags::PER_TASK)).map_err(|e| match e {
            Error::TaskFailed { task, source, .. } => match *source {
                Error::NonFinite { what, .. } => Error::NonFinite {
                    what,
                    iteration: it,
                    task,
                },
                source => Error::TaskFailed {
                    iteration: it,
                    task,
                    source: Box::new(source),
                },
            },
            Error::NonFinite { what, task, .. } => Error::NonFinite {
                what,
                iteration: it,
                task,
            },
            other => other,
        })?;
        let mut values = params.flatten().to_vec();
        optimizer.step(&mut values, &mg.gradient);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "parameters",
                iteration: it,
                task: 0,
            });
        }
        params = params.with_values(values)?;
        log.push(TrainingLogRecord {
            iteration: it,
            pre_return: mg.pre_return,
            post_return: mg.post_return,
            outer_loss: mg.loss,
            grad_norm: mg.grad_norm,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
    Ok((params, log))
}

/// Meta-train on tasks drawn from `dist`.
pub fn meta_train(
    problem: &PointMassProblem,
    dist: &TaskDistribution,
    init: PolicyParams,
    cfg: &MamlConfig,
    stream: &RngStream,
) -> Result<(PolicyParams, Vec<TrainingLogRecord>)> {
    cfg.validate()?;
    dist.validate()?;
    meta_train_with(
        init,
        &cfg.meta,
        stream,
        |s| dist.sample_tasks(cfg.meta.meta_batch_size, &mut s.rng()),
        |_, params, tasks, s| meta_gradient(problem, params, tasks, cfg, s),
    )
}

/// Plain policy gradient on a single goal velocity (no adaptation step).
/// Produces a policy specialized on one task.
pub fn pretrain_single_task(
    problem: &PointMassProblem,
    goal_velocity: f64,
    init: PolicyParams,
    cfg: &MamlConfig,
    stream: &RngStream,
) -> Result<(PolicyParams, Vec<TrainingLogRecord>)> {
    let dist = TaskDistribution::new(crate::TaskFamily::GoalVelocity, goal_velocity, goal_velocity)?;
    let cfg = MamlConfig {
        adapt: AdaptConfig {
            alpha: 0.0,
            first_order: false,
        },
        ..cfg.clone()
    };
    meta_train(problem, &dist, init, &cfg, stream)
}

/// Meta-gradient of the supervised probe `L(x) = 0.5 * |x - target|^2` used
/// as both inner and outer loss. The closed form is
/// `(1 - alpha)^2 (theta - target)`, or `(1 - alpha)(theta - target)` for
/// the first-order variant.
pub fn quadratic_probe_meta_gradient(theta: &[f64], target: &[f64], adapt: &AdaptConfig) -> Result<Vec<f64>> {
    if theta.len() != target.len() || theta.is_empty() {
        return Err(Error::Shape("theta and target need the same non-zero length".into()));
    }
    let mut graph = Graph::new();
    let mut bindings = Bindings::new();
    let x = graph.parameter("theta", &[theta.len()])?;
    bindings.bind(x, Array::vector(theta.to_vec()));
    let c = graph.constant(Array::vector(target.to_vec()));
    let probe = |graph: &mut Graph, at: NodeId| -> Result<NodeId> {
        let d = graph.sub(at, c)?;
        let sq = graph.square(d);
        let s = graph.sum(sq);
        Ok(graph.scale(s, 0.5))
    };
    let inner = probe(&mut graph, x)?;
    let adapted = adapt_from_loss(&mut graph, &[x], inner, adapt, &bindings)?;
    let outer = probe(&mut graph, adapted[0])?;
    let g = graph.gradient(outer, &[x])?[0];
    Ok(graph.evaluate_one(g, &bindings)?.into_data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::Trajectory;

    fn traj(obs: Vec<f64>, actions: Vec<f64>, rewards: Vec<f64>) -> Trajectory {
        Trajectory {
            obs_dim: 1,
            action_dim: 1,
            observations: obs,
            actions,
            rewards,
        }
    }

    fn linear() -> (GaussianMlp, PolicyParams) {
        let m = GaussianMlp::new(1, 1, vec![]).unwrap();
        let p = PolicyParams::unflatten(m.manifest(), vec![0.7, -0.2, -0.3]).unwrap();
        (m, p)
    }

    fn loss_value(m: &GaussianMlp, p: &PolicyParams, d: &Dataset, gamma: f64) -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let mut b = Bindings::new();
        let nodes = p.bind(&mut g, &mut b).unwrap();
        let l = reinforce_loss(&mut g, m, &nodes, d, gamma, Baseline::None).unwrap();
        let grads = g.gradient(l, &nodes).unwrap();
        let mut roots = vec![l];
        roots.extend(grads);
        let v = g.evaluate(&roots, &b).unwrap();
        (v[0].item().unwrap(), v[1..].iter().flat_map(|a| a.data().to_vec()).collect())
    }

    #[test]
    fn surrogate_expansion() {
        let (m, p) = linear();
        let t = traj(vec![0.1, -0.4], vec![0.5, 0.2], vec![1.0, 1.0]);
        let d = Dataset::new(None, vec![t], String::new()).unwrap();
        let (l, _) = loss_value(&m, &p, &d, 0.5);

        let mut g = Graph::new();
        let mut b = Bindings::new();
        let nodes = p.bind(&mut g, &mut b).unwrap();
        let l0 = m.log_prob(&mut g, &nodes, &[0.1], &[0.5]).unwrap();
        let l1 = m.log_prob(&mut g, &nodes, &[-0.4], &[0.2]).unwrap();
        let v = g.evaluate(&[l0, l1], &b).unwrap();
        let (l0, l1) = (v[0].item().unwrap(), v[1].item().unwrap());
        let want = -(1.5 * l0 + 0.5 * 1.0 * l1);
        assert!((l - want).abs() < 1e-12);
    }

    #[test]
    fn zero_rewards_give_zero_loss_and_gradient() {
        let (m, p) = linear();
        let t = traj(vec![0.1, 0.3, 0.2], vec![0.5, -1.0, 0.0], vec![0.0; 3]);
        let d = Dataset::new(None, vec![t], String::new()).unwrap();
        let (l, grad) = loss_value(&m, &p, &d, 0.9);
        assert_eq!(l, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn duplicated_trajectories_do_not_change_the_loss() {
        let (m, p) = linear();
        let t = traj(vec![0.1, 0.3], vec![0.5, -1.0], vec![0.4, -2.0]);
        let one = Dataset::new(None, vec![t.clone()], String::new()).unwrap();
        let two = Dataset::new(None, vec![t.clone(), t], String::new()).unwrap();
        let (a, _) = loss_value(&m, &p, &one, 0.9);
        let (b, _) = loss_value(&m, &p, &two, 0.9);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn mean_return_baseline_shifts_returns() {
        let t1 = traj(vec![0.0; 2], vec![0.0; 2], vec![1.0, 2.0]);
        let t2 = traj(vec![0.0; 2], vec![0.0; 2], vec![3.0, 0.0]);
        let d = Dataset::new(None, vec![t1, t2], String::new()).unwrap();
        let c = surrogate_coefficients(&d, 1.0, Baseline::MeanReturn).unwrap();
        // returns [3, 2] and [3, 0]; baseline 3; weights 1/2
        assert_eq!(c, vec![0.0, -0.5, 0.0, -1.5]);
    }

    #[test]
    fn standardized_baseline_example_and_invariances() {
        let data = |k: f64, s: f64| {
            let t1 = traj(vec![0.0; 2], vec![0.0; 2], vec![k * 1.0 + s, k * 2.0 + s]);
            let t2 = traj(vec![0.0; 2], vec![0.0; 2], vec![k * 3.0 + s, s]);
            Dataset::new(None, vec![t1, t2], String::new()).unwrap()
        };
        let c = surrogate_coefficients(&data(1.0, 0.0), 1.0, Baseline::Standardized).unwrap();
        // returns [3, 2], [3, 0]; centred [0, 1], [0, -1]; pooled std sqrt(1/2)
        let r = 0.5f64.sqrt();
        let expected = [0.0, 0.5 / r, 0.0, -0.5 / r];
        for (a, e) in c.iter().zip(expected) {
            assert!((a - e).abs() < 1e-15);
        }
        let scaled = surrogate_coefficients(&data(4.0, -7.0), 0.9, Baseline::Standardized).unwrap();
        let base = surrogate_coefficients(&data(1.0, 0.0), 0.9, Baseline::Standardized).unwrap();
        for (a, b) in scaled.iter().zip(&base) {
            assert!((a - b).abs() < 1e-12);
        }
        let flat = Dataset::new(None, vec![traj(vec![0.0; 2], vec![0.0; 2], vec![-1.0, -1.0]); 3], String::new()).unwrap();
        assert!(surrogate_coefficients(&flat, 0.9, Baseline::Standardized).unwrap().iter().all(|c| *c == 0.0));
    }

    #[test]
    fn adaptation_examples() {
        let (m, p) = linear();
        let t = traj(vec![0.1, 0.3], vec![0.5, -1.0], vec![0.4, -2.0]);
        let d = Dataset::new(None, vec![t.clone()], String::new()).unwrap();
        let mut cfg = MamlConfig::default();
        cfg.adapt.alpha = 0.0;
        assert_eq!(adapted_params(&m, &p, &d, &cfg).unwrap(), p);

        cfg.adapt.alpha = 0.3;
        let zero = Dataset::new(None, vec![traj(t.observations, t.actions, vec![0.0; 2])], String::new()).unwrap();
        assert_eq!(adapted_params(&m, &p, &zero, &cfg).unwrap(), p);

        // supervised probe: L = ½(θ − c)², θ = 2, c = 0
        let mut g = Graph::new();
        let mut b = Bindings::new();
        let theta = g.parameter("theta", &[]).unwrap();
        b.bind(theta, Array::scalar(2.0));
        let sq = g.square(theta);
        let l = g.scale(sq, 0.5);
        let adapted = adapt_from_loss(&mut g, &[theta], l, &AdaptConfig { alpha: 0.1, first_order: false }, &b).unwrap();
        let v = g.evaluate_one(adapted[0], &b).unwrap().item().unwrap();
        assert!((v - 1.8).abs() < 1e-15);
    }

    #[test]
    fn clipping_contract() {
        let mut v = vec![3.0, 4.0];
        assert_eq!(clip_by_norm(&mut v, 1.0), 5.0);
        assert!((l2_norm(&v) - 1.0).abs() < 1e-15);
        let mut w = vec![0.3, 0.4];
        clip_by_norm(&mut w, 1.0);
        assert_eq!(w, vec![0.3, 0.4]);
    }

    #[test]
    fn adam_with_zero_lr_is_identity() {
        let mut opt = Optimizer::new(OuterOptimizer::default(), 0.0, 3);
        let mut p = vec![1.0, -2.0, 0.5];
        for _ in 0..5 {
            opt.step(&mut p, &[0.3, -10.0, 1e-9]);
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn sgd_step() {
        let mut opt = Optimizer::new(OuterOptimizer::Sgd, 0.1, 2);
        let mut p = vec![5.0, -3.0];
        opt.step(&mut p, &[10.0, -6.0]);
        assert!((p[0] - 4.0).abs() < 1e-12 && (p[1] - -2.4).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut cfg = MamlConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.meta.meta_batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = MamlConfig::default();
        cfg.rollout.gamma = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = MamlConfig::default();
        cfg.meta.grad_clip_norm = Some(0.0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn log_csv_format() {
        let r = TrainingLogRecord {
            iteration: 3,
            pre_return: -1.5,
            post_return: -1.0,
            outer_loss: 2.0,
            grad_norm: 0.25,
            wall_ms: 17,
        };
        assert_eq!(training_log_csv(&[r], false), format!("{TRAINING_LOG_HEADER}\n3,-1.5,-1.0,2.0,0.25,0\n"));
        assert!(training_log_csv(&[r], true).ends_with(",17\n"));
    }
}
