//! Penalized meta-objective for the improvement chance constraint.
//!
//! The probability `Pr(Gamma <= 0)` has no useful gradient, so training
//! penalizes the expected shortfall `max(0, mean Gamma)` instead. The
//! post-adaptation return enters through a pass-through node whose value is the
//! empirical mean return while its derivative is that of the negated
//! REINFORCE surrogate.

use metaadapt_autodiff::{Graph, NodeId};
use rayon::prelude::*;

use crate::env::TaskDistribution;
use crate::maml::{
    check_task_result, meta_train_with, outer_loss_for_task, reduce_task_gradients, task_error, MamlConfig,
    MetaGradient, MetaProblem, OuterLoss, PointMassProblem, TaskGradient, TrainingLogRecord,
};
use crate::policy::PolicyParams;
use crate::rng::tags;
use crate::{Error, Result, RngStream};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SafetyConfig {
    /// Per-task tolerance: require `Pr(Gamma <= 0) >= 1 - beta`.
    pub beta: f64,
    /// Fraction of tasks allowed to violate the per-task requirement.
    pub delta: f64,
    pub lambda: f64,
    /// Dual ascent step for `lambda`; 0 keeps it fixed.
    pub dual_lr: f64,
    pub eval_trajectories: usize,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            delta: 0.1,
            lambda: 1.0,
            dual_lr: 0.0,
            eval_trajectories: 20,
        }
    }
}

impl SafetyConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !open_unit(self.beta) || !open_unit(self.delta) {
            return Err(Error::InvalidArgument(format!(
                "beta and delta must lie in (0, 1), got {} and {}",
                self.beta, self.delta
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || !(self.dual_lr >= 0.0 && self.dual_lr.is_finite()) {
            return Err(Error::InvalidArgument("lambda and dual_lr must be >= 0".into()));
        }
        if self.eval_trajectories == 0 {
            return Err(Error::InvalidArgument("eval_trajectories must be >= 1".into()));
        }
        Ok(())
    }
}

/// Node whose value is `value` and whose gradient is that of `-surrogate`.
pub fn pass_through_return(graph: &mut Graph, surrogate: NodeId, value: f64) -> NodeId {
    let neg = graph.neg(surrogate);
    let frozen = graph.stop_gradient(surrogate);
    let zero = graph.add(neg, frozen).expect("same node shapes");
    graph.shift(zero, value)
}

/// `max(0, pre - post_return)` as a node.
pub fn hinge_penalty(graph: &mut Graph, pre_mean: f64, post_return: NodeId) -> NodeId {
    let neg = graph.neg(post_return);
    let gap = graph.shift(neg, pre_mean);
    graph.max0(gap)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyTerm {
    pub node: NodeId,
    /// `pre mean - post mean`.
    pub gamma_mean: f64,
    /// Paired differences, one per evaluation trajectory that has a partner
    /// in the post-adaptation data.
    pub gamma_samples: Vec<f64>,
}

/// Attach the improvement penalty to an outer-loss graph.
///
/// Pre-adaptation returns come from `eval_trajectories` rollouts of the
/// initial policy on the same streams as the post-adaptation data, so the
/// pairs share environment noise.
pub fn attach_improvement_penalty<P: MetaProblem>(
    problem: &P,
    params: &PolicyParams,
    task: &P::Task,
    outer: &mut OuterLoss,
    safety: &SafetyConfig,
    stream: &RngStream,
) -> Result<PenaltyTerm> {
    let pre = problem.collect(task, params, safety.eval_trajectories, &stream.child(tags::OUTER_DATA))?;
    let pre_returns = pre.returns(1.0)?;
    let post_returns = outer.evaluation_data.returns(1.0)?;
    let pre_mean = pre.mean_return(1.0)?;
    let post_mean = outer.evaluation_data.mean_return(1.0)?;
    let gamma_samples = pre_returns.iter().zip(&post_returns).map(|(a, b)| a - b).collect();
    let j_hat = pass_through_return(&mut outer.graph, outer.loss, post_mean);
    let node = hinge_penalty(&mut outer.graph, pre_mean, j_hat);
    Ok(PenaltyTerm {
        node,
        gamma_mean: pre_mean - post_mean,
        gamma_samples,
    })
}

/// Outer loss of one task together with its improvement penalty.
pub fn improvement_penalty<P: MetaProblem>(
    problem: &P,
    params: &PolicyParams,
    task: &P::Task,
    cfg: &MamlConfig,
    safety: &SafetyConfig,
    stream: &RngStream,
) -> Result<(OuterLoss, PenaltyTerm)> {
    let mut outer = outer_loss_for_task(problem, params, task, cfg, stream)?;
    let term = attach_improvement_penalty(problem, params, task, &mut outer, safety, stream)?;
    Ok((outer, term))
}

/// `outer + lambda * penalty`; the penalty is left out entirely at
/// `lambda == 0` so the objective is the plain one bit for bit.
pub fn combine_objective(graph: &mut Graph, outer_loss: NodeId, penalty: NodeId, lambda: f64) -> Result<NodeId> {
    if lambda == 0.0 {
        return Ok(outer_loss);
    }
    let weighted = graph.scale(penalty, lambda);
    Ok(graph.add(outer_loss, weighted)?)
}

pub fn dual_lambda_update(lambda: f64, violation_rate: f64, delta: f64, dual_lr: f64) -> f64 {
    (lambda + dual_lr * (violation_rate - delta)).max(0.0)
}

/// Fraction of samples with `Gamma <= 0`.
pub fn improvement_probability(gamma_samples: &[f64]) -> Result<f64> {
    if gamma_samples.is_empty() {
        return Err(Error::Empty("no Gamma samples"));
    }
    Ok(gamma_samples.iter().filter(|g| **g <= 0.0).count() as f64 / gamma_samples.len() as f64)
}

/// Fraction of tasks whose improvement probability is below `1 - beta`.
pub fn violation_rate(per_task: &[Vec<f64>], beta: f64) -> Result<f64> {
    if per_task.is_empty() {
        return Err(Error::Empty("no tasks"));
    }
    let mut violated = 0usize;
    for samples in per_task {
        if improvement_probability(samples)? < 1.0 - beta {
            violated += 1;
        }
    }
    Ok(violated as f64 / per_task.len() as f64)
}

/// Evaluate the constraint on fresh tasks: each task gets an adaptation set,
/// then `eval_trajectories` paired rollouts before and after adaptation.
pub fn constraint_violation_rate<P: MetaProblem>(
    problem: &P,
    params: &PolicyParams,
    tasks: &[P::Task],
    cfg: &MamlConfig,
    safety: &SafetyConfig,
    stream: &RngStream,
) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::Empty("no tasks"));
    }
    let per_task = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let s = stream.child(i as u64);
            let data = problem.collect(task, params, cfg.rollout.num_trajectories, &s.child(tags::ADAPT_DATA))?;
            let adapted = crate::maml::adapted_params(problem.model(), params, &data, cfg)?;
            let eval = s.child(tags::EVAL_PAIRS);
            let pre = problem.collect(task, params, safety.eval_trajectories, &eval)?.returns(1.0)?;
            let post = problem.collect(task, &adapted, safety.eval_trajectories, &eval)?.returns(1.0)?;
            Ok(pre.iter().zip(&post).map(|(a, b)| a - b).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    violation_rate(&per_task, safety.beta)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SafetyStats {
    pub penalty_mean: f64,
    pub gamma_mean: f64,
    pub violation_rate: f64,
}

/// Mean gradient of `outer loss + lambda * penalty` over the meta-batch.
pub fn penalized_meta_gradient<P: MetaProblem>(
    problem: &P,
    params: &PolicyParams,
    tasks: &[P::Task],
    cfg: &MamlConfig,
    safety: &SafetyConfig,
    lambda: f64,
    stream: &RngStream,
) -> Result<(MetaGradient, SafetyStats)> {
    if tasks.is_empty() {
        return Err(Error::Empty("meta-batch has no tasks"));
    }
    let results = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let s = stream.child(i as u64);
            let run = || -> Result<(TaskGradient, f64, PenaltyTerm)> {
                let (mut outer, term) = improvement_penalty(problem, params, task, cfg, safety, &s)?;
                let root = combine_objective(&mut outer.graph, outer.loss, term.node, lambda)?;
                let (loss, gradient) = outer.value_and_gradient(root)?;
                let penalty = outer.graph.evaluate_one(term.node, &outer.bindings)?.item().unwrap_or(f64::NAN);
                let tg = TaskGradient {
                    loss,
                    gradient,
                    diagnostics: outer.diagnostics,
                };
                Ok((tg, penalty, term))
            };
            let (tg, penalty, term) = run().map_err(|e| task_error(0, i, e))?;
            Ok((check_task_result(tg, i)?, penalty, term))
        })
        .collect::<Result<Vec<_>>>()?;
    let m = results.len() as f64;
    let penalty_mean = results.iter().map(|r| r.1).sum::<f64>() / m;
    let gamma_mean = results.iter().map(|r| r.2.gamma_mean).sum::<f64>() / m;
    let per_task: Vec<Vec<f64>> = results.iter().map(|r| r.2.gamma_samples.clone()).collect();
    let rate = violation_rate(&per_task, safety.beta)?;
    let grads = results.into_iter().map(|r| r.0).collect();
    Ok((
        reduce_task_gradients(grads, cfg.meta.grad_clip_norm),
        SafetyStats {
            penalty_mean,
            gamma_mean,
            violation_rate: rate,
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SafetyLogRecord {
    pub iteration: usize,
    pub penalty_mean: f64,
    pub violation_rate: f64,
    /// Penalty weight used in this iteration.
    pub lambda: f64,
}

pub const SAFETY_LOG_HEADER: &str = "iter,penalty_mean,violation_rate,lambda";

pub fn safety_log_csv(records: &[SafetyLogRecord]) -> String {
    use std::fmt::Write as _;
    let mut out = String::from(SAFETY_LOG_HEADER);
    out.push('\n');
    for r in records {
        writeln!(out, "{},{:?},{:?},{:?}", r.iteration, r.penalty_mean, r.violation_rate, r.lambda).unwrap();
    }
    out
}

/// Meta-training on the penalized objective, with optional dual ascent on
/// `lambda`.
pub fn safe_meta_train(
    problem: &PointMassProblem,
    dist: &TaskDistribution,
    init: PolicyParams,
    cfg: &MamlConfig,
    safety: &SafetyConfig,
    stream: &RngStream,
) -> Result<(PolicyParams, Vec<TrainingLogRecord>, Vec<SafetyLogRecord>)> {
    cfg.validate()?;
    dist.validate()?;
    safety.validate()?;
    let mut lambda = safety.lambda;
    let mut safety_log = Vec::with_capacity(cfg.meta.iterations);
    let (params, log) = meta_train_with(
        init,
        &cfg.meta,
        stream,
        |s| dist.sample_tasks(cfg.meta.meta_batch_size, &mut s.rng()),
        |it, params, tasks, s| {
            let (mg, stats) = penalized_meta_gradient(problem, params, tasks, cfg, safety, lambda, s)?;
            safety_log.push(SafetyLogRecord {
                iteration: it,
                penalty_mean: stats.penalty_mean,
                violation_rate: stats.violation_rate,
                lambda,
            });
            lambda = dual_lambda_update(lambda, stats.violation_rate, safety.delta, safety.dual_lr);
            Ok(mg)
        },
    )?;
    Ok((params, log, safety_log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use metaadapt_autodiff::{Array, Bindings};

    #[test]
    fn dual_update_examples() {
        assert_eq!(dual_lambda_update(0.7, 0.1, 0.1, 3.0), 0.7);
        assert_eq!(dual_lambda_update(0.0, 0.05, 0.1, 1.0), 0.0);
        assert!((dual_lambda_update(1.0, 0.3, 0.1, 0.5) - 1.1).abs() < 1e-12);
    }

    #[test]
    fn dual_update_is_monotone() {
        let mut l = 0.0;
        for k in 1..=10 {
            l = dual_lambda_update(l, 0.5, 0.1, 0.25);
            assert!((l - 0.1 * k as f64).abs() < 1e-12);
        }
        let mut steps = 0;
        while l > 0.0 {
            l = dual_lambda_update(l, 0.0, 0.1, 0.25);
            steps += 1;
        }
        assert_eq!(steps, 40);
    }

    #[test]
    fn hinge_penalty_values() {
        for (pre, post, want) in [(3.0, 5.0, 0.0), (5.0, 3.0, 2.0), (1.5, 1.5, 0.0)] {
            let mut g = Graph::new();
            let l = g.parameter("l", &[]).unwrap();
            let mut b = Bindings::new();
            b.bind(l, Array::scalar(-7.25));
            let j = pass_through_return(&mut g, l, post);
            let p = hinge_penalty(&mut g, pre, j);
            let v = g.evaluate(&[j, p], &b).unwrap();
            assert_eq!(v[0].item(), Some(post));
            assert_eq!(v[1].item(), Some(want));
        }
    }

    #[test]
    fn pass_through_gradient_is_negated_surrogate_gradient() {
        let mut g = Graph::new();
        let x = g.parameter("x", &[2]).unwrap();
        let mut b = Bindings::new();
        b.bind(x, Array::vector(vec![0.3, -1.2]));
        let t = g.tanh(x);
        let sq = g.square(t);
        let l = g.sum(sq);
        let j = pass_through_return(&mut g, l, 4.0);
        let gj = g.gradient(j, &[x]).unwrap()[0];
        let gl = g.gradient(l, &[x]).unwrap()[0];
        let v = g.evaluate(&[gj, gl], &b).unwrap();
        for (a, c) in v[0].data().iter().zip(v[1].data()) {
            assert_eq!(*a, -*c);
        }
    }

    #[test]
    fn combined_objective_arithmetic() {
        let mut g = Graph::new();
        let b = Bindings::new();
        let l = g.scalar(1.5);
        let pens = [g.scalar(0.0), g.scalar(2.0)];
        let mut total = 0.0;
        for p in pens {
            let root = combine_objective(&mut g, l, p, 1.0).unwrap();
            total += g.evaluate_one(root, &b).unwrap().item().unwrap();
        }
        assert_eq!(total / 2.0, 1.5 + 1.0);
        let root = combine_objective(&mut g, l, pens[1], 0.0).unwrap();
        assert_eq!(root, l);
        let r1 = combine_objective(&mut g, l, pens[1], 1.0).unwrap();
        let r2 = combine_objective(&mut g, l, pens[1], 2.0).unwrap();
        let v = g.evaluate(&[r1, r2], &b).unwrap();
        assert_eq!(v[1].item().unwrap() - 1.5, 2.0 * (v[0].item().unwrap() - 1.5));
    }

    #[test]
    fn violation_rate_extremes() {
        let neg = vec![vec![-1.0, -2.0], vec![-0.5]];
        assert_eq!(violation_rate(&neg, 0.1).unwrap(), 0.0);
        let pos = vec![vec![1.0, 2.0], vec![0.5]];
        assert_eq!(violation_rate(&pos, 0.1).unwrap(), 1.0);
        assert!(violation_rate(&[], 0.1).is_err());
        assert_eq!(improvement_probability(&[0.0, 1.0]).unwrap(), 0.5);
    }

    #[test]
    fn config_validation() {
        assert!(SafetyConfig::default().validate().is_ok());
        for bad in [
            SafetyConfig { beta: 0.0, ..Default::default() },
            SafetyConfig { delta: 1.0, ..Default::default() },
            SafetyConfig { lambda: -1.0, ..Default::default() },
            SafetyConfig { eval_trajectories: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
