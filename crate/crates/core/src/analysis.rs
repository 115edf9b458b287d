//! Per-task adaptation audit: paired pre/post returns, percentile bands,
//! sweeps over task parameters and negative-adaptation regions.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;

use crate::env::TaskSpec;
use crate::maml::{adapted_params, MamlConfig, MetaProblem};
use crate::policy::PolicyParams;
use crate::rng::tags;
use crate::{Error, Result, RngStream};

/// Linear interpolation between order statistics at rank `q/100 * (n-1)`.
pub fn percentile(samples: &[f64], q: f64) -> Result<f64> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    percentile_sorted(&sorted, q)
}

fn percentile_sorted(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::Empty("percentile of no samples"));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("percentile q must lie in [0, 100], got {q}")));
    }
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReturnStats {
    pub n: usize,
    pub median: f64,
    pub p5: f64,
    pub p25: f64,
    pub p75: f64,
    pub p95: f64,
    pub mean: f64,
}

impl ReturnStats {
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let p = |q| percentile_sorted(&sorted, q);
        Ok(Self {
            n: samples.len(),
            median: p(50.0)?,
            p5: p(5.0)?,
            p25: p(25.0)?,
            p75: p(75.0)?,
            p95: p(95.0)?,
            mean: samples.iter().sum::<f64>() / samples.len() as f64,
        })
    }

    fn columns(&self) -> [f64; 6] {
        [self.median, self.p5, self.p25, self.p75, self.p95, self.mean]
    }
}

/// Which statistic decides `negative_flag`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FlagRule {
    #[default]
    Median,
    Mean,
}

impl FromStr for FlagRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "median" => Ok(FlagRule::Median),
            "mean" => Ok(FlagRule::Mean),
            other => Err(Error::InvalidArgument(format!("unknown flag rule `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    /// Paired evaluation rollouts per task.
    pub eval_rollouts: usize,
    pub gamma_eval: f64,
    pub flag: FlagRule,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            eval_rollouts: 40,
            gamma_eval: 1.0,
            flag: FlagRule::Median,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eval_rollouts == 0 {
            return Err(Error::InvalidArgument("eval_rollouts must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma_eval) {
            return Err(Error::InvalidArgument(format!("gamma_eval must lie in [0, 1], got {}", self.gamma_eval)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationReport<T = TaskSpec> {
    pub task: T,
    pub pre: ReturnStats,
    pub post: ReturnStats,
    /// `pre - post` per evaluation pair.
    pub gamma_samples: Vec<f64>,
    /// Fraction of pairs with `Gamma <= 0`.
    pub prob_improve: f64,
    pub negative_flag: bool,
}

impl<T> AdaptationReport<T> {
    pub fn gamma_mean(&self) -> f64 {
        self.gamma_samples.iter().sum::<f64>() / self.gamma_samples.len() as f64
    }
}

/// Report from paired pre/post returns.
pub fn adaptation_report<T>(task: T, pre: &[f64], post: &[f64], flag: FlagRule) -> Result<AdaptationReport<T>> {
    if pre.len() != post.len() {
        return Err(Error::Shape(format!("{} pre returns but {} post returns", pre.len(), post.len())));
    }
    let pre_stats = ReturnStats::from_samples(pre)?;
    let post_stats = ReturnStats::from_samples(post)?;
    let gamma_samples: Vec<f64> = pre.iter().zip(post).map(|(a, b)| a - b).collect();
    let improved = gamma_samples.iter().filter(|g| **g <= 0.0).count();
    let negative_flag = match flag {
        FlagRule::Median => post_stats.median < pre_stats.median,
        FlagRule::Mean => post_stats.mean < pre_stats.mean,
    };
    Ok(AdaptationReport {
        task,
        pre: pre_stats,
        post: post_stats,
        prob_improve: improved as f64 / gamma_samples.len() as f64,
        gamma_samples,
        negative_flag,
    })
}

/// Adapt on fresh data, then compare `eval_rollouts` rollouts of the initial
/// and the adapted policy. Pair `k` of both policies runs on the same stream.
pub fn evaluate_adaptation<P: MetaProblem>(
    problem: &P,
    params: &PolicyParams,
    task: &P::Task,
    cfg: &MamlConfig,
    eval: &EvalConfig,
    stream: &RngStream,
) -> Result<AdaptationReport<P::Task>> {
    eval.validate()?;
    let data = problem.collect(task, params, cfg.rollout.num_trajectories, &stream.child(tags::ADAPT_DATA))?;
    let adapted = adapted_params(problem.model(), params, &data, cfg)?;
    let pairs = stream.child(tags::EVAL_PAIRS);
    let pre = problem.collect(task, params, eval.eval_rollouts, &pairs)?.returns(eval.gamma_eval)?;
    let post = problem.collect(task, &adapted, eval.eval_rollouts, &pairs)?.returns(eval.gamma_eval)?;
    adaptation_report(task.clone(), &pre, &post, eval.flag)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    /// Ordered by strictly increasing task parameter.
    pub reports: Vec<AdaptationReport>,
    pub training_range: (f64, f64),
}

pub const SWEEP_CSV_HEADER: &str = "task_param,n_eval,pre_median,pre_p5,pre_p25,pre_p75,pre_p95,pre_mean,\
post_median,post_p5,post_p25,post_p75,post_p95,post_mean,gamma_mean,prob_improve,negative_flag";

fn report_fields(r: &AdaptationReport) -> Vec<String> {
    let mut f = vec![r.pre.n.to_string()];
    f.extend(r.pre.columns().iter().map(|v| format!("{v:?}")));
    f.extend(r.post.columns().iter().map(|v| format!("{v:?}")));
    f.push(format!("{:?}", r.gamma_mean()));
    f.push(format!("{:?}", r.prob_improve));
    f.push(r.negative_flag.to_string());
    f
}

impl SweepReport {
    pub fn params(&self) -> Vec<f64> {
        self.reports.iter().map(|r| r.task.parameter()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(SWEEP_CSV_HEADER);
        out.push('\n');
        for r in &self.reports {
            writeln!(out, "{:?},{}", r.task.parameter(), report_fields(r).join(",")).unwrap();
        }
        out
    }

    /// Shading metadata line for plotting.
    pub fn training_range_line(&self) -> String {
        format!("training_range,{:?},{:?}\n", self.training_range.0, self.training_range.1)
    }
}

/// Side-by-side CSV of two sweeps over the same grid: `task_param`, then the
/// 16 report columns suffixed `_a`, then the same suffixed `_b`.
pub fn compare_csv(a: &SweepReport, b: &SweepReport) -> Result<String> {
    if a.params() != b.params() {
        return Err(Error::Shape("sweeps cover different task grids".into()));
    }
    let cols: Vec<&str> = SWEEP_CSV_HEADER.split(',').skip(1).collect();
    let mut out = String::from("task_param");
    for suffix in ["_a", "_b"] {
        for c in &cols {
            write!(out, ",{c}{suffix}").unwrap();
        }
    }
    out.push('\n');
    for (ra, rb) in a.reports.iter().zip(&b.reports) {
        writeln!(
            out,
            "{:?},{},{}",
            ra.task.parameter(),
            report_fields(ra).join(","),
            report_fields(rb).join(",")
        )
        .unwrap();
    }
    Ok(out)
}

/// Evaluate every grid task. Each task's stream depends only on its parameter,
/// so the result is independent of grid order and worker count.
pub fn task_sweep<P: MetaProblem<Task = TaskSpec>>(
    problem: &P,
    params: &PolicyParams,
    grid: &[TaskSpec],
    cfg: &MamlConfig,
    eval: &EvalConfig,
    training_range: (f64, f64),
    stream: &RngStream,
) -> Result<SweepReport> {
    if grid.is_empty() {
        return Err(Error::Empty("sweep grid has no tasks"));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(|a, b| a.parameter().total_cmp(&b.parameter()));
    if grid.windows(2).any(|w| w[0].parameter() >= w[1].parameter()) {
        return Err(Error::InvalidArgument("sweep grid has duplicate task parameters".into()));
    }
    let reports = grid
        .par_iter()
        .map(|task| {
            let s = stream.child(task.parameter().to_bits());
            evaluate_adaptation(problem, params, task, cfg, eval, &s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        reports,
        training_range,
    })
}

/// Maximal runs of consecutive flagged tasks as closed parameter intervals.
pub fn negative_region(sweep: &SweepReport) -> Vec<(f64, f64)> {
    let flags: Vec<bool> = sweep.reports.iter().map(|r| r.negative_flag).collect();
    flagged_runs(&sweep.params(), &flags)
}

pub fn flagged_runs(params: &[f64], flags: &[bool]) -> Vec<(f64, f64)> {
    let mut runs = Vec::new();
    let mut start: Option<usize> = None;
    for i in 0..=flags.len() {
        let on = flags.get(i).copied().unwrap_or(false);
        match (on, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push((params[s], params[i - 1]));
                start = None;
            }
            _ => {}
        }
    }
    runs
}

/// Per-task improvement probabilities and the fraction of tasks meeting
/// `p >= 1 - beta`.
pub fn constraint_probability_estimate(per_task: &[Vec<f64>], beta: f64) -> Result<(Vec<f64>, f64)> {
    if per_task.is_empty() {
        return Err(Error::Empty("no tasks"));
    }
    let probs = per_task
        .iter()
        .map(|g| crate::safe::improvement_probability(g))
        .collect::<Result<Vec<_>>>()?;
    let satisfied = probs.iter().filter(|p| **p >= 1.0 - beta).count();
    let frac = satisfied as f64 / probs.len() as f64;
    Ok((probs, frac))
}
