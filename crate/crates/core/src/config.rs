//! Flat `key = value` run configuration.
//!
//! Lines are `key = value` with dotted keys; `#` starts a comment. Keys not
//! listed here are rejected, as are repeated keys.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::analysis::{EvalConfig, FlagRule};
use crate::env::{task_grid, EnvConfig, PointMass, TaskDistribution, TaskFamily, TaskSpec};
use crate::maml::{Baseline, MamlConfig, OuterOptimizer, PointMassProblem};
use crate::safe::SafetyConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub family: TaskFamily,
    pub env: EnvConfig,
    pub task_low: f64,
    pub task_high: f64,
    pub maml: MamlConfig,
    /// Adam `(beta1, beta2, eps)`, kept while SGD is selected.
    pub adam: (f64, f64, f64),
    pub hidden_sizes: Vec<usize>,
    pub log_std_init: f64,
    pub safe_enabled: bool,
    pub safety: SafetyConfig,
    pub sweep_low: f64,
    pub sweep_high: f64,
    pub sweep_step: f64,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            family: TaskFamily::GoalVelocity,
            env: EnvConfig::default(),
            task_low: 0.0,
            task_high: 2.0,
            maml: MamlConfig::default(),
            adam: (0.9, 0.999, 1e-8),
            hidden_sizes: vec![32, 32],
            log_std_init: -0.5,
            safe_enabled: false,
            safety: SafetyConfig::default(),
            sweep_low: 0.0,
            sweep_high: 3.0,
            sweep_step: 0.1,
            eval: EvalConfig::default(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "env.family",
    "env.horizon",
    "env.dt",
    "env.v_max",
    "env.c_ctrl",
    "task.low",
    "task.high",
    "rollout.num_trajectories",
    "rollout.gamma",
    "inner.alpha",
    "inner.first_order",
    "outer.meta_batch_size",
    "outer.iterations",
    "outer.lr",
    "outer.optimizer",
    "outer.adam_beta1",
    "outer.adam_beta2",
    "outer.adam_eps",
    "outer.grad_clip_norm",
    "outer.baseline",
    "policy.hidden_sizes",
    "policy.log_std_init",
    "safe.enabled",
    "safe.lambda",
    "safe.beta",
    "safe.delta",
    "safe.dual_lr",
    "safe.eval_trajectories",
    "sweep.low",
    "sweep.high",
    "sweep.step",
    "sweep.eval_rollouts",
    "sweep.gamma_eval",
    "sweep.flag",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

impl Config {
    /// Defaults overridden by the lines of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: `{key}` given twice", i + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip(e))))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            context: format!("reading config {}", path.display()),
            source,
        })?;
        Self::parse(&text)
    }

    /// Set one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "env.family" => self.family = value.parse().map_err(|_| bad(key, value))?,
            "env.horizon" => self.env.horizon = parse(key, value)?,
            "env.dt" => self.env.dt = parse(key, value)?,
            "env.v_max" => self.env.v_max = parse(key, value)?,
            "env.c_ctrl" => self.env.c_ctrl = parse(key, value)?,
            "task.low" => self.task_low = parse(key, value)?,
            "task.high" => self.task_high = parse(key, value)?,
            "rollout.num_trajectories" => self.maml.rollout.num_trajectories = parse(key, value)?,
            "rollout.gamma" => self.maml.rollout.gamma = parse(key, value)?,
            "inner.alpha" => self.maml.adapt.alpha = parse(key, value)?,
            "inner.first_order" => self.maml.adapt.first_order = parse_bool(key, value)?,
            "outer.meta_batch_size" => self.maml.meta.meta_batch_size = parse(key, value)?,
            "outer.iterations" => self.maml.meta.iterations = parse(key, value)?,
            "outer.lr" => self.maml.meta.outer_lr = parse(key, value)?,
            "outer.optimizer" => {
                self.maml.meta.optimizer = match value {
                    "sgd" => OuterOptimizer::Sgd,
                    "adam" => self.adam_optimizer(),
                    _ => return Err(bad(key, value)),
                }
            }
            "outer.adam_beta1" | "outer.adam_beta2" | "outer.adam_eps" => {
                let v: f64 = parse(key, value)?;
                match key {
                    "outer.adam_beta1" => self.adam.0 = v,
                    "outer.adam_beta2" => self.adam.1 = v,
                    _ => self.adam.2 = v,
                }
                if let OuterOptimizer::Adam { .. } = self.maml.meta.optimizer {
                    self.maml.meta.optimizer = self.adam_optimizer();
                }
            }
            "outer.grad_clip_norm" => {
                self.maml.meta.grad_clip_norm = if value == "none" { None } else { Some(parse(key, value)?) }
            }
            "outer.baseline" => self.maml.meta.baseline = value.parse::<Baseline>().map_err(|_| bad(key, value))?,
            "policy.hidden_sizes" => {
                self.hidden_sizes = if value.is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?
                }
            }
            "policy.log_std_init" => self.log_std_init = parse(key, value)?,
            "safe.enabled" => self.safe_enabled = parse_bool(key, value)?,
            "safe.lambda" => self.safety.lambda = parse(key, value)?,
            "safe.beta" => self.safety.beta = parse(key, value)?,
            "safe.delta" => self.safety.delta = parse(key, value)?,
            "safe.dual_lr" => self.safety.dual_lr = parse(key, value)?,
            "safe.eval_trajectories" => self.safety.eval_trajectories = parse(key, value)?,
            "sweep.low" => self.sweep_low = parse(key, value)?,
            "sweep.high" => self.sweep_high = parse(key, value)?,
            "sweep.step" => self.sweep_step = parse(key, value)?,
            "sweep.eval_rollouts" => self.eval.eval_rollouts = parse(key, value)?,
            "sweep.gamma_eval" => self.eval.gamma_eval = parse(key, value)?,
            "sweep.flag" => self.eval.flag = value.parse::<FlagRule>().map_err(|_| bad(key, value))?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    fn adam_optimizer(&self) -> OuterOptimizer {
        let (beta1, beta2, eps) = self.adam;
        OuterOptimizer::Adam { beta1, beta2, eps }
    }

    /// Check every field against the preconditions of the module that uses it.
    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(strip(e));
        self.env.validate().map_err(wrap)?;
        self.distribution().map_err(wrap)?;
        self.maml.validate().map_err(wrap)?;
        self.safety.validate().map_err(wrap)?;
        self.eval.validate().map_err(wrap)?;
        if self.hidden_sizes.contains(&0) {
            return Err(Error::Config("policy.hidden_sizes entries must be >= 1".into()));
        }
        if !self.log_std_init.is_finite() {
            return Err(Error::Config("policy.log_std_init must be finite".into()));
        }
        let (b1, b2, eps) = self.adam;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2) && eps > 0.0) {
            return Err(Error::Config("invalid Adam constants".into()));
        }
        self.sweep_grid().map_err(wrap)?;
        Ok(())
    }

    /// Every key with its resolved value, one per line, in [`KEYS`] order.
    pub fn resolved(&self) -> String {
        let m = &self.maml;
        let (b1, b2, eps) = self.adam;
        let optimizer = match m.meta.optimizer {
            OuterOptimizer::Sgd => "sgd",
            OuterOptimizer::Adam { .. } => "adam",
        };
        let values: Vec<String> = vec![
            self.seed.to_string(),
            self.family.to_string(),
            self.env.horizon.to_string(),
            format!("{:?}", self.env.dt),
            format!("{:?}", self.env.v_max),
            format!("{:?}", self.env.c_ctrl),
            format!("{:?}", self.task_low),
            format!("{:?}", self.task_high),
            m.rollout.num_trajectories.to_string(),
            format!("{:?}", m.rollout.gamma),
            format!("{:?}", m.adapt.alpha),
            m.adapt.first_order.to_string(),
            m.meta.meta_batch_size.to_string(),
            m.meta.iterations.to_string(),
            format!("{:?}", m.meta.outer_lr),
            optimizer.to_string(),
            format!("{b1:?}"),
            format!("{b2:?}"),
            format!("{eps:?}"),
            m.meta.grad_clip_norm.map_or("none".to_string(), |c| format!("{c:?}")),
            match m.meta.baseline {
                Baseline::None => "none",
                Baseline::MeanReturn => "mean_return",
                Baseline::Standardized => "standardized",
            }
            .to_string(),
            self.hidden_sizes.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            format!("{:?}", self.log_std_init),
            self.safe_enabled.to_string(),
            format!("{:?}", self.safety.lambda),
            format!("{:?}", self.safety.beta),
            format!("{:?}", self.safety.delta),
            format!("{:?}", self.safety.dual_lr),
            self.safety.eval_trajectories.to_string(),
            format!("{:?}", self.sweep_low),
            format!("{:?}", self.sweep_high),
            format!("{:?}", self.sweep_step),
            self.eval.eval_rollouts.to_string(),
            format!("{:?}", self.eval.gamma_eval),
            match self.eval.flag {
                FlagRule::Median => "median",
                FlagRule::Mean => "mean",
            }
            .to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 of [`Config::resolved`], hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.resolved().as_bytes()))
    }

    pub fn distribution(&self) -> Result<TaskDistribution> {
        TaskDistribution::new(self.family, self.task_low, self.task_high)
    }

    pub fn problem(&self) -> Result<PointMassProblem> {
        PointMassProblem::new(PointMass::new(self.env.clone())?, self.hidden_sizes.clone())
    }

    pub fn sweep_grid(&self) -> Result<Vec<TaskSpec>> {
        task_grid(self.family, self.sweep_low, self.sweep_high, self.sweep_step)
    }
}

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("`{key}`: invalid value `{value}`"))
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(msg) => msg,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_resolved_text() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let again = Config::parse(&cfg.resolved()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.digest(), cfg.digest());
        assert_eq!(cfg.resolved().lines().count(), KEYS.len());
    }

    #[test]
    fn parses_values_and_comments() {
        let cfg = Config::parse(
            "# comment\nseed = 7\ninner.alpha = 0.0 # trailing\nouter.grad_clip_norm = none\n\
             policy.hidden_sizes = 8, 4\nouter.optimizer = sgd\nsweep.flag = mean\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.maml.adapt.alpha, 0.0);
        assert_eq!(cfg.maml.meta.grad_clip_norm, None);
        assert_eq!(cfg.hidden_sizes, vec![8, 4]);
        assert_eq!(cfg.maml.meta.optimizer, OuterOptimizer::Sgd);
        assert_eq!(cfg.eval.flag, FlagRule::Mean);
        assert_eq!(Config::parse(&cfg.resolved()).unwrap(), cfg);
    }

    #[test]
    fn adam_constants_survive_optimizer_order() {
        let a = Config::parse("outer.adam_beta1 = 0.5\nouter.optimizer = sgd").unwrap();
        let b = Config::parse("outer.optimizer = sgd\nouter.adam_beta1 = 0.5").unwrap();
        assert_eq!(a.resolved(), b.resolved());
        let c = Config::parse("outer.optimizer = sgd\nouter.adam_beta1 = 0.5\n").unwrap();
        let mut c2 = c.clone();
        c2.set("outer.optimizer", "adam").unwrap();
        assert_eq!(
            c2.maml.meta.optimizer,
            OuterOptimizer::Adam {
                beta1: 0.5,
                beta2: 0.999,
                eps: 1e-8
            }
        );
    }

    #[test]
    fn rejects_typos_duplicates_and_bad_values() {
        assert!(matches!(Config::parse("inner.alpah = 0.1"), Err(Error::Config(_))));
        assert!(Config::parse("seed = 1\nseed = 2").is_err());
        assert!(Config::parse("seed = -1").is_err());
        assert!(Config::parse("inner.first_order = yes").is_err());
        assert!(Config::parse("just a line").is_err());
        for bad in [
            "rollout.gamma = 1.5",
            "inner.alpha = -0.1",
            "outer.meta_batch_size = 0",
            "safe.beta = 1.0",
            "task.low = 3\ntask.high = 1",
            "env.dt = 0",
            "sweep.step = 0",
            "policy.hidden_sizes = 0",
        ] {
            let cfg = Config::parse(bad).unwrap();
            assert!(cfg.validate().is_err(), "{bad}");
        }
    }
}
