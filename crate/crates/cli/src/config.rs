//! JSON experiment configuration. The top-level `"experiment"` field selects
//! the experiment; every other field has a default, so `{"experiment": "lq-value"}`
//! is a complete config.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const EXPERIMENTS: [&str; 4] = ["lq-value", "lq-rollout", "cartpole", "mdp-demo"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub experiment: Experiment,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Overrides the experiment's primary Monte-Carlo sample count.
    #[serde(default)]
    pub samples: Option<usize>,
    /// SNIS candidate count, for experiments that sample the policy that way.
    #[serde(default)]
    pub candidates: Option<usize>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_seed() -> u64 {
    20240901
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "kebab-case")]
pub enum Experiment {
    LqValue(LqValueConfig),
    LqRollout(LqRolloutConfig),
    Cartpole(CartpoleConfig),
    MdpDemo(MdpDemoConfig),
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::LqValue(_) => "lq-value",
            Experiment::LqRollout(_) => "lq-rollout",
            Experiment::Cartpole(_) => "cartpole",
            Experiment::MdpDemo(_) => "mdp-demo",
        }
    }
}

/// Scalar linear system `x' = a x + b u` with constant weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LqValueConfig {
    pub a: f64,
    pub b: f64,
    pub q: f64,
    pub sigma: f64,
    pub horizon: usize,
    pub grid: GridSpec,
    /// Sample counts, one CSV column each; the last one also gets a
    /// standard-error column.
    pub sample_sizes: Vec<usize>,
}

impl Default for LqValueConfig {
    fn default() -> Self {
        Self {
            a: 0.85,
            b: 0.10,
            q: 3.0,
            sigma: 1.5,
            horizon: 30,
            grid: GridSpec { start: -3.0, stop: 3.0, step: 0.5 },
            sample_sizes: vec![100, 1000, 3000],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl GridSpec {
    pub fn points(&self) -> Vec<f64> {
        let count = ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1;
        (0..count).map(|i| self.start + i as f64 * self.step).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicySampler {
    /// Exact Gaussian policy from the Riccati solution.
    Analytic,
    /// Self-normalized importance sampling on Monte-Carlo desirability.
    Snis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LqRolloutConfig {
    pub a: f64,
    pub b: f64,
    pub horizon: usize,
    pub x0: f64,
    /// `(Q, Σ)` pairs.
    pub pairs: Vec<(f64, f64)>,
    pub paths_per_pair: usize,
    /// Extra paths per pair for the sampled control-variance comparison.
    pub variance_paths: usize,
    pub sampler: PolicySampler,
    /// Inner rollouts per SNIS candidate.
    pub inner_samples: usize,
    pub snis_candidates: usize,
}

impl Default for LqRolloutConfig {
    fn default() -> Self {
        Self {
            a: 0.85,
            b: 0.10,
            horizon: 30,
            x0: 1.0,
            pairs: vec![(3.0, 0.5), (3.0, 1.5), (3.0, 10.0), (30.0, 1.0)],
            paths_per_pair: 3,
            variance_paths: 1000,
            sampler: PolicySampler::Analytic,
            inner_samples: 256,
            snis_candidates: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CartpoleConfig {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub length: f64,
    pub gravity: f64,
    pub dt: f64,
    /// Admissible forces; also the noise support.
    pub forces: Vec<f64>,
    pub sigma: f64,
    pub weights: [f64; 4],
    pub x0: [f64; 4],
    pub horizon: usize,
    pub rollouts: usize,
    /// Rollouts per action for each desirability estimate.
    pub samples_per_action: usize,
}

impl Default for CartpoleConfig {
    fn default() -> Self {
        Self {
            cart_mass: 1.0,
            pole_mass: 0.1,
            length: 1.0,
            gravity: 9.8,
            dt: 0.05,
            forces: (-10..=10).map(|i| 2.0 * i as f64).collect(),
            sigma: 5.0,
            weights: [7.0, 2.5, 7.0, 2.5],
            x0: [2.0, 0.0, 0.5, 0.0],
            horizon: 60,
            rollouts: 50,
            samples_per_action: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MdpDemoConfig {
    /// Row-stochastic `p⁰(x'|x)` per stage, or a single matrix for all stages.
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// Cost vectors `ℓ_0..ℓ_N`.
    pub costs: Vec<Vec<f64>>,
}

impl Default for MdpDemoConfig {
    fn default() -> Self {
        // Random walk on a 5-state line with a cheap goal at the right end.
        let n = 5;
        let row = |i: usize| {
            let mut r = vec![0.0; n];
            let left = i.saturating_sub(1);
            let right = (i + 1).min(n - 1);
            r[left] += 1.0 / 3.0;
            r[i] += 1.0 / 3.0;
            r[right] += 1.0 / 3.0;
            r
        };
        let running = vec![1.0, 1.0, 0.8, 0.5, 0.0];
        let terminal = vec![4.0, 3.0, 2.0, 1.0, 0.0];
        let horizon = 6;
        let mut costs = vec![running; horizon];
        costs.push(terminal);
        Self { transitions: vec![(0..n).map(row).collect()], costs }
    }
}

impl ExperimentConfig {
    /// Config with all defaults for a named experiment.
    pub fn defaults_for(name: &str) -> Result<Self> {
        if !EXPERIMENTS.contains(&name) {
            bail!("unknown experiment '{name}' (expected one of {})", EXPERIMENTS.join(", "));
        }
        Self::from_json(&format!("{{\"experiment\": \"{name}\"}}"))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).context("parsing experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text)
    }

    /// Folds the top-level `samples` and `candidates` into the experiment block.
    pub fn apply_overrides(&mut self) {
        let samples = self.samples;
        let candidates = self.candidates;
        match &mut self.experiment {
            Experiment::LqValue(c) => {
                if let (Some(s), Some(last)) = (samples, c.sample_sizes.last_mut()) {
                    *last = s;
                }
            }
            Experiment::LqRollout(c) => {
                if let Some(s) = samples {
                    c.inner_samples = s;
                }
                if let Some(m) = candidates {
                    c.snis_candidates = m;
                }
            }
            Experiment::Cartpole(c) => {
                if let Some(s) = samples {
                    c.samples_per_action = s;
                }
            }
            Experiment::MdpDemo(_) => {}
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            bail!("workers must be positive");
        }
        if self.samples == Some(0) {
            bail!("samples must be positive");
        }
        if let Some(m) = self.candidates {
            if m < 2 {
                bail!("candidates must be at least 2");
            }
        }
        match &self.experiment {
            Experiment::LqValue(c) => {
                positive("sigma", c.sigma)?;
                positive("q", c.q)?;
                nonzero("b", c.b)?;
                if c.horizon == 0 {
                    bail!("horizon must be positive");
                }
                if !(c.grid.step.is_finite() && c.grid.start.is_finite() && c.grid.stop.is_finite())
                    || c.grid.step <= 0.0
                    || c.grid.stop < c.grid.start
                {
                    bail!("grid needs step > 0 and stop >= start");
                }
                if c.sample_sizes.is_empty() || c.sample_sizes.contains(&0) {
                    bail!("sample_sizes must be nonempty and positive");
                }
            }
            Experiment::LqRollout(c) => {
                nonzero("b", c.b)?;
                if c.horizon == 0 || c.paths_per_pair == 0 {
                    bail!("horizon and paths_per_pair must be positive");
                }
                if c.pairs.is_empty() {
                    bail!("at least one (Q, Sigma) pair required");
                }
                for &(q, s) in &c.pairs {
                    positive("pair Q", q)?;
                    positive("pair Sigma", s)?;
                }
                if c.sampler == PolicySampler::Snis && (c.snis_candidates < 2 || c.inner_samples == 0) {
                    bail!("SNIS needs candidates >= 2 and inner_samples >= 1");
                }
            }
            Experiment::Cartpole(c) => {
                for (name, v) in [
                    ("cart_mass", c.cart_mass),
                    ("pole_mass", c.pole_mass),
                    ("length", c.length),
                    ("gravity", c.gravity),
                    ("dt", c.dt),
                    ("sigma", c.sigma),
                ] {
                    positive(name, v)?;
                }
                if c.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
                    bail!("cost weights must be nonnegative");
                }
                if c.forces.is_empty() {
                    bail!("force set must be nonempty");
                }
                if c.horizon == 0 || c.rollouts == 0 || c.samples_per_action == 0 {
                    bail!("horizon, rollouts and samples must be positive");
                }
            }
            Experiment::MdpDemo(c) => {
                if c.costs.len() < 2 {
                    bail!("mdp-demo needs costs for stages 0..N with N >= 1");
                }
                if c.transitions.is_empty() {
                    bail!("mdp-demo needs at least one transition matrix");
                }
            }
        }
        Ok(())
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        bail!("{name} must be positive and finite");
    }
    Ok(())
}

fn nonzero(name: &str, v: f64) -> Result<()> {
    if !v.is_finite() || v == 0.0 {
        bail!("{name} must be finite and nonzero");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_experiment_has_zero_config_defaults() {
        for name in EXPERIMENTS {
            let cfg = ExperimentConfig::defaults_for(name).unwrap();
            assert_eq!(cfg.experiment.name(), name);
            assert_eq!(cfg.workers, 1);
        }
        assert!(ExperimentConfig::defaults_for("nope").is_err());
    }

    #[test]
    fn defaults_reproduce_reference_setups() {
        let Experiment::LqValue(c) = ExperimentConfig::defaults_for("lq-value").unwrap().experiment else { panic!() };
        assert_eq!((c.a, c.b, c.q, c.sigma, c.horizon), (0.85, 0.10, 3.0, 1.5, 30));
        assert_eq!(c.grid.points().len(), 13);
        let Experiment::Cartpole(c) = ExperimentConfig::defaults_for("cartpole").unwrap().experiment else { panic!() };
        assert_eq!(c.forces.len(), 21);
        assert_eq!((c.forces[0], c.forces[20]), (-20.0, 20.0));
        assert_eq!(c.samples_per_action, 5000);
    }

    #[test]
    fn partial_config_and_overrides() {
        let mut cfg = ExperimentConfig::from_json(
            r#"{"experiment": "lq-value", "seed": 7, "samples": 500, "grid": {"start": 0, "stop": 1, "step": 0.25}}"#,
        )
        .unwrap();
        cfg.apply_overrides();
        let Experiment::LqValue(c) = &cfg.experiment else { panic!() };
        assert_eq!(c.sample_sizes, vec![100, 1000, 500]);
        assert_eq!(c.grid.points(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"experiment": "lq-value", "sigma": -1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"experiment": "lq-value", "bogus": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"experiment": "cartpole", "workers": 0}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"experiment": "cartpole", "forces": []}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"experiment": "unknown"}"#).is_err());
    }

    #[test]
    fn serialized_config_round_trips() {
        for name in EXPERIMENTS {
            let cfg = ExperimentConfig::defaults_for(name).unwrap();
            let text = serde_json::to_string(&cfg).unwrap();
            assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        }
    }
}
