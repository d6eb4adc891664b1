//! The experiment config file: one JSON document holding every tunable,
//! overridden by command-line flags. The master seed is broadcast to all
//! stages so a config plus a seed fully determines every artifact.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use refusal_geometry::attack::SuffixAttackConfig;
use refusal_geometry::cone::ConeConfig;
use refusal_geometry::data::SyntheticTaskSpec;
use refusal_geometry::model::ModelConfig;
use refusal_geometry::rdo::{OptimConfig, TargetGenConfig};
use refusal_geometry::train::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepIndConfig {
    pub lambda: f64,
    pub layer_cutoff: f64,
    pub candidates: usize,
    pub epsilon: f64,
}

impl Default for RepIndConfig {
    fn default() -> Self {
        RepIndConfig {
            lambda: refusal_geometry::repind::DEFAULT_LAMBDA_IND,
            layer_cutoff: refusal_geometry::repind::DEFAULT_LAYER_CUTOFF,
            candidates: 5,
            epsilon: refusal_geometry::repind::DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Greedy decode length for completions.
    pub max_new_tokens: usize,
    /// Scaling-curve grid: multiples of the direction's extraction norm.
    pub alpha_grid_step: f64,
    pub alpha_grid_max: f64,
    /// Side-effect filter threshold used during direction selection.
    pub kl_threshold: f64,
    /// Cone evaluation sample count.
    pub cone_samples: usize,
    /// Validation prompts consumed by selection contexts.
    pub selection_prompts: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            max_new_tokens: 8,
            alpha_grid_step: 0.25,
            alpha_grid_max: 1.5,
            kl_threshold: refusal_geometry::interventions::DEFAULT_KL_THRESHOLD,
            cone_samples: 256,
            selection_prompts: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; mandatory (here or via --seed). Broadcast to every
    /// stage config below.
    pub seed: Option<u64>,
    pub task: SyntheticTaskSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub optim: OptimConfig,
    pub targets: TargetGenConfig,
    pub cone: ConeConfig,
    pub attack: SuffixAttackConfig,
    pub repind: RepIndConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(ExperimentConfig::default()),
            Some(p) => {
                let bytes = std::fs::read(p)
                    .with_context(|| format!("config file '{}' not readable", p.display()))?;
                let cfg: ExperimentConfig = serde_json::from_slice(&bytes)
                    .with_context(|| format!("config file '{}' is not valid", p.display()))?;
                Ok(cfg)
            }
        }
    }

    /// Applies the seed override and broadcasts the master seed.
    pub fn finalize(mut self, seed_flag: Option<u64>) -> Result<Self> {
        let seed = match seed_flag.or(self.seed) {
            Some(s) => s,
            None => bail!("field 'seed': a master seed is mandatory (set it in the config or pass --seed)"),
        };
        self.seed = Some(seed);
        self.task.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.optim.seed = seed;
        self.attack.seed = seed;
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("finalize() sets the seed")
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Alpha grid in absolute units for a direction norm.
pub fn alpha_grid(eval: &EvalConfig, norm: f64) -> Vec<f64> {
    let mut grid = Vec::new();
    let mut mult = 0.0;
    while mult <= eval.alpha_grid_max + 1e-12 {
        grid.push(mult * norm);
        mult += eval.alpha_grid_step;
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory() {
        let cfg = ExperimentConfig::default();
        let err = cfg.finalize(None).unwrap_err();
        assert!(err.to_string().contains("seed"));
    }

    #[test]
    fn master_seed_broadcasts() {
        let cfg = ExperimentConfig::default().finalize(Some(42)).unwrap();
        assert_eq!(cfg.task.seed, 42);
        assert_eq!(cfg.model.seed, 42);
        assert_eq!(cfg.optim.seed, 42);
    }

    #[test]
    fn unknown_fields_rejected() {
        let err = serde_json::from_str::<ExperimentConfig>("{\"sede\": 1}").unwrap_err();
        assert!(err.to_string().contains("sede"));
    }

    #[test]
    fn grid_is_zero_anchored() {
        let g = alpha_grid(&EvalConfig::default(), 10.0);
        assert_eq!(g[0], 0.0);
        assert_eq!(g.len(), 7);
        assert!((g[6] - 15.0).abs() < 1e-9);
    }
}
