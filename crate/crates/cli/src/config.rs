//! Run configuration: one TOML file drives every command. Precedence is
//! command-line flag > config file > built-in default.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use aspo_core::corpus::CorpusConfig;
use aspo_core::margin::RewardLevel;
use aspo_core::pipeline::DEFAULT_NOISE_STEP;
use aspo_core::trainer::{LossMode, TrainingConfig, DEFAULT_ALPHA};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden_dim: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderSection {
    pub dim: usize,
    pub seed: u64,
}

impl Default for EmbedderSection {
    fn default() -> Self {
        EmbedderSection { dim: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    /// The bundled templated describer.
    #[default]
    Template,
    /// Decode with the toy language model.
    ToyLm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationSection {
    pub generator: GeneratorKind,
    pub noise_step: u32,
    pub seed: u64,
    /// Toy-LM checkpoint for `generator = "toy_lm"`; a fresh model from
    /// `model.seed` when absent.
    pub checkpoint: Option<PathBuf>,
    pub max_decode_len: usize,
    /// 0 means greedy decoding.
    pub temperature: f64,
}

impl Default for GenerationSection {
    fn default() -> Self {
        GenerationSection {
            generator: GeneratorKind::Template,
            noise_step: DEFAULT_NOISE_STEP,
            seed: 0,
            checkpoint: None,
            max_decode_len: 24,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Fraction of the dataset (taken from the end) held out by `train`.
    pub heldout_fraction: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            heldout_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportSection {
    pub alpha_grid: Vec<f64>,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection {
            alpha_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub embedder: EmbedderSection,
    pub corpus: CorpusConfig,
    pub generation: GenerationSection,
    pub training: TrainingConfig,
    pub eval: EvalSection,
    pub report: ReportSection,
}

/// Values given on the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub level: Option<RewardLevel>,
    pub loss_mode: Option<LossMode>,
    pub alpha: Option<f64>,
    pub noise_step: Option<u32>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// `seed` replaces every seed in the file.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.model.seed = s;
            self.corpus.seed = s;
            self.generation.seed = s;
            self.training.seed = s;
        }
        if let Some(l) = o.level {
            self.training.reward_level = l;
        }
        if let Some(m) = o.loss_mode {
            self.training.loss_mode = m;
        }
        if let Some(a) = o.alpha {
            self.training.alpha = a;
        }
        if let Some(t) = o.noise_step {
            self.generation.noise_step = t;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        if !(0.0..1.0).contains(&self.eval.heldout_fraction) {
            bail!("eval.heldout_fraction must lie in [0, 1)");
        }
        if self
            .report
            .alpha_grid
            .iter()
            .any(|a| !(0.0..=1.0).contains(a))
        {
            bail!("report.alpha_grid values must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn default_alpha() -> f64 {
        DEFAULT_ALPHA
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.training.beta, 0.1);
        assert_eq!(c.training.alpha, 0.5);
        assert_eq!(c.training.batch_size, 10);
        assert_eq!(c.generation.noise_step, 500);
    }

    #[test]
    fn shipped_example_config_is_the_default() {
        let text = include_str!("../../../configs/default.toml");
        assert_eq!(
            toml::from_str::<RunConfig>(text).unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c: RunConfig = toml::from_str("[training]\nalpha = 0.25\n").unwrap();
        assert_eq!(c.training.alpha, 0.25);
        assert_eq!(c.training.beta, 0.1);
        assert!(toml::from_str::<RunConfig>("[bogus]\nx = 1\n").is_err());
    }

    #[test]
    fn flags_win() {
        let mut c: RunConfig = toml::from_str("[training]\nalpha = 0.25\nseed = 3\n").unwrap();
        c.apply(&Overrides {
            alpha: Some(0.75),
            seed: Some(9),
            level: Some(RewardLevel::Token),
            ..Default::default()
        });
        assert_eq!(c.training.alpha, 0.75);
        assert_eq!((c.training.seed, c.corpus.seed, c.model.seed), (9, 9, 9));
        assert_eq!(c.training.reward_level, RewardLevel::Token);
    }
}
