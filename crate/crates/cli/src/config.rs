//! Run configuration: a TOML file whose every section is optional. Values
//! come from command-line flags first, then the file, then the defaults
//! below.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use moetune_core::model::ModelConfig;
use moetune_core::train::{Stage, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub model: ModelSection,
    pub synth: SynthSection,
    pub pretrain: TrainSection,
    pub tune: TrainSection,
    pub infer: InferSection,
    pub analyze: AnalyzeSection,
    pub annotate: AnnotateSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `desk` or `llama-3b-like`.
    pub preset: String,
    pub experts: Option<usize>,
    pub top_k: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            experts: None,
            top_k: None,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let c = ModelConfig::preset(&self.preset)?;
        let (e, k) = (c.total_experts, c.active_experts);
        let c = c.with_experts(self.experts.unwrap_or(e), self.top_k.unwrap_or(k));
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub per_class: usize,
    pub test_per_class: usize,
    pub safe_fraction: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            per_class: 8,
            test_per_class: 4,
            safe_fraction: 0.5,
        }
    }
}

/// Overrides applied on top of a named training preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// `desk` or `paper-defaults`.
    pub preset: String,
    pub lr: Option<f64>,
    pub min_lr: Option<f64>,
    pub warmup_steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub grad_accum: Option<usize>,
    pub epochs: Option<usize>,
    pub cutoff_len: Option<usize>,
    pub alpha: Option<f64>,
    pub weight_decay: Option<f64>,
    pub max_steps: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            lr: None,
            min_lr: None,
            warmup_steps: None,
            batch_size: None,
            grad_accum: None,
            epochs: None,
            cutoff_len: None,
            alpha: None,
            weight_decay: None,
            max_steps: None,
        }
    }
}

impl TrainSection {
    pub fn resolve(&self, stage: Stage, seed: u64) -> Result<TrainConfig> {
        let mut c = TrainConfig::preset(&self.preset, stage)?;
        if let Some(lr) = self.lr {
            // Keep the preset's floor ratio unless the floor is given too.
            c.min_lr *= lr / c.lr;
            c.lr = lr;
        }
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(
            min_lr,
            warmup_steps,
            batch_size,
            grad_accum,
            epochs,
            cutoff_len,
            alpha,
            weight_decay
        );
        c.max_steps = self.max_steps.or(c.max_steps);
        c.seed = seed;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferSection {
    pub n_votes: usize,
    pub max_new_tokens: usize,
    /// Greedy decoding when absent.
    pub temperature: Option<f64>,
}

impl Default for InferSection {
    fn default() -> Self {
        Self {
            n_votes: 1,
            max_new_tokens: 96,
            temperature: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    /// First, middle and last layer when absent.
    pub layers: Option<Vec<usize>>,
    pub underutilized_threshold: f64,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self {
            layers: None,
            underutilized_threshold: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotateSection {
    pub threshold: f64,
    pub limit: Option<usize>,
    /// Recorded `{prompt, response}` JSONL files for the two generators.
    /// Template generators are used when absent.
    pub replay: Option<[PathBuf; 2]>,
}

impl Default for AnnotateSection {
    fn default() -> Self {
        Self {
            threshold: moetune_annotate::ACCEPT_THRESHOLD,
            limit: None,
            replay: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let c: Self = toml::from_str(&text).with_context(|| format!("config {}", path.display()))?;
        if c.infer.n_votes == 0 {
            bail!("config {}: infer.n_votes must be at least 1", path.display());
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.model.resolve().unwrap(), ModelConfig::desk());
    }

    #[test]
    fn sections_override_presets() {
        let c: RunConfig = toml::from_str(
            "seed = 3\n[model]\nexperts = 4\ntop_k = 1\n[tune]\nlr = 0.001\nalpha = 0.5\nmax_steps = 7\n",
        )
        .unwrap();
        let m = c.model.resolve().unwrap();
        assert_eq!((m.total_experts, m.active_experts), (4, 1));
        let t = c.tune.resolve(Stage::MoeTune, c.seed).unwrap();
        let desk = TrainConfig::desk(Stage::MoeTune);
        assert_eq!((t.lr, t.alpha, t.max_steps, t.seed), (0.001, 0.5, Some(7), 3));
        assert!((t.min_lr / t.lr - desk.min_lr / desk.lr).abs() < 1e-12);
        assert_eq!(t.batch_size, desk.batch_size);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[tune]\nlearning_rate = 1.0\n").is_err());
        assert!(toml::from_str::<RunConfig>("colour = 1\n").is_err());
        let bad: RunConfig = toml::from_str("[model]\ntop_k = 9\n").unwrap();
        assert!(bad.model.resolve().is_err());
    }
}
