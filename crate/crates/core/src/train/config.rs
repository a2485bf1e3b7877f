use serde::{Deserialize, Serialize};

use super::optimizer::Schedule;
use crate::error::{Error, Result};
use crate::objectives::DEFAULT_ALPHA;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    ContinualPretrain,
    MoeTune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::ContinualPretrain => "continual-pretrain",
            Stage::MoeTune => "moe-tune",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    /// Floor of the cosine decay.
    #[serde(default)]
    pub min_lr: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    /// Sequences per micro-batch.
    pub batch_size: usize,
    /// Micro-batches per optimizer step.
    pub grad_accum: usize,
    pub epochs: usize,
    /// Maximum packed sequence length.
    pub cutoff_len: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub seed: u64,
    /// Stops after this many optimizer steps even if epochs remain.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

fn default_schedule() -> Schedule {
    Schedule::CosineDecay
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

impl TrainConfig {
    /// Reported hyperparameters of the original two-stage recipe.
    pub fn paper_defaults(stage: Stage) -> Self {
        let (batch_size, grad_accum, epochs) = match stage {
            Stage::ContinualPretrain => (64, 16, 2),
            Stage::MoeTune => (8, 8, 3),
        };
        Self {
            stage,
            lr: 1e-5,
            schedule: Schedule::CosineDecay,
            min_lr: 0.0,
            warmup_steps: 0,
            batch_size,
            grad_accum,
            epochs,
            cutoff_len: 2048,
            alpha: DEFAULT_ALPHA,
            weight_decay: 0.0,
            seed: 42,
            max_steps: None,
        }
    }

    /// Settings that train the desk model within minutes on one core.
    pub fn desk(stage: Stage) -> Self {
        let (lr, epochs) = match stage {
            Stage::ContinualPretrain => (3e-3, 8),
            Stage::MoeTune => (3e-3, 12),
        };
        Self {
            stage,
            lr,
            schedule: Schedule::CosineDecay,
            min_lr: lr * 0.1,
            warmup_steps: 0,
            batch_size: 8,
            grad_accum: 1,
            epochs,
            cutoff_len: 256,
            alpha: DEFAULT_ALPHA,
            weight_decay: 0.0,
            seed: 0,
            max_steps: None,
        }
    }

    pub fn preset(name: &str, stage: Stage) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(stage)),
            "paper-defaults" => Ok(Self::paper_defaults(stage)),
            other => Err(Error::Config(format!(
                "unknown training preset `{other}` (expected `desk` or `paper-defaults`)"
            ))),
        }
    }

    pub fn validate(&self, max_seq_len: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.min_lr >= 0.0) || self.min_lr > self.lr {
            return bad(format!("min_lr {} must lie in [0, lr]", self.min_lr));
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.cutoff_len == 0 {
            return bad("batch_size, grad_accum and cutoff_len must be positive".into());
        }
        if self.cutoff_len > max_seq_len {
            return bad(format!(
                "cutoff_len {} exceeds model max_seq_len {max_seq_len}",
                self.cutoff_len
            ));
        }
        if !(self.alpha >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("alpha and weight_decay must be non-negative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let p = TrainConfig::paper_defaults(Stage::MoeTune);
        assert_eq!(
            (p.lr, p.batch_size, p.grad_accum, p.epochs, p.cutoff_len),
            (1e-5, 8, 8, 3, 2048)
        );
        let c = TrainConfig::paper_defaults(Stage::ContinualPretrain);
        assert_eq!((c.batch_size, c.grad_accum, c.epochs), (64, 16, 2));
        TrainConfig::desk(Stage::MoeTune).validate(256).unwrap();
        assert!(p.validate(256).is_err());
        assert!(TrainConfig::preset("x", Stage::MoeTune).is_err());
    }

    #[test]
    fn toml_round_trip_with_defaults() {
        let text = "stage = \"moe-tune\"\nlr = 0.001\nbatch_size = 4\ngrad_accum = 2\nepochs = 1\ncutoff_len = 128\nseed = 7\n";
        let c: TrainConfig = toml::from_str(text).unwrap();
        assert_eq!(c.alpha, DEFAULT_ALPHA);
        assert_eq!(c.schedule, Schedule::CosineDecay);
        let back: TrainConfig = toml::from_str(&toml::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(toml::from_str::<TrainConfig>(&format!("{text}bogus = 1\n")).is_err());
    }
}
