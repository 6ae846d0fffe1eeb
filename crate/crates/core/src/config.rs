//! Model, training and run configuration.
//!
//! Configs are read from TOML with every key optional; missing keys take the
//! defaults below. `validate` reports the first offending field by its full
//! dotted name.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::GenConfig;
use crate::decorrel::Centering;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// Encoder feed-forward width as a multiple of `d_model`.
    pub ffn_mult: usize,
    pub experts: usize,
    pub top_k: usize,
    /// Expert hidden width as a multiple of `d_model`.
    pub expert_hidden_mult: usize,
    /// Fusion softmax temperature.
    pub epsilon: f64,
    pub ts_features: usize,
    pub ts_max_steps: usize,
    pub image_size: usize,
    pub image_channels: usize,
    pub patch_size: usize,
    pub note_features: usize,
    pub note_max_tokens: usize,
    pub combination_tokens: bool,
    pub decorrelation: bool,
    pub moe: bool,
    pub centering: Centering,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            layers: 4,
            heads: 2,
            ffn_mult: 2,
            experts: 10,
            top_k: 2,
            expert_hidden_mult: 2,
            epsilon: 1.0,
            ts_features: 76,
            ts_max_steps: 24,
            image_size: 16,
            image_channels: 1,
            patch_size: 4,
            note_features: 32,
            note_max_tokens: 8,
            combination_tokens: true,
            decorrelation: true,
            moe: true,
            centering: Centering::Mean,
        }
    }
}

fn positive(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::config(field, "must be positive"));
    }
    Ok(())
}

fn positive_f(field: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::config(field, format!("must be a positive finite number, got {v}")));
    }
    Ok(())
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        positive("model.d_model", self.d_model)?;
        positive("model.layers", self.layers)?;
        positive("model.heads", self.heads)?;
        if self.d_model % self.heads != 0 {
            return Err(Error::config("model.heads", format!("must divide d_model={}", self.d_model)));
        }
        if self.d_model < 2 {
            return Err(Error::config("model.d_model", "must be at least 2 for token covariance"));
        }
        positive("model.ffn_mult", self.ffn_mult)?;
        positive("model.experts", self.experts)?;
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(Error::config("model.top_k", format!("must be in 1..={}", self.experts)));
        }
        positive("model.expert_hidden_mult", self.expert_hidden_mult)?;
        positive_f("model.epsilon", self.epsilon)?;
        positive("model.ts_features", self.ts_features)?;
        positive("model.ts_max_steps", self.ts_max_steps)?;
        positive("model.image_size", self.image_size)?;
        positive("model.image_channels", self.image_channels)?;
        positive("model.patch_size", self.patch_size)?;
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config("model.patch_size", "must divide image_size"));
        }
        positive("model.note_features", self.note_features)?;
        positive("model.note_max_tokens", self.note_max_tokens)?;
        Ok(())
    }

    pub fn image_tokens(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    pub fn patch_width(&self) -> usize {
        self.patch_size * self.patch_size * self.image_channels
    }

    pub fn with_ablation(mut self, ablation: Option<Ablation>) -> Self {
        if let Some(a) = ablation {
            let (comb, decor, moe) = a.toggles();
            self.combination_tokens = comb;
            self.decorrelation = decor;
            self.moe = moe;
        }
        self
    }
}

/// Module ablations: which of combination tokens, decorrelation and the
/// mixture of experts stay enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    #[serde(rename = "a-")]
    A,
    #[serde(rename = "b-")]
    B,
    #[serde(rename = "c-")]
    C,
    #[serde(rename = "d-")]
    D,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::A, Ablation::B, Ablation::C, Ablation::D];

    /// `(combination tokens, decorrelation, moe)`
    pub fn toggles(self) -> (bool, bool, bool) {
        match self {
            Ablation::A => (false, false, false),
            Ablation::B => (true, false, false),
            Ablation::C => (true, true, false),
            Ablation::D => (true, false, true),
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Ablation::A => "a-",
            Ablation::B => "b-",
            Ablation::C => "c-",
            Ablation::D => "d-",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "a-" | "a" => Ok(Ablation::A),
            "b-" | "b" => Ok(Ablation::B),
            "c-" | "c" => Ok(Ablation::C),
            "d-" | "d" => Ok(Ablation::D),
            other => Err(Error::config("ablate", format!("unknown ablation code `{other}` (expected a-, b-, c- or d-)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskOrder {
    #[default]
    Registry,
    Shuffled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Weight of the decorrelation term.
    pub beta: f64,
    /// Weight of the expert load-balance term.
    pub balance_weight: f64,
    pub seed: u64,
    /// Per-epoch multiplicative decay of every task's loss weight (1 = constant).
    pub task_weight_decay: f64,
    /// Decoupled L2 decay applied by the optimiser (0 = off).
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub task_order: TaskOrder,
    /// Evaluate every task's validation split after each task pass instead of
    /// only the task just trained.
    pub eval_all_tasks: bool,
    /// Std of Gaussian noise added to router logits during training (0 = off).
    pub router_noise: f64,
    /// Whether the task weight multiplies the regularisers as well as the
    /// prediction loss.
    pub weight_regularizers: bool,
    pub max_learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-3,
            epochs: 40,
            beta: 0.1,
            balance_weight: 0.01,
            seed: 0,
            task_weight_decay: 1.0,
            weight_decay: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            task_order: TaskOrder::Registry,
            eval_all_tasks: false,
            router_noise: 0.0,
            weight_regularizers: true,
            max_learning_rate: 1e-2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        positive("train.batch_size", self.batch_size)?;
        positive("train.epochs", self.epochs)?;
        positive_f("train.learning_rate", self.learning_rate)?;
        positive_f("train.max_learning_rate", self.max_learning_rate)?;
        if self.learning_rate > self.max_learning_rate {
            return Err(Error::config(
                "train.learning_rate",
                format!("exceeds max_learning_rate {}", self.max_learning_rate),
            ));
        }
        for (f, v) in [
            ("train.beta", self.beta),
            ("train.balance_weight", self.balance_weight),
            ("train.weight_decay", self.weight_decay),
            ("train.router_noise", self.router_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(f, format!("must be finite and non-negative, got {v}")));
            }
        }
        if !(self.task_weight_decay > 0.0 && self.task_weight_decay <= 1.0) {
            return Err(Error::config("train.task_weight_decay", "must be in (0, 1]"));
        }
        for (f, v) in [("train.adam_beta1", self.adam_beta1), ("train.adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(f, "must be in [0, 1)"));
            }
        }
        positive_f("train.adam_eps", self.adam_eps)?;
        Ok(())
    }
}

/// Everything a command may need, as read from one TOML file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gen: GenConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| {
            let field = e.span().map(|sp| format!("at byte {}", sp.start)).unwrap_or_else(|| "config".into());
            Error::config(field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.gen.validate()?;
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }
}
