//! Run configuration read from JSON. Every key is optional; unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Backbone depth per stream.
    pub blocks: usize,
    pub dim: usize,
    pub heads: usize,
    /// Patch side in pixels / spectrogram cells.
    pub patch: usize,
    /// Channel down-sampling factor inside the adapters.
    pub r: usize,
    /// 1-based indices of blocks wrapped with adapters.
    pub glfa_blocks: Vec<usize>,
    /// 1-based block after which the latent estimator runs.
    pub vbfe_block: usize,
    /// Side of the square input grids (visual frame and cropped spectrogram).
    pub input_size: usize,
    /// Transformer blocks inside each latent encoder.
    pub encoder_depth: usize,
    /// Seed of the frozen backbone weights.
    pub backbone_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            blocks: 12,
            dim: 32,
            heads: 4,
            patch: 8,
            r: 2,
            glfa_blocks: vec![1, 2, 3, 4, 5],
            vbfe_block: 6,
            input_size: 32,
            encoder_depth: 2,
            backbone_seed: 2024,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.input_size / self.patch, self.input_size / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.blocks == 0 || self.dim == 0 || self.heads == 0 {
            return bad("blocks, dim and heads must be positive".into());
        }
        if self.dim % self.heads != 0 {
            return bad(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.r == 0 || self.dim % self.r != 0 {
            return bad(format!("r = {} must divide dim {}", self.r, self.dim));
        }
        if self.patch == 0 || self.input_size % self.patch != 0 {
            return bad(format!("patch {} must divide input size {}", self.patch, self.input_size));
        }
        let (h, w) = self.grid();
        if self.glfa_blocks.iter().any(|&b| b == 0 || b > self.blocks) {
            return bad(format!("glfa_blocks {:?} outside 1..={}", self.glfa_blocks, self.blocks));
        }
        if !self.glfa_blocks.is_empty() && (h < 3 || w < 3) {
            return bad(format!("adapters need a token grid of at least 3x3, got {h}x{w}"));
        }
        if self.vbfe_block == 0 || self.vbfe_block > self.blocks {
            return bad(format!("vbfe_block {} outside 1..={}", self.vbfe_block, self.blocks));
        }
        if self.encoder_depth == 0 {
            return bad("encoder_depth must be positive".into());
        }
        Ok(())
    }
}

/// Which values the orthogonality penalty is computed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrthOn {
    Samples,
    Means,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch: usize,
    pub mc_samples: usize,
    pub orth_on: OrthOn,
    /// Evaluate every this many steps (0 disables periodic evaluation).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.1,
            lr: 1e-3,
            weight_decay: 0.01,
            steps: 2000,
            batch: 16,
            mc_samples: 8,
            orth_on: OrthOn::Means,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.steps == 0 || self.batch == 0 || self.mc_samples == 0 {
            return Err(Error::Config("steps, batch and mc_samples must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_eval: usize,
    /// Relative weights of REAL, RVFA, FVRA, FVFA.
    pub category_mix: [f64; 4],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { n_train: 2000, n_eval: 500, category_mix: [0.25; 4] }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.category_mix.iter().any(|&w| !(w >= 0.0)) || self.category_mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!("bad category_mix {:?}", self.category_mix)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { seed: 7, model: ModelConfig::default(), train: TrainConfig::default(), data: DataConfig::default() }
    }
}

impl RunConfig {
    /// Parses and validates; serde names the offending key on rejection.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_json(r#"{"train": {"alpah": 0.1}}"#).unwrap_err();
        assert!(err.to_string().contains("alpah"), "{err}");
    }

    #[test]
    fn partial_override_keeps_other_defaults() {
        let c = RunConfig::from_json(r#"{"seed": 3, "model": {"r": 4}}"#).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.model.r, 4);
        assert_eq!(c.model.dim, 32);
    }

    #[test]
    fn invalid_layout_rejected() {
        assert!(RunConfig::from_json(r#"{"model": {"vbfe_block": 13}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"heads": 5}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"alpha": -1}}"#).is_err());
    }
}
