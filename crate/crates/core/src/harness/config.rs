use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::split::SplitSpec;
use super::synthetic::SyntheticSpec;
use crate::fusion::{FusionHyperparams, DEFAULT_GAMMA};
use crate::metrics::{NdcgGain, DEFAULT_CUTOFFS};
use crate::mf::{MfHyperparams, INIT_STD};
use crate::mlp::{default_tower, validate_tower, EmbeddingInit, MlpHyperparams};
use crate::reliability::{HelpfulDenominator, ReliabilityConfig, DEFAULT_ALPHA, DEFAULT_THRESHOLD};
use crate::train::TrainSettings;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config not found: {0}")]
    NotFound(PathBuf),
    #[error("config unreadable: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Where an experiment's interactions come from. At most one is set; the
/// CLI may supply a store directly instead.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSource {
    /// A store file written by `ingest` or `synth`.
    pub store: Option<PathBuf>,
    /// Line-delimited review JSON.
    pub reviews: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReliabilitySettings {
    pub alpha: f64,
    pub threshold: f64,
    pub fallback_helpful_max: bool,
    pub min_votes: u32,
}

impl Default for ReliabilitySettings {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            threshold: DEFAULT_THRESHOLD,
            fallback_helpful_max: false,
            min_votes: 0,
        }
    }
}

impl ReliabilitySettings {
    pub fn to_config(&self) -> ReliabilityConfig {
        ReliabilityConfig {
            alpha: self.alpha,
            threshold: self.threshold,
            denominator: if self.fallback_helpful_max {
                HelpfulDenominator::MaxHelpful
            } else {
                HelpfulDenominator::TotalVotes
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub k: usize,
    /// Tower layer widths; empty means the halving default for `k`. The
    /// last width is the predictive-factor count `p`.
    pub tower: Vec<usize>,
    pub lambda: f64,
    pub gamma: f64,
    pub pretrain: bool,
    pub freeze_branches: bool,
    pub mlp_init_std: f64,
    pub embedding_init: EmbeddingInit,
    /// Weight spread of the fused model when pre-training is off.
    pub no_pretrain_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 256,
            tower: Vec::new(),
            lambda: 0.1,
            gamma: DEFAULT_GAMMA,
            pretrain: true,
            freeze_branches: false,
            mlp_init_std: INIT_STD,
            embedding_init: EmbeddingInit::Random,
            no_pretrain_init_std: INIT_STD,
        }
    }
}

impl ModelConfig {
    pub fn widths(&self) -> Vec<usize> {
        if self.tower.is_empty() {
            default_tower(self.k)
        } else {
            self.tower.clone()
        }
    }

    pub fn p(&self) -> usize {
        *self.widths().last().expect("tower has at least one layer")
    }
}

/// Per-phase overrides of the shared training budget.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseOverride {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub patience: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPhases {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    /// Both MF factor objectives.
    pub mf: PhaseOverride,
    pub mf_head: PhaseOverride,
    pub mlp: PhaseOverride,
    pub fusion: PhaseOverride,
}

impl Default for TrainPhases {
    fn default() -> Self {
        let d = TrainSettings::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            patience: d.patience,
            mf: PhaseOverride::default(),
            mf_head: PhaseOverride::default(),
            mlp: PhaseOverride::default(),
            fusion: PhaseOverride::default(),
        }
    }
}

impl TrainPhases {
    pub fn settings(&self, o: &PhaseOverride, seed: u64) -> TrainSettings {
        TrainSettings {
            epochs: o.epochs.unwrap_or(self.epochs),
            batch_size: o.batch_size.unwrap_or(self.batch_size),
            lr: o.lr.unwrap_or(self.lr),
            patience: o.patience.unwrap_or(self.patience),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub cutoffs: Vec<usize>,
    pub ndcg_gain: NdcgGain,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            cutoffs: DEFAULT_CUTOFFS.to_vec(),
            ndcg_gain: NdcgGain::TrueRating,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Training percentages; validation and test split the rest evenly.
    pub train_sizes: Vec<u32>,
    /// Values of `K` to try; empty means only `model.k`. Each uses the
    /// default tower for its `K`.
    pub factors: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            train_sizes: vec![40, 50, 60, 70],
            factors: Vec::new(),
        }
    }
}

/// Everything an experiment run needs besides the data itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root of every random stream.
    pub seed: u64,
    /// Runs are always reproducible; the flag is recorded for provenance.
    pub deterministic: bool,
    /// Worker thread cap; 0 uses every core.
    pub threads: usize,
    pub data: DataSource,
    pub split: SplitSpec,
    pub reliability: ReliabilitySettings,
    pub model: ModelConfig,
    pub train: TrainPhases,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: true,
            threads: 0,
            data: DataSource::default(),
            split: SplitSpec::default(),
            reliability: ReliabilitySettings::default(),
            model: ModelConfig::default(),
            train: TrainPhases::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative data paths are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        if !path.exists() {
            return Err(ConfigError::NotFound(path.to_owned()));
        }
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.store, &mut cfg.data.reviews]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        let d = &self.data;
        if [
            d.store.is_some(),
            d.reviews.is_some(),
            d.synthetic.is_some(),
        ]
        .iter()
        .filter(|x| **x)
        .count()
            > 1
        {
            return invalid("data: set at most one of store, reviews, synthetic".into());
        }
        validate_tower(self.model.k, &self.model.widths()).or_else(|e| invalid(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.model.gamma) {
            return invalid(format!("model.gamma {} outside [0, 1]", self.model.gamma));
        }
        if self.model.lambda < 0.0 {
            return invalid(format!("model.lambda {} < 0", self.model.lambda));
        }
        if !(0.0..=1.0).contains(&self.reliability.alpha) {
            return invalid(format!(
                "reliability.alpha {} outside [0, 1]",
                self.reliability.alpha
            ));
        }
        if self.eval.cutoffs.contains(&0) {
            return invalid("eval.cutoffs must be >= 1".into());
        }
        if self.train.batch_size == 0 {
            return invalid("train.batch_size must be positive".into());
        }
        self.split.validate().or_else(|e| invalid(e.to_string()))?;
        Ok(())
    }

    pub fn mf_hyper(&self, seed: u64) -> MfHyperparams {
        MfHyperparams {
            lambda: self.model.lambda,
            k: self.model.k,
            p: self.model.p(),
            factors: self.train.settings(&self.train.mf, seed),
            head: self.train.settings(&self.train.mf_head, seed),
        }
    }

    pub fn mlp_hyper(&self, seed: u64) -> MlpHyperparams {
        MlpHyperparams {
            k: self.model.k,
            tower: self.model.widths(),
            embedding_init: self.model.embedding_init,
            init_std: self.model.mlp_init_std,
            train: self.train.settings(&self.train.mlp, seed),
        }
    }

    pub fn fusion_hyper(&self, seed: u64) -> FusionHyperparams {
        FusionHyperparams {
            gamma: self.model.gamma,
            freeze_branches: self.model.freeze_branches,
            train: self.train.settings(&self.train.fusion, seed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_nested_config() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            seed = 7
            [data.synthetic]
            n_users = 30
            n_products = 20
            [split]
            folds = 2
            [model]
            k = 8
            gamma = 0.25
            [train]
            epochs = 4
            batch_size = 64
            [train.fusion]
            epochs = 9
            lr = 0.01
            [eval]
            ndcg_gain = "predicted-rating"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.data.synthetic.unwrap().n_users, 30);
        assert_eq!(cfg.model.widths(), vec![16, 8, 4, 2]);
        assert_eq!(cfg.mf_hyper(1).p, 2);
        let f = cfg.fusion_hyper(3);
        assert_eq!(
            (f.train.epochs, f.train.batch_size, f.train.lr, f.train.seed),
            (9, 64, 0.01, 3)
        );
        assert_eq!(cfg.mlp_hyper(0).train.epochs, 4);
        assert_eq!(cfg.eval.ndcg_gain, NdcgGain::PredictedRating);
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(matches!(
            ExperimentConfig::from_toml("bogus = 1"),
            Err(ConfigError::Parse(_))
        ));
        assert!(ExperimentConfig::from_toml("[model]\ngamma = 2.0").is_err());
        assert!(ExperimentConfig::from_toml("[model]\nk = 4\ntower = [9]").is_err());
        assert!(ExperimentConfig::from_toml("[data]\nstore = \"a\"\nreviews = \"b\"").is_err());
        assert!(matches!(
            ExperimentConfig::load(Path::new("/nonexistent/x.toml")),
            Err(ConfigError::NotFound(_))
        ));
    }
}
