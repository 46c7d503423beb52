//! Run configuration loaded from a TOML file.

use crate::error::CliError;
use intraloss::data::DatasetSpec;
use intraloss::experiment::DEFAULT_NUM_PAIRS;
use intraloss::margin::{MarginConfig, MarginScheme};
use intraloss::trainer::{BackboneSpec, Stage2Objective, TrainConfig};
use intraloss::IntraParams;
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Existing dataset CSV; when absent the dataset is generated.
    pub path: Option<PathBuf>,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub cluster_spread: f64,
    pub elongation: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DatasetSpec::default();
        DataSection {
            path: None,
            num_classes: d.num_classes,
            samples_per_class: d.samples_per_class,
            input_dim: d.input_dim,
            cluster_spread: d.cluster_spread,
            elongation: d.elongation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    /// Defaults to 40/70/90 % of `total_iterations`.
    pub lr_milestones: Option<Vec<usize>>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_iterations: usize,
    /// Defaults to 60 % of `total_iterations`.
    pub stage2_start: Option<usize>,
    pub stage2_objective: Stage2Objective,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            learning_rate: t.learning_rate,
            lr_milestones: None,
            lr_decay_factor: t.lr_decay_factor,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            total_iterations: t.total_iterations,
            stage2_start: None,
            stage2_objective: t.stage2_objective,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub num_pairs: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            num_pairs: DEFAULT_NUM_PAIRS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    pub batch_size: usize,
    pub batches: usize,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection { batch_size: 6, batches: 20 }
    }
}

/// One entry of a comparison: a margin scheme with or without IntraLoss.
/// Other settings come from the surrounding file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunEntry {
    pub name: String,
    pub scheme: MarginScheme,
    #[serde(default)]
    pub intra: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSection {
    /// Seeds averaged per row; defaults to the top-level seed.
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub margin: MarginConfig,
    /// IntraLoss is enabled by the presence of this table.
    pub intra: Option<IntraParams>,
    pub train: TrainSection,
    pub backbone: BackboneSpec,
    pub eval: EvalSection,
    pub gradcheck: GradcheckSection,
    pub compare: CompareSection,
    pub runs: Vec<RunEntry>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg = Self::from_toml(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            num_classes: self.data.num_classes,
            samples_per_class: self.data.samples_per_class,
            input_dim: self.data.input_dim,
            cluster_spread: self.data.cluster_spread,
            elongation: self.data.elongation,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let mut cfg = TrainConfig::with_iterations(t.total_iterations);
        cfg.learning_rate = t.learning_rate;
        if let Some(m) = &t.lr_milestones {
            cfg.lr_milestones = m.clone();
        }
        cfg.lr_decay_factor = t.lr_decay_factor;
        cfg.momentum = t.momentum;
        cfg.weight_decay = t.weight_decay;
        cfg.batch_size = t.batch_size;
        if let Some(s) = t.stage2_start {
            cfg.stage2_start = s;
        }
        cfg.stage2_objective = t.stage2_objective;
        cfg.margin = self.margin;
        cfg.intra = self.intra;
        cfg.backbone = self.backbone;
        cfg.seed = self.seed;
        cfg
    }

    /// Training configuration for one comparison entry.
    pub fn run_config(&self, run: &RunEntry) -> TrainConfig {
        let mut cfg = self.train_config();
        cfg.margin.scheme = run.scheme;
        cfg.intra = run.intra.then(|| self.intra.unwrap_or_default());
        cfg
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.data.path.is_none() {
            self.dataset_spec().validate()?;
        }
        self.train_config().validate()?;
        self.backbone.validate(self.data.input_dim)?;
        if self.eval.num_pairs < 10 {
            return Err(CliError::Config("eval.num_pairs: ten-fold verification needs at least 10 pairs".into()));
        }
        if self.gradcheck.batch_size == 0 || self.gradcheck.batches == 0 {
            return Err(CliError::Config("gradcheck: batch_size and batches must be positive".into()));
        }
        for run in &self.runs {
            self.run_config(run).validate()?;
        }
        if matches!(&self.compare.seeds, Some(s) if s.is_empty()) {
            return Err(CliError::Config("compare.seeds: must not be empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg.margin.scale, 30.0);
        assert_eq!(cfg.margin.m1, 4);
        assert_eq!(cfg.margin.m2, 0.35);
        assert_eq!(cfg.margin.m3, 0.5);
        assert!(cfg.intra.is_none());
        let t = cfg.train_config();
        assert_eq!(t.momentum, 0.9);
        assert_eq!(t.weight_decay, 5e-4);
        assert_eq!(t.stage2_start, 1200);
        assert_eq!(t.lr_milestones, vec![800, 1400, 1800]);
        cfg.validate().unwrap();
    }

    #[test]
    fn intra_table_fills_defaults() {
        let cfg = RunConfig::from_toml("[intra]\n").unwrap();
        let p = cfg.intra.unwrap();
        assert_eq!((p.alpha, p.gamma), (5.0, 0.9));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("[margin]\nscheme = \"additive_cosine\"\nscal = 3.0\n").unwrap_err();
        assert!(err.to_string().contains("scal"), "{err}");
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
    }

    #[test]
    fn scheme_strings() {
        let cfg = RunConfig::from_toml("[margin]\nscheme = \"additive_angular\"\n").unwrap();
        assert_eq!(cfg.margin.scheme, MarginScheme::AdditiveAngular);
        assert!(RunConfig::from_toml("[margin]\nscheme = \"arc\"\n").is_err());
    }

    #[test]
    fn invalid_class_count_names_field() {
        let cfg = RunConfig::from_toml("[data]\nnum_classes = 1\n").unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("num_classes"), "{err}");
    }

    #[test]
    fn runs_inherit_settings() {
        let text = "[intra]\ngamma = 1.5\n[[runs]]\nname = \"am\"\nscheme = \"additive_cosine\"\n[[runs]]\nname = \"intra\"\nscheme = \"norm\"\nintra = true\n";
        let cfg = RunConfig::from_toml(text).unwrap();
        let a = cfg.run_config(&cfg.runs[0]);
        let b = cfg.run_config(&cfg.runs[1]);
        assert!(a.intra.is_none());
        assert_eq!(b.intra.unwrap().gamma, 1.5);
        assert_eq!(b.margin.scheme, MarginScheme::Norm);
    }

    #[test]
    fn seed_override() {
        let cfg = RunConfig::from_toml("seed = 3\n").unwrap().with_seed(Some(9));
        assert_eq!(cfg.dataset_spec().seed, 9);
        assert_eq!(cfg.train_config().seed, 9);
    }
}
