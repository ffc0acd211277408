//! Experiment configuration, read from JSON and overridden by CLI flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ensrep_core::fields::SplitSpec;
use ensrep_core::ivae::LossWeights;
use ensrep_core::metrics::SinkhornConfig;
use ensrep_core::synthgen::GrfConfig;
use ensrep_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pca,
    Ae,
    Ivae,
    /// Reconstruction equals the input; for checking the evaluation path.
    Identity,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Pca => "pca",
            Method::Ae => "ae",
            Method::Ivae => "ivae",
            Method::Identity => "identity",
        }
    }
}

/// Where the ensemble data comes from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// EFF file to read. When absent the synthetic generator is run in
    /// memory (and `synth` writes to `<out>/synthetic.eff`).
    pub path: Option<PathBuf>,
    pub synthetic: GrfConfig,
}


/// Consecutive day counts for the three splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 400,
            validation: 50,
            test: 50,
        }
    }
}

impl SplitCounts {
    pub fn spec(&self) -> SplitSpec {
        SplitSpec::consecutive(self.train, self.validation, self.test)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub omega2: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            omega2: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub split: SplitCounts,
    pub method: Method,
    pub latent_dims: Vec<usize>,
    /// Hidden width of both neural models.
    pub width: usize,
    pub ae_train: TrainConfig,
    pub ivae_train: TrainConfig,
    pub loss_weights: LossWeights,
    /// Epochs of the trial run that sets `loss_weights.sd_scale`; `0` keeps
    /// the configured value.
    pub sd_scale_calibration_epochs: usize,
    pub training_sinkhorn: SinkhornConfig,
    pub eval_sinkhorn: SinkhornConfig,
    /// Reconstructed members per day; defaults to the input member count.
    pub n_samples: Option<usize>,
    pub out: PathBuf,
    /// Run directory whose report serves as the skill reference. Defaults to
    /// the PCA run with the same latent dimension.
    pub reference: Option<PathBuf>,
    /// Seed for initialization, shuffling and latent sampling.
    pub seed: u64,
    pub ablation: AblationConfig,
    pub export_split: SplitName,
}

/// Desk-scale training settings for the autoencoder.
pub fn desk_ae_train() -> TrainConfig {
    TrainConfig {
        batch_size: 256,
        max_epochs: 150,
        learning_rate: 1e-3,
        ..TrainConfig::autoencoder()
    }
}

/// Desk-scale training settings for the invariant VAE.
pub fn desk_ivae_train() -> TrainConfig {
    TrainConfig {
        max_epochs: 150,
        learning_rate: 1e-3,
        ..TrainConfig::ivae()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            split: SplitCounts::default(),
            method: Method::Pca,
            // 32 needs more than the 20 desk members
            latent_dims: vec![2, 4, 8, 16],
            width: ensrep_core::dense_ae::DEFAULT_WIDTH,
            ae_train: desk_ae_train(),
            ivae_train: desk_ivae_train(),
            loss_weights: LossWeights::default(),
            sd_scale_calibration_epochs: 20,
            training_sinkhorn: SinkhornConfig::training(),
            eval_sinkhorn: SinkhornConfig::evaluation(),
            n_samples: None,
            out: PathBuf::from("runs"),
            reference: None,
            seed: 0,
            ablation: AblationConfig::default(),
            export_split: SplitName::All,
        }
    }
}

/// Values given on the command line; each replaces the config entry.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub method: Option<Method>,
    pub latent_dim: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub reference: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(m) = o.method {
            self.method = m;
        }
        if let Some(k) = o.latent_dim {
            self.latent_dims = vec![k];
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        if let Some(r) = &o.reference {
            self.reference = Some(r.clone());
        }
    }

    /// Checks that do not need the data.
    pub fn validate(&self) -> Result<()> {
        if self.latent_dims.is_empty() {
            bail!("latent_dims must not be empty");
        }
        if self.latent_dims.contains(&0) {
            bail!("latent dimensions must be >= 1");
        }
        if self.width == 0 {
            bail!("width must be >= 1");
        }
        if let Some(p) = &self.dataset.path {
            if !p.exists() {
                bail!("dataset {} does not exist", p.display());
            }
        } else {
            self.dataset.synthetic.validate()?;
        }
        if let Some(r) = &self.reference {
            if !r.is_dir() {
                log::warn!("reference run {} does not exist yet", r.display());
            }
        }
        self.ae_train.validate()?;
        self.ivae_train.validate()?;
        self.loss_weights.validate()?;
        self.training_sinkhorn.validate()?;
        self.eval_sinkhorn.validate()?;
        if self.n_samples == Some(0) {
            bail!("n_samples must be >= 1");
        }
        Ok(())
    }

    /// Checks against the member count of the loaded data.
    pub fn validate_against(&self, n_members: usize) -> Result<()> {
        if let Some(&k) = self.latent_dims.iter().find(|&&k| k >= n_members) {
            bail!("latent dimension {k} must be smaller than the member count {n_members}");
        }
        Ok(())
    }

    pub fn run_dir(&self, method: Method, d_latent: usize) -> PathBuf {
        self.out.join(format!("{}_d{d_latent}", method.name()))
    }

    pub fn reference_dir(&self, d_latent: usize) -> PathBuf {
        self.reference
            .clone()
            .unwrap_or_else(|| self.run_dir(Method::Pca, d_latent))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_json_gives_defaults() {
        let c: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn overrides_replace_config_values() {
        let mut c = ExperimentConfig::default();
        c.apply(&Overrides {
            method: Some(Method::Ivae),
            latent_dim: Some(3),
            seed: Some(9),
            out: Some("x".into()),
            reference: Some("r".into()),
        });
        assert_eq!(c.method, Method::Ivae);
        assert_eq!(c.latent_dims, vec![3]);
        assert_eq!(c.seed, 9);
        assert_eq!(c.run_dir(Method::Ivae, 3), PathBuf::from("x/ivae_d3"));
        assert_eq!(c.reference_dir(3), PathBuf::from("r"));
    }

    #[test]
    fn latent_dim_must_be_below_member_count() {
        let c = ExperimentConfig {
            latent_dims: vec![20],
            ..Default::default()
        };
        assert!(c.validate_against(20).is_err());
        assert!(c.validate_against(21).is_ok());
    }
}
