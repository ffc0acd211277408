//! Data preparation, model training and per-day evaluation.

use std::fs;
use std::ops::Range;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ensrep_core::dense_ae::{self, AeModel};
use ensrep_core::fields::{eff, EnsembleDataset, SplitSpec, Standardizer};
use ensrep_core::ivae::{self, IvaeModel, IvaeTraining, LossWeights};
use ensrep_core::metrics::{DayMetrics, MetricReport, SinkhornConfig};
use ensrep_core::numerics::rng::stream;
use ensrep_core::numerics::{Rng, Tensor};
use ensrep_core::par;
use ensrep_core::pca::PcaModel;
use ensrep_core::synthgen;
use ensrep_core::training::History;
use ensrep_core::twostep::{self, LatentGaussian, Projector};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Method, SplitName};

pub const MODEL_FILE: &str = "model.bin";
pub const STANDARDIZER_FILE: &str = "standardizer.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const RUN_FILE: &str = "run.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";
pub const LATENTS_FILE: &str = "latents.csv";

/// Reads the configured EFF file, or generates the synthetic data set.
///
/// Generated values are rounded to `f32` so that in-memory data equals what
/// `synth` would write to disk.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<EnsembleDataset> {
    match &cfg.dataset.path {
        Some(p) => eff::read_eff(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(synthgen::generate(&cfg.dataset.synthetic)?.map_values(|v| v as f32 as f64)),
    }
}

/// Raw data with its split and the standardizer fitted on the training days.
pub struct Prepared {
    pub raw: EnsembleDataset,
    pub split: SplitSpec,
    pub standardizer: Standardizer,
}

impl Prepared {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let raw = load_dataset(cfg)?;
        let split = cfg.split.spec();
        split.validate(raw.n_days)?;
        if split.train.is_empty() || split.validation.is_empty() {
            bail!("training and validation splits must be non-empty");
        }
        cfg.validate_against(raw.n_members)?;
        let standardizer = Standardizer::fit(&raw, &split)?;
        Ok(Self {
            raw,
            split,
            standardizer,
        })
    }

    pub fn range(&self, which: SplitName) -> Range<usize> {
        match which {
            SplitName::Train => self.split.train.clone(),
            SplitName::Validation => self.split.validation.clone(),
            SplitName::Test => self.split.test.clone(),
            SplitName::All => 0..self.raw.n_days,
        }
    }

    /// Standardized `M x d` ensembles of the given days.
    pub fn days(&self, r: Range<usize>) -> Vec<Tensor> {
        r.map(|t| self.standardizer.standardize_tensor(&self.raw.day_tensor(t)))
            .collect()
    }

    /// Standardized members of the given days stacked into one matrix.
    pub fn members(&self, r: Range<usize>) -> Tensor {
        self.standardizer.standardize_tensor(&self.raw.member_matrix(r))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Pca(PcaModel),
    Ae(AeModel),
    Ivae(IvaeModel),
    Identity,
}

impl Model {
    pub fn method(&self) -> Method {
        match self {
            Model::Pca(_) => Method::Pca,
            Model::Ae(_) => Method::Ae,
            Model::Ivae(_) => Method::Ivae,
            Model::Identity => Method::Identity,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MODEL_FILE);
        match self {
            Model::Pca(m) => m.save(&path)?,
            Model::Ae(m) => m.save(&path)?,
            Model::Ivae(m) => m.save(&path)?,
            Model::Identity => {}
        }
        Ok(())
    }

    pub fn load(method: Method, dir: &Path) -> Result<Self> {
        let path = dir.join(MODEL_FILE);
        let ctx = || format!("loading {}", path.display());
        Ok(match method {
            Method::Pca => Model::Pca(PcaModel::load(&path).with_context(ctx)?),
            Method::Ae => Model::Ae(AeModel::load(&path).with_context(ctx)?),
            Method::Ivae => Model::Ivae(IvaeModel::load(&path).with_context(ctx)?),
            Method::Identity => Model::Identity,
        })
    }

    /// Latent distribution of one standardized ensemble.
    pub fn latent(&self, x: &Tensor) -> Result<LatentGaussian> {
        Ok(match self {
            Model::Pca(m) => twostep::fit_latent_gaussian(&Projector::Pca(m).encode_members(x)?)?,
            Model::Ae(m) => twostep::fit_latent_gaussian(&Projector::Ae(m).encode_members(x)?)?,
            Model::Ivae(m) => m.encode_gaussian(x)?,
            Model::Identity => bail!("the identity method has no latent space"),
        })
    }

    /// `n` reconstructed members of one standardized ensemble. The identity
    /// method returns the input unchanged.
    pub fn reconstruct(&self, x: &Tensor, n: usize, rng: &mut Rng) -> Result<Tensor> {
        Ok(match self {
            Model::Pca(m) => twostep::represent(Projector::Pca(m), x, n, rng)?.1,
            Model::Ae(m) => twostep::represent(Projector::Ae(m), x, n, rng)?.1,
            Model::Ivae(m) => m.represent(x, n, rng)?,
            Model::Identity => x.clone(),
        })
    }
}

/// Summary written next to each trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub method: Method,
    pub d_latent: usize,
    pub seed: u64,
    pub loss_weights: Option<LossWeights>,
    pub initial_val_loss: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub explained_variance_ratio: Option<f64>,
}

pub struct Trained {
    pub model: Model,
    pub history: Option<History>,
    pub info: RunInfo,
}

/// Trainer settings of one invariant VAE run; its validation loss is a
/// deterministic function of these and the model.
pub fn ivae_setup(cfg: &ExperimentConfig, weights: LossWeights, seed: u64) -> IvaeTraining {
    IvaeTraining {
        train: ensrep_core::training::TrainConfig {
            seed,
            ..cfg.ivae_train.clone()
        },
        weights,
        sinkhorn: cfg.training_sinkhorn,
    }
}

/// Sinkhorn scale matched to the energy term, or the configured value when
/// calibration is switched off.
pub fn sd_scale_for(cfg: &ExperimentConfig, data: &Prepared, d_latent: usize, seed: u64) -> Result<f64> {
    if cfg.sd_scale_calibration_epochs == 0 {
        return Ok(cfg.loss_weights.sd_scale);
    }
    let init = IvaeModel::init(data.raw.d_data(), d_latent, cfg.width, seed)?;
    let setup = ivae_setup(cfg, cfg.loss_weights, seed);
    let train = data.days(data.split.train.clone());
    let val = data.days(data.split.validation.clone());
    let s = ivae::calibrate_sd_scale(&init, &train, &val, &setup, cfg.sd_scale_calibration_epochs)?;
    log::info!("calibrated sd_scale = {s} (d_latent {d_latent}, seed {seed})");
    Ok(s)
}

/// Trains one model. `weights` overrides the configured loss weights for
/// the invariant VAE (its `sd_scale` is used as is).
pub fn train_model(
    cfg: &ExperimentConfig,
    data: &Prepared,
    method: Method,
    d_latent: usize,
    seed: u64,
    weights: Option<LossWeights>,
) -> Result<Trained> {
    let d = data.raw.d_data();
    let mut info = RunInfo {
        method,
        d_latent,
        seed,
        loss_weights: None,
        initial_val_loss: None,
        best_val_loss: None,
        best_epoch: None,
        epochs_run: 0,
        stopped_early: false,
        explained_variance_ratio: None,
    };
    let (model, history) = match method {
        Method::Identity => (Model::Identity, None),
        Method::Pca => {
            let m = PcaModel::fit(&data.members(data.split.train.clone()), d_latent)?;
            info.explained_variance_ratio = Some(m.explained_variance_ratio(d_latent)?);
            (Model::Pca(m), None)
        }
        Method::Ae => {
            let init = AeModel::init(d, d_latent, cfg.width, seed)?;
            let tc = ensrep_core::training::TrainConfig {
                seed,
                ..cfg.ae_train.clone()
            };
            let (m, h) = dense_ae::train(
                &init,
                &data.members(data.split.train.clone()),
                &data.members(data.split.validation.clone()),
                &tc,
            )?;
            (Model::Ae(m), Some(h))
        }
        Method::Ivae => {
            let weights = match weights {
                Some(w) => w,
                None => LossWeights {
                    sd_scale: sd_scale_for(cfg, data, d_latent, seed)?,
                    ..cfg.loss_weights
                },
            };
            info.loss_weights = Some(weights);
            let init = IvaeModel::init(d, d_latent, cfg.width, seed)?;
            let (m, h) = ivae::train(
                &init,
                &data.days(data.split.train.clone()),
                &data.days(data.split.validation.clone()),
                &ivae_setup(cfg, weights, seed),
            )?;
            (Model::Ivae(m), Some(h))
        }
    };
    if let Some(h) = &history {
        info.initial_val_loss = Some(h.initial_val_loss);
        info.best_val_loss = h.best_val_loss();
        info.best_epoch = h.best_epoch;
        info.epochs_run = h.epochs.len();
        info.stopped_early = h.stopped_early;
    }
    Ok(Trained { model, history, info })
}

pub fn save_run(dir: &Path, trained: &Trained, standardizer: &Standardizer) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    trained.model.save(dir)?;
    write(dir.join(STANDARDIZER_FILE), serde_json::to_string_pretty(standardizer)?)?;
    write(dir.join(RUN_FILE), serde_json::to_string_pretty(&trained.info)?)?;
    if let Some(h) = &trained.history {
        write(dir.join(HISTORY_FILE), h.to_csv())?;
    }
    Ok(())
}

pub fn load_run(dir: &Path, method: Method) -> Result<(Model, Standardizer)> {
    let p = dir.join(STANDARDIZER_FILE);
    let st: Standardizer = serde_json::from_str(
        &fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?,
    )?;
    Ok((Model::load(method, dir)?, st))
}

/// Metrics of every day in `days`, computed in physical units.
///
/// Each day draws its latent samples from its own stream, so the report
/// does not depend on how days are scheduled.
pub fn evaluate_days(
    model: &Model,
    standardizer: &Standardizer,
    raw: &EnsembleDataset,
    days: Range<usize>,
    n_samples: Option<usize>,
    sinkhorn: &SinkhornConfig,
    seed: u64,
) -> Result<MetricReport> {
    let first = days.start;
    let rows = par::map_range(days.len(), |i| -> Result<DayMetrics> {
        let t = first + i;
        let x = raw.day_tensor(t);
        let n = n_samples.unwrap_or(x.rows());
        let mut rng = Rng::new(seed).derive_path(&[stream::EVALUATION, t as u64]);
        let z = model.reconstruct(&standardizer.standardize_tensor(&x), n, &mut rng)?;
        let y = standardizer.destandardize_tensor(&z);
        Ok(DayMetrics::compute(raw.day_labels[t].clone(), &x, &y, sinkhorn)?)
    });
    Ok(MetricReport::new(
        model.method().name(),
        rows.into_iter().collect::<Result<Vec<_>>>()?,
    ))
}

/// One CSV row per day: label, latent means, latent standard deviations
/// and the seasonal phase when the data set carries one.
pub fn latents_csv(model: &Model, data: &Prepared, days: Range<usize>) -> Result<String> {
    let mut out = String::new();
    let mut header_done = false;
    for t in days {
        let g = model.latent(&data.standardizer.standardize_tensor(&data.raw.day_tensor(t)))?;
        if !header_done {
            out.push_str("day");
            for i in 1..=g.dim() {
                out.push_str(&format!(",mu_{i}"));
            }
            for i in 1..=g.dim() {
                out.push_str(&format!(",sd_{i}"));
            }
            out.push_str(",season_phase\n");
            header_done = true;
        }
        out.push_str(&data.raw.day_labels[t]);
        for v in g.mean.iter().chain(&g.std_devs()) {
            out.push_str(&format!(",{v}"));
        }
        out.push(',');
        if let Some(p) = &data.raw.season_phase {
            out.push_str(&p[t].to_string());
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write(path: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}
