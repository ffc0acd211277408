//! The five subcommands. Each returns the paths it wrote.

use std::path::PathBuf;

use anyhow::{bail, Result};
use ensrep_core::fields::eff;
use ensrep_core::metrics::MetricReport;
use ensrep_core::synthgen;
use serde::Serialize;

use crate::config::{ExperimentConfig, Method};
use crate::runs::{self, Prepared, REPORT_CSV, REPORT_JSON};

/// Generates the synthetic data set and writes it as EFF plus sidecar.
pub fn synth(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.dataset.synthetic.validate()?;
    let path = cfg
        .dataset
        .path
        .clone()
        .unwrap_or_else(|| cfg.out.join("synthetic.eff"));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let ds = synthgen::generate(&cfg.dataset.synthetic)?;
    eff::write_eff(&ds, &path)?;
    log::info!(
        "wrote {} ({} days x {} members, {}x{})",
        path.display(),
        ds.n_days,
        ds.n_members,
        ds.height,
        ds.width
    );
    Ok(vec![eff::sidecar_path(&path), path])
}

/// Trains the configured method for every latent dimension.
pub fn train(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let data = Prepared::new(cfg)?;
    let mut written = Vec::new();
    for &k in &cfg.latent_dims {
        log::info!("training {} with d_latent = {k}", cfg.method.name());
        let trained = runs::train_model(cfg, &data, cfg.method, k, cfg.seed, None)?;
        let dir = cfg.run_dir(cfg.method, k);
        runs::save_run(&dir, &trained, &data.standardizer)?;
        written.push(dir);
    }
    Ok(written)
}

/// Loads the reference report for skill scores, if it exists.
fn reference_report(cfg: &ExperimentConfig, k: usize) -> Option<MetricReport> {
    let dir = cfg.reference_dir(k);
    let path = dir.join(REPORT_CSV);
    // labelled by run name only, so reports do not depend on the output location
    let label = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
    match std::fs::read_to_string(&path) {
        Ok(text) => match MetricReport::from_csv(label, &text) {
            Ok(r) => Some(r),
            Err(e) => {
                log::warn!("ignoring unreadable reference {}: {e}", path.display());
                None
            }
        },
        Err(_) => {
            log::warn!("no reference report at {}; skill columns omitted", path.display());
            None
        }
    }
}

/// Evaluates trained runs on the test days and writes the reports.
pub fn evaluate(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let data = Prepared::new(cfg)?;
    let mut written = Vec::new();
    for &k in &cfg.latent_dims {
        let dir = cfg.run_dir(cfg.method, k);
        let (model, standardizer) = if cfg.method == Method::Identity {
            (runs::Model::Identity, data.standardizer)
        } else {
            runs::load_run(&dir, cfg.method)?
        };
        let mut report = runs::evaluate_days(
            &model,
            &standardizer,
            &data.raw,
            data.split.test.clone(),
            cfg.n_samples,
            &cfg.eval_sinkhorn,
            cfg.seed,
        )?;
        if let Some(reference) = reference_report(cfg, k) {
            report = report.with_skill(&reference);
        }
        runs::write(dir.join(REPORT_CSV), report.to_csv())?;
        runs::write(dir.join(REPORT_JSON), report.to_json()?)?;
        written.extend([dir.join(REPORT_CSV), dir.join(REPORT_JSON)]);
    }
    Ok(written)
}

/// Test-set means of one ablation run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AblationRow {
    pub omega2: f64,
    pub seed: u64,
    pub sd_scale: f64,
    pub energy_multi: f64,
    pub sinkhorn: f64,
}

/// Means over seeds for one value of `omega2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AblationPoint {
    pub omega2: f64,
    pub energy_multi: f64,
    pub sinkhorn: f64,
}

pub fn summarize_ablation(rows: &[AblationRow], omega2: &[f64]) -> Vec<AblationPoint> {
    omega2
        .iter()
        .map(|&w| {
            let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.omega2 == w).collect();
            let n = sel.len() as f64;
            AblationPoint {
                omega2: w,
                energy_multi: sel.iter().map(|r| r.energy_multi).sum::<f64>() / n,
                sinkhorn: sel.iter().map(|r| r.sinkhorn).sum::<f64>() / n,
            }
        })
        .collect()
}

/// Runs the `omega2` sweep with `omega1 = 1 - omega2` and returns the
/// per-run rows. The Sinkhorn scale is fixed per seed before the sweep so
/// every weight setting optimizes the same components.
pub fn ablation_rows(cfg: &ExperimentConfig, data: &Prepared) -> Result<Vec<AblationRow>> {
    let k = cfg.latent_dims[0];
    let mut rows = Vec::new();
    for &seed in &cfg.ablation.seeds {
        let sd_scale = runs::sd_scale_for(cfg, data, k, seed)?;
        for &w in &cfg.ablation.omega2 {
            if !(0.0..=1.0).contains(&w) {
                bail!("omega2 = {w} is outside [0, 1]");
            }
            let weights = ensrep_core::ivae::LossWeights {
                sd_scale,
                ..cfg.loss_weights
            }
            .with_omega2(w);
            log::info!("ablation: omega2 = {w}, seed {seed}");
            let trained = runs::train_model(cfg, data, Method::Ivae, k, seed, Some(weights))?;
            let dir = cfg.out.join("ablation").join(format!("ivae_d{k}_w{w}_s{seed}"));
            runs::save_run(&dir, &trained, &data.standardizer)?;
            let report = runs::evaluate_days(
                &trained.model,
                &data.standardizer,
                &data.raw,
                data.split.test.clone(),
                cfg.n_samples,
                &cfg.eval_sinkhorn,
                seed,
            )?;
            runs::write(dir.join(REPORT_CSV), report.to_csv())?;
            let agg = report.aggregate();
            rows.push(AblationRow {
                omega2: w,
                seed,
                sd_scale,
                energy_multi: agg["energy_multi"],
                sinkhorn: agg["sinkhorn"],
            });
        }
    }
    Ok(rows)
}

pub fn ablate(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    if cfg.method != Method::Ivae {
        bail!("the ablation sweep applies to the ivae method only");
    }
    let data = Prepared::new(cfg)?;
    let rows = ablation_rows(cfg, &data)?;
    let mut runs_csv = String::from("omega2,seed,sd_scale,energy_multi,sinkhorn\n");
    for r in &rows {
        runs_csv.push_str(&format!("{},{},{},{},{}\n", r.omega2, r.seed, r.sd_scale, r.energy_multi, r.sinkhorn));
    }
    let mut summary = String::from("omega2,energy_multi,sinkhorn\n");
    for p in summarize_ablation(&rows, &cfg.ablation.omega2) {
        summary.push_str(&format!("{},{},{}\n", p.omega2, p.energy_multi, p.sinkhorn));
    }
    let (a, b) = (cfg.out.join("ablation_runs.csv"), cfg.out.join("ablation.csv"));
    runs::write(&a, runs_csv)?;
    runs::write(&b, summary)?;
    Ok(vec![a, b])
}

/// Writes the latent means and spreads of each day of the export split.
pub fn export_latents(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    if cfg.method == Method::Identity {
        bail!("the identity method has no latent space to export");
    }
    let data = Prepared::new(cfg)?;
    let mut written = Vec::new();
    for &k in &cfg.latent_dims {
        let dir = cfg.run_dir(cfg.method, k);
        let (model, _) = runs::load_run(&dir, cfg.method)?;
        let path = dir.join(runs::LATENTS_FILE);
        runs::write(&path, runs::latents_csv(&model, &data, data.range(cfg.export_split))?)?;
        written.push(path);
    }
    Ok(written)
}
