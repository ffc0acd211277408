//! End-to-end runs of the `ensrep` binary on a tiny configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ensrep_harness::config::{ExperimentConfig, Method};
use ensrep_harness::runs::{self, Prepared};
use serde_json::Value;

const TINY: &str = r#"{
  "dataset": {"synthetic": {"height": 4, "width": 4, "n_days": 30, "n_members": 6, "seed": 3}},
  "split": {"train": 20, "validation": 5, "test": 5},
  "latent_dims": [2],
  "width": 8,
  "ae_train": {"max_epochs": 3, "batch_size": 32, "learning_rate": 0.001},
  "ivae_train": {"max_epochs": 2, "batch_size": 4, "learning_rate": 0.001},
  "sd_scale_calibration_epochs": 1,
  "ablation": {"omega2": [0.0, 1.0], "seeds": [0]}
}"#;

fn ensrep(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ensrep"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], config: &Path, out: &Path) {
    let o = ensrep(args, config, out);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

/// Every file below `dir`, keyed by relative path.
fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.json");
    std::fs::write(&p, TINY).unwrap();
    p
}

fn full_pipeline(config: &Path, out: &Path) {
    for m in ["pca", "ae", "ivae"] {
        ok(&["train", "--method", m], config, out);
    }
    for m in ["pca", "ae", "ivae", "identity"] {
        ok(&["evaluate", "--method", m], config, out);
    }
    for m in ["pca", "ae", "ivae"] {
        ok(&["export-latents", "--method", m], config, out);
    }
    ok(&["ablate", "--method", "ivae"], config, out);
}

#[test]
fn every_command_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        ok(&["synth"], &config, out);
        full_pipeline(&config, out);
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.len() > 20, "{:?}", ta.keys().collect::<Vec<_>>());
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (k, v) in &ta {
        assert!(v == &tb[k], "{} differs between runs", k.display());
    }

    // a different seed changes the trained model
    let c = tmp.path().join("c");
    let o = Command::new(env!("CARGO_BIN_EXE_ensrep"))
        .args(["train", "--method", "ae", "--seed", "5", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&c)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_ne!(std::fs::read(c.join("ae_d2/model.bin")).unwrap(), ta[Path::new("ae_d2/model.bin")]);
}

#[test]
fn synth_writes_declared_dimensions_and_rejects_empty_datasets() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path());
    let out = tmp.path().join("s");
    ok(&["synth"], &config, &out);
    let ds = ensrep_core::fields::read_eff(out.join("synthetic.eff")).unwrap();
    assert_eq!((ds.n_days, ds.n_members, ds.height, ds.width), (30, 6, 4, 4));
    assert_eq!(ds.day_labels.len(), 30);

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"dataset": {"synthetic": {"n_days": 0}}}"#).unwrap();
    let o = ensrep(&["synth"], &bad, &tmp.path().join("bad"));
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_days"));
    assert!(!tmp.path().join("bad/synthetic.eff").exists());
}

fn csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (header, rows)
}

fn column(header: &[String], rows: &[Vec<String>], name: &str) -> Vec<f64> {
    let i = header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    rows.iter().map(|r| r[i].parse().unwrap()).collect()
}

#[test]
fn reports_histories_latents_and_ablation_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path());
    let out = tmp.path().join("r");
    full_pipeline(&config, &out);

    // one report row per test day; aggregates match the rows
    for m in ["pca", "ae", "ivae", "identity"] {
        let (h, rows) = csv(&out.join(format!("{m}_d2/report.csv")));
        assert_eq!(rows.len(), 5);
        let json: Value = serde_json::from_str(&std::fs::read_to_string(out.join(format!("{m}_d2/report.json"))).unwrap()).unwrap();
        for name in ["energy_multi", "sinkhorn", "mean_abs_mean_diff"] {
            let col = column(&h, &rows, name);
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            assert!((json["aggregate"][name].as_f64().unwrap() - mean).abs() <= 1e-12 * (1.0 + mean.abs()));
        }
    }

    // identity reconstruction scores zero everywhere and skill one against PCA
    let (h, rows) = csv(&out.join("identity_d2/report.csv"));
    for name in ["mean_abs_mean_diff", "mean_std_diff", "mean_energy_uni", "energy_multi", "mean_w1_uni", "sinkhorn"] {
        assert!(column(&h, &rows, name).iter().all(|&v| v == 0.0), "{name}");
    }
    for name in ["skill_energy_multi", "skill_sinkhorn", "skill_mean_w1_uni"] {
        assert!(column(&h, &rows, name).iter().all(|&v| v == 1.0), "{name}");
    }

    // neural runs record a non-increasing best validation column; PCA has no epochs
    for m in ["ae", "ivae"] {
        let (h, rows) = csv(&out.join(format!("{m}_d2/history.csv")));
        let best = column(&h, &rows, "best_val_loss");
        assert!(!best.is_empty() && best.windows(2).all(|w| w[1] <= w[0]));
    }
    let pca_run: Value = serde_json::from_str(&std::fs::read_to_string(out.join("pca_d2/run.json")).unwrap()).unwrap();
    assert_eq!(pca_run["epochs_run"], 0);

    // latents: one row per day, means equal direct encodings
    let mut cfg = ExperimentConfig::load(&config).unwrap();
    cfg.out = out.clone();
    let data = Prepared::new(&cfg).unwrap();
    for m in [Method::Pca, Method::Ae, Method::Ivae] {
        let (h, rows) = csv(&out.join(format!("{}_d2/latents.csv", m.name())));
        assert_eq!(rows.len(), 30);
        assert_eq!(h.last().unwrap(), "season_phase");
        let (model, _) = runs::load_run(&cfg.run_dir(m, 2), m).unwrap();
        for (t, row) in rows.iter().enumerate() {
            let g = model.latent(&data.days(t..t + 1)[0]).unwrap();
            let mu: Vec<f64> = row[1..3].iter().map(|v| v.parse().unwrap()).collect();
            assert_eq!(mu, g.mean);
        }
    }

    // ablation: one summary row per omega2, and the omega2 = 0 run carries no Sinkhorn weight
    let (h, rows) = csv(&out.join("ablation.csv"));
    assert_eq!(column(&h, &rows, "omega2"), vec![0.0, 1.0]);
    assert!(column(&h, &rows, "sinkhorn").iter().all(|v| v.is_finite()));
    let run: Value = serde_json::from_str(&std::fs::read_to_string(out.join("ablation/ivae_d2_w0_s0/run.json")).unwrap()).unwrap();
    assert_eq!(run["loss_weights"]["omega2"], 0.0);
    assert_eq!(run["loss_weights"]["omega1"], 1.0);
}

#[test]
fn missing_runs_and_bad_flags_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path());
    let out = tmp.path().join("m");
    let o = ensrep(&["evaluate", "--method", "ae"], &config, &out);
    assert!(!o.status.success());
    let o = ensrep(&["train", "--method", "pca", "--latent-dim", "6"], &config, &out);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("member count"));
    let o = ensrep(&["ablate", "--method", "pca"], &config, &out);
    assert!(!o.status.success());
}
