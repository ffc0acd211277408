//! Per-day metric rows, aggregates and skill scores, with CSV/JSON output.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{
    energy_distance_multi, mean_energy_distance_uni, mean_wasserstein1_uni, pixel_mean_absdiff,
    pixel_std, pixel_std_diff, sinkhorn_distance, skill_score, SinkhornConfig,
};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// All scores of one test day, in physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayMetrics {
    pub day: String,
    /// Pixel average of `|mean(X) - mean(X~)|`.
    pub mean_abs_mean_diff: f64,
    /// Pixel average of `sd(X) - sd(X~)`.
    pub mean_std_diff: f64,
    pub mean_energy_uni: f64,
    pub energy_multi: f64,
    /// Present only when both ensembles have the same size.
    pub mean_w1_uni: Option<f64>,
    pub sinkhorn: f64,
    pub sinkhorn_cost: f64,
    pub sinkhorn_converged: bool,
    /// Pixel average of the input ensemble standard deviation.
    pub input_mean_std: f64,
    pub recon_mean_std: f64,
}

fn avg(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl DayMetrics {
    pub fn compute(day: impl Into<String>, x: &Tensor, y: &Tensor, sinkhorn: &SinkhornConfig) -> Result<Self> {
        let sk = sinkhorn_distance(x, y, sinkhorn)?;
        Ok(Self {
            day: day.into(),
            mean_abs_mean_diff: avg(&pixel_mean_absdiff(x, y)?),
            mean_std_diff: avg(&pixel_std_diff(x, y)?),
            mean_energy_uni: mean_energy_distance_uni(x, y)?,
            energy_multi: energy_distance_multi(x, y)?,
            mean_w1_uni: if x.rows() == y.rows() {
                Some(mean_wasserstein1_uni(x, y)?)
            } else {
                None
            },
            sinkhorn: sk.distance,
            sinkhorn_cost: sk.cost,
            sinkhorn_converged: sk.converged,
            input_mean_std: avg(&pixel_std(x)),
            recon_mean_std: avg(&pixel_std(y)),
        })
    }

    /// Scores that admit a skill score, keyed by column name.
    pub fn scores(&self) -> [(&'static str, Option<f64>); 5] {
        [
            ("mean_abs_mean_diff", Some(self.mean_abs_mean_diff)),
            ("mean_energy_uni", Some(self.mean_energy_uni)),
            ("energy_multi", Some(self.energy_multi)),
            ("mean_w1_uni", self.mean_w1_uni),
            ("sinkhorn", Some(self.sinkhorn)),
        ]
    }

    fn numeric_columns(&self) -> [(&'static str, Option<f64>); 10] {
        [
            ("mean_abs_mean_diff", Some(self.mean_abs_mean_diff)),
            ("mean_std_diff", Some(self.mean_std_diff)),
            ("mean_energy_uni", Some(self.mean_energy_uni)),
            ("energy_multi", Some(self.energy_multi)),
            ("mean_w1_uni", self.mean_w1_uni),
            ("sinkhorn", Some(self.sinkhorn)),
            ("sinkhorn_cost", Some(self.sinkhorn_cost)),
            ("sinkhorn_converged", Some(if self.sinkhorn_converged { 1.0 } else { 0.0 })),
            ("input_mean_std", Some(self.input_mean_std)),
            ("recon_mean_std", Some(self.recon_mean_std)),
        ]
    }
}

pub const SKILL_COLUMNS: [&str; 5] = [
    "mean_abs_mean_diff",
    "mean_energy_uni",
    "energy_multi",
    "mean_w1_uni",
    "sinkhorn",
];

const CSV_COLUMNS: [&str; 11] = [
    "day",
    "mean_abs_mean_diff",
    "mean_std_diff",
    "mean_energy_uni",
    "energy_multi",
    "mean_w1_uni",
    "sinkhorn",
    "sinkhorn_cost",
    "sinkhorn_converged",
    "input_mean_std",
    "recon_mean_std",
];

/// Skill scores against a reference run, aligned with the report rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillSummary {
    pub reference: String,
    pub per_day: Vec<[Option<f64>; 5]>,
}

impl SkillSummary {
    /// Mean skill per column over the days where it is defined.
    pub fn mean(&self) -> BTreeMap<String, Option<f64>> {
        SKILL_COLUMNS
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let vals: Vec<f64> = self.per_day.iter().filter_map(|r| r[k]).collect();
                let m = (!vals.is_empty()).then(|| avg(&vals));
                (name.to_string(), m)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub rows: Vec<DayMetrics>,
    pub skill: Option<SkillSummary>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricReport {
    pub fn new(method: impl Into<String>, rows: Vec<DayMetrics>) -> Self {
        Self {
            method: method.into(),
            rows,
            skill: None,
        }
    }

    /// Column means over days (undefined entries skipped).
    pub fn aggregate(&self) -> BTreeMap<String, f64> {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in &self.rows {
            for (name, v) in r.numeric_columns() {
                let e = sums.entry(name.to_string()).or_insert((0.0, 0));
                if let Some(v) = v {
                    e.0 += v;
                    e.1 += 1;
                }
            }
        }
        sums.into_iter()
            .map(|(k, (s, n))| (k, if n == 0 { f64::NAN } else { s / n as f64 }))
            .collect()
    }

    /// Attaches day-matched skill scores against `reference`.
    pub fn with_skill(mut self, reference: &MetricReport) -> Self {
        let by_day: BTreeMap<&str, &DayMetrics> =
            reference.rows.iter().map(|r| (r.day.as_str(), r)).collect();
        let per_day = self
            .rows
            .iter()
            .map(|r| {
                let mut out = [None; 5];
                if let Some(rf) = by_day.get(r.day.as_str()) {
                    for (k, ((_, a), (_, b))) in r.scores().into_iter().zip(rf.scores()).enumerate() {
                        out[k] = match (a, b) {
                            (Some(a), Some(b)) => skill_score(a, b),
                            _ => None,
                        };
                    }
                }
                out
            })
            .collect();
        self.skill = Some(SkillSummary {
            reference: reference.method.clone(),
            per_day,
        });
        self
    }

    pub fn to_csv(&self) -> String {
        let mut out = CSV_COLUMNS.join(",");
        if self.skill.is_some() {
            for c in SKILL_COLUMNS {
                write!(out, ",skill_{c}").unwrap();
            }
        }
        out.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            out.push_str(&r.day);
            for (_, v) in r.numeric_columns() {
                out.push(',');
                out.push_str(&fmt_opt(v));
            }
            if let Some(sk) = &self.skill {
                for v in sk.per_day[i] {
                    out.push(',');
                    out.push_str(&fmt_opt(v));
                }
            }
            out.push('\n');
        }
        out
    }

    /// Parses the per-day columns written by [`Self::to_csv`]; skill columns
    /// are ignored.
    pub fn from_csv(method: impl Into<String>, text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
        if header.len() < CSV_COLUMNS.len() || header[..CSV_COLUMNS.len()] != CSV_COLUMNS {
            return Err(Error::InvalidArgument("unexpected metric CSV header".into()));
        }
        let parse = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>()
                .map(Some)
                .map_err(|e| Error::InvalidArgument(format!("bad number {s:?}: {e}")))
        };
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() < CSV_COLUMNS.len() {
                return Err(Error::InvalidArgument(format!("short metric row: {line}")));
            }
            let req = |i: usize| -> Result<f64> {
                parse(f[i])?.ok_or_else(|| Error::InvalidArgument(format!("missing column {}", CSV_COLUMNS[i])))
            };
            rows.push(DayMetrics {
                day: f[0].to_string(),
                mean_abs_mean_diff: req(1)?,
                mean_std_diff: req(2)?,
                mean_energy_uni: req(3)?,
                energy_multi: req(4)?,
                mean_w1_uni: parse(f[5])?,
                sinkhorn: req(6)?,
                sinkhorn_cost: req(7)?,
                sinkhorn_converged: req(8)? != 0.0,
                input_mean_std: req(9)?,
                recon_mean_std: req(10)?,
            });
        }
        Ok(Self::new(method, rows))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut obj = serde_json::Map::new();
        obj.insert("method".into(), self.method.clone().into());
        obj.insert("n_days".into(), self.rows.len().into());
        obj.insert("aggregate".into(), serde_json::to_value(self.aggregate())?);
        if let Some(sk) = &self.skill {
            let mut s = serde_json::Map::new();
            s.insert("reference".into(), sk.reference.clone().into());
            s.insert("mean".into(), serde_json::to_value(sk.mean())?);
            obj.insert("skill".into(), s.into());
        }
        Ok(serde_json::to_string_pretty(&serde_json::Value::Object(obj))?)
    }
}
