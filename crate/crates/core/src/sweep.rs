//! Ablation variants and one-axis robustness sweeps.

use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::Interaction;
use crate::eval::MetricsTable;
use crate::model::Scoring;
use crate::pipeline::{prepare, train_and_evaluate, PipelineError};

/// The full model and the four module ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Decomposition loss removed.
    NoPmsid,
    /// Matching loss removed.
    NoPmsim,
    /// Both auxiliary losses removed.
    NoPmsidPmsim,
    /// Shift-weighted scoring replaced by a mean over branches.
    NoPmi,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoPmsidPmsim,
        Variant::NoPmsim,
        Variant::NoPmsid,
        Variant::NoPmi,
    ];

    pub fn from_flags(no_pmsid: bool, no_pmsim: bool, no_pmi: bool) -> Result<Self, String> {
        match (no_pmsid, no_pmsim, no_pmi) {
            (false, false, false) => Ok(Variant::Full),
            (true, false, false) => Ok(Variant::NoPmsid),
            (false, true, false) => Ok(Variant::NoPmsim),
            (true, true, false) => Ok(Variant::NoPmsidPmsim),
            (false, false, true) => Ok(Variant::NoPmi),
            _ => Err("--no-pmi cannot be combined with other ablation flags".into()),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPmsid => "w/o PMSID",
            Variant::NoPmsim => "w/o PMSIM",
            Variant::NoPmsidPmsim => "w/o PMSID&PMSIM",
            Variant::NoPmi => "w/o PMI",
        }
    }

    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoPmsid => c.train.gamma1 = 0.0,
            Variant::NoPmsim => c.train.gamma2 = 0.0,
            Variant::NoPmsidPmsim => {
                c.train.gamma1 = 0.0;
                c.train.gamma2 = 0.0;
            }
            Variant::NoPmi => c.model.scoring = Scoring::Mean,
        }
        c
    }
}

/// Hyperparameter varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Category label dropout rate.
    Rho,
    /// Number of shift levels.
    Levels,
    Gamma1,
    Gamma2,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Rho => "rho",
            SweepAxis::Levels => "levels",
            SweepAxis::Gamma1 => "gamma1",
            SweepAxis::Gamma2 => "gamma2",
        }
    }

    pub fn apply(self, base: &RunConfig, value: f64) -> Result<RunConfig, String> {
        let mut c = base.clone();
        match self {
            SweepAxis::Rho => c.data.label_dropout = value,
            SweepAxis::Levels => {
                if value.fract() != 0.0 || value < 0.0 {
                    return Err(format!("levels must be a whole number, got {value}"));
                }
                c.model.levels = value as usize;
            }
            SweepAxis::Gamma1 => c.train.gamma1 = value,
            SweepAxis::Gamma2 => c.train.gamma2 = value,
        }
        c.validate().map_err(|e| e.to_string())?;
        Ok(c)
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rho" => Ok(SweepAxis::Rho),
            "levels" | "v" => Ok(SweepAxis::Levels),
            "gamma1" => Ok(SweepAxis::Gamma1),
            "gamma2" => Ok(SweepAxis::Gamma2),
            other => Err(format!("unknown sweep axis {other} (expected rho, levels, gamma1 or gamma2)")),
        }
    }
}

/// One grid point; `metrics` is `None` and `error` set when the run failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub value: f64,
    pub metrics: Option<MetricsTable>,
    pub best_epoch: Option<usize>,
    pub train_seconds: f64,
    pub eval_seconds: f64,
    pub error: Option<String>,
}

fn run_point(interactions: &[Interaction], cfg: &RunConfig) -> Result<crate::pipeline::RunOutcome, PipelineError> {
    let prepared = prepare(interactions.to_vec(), &cfg.prepare_config())?;
    train_and_evaluate(&prepared.splits, prepared.dataset.catalog.num_items(), cfg)
}

/// Trains and evaluates once per value, all with the base seed. Failed points
/// are recorded and the sweep moves on.
pub fn robustness_sweep(
    interactions: &[Interaction],
    base: &RunConfig,
    axis: SweepAxis,
    values: &[f64],
    mut on_row: impl FnMut(&SweepRow),
) -> Vec<SweepRow> {
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let result = axis
            .apply(base, value)
            .and_then(|cfg| run_point(interactions, &cfg).map_err(|e| e.to_string()));
        let row = match result {
            Ok(out) => SweepRow {
                setting: axis.name().to_string(),
                value,
                metrics: Some(out.test),
                best_epoch: Some(out.fit.best_epoch),
                train_seconds: out.train_seconds,
                eval_seconds: out.eval_seconds,
                error: None,
            },
            Err(e) => SweepRow {
                setting: axis.name().to_string(),
                value,
                metrics: None,
                best_epoch: None,
                train_seconds: 0.0,
                eval_seconds: 0.0,
                error: Some(e),
            },
        };
        on_row(&row);
        rows.push(row);
    }
    rows
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `setting,value,count,recall@k...,ndcg@k...,best_epoch,train_seconds,eval_seconds,error`.
pub fn write_sweep_csv<W: Write>(mut w: W, rows: &[SweepRow], ks: &[usize]) -> std::io::Result<()> {
    let mut header = vec!["setting".to_string(), "value".into(), "count".into()];
    header.extend(ks.iter().map(|k| format!("recall@{k}")));
    header.extend(ks.iter().map(|k| format!("ndcg@{k}")));
    header.extend(["best_epoch", "train_seconds", "eval_seconds", "error"].map(String::from));
    writeln!(w, "{}", header.join(","))?;
    for r in rows {
        let mut cells = vec![csv_field(&r.setting), r.value.to_string()];
        match &r.metrics {
            Some(m) => {
                cells.push(m.count.to_string());
                cells.extend(ks.iter().map(|&k| m.recall_at(k).to_string()));
                cells.extend(ks.iter().map(|&k| m.ndcg_at(k).to_string()));
            }
            None => cells.extend(std::iter::repeat_n(String::new(), 1 + 2 * ks.len())),
        }
        cells.push(r.best_epoch.map(|e| e.to_string()).unwrap_or_default());
        cells.push(format!("{:.6}", r.train_seconds));
        cells.push(format!("{:.6}", r.eval_seconds));
        cells.push(csv_field(r.error.as_deref().unwrap_or("")));
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}
