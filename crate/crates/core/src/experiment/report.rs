//! Hyperparameter sweeps and the accuracy-versus-sensitivity report.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::pipeline::{run_train, DeskData, RunRecord, TargetSummary, Workspace};
use super::{set_lambda, ExperimentConfig};
use crate::error::{Result, SadaError};
use crate::grid::{write_json, Fingerprinter};
use crate::plot::{write_plot, PlotStyle, Series};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Lambda,
    #[serde(rename = "T")]
    Steps,
    Delta,
    /// Random-init level of the augmentation.
    Epsilon,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::Steps => "T",
            SweepAxis::Delta => "delta",
            SweepAxis::Epsilon => "epsilon",
        }
    }

    /// Sets this hyperparameter of `cfg`. Lambda 0 follows the w/o-JS
    /// ablation (see [`set_lambda`]).
    pub fn apply(self, cfg: &mut ExperimentConfig, value: f64) -> Result<()> {
        match self {
            SweepAxis::Lambda => set_lambda(cfg, value),
            SweepAxis::Steps => {
                if !(value >= 0.0 && value.fract() == 0.0) {
                    return Err(SadaError::Config(format!("T must be a nonnegative integer, got {value}")));
                }
                cfg.train.augmentation.steps = value as usize;
            }
            SweepAxis::Delta => cfg.train.augmentation.delta = value,
            SweepAxis::Epsilon => cfg.train.augmentation.epsilon = value,
        }
        Ok(())
    }
}

impl FromStr for SweepAxis {
    type Err = SadaError;

    fn from_str(s: &str) -> Result<Self> {
        [SweepAxis::Lambda, SweepAxis::Steps, SweepAxis::Delta, SweepAxis::Epsilon]
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| SadaError::Config(format!("unknown sweep axis {s:?}; expected lambda, T, delta or epsilon")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    /// Root-relative record path; `None` when the run failed.
    pub record: Option<String>,
    pub error: Option<String>,
    pub targets: Vec<TargetSummary>,
    pub mean_target_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub base_config_hash: String,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }
}

/// One training run per value of `axis`. A failing value is recorded and the
/// sweep moves on. Writes `sweep.json` and `sweep.png` (+ CSV sidecar) to
/// `<root>/sweeps/<name>-<axis>-<hash>/` and returns that directory too.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    ws: &Workspace,
    data: Option<&DeskData>,
) -> Result<(SweepReport, PathBuf)> {
    if values.is_empty() {
        return Err(SadaError::Config("sweep needs at least one value".into()));
    }
    base.validate()?;
    let mut key = Fingerprinter::new("sweep");
    key.str(&base.hash()).str(axis.name()).f64s(values);
    let out = ws.root().join("sweeps").join(format!("{}-{}-{}", base.name, axis.name(), &key.finish()[..12]));
    fs::create_dir_all(&out).map_err(|e| SadaError::io(&out, e))?;
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = base.clone();
        cfg.name = format!("{}-{}{}", base.name, axis.name(), value);
        let outcome = axis.apply(&mut cfg, value).and_then(|_| run_train(&cfg, ws, data));
        rows.push(match outcome {
            Ok((record, path)) => SweepRow {
                value,
                record: Some(path.strip_prefix(ws.root()).unwrap_or(&path).to_string_lossy().replace('\\', "/")),
                error: None,
                targets: record.targets.clone(),
                mean_target_accuracy: record.mean_target_accuracy,
            },
            Err(e) => {
                log::warn!("sweep {}={value} failed: {e}", axis.name());
                SweepRow {
                    value,
                    record: None,
                    error: Some(e.to_string()),
                    targets: Vec::new(),
                    mean_target_accuracy: f64::NAN,
                }
            }
        });
    }
    let report = SweepReport { axis, base_config_hash: base.hash(), rows };
    let target_names: Vec<String> = base.targets.iter().map(|t| t.label()).collect();
    let mut series: Vec<Series> = target_names
        .iter()
        .map(|name| Series {
            name: name.clone(),
            points: report
                .rows
                .iter()
                .map(|r| (r.value, r.targets.iter().find(|t| &t.target == name).map_or(f64::NAN, |t| t.mean)))
                .collect(),
        })
        .collect();
    series.push(Series {
        name: "mean".into(),
        points: report.rows.iter().map(|r| (r.value, r.mean_target_accuracy)).collect(),
    });
    write_plot(&out.join("sweep.png"), &series, PlotStyle::Lines, axis.name(), "accuracy")?;
    write_json(&out.join("sweep.json"), &report)?;
    Ok((report, out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportPoint {
    pub run: String,
    pub name: String,
    pub map_l1: f64,
    pub mean_target_accuracy: f64,
    pub clean: f64,
    pub targets: Vec<TargetSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedRun {
    pub run: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub points: Vec<ReportPoint>,
    pub skipped: Vec<SkippedRun>,
    /// Spearman correlation of map l1 and mean target accuracy; `None`
    /// when undefined.
    pub rank_correlation: Option<f64>,
    pub warnings: Vec<String>,
}

/// Scatter of mean target accuracy against the map l1 summary, one point
/// per run (its latest record). Runs without a record or map summary are
/// listed as skipped. Writes `report.json`, `report.png` with its CSV
/// sidecar, and `summary.csv` to `out_dir`.
pub fn run_report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<Report> {
    fs::create_dir_all(out_dir).map_err(|e| SadaError::io(out_dir, e))?;
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for dir in run_dirs {
        let run = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        match RunRecord::load_latest(dir) {
            Ok(Some((r, _))) if r.map_l1.mean.is_finite() => points.push(ReportPoint {
                run,
                name: r.name.clone(),
                map_l1: r.map_l1.mean,
                mean_target_accuracy: r.mean_target_accuracy,
                clean: r.clean.mean,
                targets: r.targets.clone(),
            }),
            Ok(Some(_)) => skipped.push(SkippedRun { run, reason: "record has no sensitivity map summary".into() }),
            Ok(None) => skipped.push(SkippedRun { run, reason: "no run record (run `sada train` first)".into() }),
            Err(e) => skipped.push(SkippedRun { run, reason: e.to_string() }),
        }
    }
    for s in &skipped {
        log::warn!("report skips {}: {}", s.run, s.reason);
    }
    let xs: Vec<f64> = points.iter().map(|p| p.map_l1).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.mean_target_accuracy).collect();
    let mut warnings = Vec::new();
    if points.len() < 2 {
        warnings.push(format!("correlation undefined with {} point(s)", points.len()));
    } else {
        let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
        if constant(&xs) {
            warnings.push("zero variance in map l1 across runs; correlation undefined".into());
        }
        if constant(&ys) {
            warnings.push("zero variance in target accuracy across runs; correlation undefined".into());
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let report = Report { rank_correlation: rank_correlation(&xs, &ys), points, skipped, warnings };

    let series: Vec<Series> = report
        .points
        .iter()
        .map(|p| Series { name: p.run.clone(), points: vec![(p.map_l1, p.mean_target_accuracy)] })
        .collect();
    write_plot(&out_dir.join("report.png"), &series, PlotStyle::Markers, "map_l1", "mean_target_accuracy")?;
    let summary = out_dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary)?;
    let target_names: Vec<String> =
        report.points.first().map(|p| p.targets.iter().map(|t| t.target.clone()).collect()).unwrap_or_default();
    let mut header =
        vec!["run".to_string(), "name".into(), "map_l1".into(), "mean_target_accuracy".into(), "clean".into()];
    header.extend(target_names.iter().cloned());
    w.write_record(&header)?;
    for p in &report.points {
        let mut row = vec![
            p.run.clone(),
            p.name.clone(),
            p.map_l1.to_string(),
            p.mean_target_accuracy.to_string(),
            p.clean.to_string(),
        ];
        row.extend(
            target_names
                .iter()
                .map(|n| p.targets.iter().find(|t| &t.target == n).map_or(String::new(), |t| t.mean.to_string())),
        );
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| SadaError::io(&summary, e))?;
    write_json(&out_dir.join("report.json"), &report)?;
    Ok(report)
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties. `None` for fewer
/// than two points, mismatched lengths or a constant input.
pub fn rank_correlation(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 || x.iter().chain(y).any(|v| !v.is_finite()) {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}
