//! Metrics, rank diagnostics, the ablation ladder, and report files.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapter::{bind_pairs, LoraPair};
use crate::cascade::{run, run_vanilla_lora, CascadeConfig, Ladder, RunData, RunState};
use crate::data::{BatchTarget, Dataset};
use crate::error::{Error, Result};
use crate::model::{forward, Backbone};
use crate::numkit::{numerical_rank, singular_values, Matrix, Scalar, Tape};

pub const DEFAULT_TAU: f64 = 1e-6;

/// One row of a training or evaluation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    /// Data epoch, 1-based for train rows; completed epochs for eval rows.
    pub epoch: usize,
    /// Expert in progress (train rows) or experts merged so far (eval rows).
    pub expert: usize,
    pub step: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub lr: f64,
    /// Slow-delta std per target used for this expert's noise; empty when no noise stage runs.
    pub noise_sigma: Vec<f64>,
    pub slow_norm: f64,
    pub fast_norm: f64,
}

pub const CSV_COLUMNS: [&str; 11] = [
    "run_id",
    "epoch",
    "expert",
    "step",
    "split",
    "loss",
    "accuracy",
    "lr",
    "noise_sigma",
    "slow_norm",
    "fast_norm",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

/// Mean loss over rows, reduced in a fixed order so row order does not matter.
pub fn score_outputs<T: Scalar>(outputs: &Matrix<T>, targets: &BatchTarget<T>) -> Result<Score> {
    let n = outputs.rows();
    if n == 0 {
        return Err(Error::Argument("cannot score an empty batch".into()));
    }
    let mut per_row: Vec<f64> = Vec::with_capacity(n);
    let mut correct = 0usize;
    match targets {
        BatchTarget::Values(y) => {
            if y.shape() != outputs.shape() {
                return Err(Error::Shape {
                    op: "score",
                    left: outputs.shape(),
                    right: y.shape(),
                });
            }
            for i in 0..n {
                let s: f64 = outputs
                    .row(i)
                    .iter()
                    .zip(y.row(i))
                    .map(|(&o, &t)| (o.to_f64_lossless() - t.to_f64_lossless()).powi(2))
                    .sum();
                per_row.push(s / outputs.cols() as f64);
            }
        }
        BatchTarget::Labels(labels) => {
            if labels.len() != n {
                return Err(Error::ShapeMsg(format!("{} labels for {n} outputs", labels.len())));
            }
            for (i, &label) in labels.iter().enumerate() {
                let row: Vec<f64> = outputs.row(i).iter().map(|v| v.to_f64_lossless()).collect();
                if label >= row.len() {
                    return Err(Error::Argument(format!("label {label} ≥ {} classes", row.len())));
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                per_row.push(lse - row[label]);
                let argmax = row
                    .iter()
                    .enumerate()
                    .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
                correct += usize::from(argmax == label);
            }
        }
    }
    per_row.sort_by(f64::total_cmp);
    let loss = per_row.iter().sum::<f64>() / n as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("evaluation loss is {loss}")));
    }
    Ok(Score {
        loss,
        accuracy: matches!(targets, BatchTarget::Labels(_)).then(|| correct as f64 / n as f64),
    })
}

/// Loss (and accuracy for labelled data) of `backbone` plus unmerged `adapters` over a whole split.
pub fn evaluate<T: Scalar>(backbone: &Backbone<T>, adapters: &[LoraPair<T>], dataset: &Dataset) -> Result<Score> {
    if dataset.is_empty() {
        return Err(Error::Argument("cannot evaluate on an empty dataset".into()));
    }
    let batch = dataset.full_batch::<T>();
    let mut tape = Tape::new();
    let bound = backbone.bind(&mut tape, false);
    let binding = bind_pairs(adapters, &mut tape);
    let out = forward(&mut tape, backbone.config(), &bound, &binding, &batch.input)?;
    score_outputs(tape.value(out), &batch.target)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub target: String,
    pub singular_values: Vec<f64>,
    pub effective_rank: usize,
    pub tau: f64,
    pub epoch: usize,
}

/// Count of singular values above `tau · σ₁`; zero for a zero matrix.
pub fn effective_rank<T: Scalar>(delta: &Matrix<T>, tau: f64) -> Result<usize> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Argument(format!("tau {tau} outside (0, 1)")));
    }
    Ok(numerical_rank(&singular_values(delta)?, tau))
}

pub fn rank_report<T: Scalar>(target: &str, delta: &Matrix<T>, tau: f64, epoch: usize) -> Result<RankReport> {
    let effective_rank = effective_rank(delta, tau)?;
    Ok(RankReport {
        target: target.to_string(),
        singular_values: singular_values(delta)?,
        effective_rank,
        tau,
        epoch,
    })
}

/// Rank of the summed merged deltas per target, noise excluded.
pub fn rank_reports<T: Scalar>(state: &RunState<T>, tau: f64) -> Result<Vec<RankReport>> {
    state
        .ledger
        .slow_sum
        .iter()
        .map(|(name, delta)| rank_report(name, delta, tau, state.experts.epoch))
        .collect()
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub seed: u64,
    pub level: Ladder,
    pub row: String,
    pub split: String,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderSummary {
    pub level: Ladder,
    pub row: String,
    pub split: String,
    pub seeds: usize,
    pub loss_mean: f64,
    pub loss_std: f64,
    pub accuracy_mean: Option<f64>,
    pub accuracy_std: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LadderRun {
    pub seed: u64,
    pub level: Ladder,
    pub metrics: Vec<MetricsRecord>,
}

#[derive(Debug, Clone)]
pub struct LadderReport {
    pub rows: Vec<LadderRow>,
    pub summary: Vec<LadderSummary>,
    pub runs: Vec<LadderRun>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Final eval rows of a run, one per split, in first-seen order.
pub fn final_eval_rows(metrics: &[MetricsRecord]) -> Vec<&MetricsRecord> {
    let mut out: Vec<&MetricsRecord> = Vec::new();
    for m in metrics.iter().filter(|m| m.split != "train") {
        match out.iter_mut().find(|r| r.split == m.split) {
            Some(slot) => *slot = m,
            None => out.push(m),
        }
    }
    out
}

pub fn summarize(rows: &[LadderRow]) -> Vec<LadderSummary> {
    let mut keys: Vec<(Ladder, String)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|(l, s)| *l == r.level && *s == r.split) {
            keys.push((r.level, r.split.clone()));
        }
    }
    keys.into_iter()
        .map(|(level, split)| {
            let sel: Vec<&LadderRow> = rows.iter().filter(|r| r.level == level && r.split == split).collect();
            let losses: Vec<f64> = sel.iter().map(|r| r.loss).collect();
            let accs: Option<Vec<f64>> = sel.iter().map(|r| r.accuracy).collect();
            let (loss_mean, loss_std) = mean_std(&losses);
            let acc = accs.filter(|a| !a.is_empty()).map(|a| mean_std(&a));
            LadderSummary {
                level,
                row: level.row_label().to_string(),
                split,
                seeds: sel.len(),
                loss_mean,
                loss_std,
                accuracy_mean: acc.map(|a| a.0),
                accuracy_std: acc.map(|a| a.1),
            }
        })
        .collect()
}

/// Runs every ladder level for every seed; `prepare(seed)` supplies the backbone and data.
pub fn ablation_ladder<T: Scalar>(
    base: &CascadeConfig,
    seeds: &[u64],
    mut prepare: impl FnMut(u64) -> Result<(Backbone<T>, RunData)>,
) -> Result<LadderReport> {
    if seeds.is_empty() {
        return Err(Error::Argument("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &seed in seeds {
        let (backbone, data) = prepare(seed)?;
        for level in Ladder::ALL {
            let cfg = CascadeConfig {
                ladder: level,
                seed,
                run_id: format!("{}-seed{seed}", level.name()),
                ..base.clone()
            };
            let report = if level == Ladder::Vanilla {
                run_vanilla_lora(&cfg, &backbone, &data)
            } else {
                run(&cfg, &backbone, &data)
            }
            .map_err(|e| e.context(format!("ladder level `{}`, seed {seed}", level.name())))?;
            for m in final_eval_rows(report.metrics()) {
                rows.push(LadderRow {
                    seed,
                    level,
                    row: level.row_label().to_string(),
                    split: m.split.clone(),
                    loss: m.loss,
                    accuracy: m.accuracy,
                });
            }
            runs.push(LadderRun {
                seed,
                level,
                metrics: report.state.metrics,
            });
        }
    }
    Ok(LadderReport {
        summary: summarize(&rows),
        rows,
        runs,
    })
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Jsonl,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Jsonl => "jsonl",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "jsonl" => Ok(ReportFormat::Jsonl),
            other => Err(Error::config("report.format", format!("unknown format `{other}`"))),
        }
    }
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Argument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn opt_f64(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Schema(format!("csv: {e}"))
}

/// Serializes records as CSV with the fixed [`CSV_COLUMNS`] header.
pub fn records_to_csv(records: &[MetricsRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for r in records {
        let sigma = r.noise_sigma.iter().map(f64::to_string).collect::<Vec<_>>().join(";");
        w.write_record([
            r.run_id.clone(),
            r.epoch.to_string(),
            r.expert.to_string(),
            r.step.to_string(),
            r.split.clone(),
            r.loss.to_string(),
            opt_f64(r.accuracy),
            r.lr.to_string(),
            sigma,
            r.slow_norm.to_string(),
            r.fast_norm.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Schema(format!("csv: {e}")))
}

pub fn records_to_jsonl(records: &[MetricsRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Schema(format!("json: {e}")))?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn emit_report(records: &[MetricsRecord], format: ReportFormat, path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Argument("refusing to write an empty report".into()));
    }
    let bytes = match format {
        ReportFormat::Csv => records_to_csv(records)?,
        ReportFormat::Jsonl => records_to_jsonl(records)?,
    };
    write_atomic(path, &bytes)
}

fn parse_field<V: FromStr>(s: &str, column: &str, line: usize) -> Result<V> {
    s.parse().map_err(|_| Error::Ingestion {
        line,
        msg: format!("column `{column}`: cannot parse `{s}`"),
    })
}

pub fn load_report(path: &Path, format: ReportFormat) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        ReportFormat::Jsonl => text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Ingestion {
                    line: i + 1,
                    msg: e.to_string(),
                })
            })
            .collect(),
        ReportFormat::Csv => {
            let mut rd = csv::Reader::from_reader(text.as_bytes());
            let header: Vec<String> = rd.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
            if header != CSV_COLUMNS {
                return Err(Error::Schema(format!("unexpected report header {header:?}")));
            }
            let mut out = Vec::new();
            for (i, rec) in rd.records().enumerate() {
                let line = i + 2;
                let rec = rec.map_err(|e| Error::Ingestion { line, msg: e.to_string() })?;
                let f = |j: usize| rec.get(j).unwrap_or("");
                out.push(MetricsRecord {
                    run_id: f(0).to_string(),
                    epoch: parse_field(f(1), "epoch", line)?,
                    expert: parse_field(f(2), "expert", line)?,
                    step: parse_field(f(3), "step", line)?,
                    split: f(4).to_string(),
                    loss: parse_field(f(5), "loss", line)?,
                    accuracy: if f(6).is_empty() { None } else { Some(parse_field(f(6), "accuracy", line)?) },
                    lr: parse_field(f(7), "lr", line)?,
                    noise_sigma: if f(8).is_empty() {
                        Vec::new()
                    } else {
                        f(8).split(';').map(|s| parse_field(s, "noise_sigma", line)).collect::<Result<_>>()?
                    },
                    slow_norm: parse_field(f(9), "slow_norm", line)?,
                    fast_norm: parse_field(f(10), "fast_norm", line)?,
                });
            }
            Ok(out)
        }
    }
}

pub const LADDER_COLUMNS: [&str; 6] = ["seed", "level", "row", "split", "loss", "accuracy"];
pub const SUMMARY_COLUMNS: [&str; 8] =
    ["level", "row", "split", "seeds", "loss_mean", "loss_std", "accuracy_mean", "accuracy_std"];

/// Per-seed rows followed by mean/std rows, each block with its own header.
pub fn emit_ladder_report(report: &LadderReport, format: ReportFormat, path: &Path) -> Result<()> {
    if report.rows.is_empty() {
        return Err(Error::Argument("refusing to write an empty ladder report".into()));
    }
    let bytes = match format {
        ReportFormat::Csv => {
            let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
            w.write_record(LADDER_COLUMNS).map_err(csv_err)?;
            for r in &report.rows {
                w.write_record([
                    r.seed.to_string(),
                    r.level.name().to_string(),
                    r.row.clone(),
                    r.split.clone(),
                    r.loss.to_string(),
                    opt_f64(r.accuracy),
                ])
                .map_err(csv_err)?;
            }
            w.write_record(SUMMARY_COLUMNS).map_err(csv_err)?;
            for s in &report.summary {
                w.write_record([
                    s.level.name().to_string(),
                    s.row.clone(),
                    s.split.clone(),
                    s.seeds.to_string(),
                    s.loss_mean.to_string(),
                    s.loss_std.to_string(),
                    opt_f64(s.accuracy_mean),
                    opt_f64(s.accuracy_std),
                ])
                .map_err(csv_err)?;
            }
            w.into_inner().map_err(|e| Error::Schema(format!("csv: {e}")))?
        }
        ReportFormat::Jsonl => {
            let mut out = Vec::new();
            let json = |e: serde_json::Error| Error::Schema(format!("json: {e}"));
            for r in &report.rows {
                serde_json::to_writer(&mut out, &serde_json::json!({ "kind": "row", "row": r })).map_err(json)?;
                out.push(b'\n');
            }
            for s in &report.summary {
                serde_json::to_writer(&mut out, &serde_json::json!({ "kind": "summary", "summary": s }))
                    .map_err(json)?;
                out.push(b'\n');
            }
            out
        }
    };
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(split: &str, loss: f64) -> MetricsRecord {
        MetricsRecord {
            run_id: "r".into(),
            epoch: 1,
            expert: 1,
            step: 3,
            split: split.into(),
            loss,
            accuracy: Some(0.25),
            lr: 1e-3,
            noise_sigma: vec![0.1, 0.2],
            slow_norm: 1.5,
            fast_norm: 0.0,
        }
    }

    #[test]
    fn perfect_regression_scores_zero() {
        let y = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let s = score_outputs(&y, &BatchTarget::Values(y.clone())).unwrap();
        assert_eq!(s.loss, 0.0);
        assert_eq!(s.accuracy, None);
    }

    #[test]
    fn cross_entropy_hand_value() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 0.5]]).unwrap();
        let s = score_outputs(&x, &BatchTarget::Labels(vec![1])).unwrap();
        let expected = -(2.0f64.exp() / (1.0f64.exp() + 2.0f64.exp() + 0.5f64.exp())).ln();
        assert!((s.loss - expected).abs() < 1e-12);
        assert_eq!(s.accuracy, Some(1.0));
    }

    #[test]
    fn rank_of_simple_matrices() {
        assert_eq!(effective_rank(&Matrix::<f64>::zeros(4, 4), 1e-6).unwrap(), 0);
        assert_eq!(effective_rank(&Matrix::<f64>::identity(4), 1e-6).unwrap(), 4);
        assert!(effective_rank(&Matrix::<f64>::identity(4), 1.0).is_err());
    }

    #[test]
    fn mean_std_sample_convention() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
    }

    #[test]
    fn csv_and_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut recs = vec![record("val", 0.123456789012345), record("train", 1.0 / 3.0)];
        recs[1].accuracy = None;
        recs[1].noise_sigma.clear();
        for fmt in [ReportFormat::Csv, ReportFormat::Jsonl] {
            let p = dir.path().join(format!("m.{}", fmt.extension()));
            emit_report(&recs, fmt, &p).unwrap();
            assert_eq!(load_report(&p, fmt).unwrap(), recs);
        }
        let head = fs::read_to_string(dir.path().join("m.csv")).unwrap();
        assert!(head.starts_with("run_id,epoch,expert,step,split,loss,accuracy,lr,noise_sigma,slow_norm,fast_norm\n"));
    }

    #[test]
    fn empty_report_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            emit_report(&[], ReportFormat::Csv, &dir.path().join("x.csv")),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let e = emit_report(&[record("val", 1.0)], ReportFormat::Csv, Path::new("/nonexistent-dir/x.csv")).unwrap_err();
        assert_eq!(e.exit_code(), 4);
    }
}
