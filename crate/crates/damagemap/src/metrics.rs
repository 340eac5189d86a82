//! Confusion-matrix accumulation, per-class/macro IoU, F1, precision and
//! recall, multi-run aggregation, and report export (CSV tables + SVG
//! charts).
//!
//! Conventions, chosen once and tested:
//! - the macro average covers the four damage classes only; background is
//!   tracked in the matrix but excluded from headline numbers,
//! - zero-denominator metrics are 0 (not NaN) so early-epoch reports stay
//!   plottable,
//! - run aggregation uses the population standard deviation (the runs are
//!   the whole population, not a sample),
//! - "best" per-class scores for bar charts are the maxima over epochs
//!   within each run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::schema::{DamageClass, NUM_CLASSES};
use crate::svgplot::{self, Bar, Series};

/// Header row of every machine-readable metric table.
pub const CSV_HEADER: &str = "run_id,epoch,class,iou,f1,precision,recall";

/// Pixel-level confusion counts; `cells[t][p]` counts pixels of true class
/// `t` predicted as `p`.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConfusionMatrix {
    cells: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds the joint counts of one predicted/target grid pair.
    /// Accumulation is associative: batches may be split arbitrarily.
    pub fn accumulate(
        &mut self,
        predicted: ArrayView2<'_, u8>,
        target: ArrayView2<'_, u8>,
    ) -> Result<()> {
        if predicted.dim() != target.dim() {
            return Err(Error::InvalidInput(format!(
                "predicted {:?} and target {:?} shapes differ",
                predicted.dim(),
                target.dim()
            )));
        }
        for (&p, &t) in predicted.iter().zip(target.iter()) {
            if p as usize >= NUM_CLASSES || t as usize >= NUM_CLASSES {
                return Err(Error::InvalidInput(format!(
                    "class value out of range: predicted {p}, target {t}"
                )));
            }
            self.cells[t as usize][p as usize] += 1;
        }
        Ok(())
    }

    /// Cell-wise addition; commutative and associative, so independently
    /// accumulated matrices can be merged in any order.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for t in 0..NUM_CLASSES {
            for p in 0..NUM_CLASSES {
                self.cells[t][p] += other.cells[t][p];
            }
        }
    }

    pub fn cell(&self, true_class: DamageClass, predicted: DamageClass) -> u64 {
        self.cells[true_class.id() as usize][predicted.id() as usize]
    }

    /// Total number of accumulated pixels.
    pub fn total(&self) -> u64 {
        self.cells.iter().flatten().sum()
    }
}

/// The four headline scores for one class (or a macro average).
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct ClassScores {
    pub iou: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Per-class and macro scores for one evaluation of one run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub run_id: String,
    pub epoch: usize,
    /// Scores for the four damage classes (background excluded).
    pub per_class: BTreeMap<DamageClass, ClassScores>,
    /// Unweighted mean over the four damage classes.
    pub macro_avg: ClassScores,
}

fn ratio(num: u64, den: u64) -> f64 {
    // Zero-denominator convention: report 0, never NaN.
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Computes per-class and macro scores from an accumulated matrix.
pub fn per_class_metrics(cm: &ConfusionMatrix, run_id: &str, epoch: usize) -> MetricReport {
    let mut per_class = BTreeMap::new();
    let mut macro_avg = ClassScores::default();
    for class in DamageClass::DAMAGE {
        let n = class.id() as usize;
        let tp = cm.cells[n][n];
        let fp: u64 = (0..NUM_CLASSES).filter(|&t| t != n).map(|t| cm.cells[t][n]).sum();
        let fne: u64 = (0..NUM_CLASSES).filter(|&p| p != n).map(|p| cm.cells[n][p]).sum();
        let scores = ClassScores {
            iou: ratio(tp, tp + fp + fne),
            f1: ratio(2 * tp, 2 * tp + fp + fne),
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fne),
        };
        macro_avg.iou += scores.iou / DamageClass::DAMAGE.len() as f64;
        macro_avg.f1 += scores.f1 / DamageClass::DAMAGE.len() as f64;
        macro_avg.precision += scores.precision / DamageClass::DAMAGE.len() as f64;
        macro_avg.recall += scores.recall / DamageClass::DAMAGE.len() as f64;
        per_class.insert(class, scores);
    }
    MetricReport { run_id: run_id.to_string(), epoch, per_class, macro_avg }
}

/// Mean and population standard deviation of one quantity across runs.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Population standard deviation (`n` in the denominator); 0 for a single
/// value.
pub fn population_std(values: &[f64]) -> f64 {
    if values.len() <= 1 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn mean_std(values: &[f64]) -> MeanStd {
    MeanStd {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        std: population_std(values),
    }
}

/// Mean ± std of each score across runs.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct SummaryScores {
    pub iou: MeanStd,
    pub f1: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
}

/// Cross-run aggregate of the final reports.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunSummary {
    pub per_class: BTreeMap<DamageClass, SummaryScores>,
    pub macro_avg: SummaryScores,
    pub epoch: MeanStd,
    pub n_runs: usize,
}

fn summarize<F: Fn(&MetricReport) -> ClassScores>(reports: &[MetricReport], get: F) -> SummaryScores {
    let collect = |f: fn(&ClassScores) -> f64| -> Vec<f64> {
        reports.iter().map(|r| f(&get(r))).collect()
    };
    SummaryScores {
        iou: mean_std(&collect(|s| s.iou)),
        f1: mean_std(&collect(|s| s.f1)),
        precision: mean_std(&collect(|s| s.precision)),
        recall: mean_std(&collect(|s| s.recall)),
    }
}

/// Element-wise mean and population std of the reports (one per run).
///
/// The macro statistics average each run's own macro value, so the reported
/// mean is "macro first, then across runs".
pub fn aggregate_runs(reports: &[MetricReport]) -> Result<RunSummary> {
    if reports.is_empty() {
        return Err(Error::InvalidInput("aggregate_runs needs at least one report".into()));
    }
    let mut per_class = BTreeMap::new();
    for class in DamageClass::DAMAGE {
        per_class.insert(class, summarize(reports, |r| r.per_class[&class]));
    }
    let epochs: Vec<f64> = reports.iter().map(|r| r.epoch as f64).collect();
    Ok(RunSummary {
        per_class,
        macro_avg: summarize(reports, |r| r.macro_avg),
        epoch: mean_std(&epochs),
        n_runs: reports.len(),
    })
}

/// One epoch of one run: validation scores plus the two loss curves.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub report: MetricReport,
    pub train_loss: f64,
    pub val_loss: f64,
}

fn push_report_rows(out: &mut String, report: &MetricReport) {
    for class in DamageClass::DAMAGE {
        let s = report.per_class[&class];
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6},{:.6}",
            report.run_id, report.epoch, class, s.iou, s.f1, s.precision, s.recall
        );
    }
    let m = report.macro_avg;
    let _ = writeln!(
        out,
        "{},{},macro,{:.6},{:.6},{:.6},{:.6}",
        report.run_id, report.epoch, m.iou, m.f1, m.precision, m.recall
    );
}

fn summary_rows(out: &mut String, summary: &RunSummary) {
    let mut row = |run_id: &str, epoch: f64, class: &str, s: [f64; 4]| {
        let _ = writeln!(
            out,
            "{},{:.2},{},{:.6},{:.6},{:.6},{:.6}",
            run_id, epoch, class, s[0], s[1], s[2], s[3]
        );
    };
    for class in DamageClass::DAMAGE {
        let s = summary.per_class[&class];
        row("mean", summary.epoch.mean, class.name(), [s.iou.mean, s.f1.mean, s.precision.mean, s.recall.mean]);
        row("std", summary.epoch.std, class.name(), [s.iou.std, s.f1.std, s.precision.std, s.recall.std]);
    }
    let m = summary.macro_avg;
    row("mean", summary.epoch.mean, "macro", [m.iou.mean, m.f1.mean, m.precision.mean, m.recall.mean]);
    row("std", summary.epoch.std, "macro", [m.iou.std, m.f1.std, m.precision.std, m.recall.std]);
}

/// Writes reports under the fixed [`CSV_HEADER`], one row per class plus a
/// `macro` row per report.
pub fn write_metrics_csv(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for report in reports {
        push_report_rows(&mut out, report);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn macro_score(s: &ClassScores, metric: &str) -> f64 {
    match metric {
        "iou" => s.iou,
        "f1" => s.f1,
        "precision" => s.precision,
        _ => s.recall,
    }
}

/// Writes the full report artifact set into `dir`:
///
/// - `metrics.csv` — final per-run rows plus `mean`/`std` rows,
/// - `history.csv` — every recorded epoch of every run,
/// - `curve_macro_{iou,f1,precision,recall}.svg` — cross-run mean curves
///   with ±1σ bands,
/// - `best_{iou,f1,precision,recall}.svg` — per-class best-epoch bar charts
///   with ±1σ whiskers,
/// - `run_<id>_progression.svg` — per-run train/val loss and macro F1.
///
/// Returns the written paths in creation order. File names are fixed and
/// contents are deterministic functions of the inputs.
pub fn export_report(
    dir: &Path,
    summary: &RunSummary,
    reports: &[MetricReport],
    history: &[Vec<EpochRecord>],
) -> Result<Vec<PathBuf>> {
    if history.is_empty() || history.iter().any(|h| h.is_empty()) {
        return Err(Error::InvalidInput("export_report needs a non-empty history per run".into()));
    }
    if reports.is_empty() {
        return Err(Error::InvalidInput("export_report needs at least one final report".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();

    // (a) machine-readable tables.
    let table = dir.join("metrics.csv");
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for report in reports {
        push_report_rows(&mut out, report);
    }
    summary_rows(&mut out, summary);
    std::fs::write(&table, out).map_err(|e| Error::io(&table, e))?;
    written.push(table);

    let hist_path = dir.join("history.csv");
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for run in history {
        for rec in run {
            push_report_rows(&mut out, &rec.report);
        }
    }
    std::fs::write(&hist_path, out).map_err(|e| Error::io(&hist_path, e))?;
    written.push(hist_path);

    // (b) macro learning curves with ±1σ bands across runs.
    let max_epochs = history.iter().map(Vec::len).max().unwrap();
    for metric in ["iou", "f1", "precision", "recall"] {
        let mut points = Vec::new();
        let mut band = Vec::new();
        for e in 0..max_epochs {
            let at_epoch: Vec<f64> = history
                .iter()
                .filter_map(|run| run.get(e))
                .map(|rec| macro_score(&rec.report.macro_avg, metric))
                .collect();
            let stats = mean_std(&at_epoch);
            let x = history
                .iter()
                .filter_map(|run| run.get(e))
                .map(|rec| rec.report.epoch as f64)
                .next()
                .unwrap_or(e as f64);
            points.push((x, stats.mean));
            band.push((stats.mean - stats.std, stats.mean + stats.std));
        }
        let path = dir.join(format!("curve_macro_{metric}.svg"));
        let series = Series::new(format!("macro {metric}"), points).with_band(band);
        svgplot::line_chart(
            &path,
            &format!("validation macro {metric} across runs"),
            "epoch",
            metric,
            &[series],
        )?;
        written.push(path);
    }

    // (c) best-score bar charts: max over epochs within each run, then
    //     mean ± σ across runs.
    for metric in ["iou", "f1", "precision", "recall"] {
        let bars: Vec<Bar> = DamageClass::DAMAGE
            .iter()
            .map(|&class| {
                let best_per_run: Vec<f64> = history
                    .iter()
                    .map(|run| {
                        run.iter()
                            .map(|rec| macro_score(&rec.report.per_class[&class], metric))
                            .fold(0.0, f64::max)
                    })
                    .collect();
                let stats = mean_std(&best_per_run);
                Bar { label: class.name().to_string(), value: stats.mean, error: stats.std }
            })
            .collect();
        let path = dir.join(format!("best_{metric}.svg"));
        svgplot::bar_chart(&path, &format!("best validation {metric} per class"), metric, &bars)?;
        written.push(path);
    }

    // (d) per-run progression: losses and macro F1 on one chart.
    for run in history {
        let run_id = &run[0].report.run_id;
        let xs: Vec<f64> = run.iter().map(|r| r.report.epoch as f64).collect();
        let series = vec![
            Series::new(
                "train loss",
                xs.iter().copied().zip(run.iter().map(|r| r.train_loss)).collect(),
            ),
            Series::new(
                "val loss",
                xs.iter().copied().zip(run.iter().map(|r| r.val_loss)).collect(),
            ),
            Series::new(
                "val macro f1",
                xs.iter().copied().zip(run.iter().map(|r| r.report.macro_avg.f1)).collect(),
            ),
        ];
        let path = dir.join(format!("run_{run_id}_progression.svg"));
        svgplot::line_chart(&path, &format!("run {run_id} progression"), "epoch", "value", &series)?;
        written.push(path);
    }

    Ok(written)
}
