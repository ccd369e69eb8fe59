//! Evaluation harness: k-fold cross-validation driver, the three ablation
//! suites, and schema-stable report emission (JSON + CSV).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolution::{run_dem, DemReport, LoopConfig};
use crate::losses::LossWeights;
use crate::metrics::{metrics_with_ci, Metric, MetricValue, MetricsReport, ReportMeta};
use crate::synth::{generate_domain_pair, DomainDataset, ShiftSpec, SplitPlan};

/// Produces evaluation scores for one fold: train on `train`, score `eval`.
pub trait FoldPipeline: Sync {
    fn run(&self, fold: usize, train: &DomainDataset, eval: &DomainDataset) -> Result<Vec<f64>>;
}

impl<F> FoldPipeline for F
where
    F: Fn(usize, &DomainDataset, &DomainDataset) -> Result<Vec<f64>> + Sync,
{
    fn run(&self, fold: usize, train: &DomainDataset, eval: &DomainDataset) -> Result<Vec<f64>> {
        self(fold, train, eval)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossValidationReport {
    pub folds: Vec<MetricsReport>,
    pub mean: MetricsReport,
}

fn mean_value(values: &[Option<MetricValue>]) -> Option<MetricValue> {
    if values.iter().any(|v| v.is_none()) || values.is_empty() {
        return None;
    }
    let points: Vec<f64> = values.iter().map(|v| v.unwrap().point).collect();
    let point = points.iter().sum::<f64>() / points.len() as f64;
    let cis: Vec<(f64, f64)> = values.iter().filter_map(|v| v.unwrap().ci).collect();
    let ci = (cis.len() == values.len()).then(|| {
        let lo = cis.iter().map(|c| c.0).sum::<f64>() / cis.len() as f64;
        let hi = cis.iter().map(|c| c.1).sum::<f64>() / cis.len() as f64;
        (lo, hi)
    });
    Some(MetricValue { point, ci })
}

/// Field-wise mean over reports; a metric undefined in any constituent is
/// undefined in the mean.
pub fn mean_reports(reports: &[MetricsReport], metadata: ReportMeta) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let collect =
        |metric: Metric| reports.iter().map(|r| r.value_of(metric)).collect::<Vec<_>>();
    Ok(MetricsReport {
        n: reports.iter().map(|r| r.n).sum(),
        accuracy: mean_value(&collect(Metric::Accuracy))
            .expect("accuracy defined in every report"),
        sensitivity: mean_value(&collect(Metric::Sensitivity)),
        specificity: mean_value(&collect(Metric::Specificity)),
        auc: mean_value(&collect(Metric::Auc)),
        metadata,
    })
}

/// Runs the pipeline once per fold, in the given fold order; per-fold results
/// depend only on the fold, not on the order.
pub fn cross_validate_with_order(
    dataset: &DomainDataset,
    plan: &SplitPlan,
    order: &[usize],
    resamples: usize,
    seed: u64,
    pipeline: &dyn FoldPipeline,
) -> Result<Vec<MetricsReport>> {
    let folds = plan
        .fold_assignments
        .as_ref()
        .ok_or_else(|| Error::InvalidSpec("split plan has no fold assignments".into()))?;
    let k = folds
        .iter()
        .zip(0..)
        .filter(|(_, i)| !plan.test_indices.contains(i))
        .map(|(&f, _)| f + 1)
        .max()
        .unwrap_or(0);
    let mut reports = Vec::with_capacity(order.len());
    for &fold in order {
        if fold >= k {
            return Err(Error::IndexOutOfRange(format!("fold {fold} of {k}")));
        }
        let eval_idx = plan.fold_indices(fold);
        let train_idx: Vec<usize> = (0..k)
            .filter(|&j| j != fold)
            .flat_map(|j| plan.fold_indices(j))
            .collect();
        let train = dataset.subset(&train_idx)?;
        let eval = dataset.subset(&eval_idx)?;
        let labels = eval
            .labels
            .as_deref()
            .ok_or_else(|| Error::DegenerateLabels("cv eval fold is unlabeled".into()))?;
        let scores = pipeline.run(fold, &train, &eval)?;
        let report = metrics_with_ci(
            &scores,
            labels,
            0.5,
            resamples,
            seed.wrapping_add(fold as u64),
            ReportMeta {
                dataset: "cv".into(),
                phase: format!("fold{fold}"),
                seed,
            },
        )?;
        reports.push(report);
    }
    Ok(reports)
}

/// Five-fold style cross-validation: per-fold metrics plus their mean.
pub fn run_cross_validation(
    dataset: &DomainDataset,
    plan: &SplitPlan,
    resamples: usize,
    seed: u64,
    pipeline: &dyn FoldPipeline,
) -> Result<CrossValidationReport> {
    let k = plan
        .fold_assignments
        .as_ref()
        .map(|f| {
            f.iter()
                .zip(0..)
                .filter(|(_, i)| !plan.test_indices.contains(i))
                .map(|(&v, _)| v + 1)
                .max()
                .unwrap_or(0)
        })
        .unwrap_or(0);
    let order: Vec<usize> = (0..k).collect();
    let mut folds =
        cross_validate_with_order(dataset, plan, &order, resamples, seed, pipeline)?;
    // restore canonical fold order in the report regardless of evaluation order
    folds.sort_by_key(|r| r.metadata.phase.clone());
    let mean = mean_reports(
        &folds,
        ReportMeta { dataset: "cv".into(), phase: "mean".into(), seed },
    )?;
    Ok(CrossValidationReport { folds, mean })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSuite {
    Framework,
    Reinit,
    Calibration,
}

impl std::str::FromStr for AblationSuite {
    type Err = Error;

    fn from_str(s: &str) -> Result<AblationSuite> {
        match s {
            "framework" => Ok(AblationSuite::Framework),
            "reinit" => Ok(AblationSuite::Reinit),
            "calibration" => Ok(AblationSuite::Calibration),
            other => Err(Error::InvalidConfig(format!(
                "unknown suite '{other}' (expected framework|reinit|calibration)"
            ))),
        }
    }
}

impl AblationSuite {
    pub fn name(&self) -> &'static str {
        match self {
            AblationSuite::Framework => "framework",
            AblationSuite::Reinit => "reinit",
            AblationSuite::Calibration => "calibration",
        }
    }

    pub fn variants(&self) -> Vec<&'static str> {
        match self {
            AblationSuite::Framework => vec!["rl", "crl_no_adaptation", "dem"],
            AblationSuite::Reinit => vec!["scratch", "cbp"],
            AblationSuite::Calibration => vec!["rf", "cc"],
        }
    }
}

/// Ablation switches for one named variant on top of a base config.
pub fn variant_config(suite: AblationSuite, variant: &str, base: &LoopConfig) -> LoopConfig {
    let mut config = base.clone();
    match (suite, variant) {
        (AblationSuite::Framework, "rl") => {
            config.source_anchoring = false;
            config.adaptation_losses = false;
        }
        (AblationSuite::Framework, "crl_no_adaptation") => {
            config.adaptation_losses = false;
        }
        (AblationSuite::Framework, "dem") => {}
        (AblationSuite::Reinit, "scratch") => {
            config.scratch = true;
            config.continual_backprop = false;
        }
        (AblationSuite::Reinit, "cbp") => {
            config.scratch = false;
            config.continual_backprop = true;
        }
        (AblationSuite::Calibration, "rf") => {
            config.confidence_calibration = false;
        }
        (AblationSuite::Calibration, "cc") => {
            config.confidence_calibration = true;
        }
        _ => {}
    }
    config
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub source_frozen_accuracy: f64,
    pub source: MetricsReport,
    pub target: Option<MetricsReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub suite: String,
    pub rows: Vec<AblationRow>,
}

impl AblationOutcome {
    pub fn rows_for(&self, variant: &str) -> Vec<&AblationRow> {
        self.rows.iter().filter(|r| r.variant == variant).collect()
    }

    pub fn mean_target_accuracy(&self, variant: &str) -> Option<f64> {
        let rows = self.rows_for(variant);
        let accs: Vec<f64> = rows
            .iter()
            .filter_map(|r| r.target.as_ref().map(|t| t.accuracy.point))
            .collect();
        (accs.len() == rows.len() && !accs.is_empty())
            .then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }

    pub fn mean_source_accuracy(&self, variant: &str) -> Option<f64> {
        let rows = self.rows_for(variant);
        (!rows.is_empty()).then(|| {
            rows.iter().map(|r| r.source.accuracy.point).sum::<f64>() / rows.len() as f64
        })
    }
}

/// One benchmark run of a fully-resolved variant configuration.
pub fn run_benchmark_variant(
    spec: &ShiftSpec,
    config: &LoopConfig,
    weights: &LossWeights,
) -> Result<DemReport> {
    let (source, target) = generate_domain_pair(spec)?;
    Ok(run_dem(&source, &target, config, weights)?.report)
}

/// Runs every variant of a suite over all seeds; the seed drives both the
/// generated benchmark and the loop.
pub fn run_ablation(
    suite: AblationSuite,
    spec: &ShiftSpec,
    seeds: &[u64],
    base_config: &LoopConfig,
    weights: &LossWeights,
) -> Result<AblationOutcome> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for variant in suite.variants() {
        for &seed in seeds {
            let mut config = variant_config(suite, variant, base_config);
            config.seed = seed;
            let run_spec = ShiftSpec { seed, ..spec.clone() };
            let report = run_benchmark_variant(&run_spec, &config, weights)?;
            rows.push(AblationRow {
                variant: variant.to_string(),
                seed,
                source_frozen_accuracy: report.source_frozen.accuracy.point,
                source: report.final_source.clone(),
                target: report.final_target.clone(),
            });
        }
    }
    Ok(AblationOutcome { suite: suite.name().to_string(), rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<ReportFormat> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::InvalidConfig(format!("unknown format '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReportRow {
    pub dataset: String,
    pub phase: String,
    pub variant: String,
    pub metrics: MetricsReport,
}

/// Schema-stable result container behind `emit_report`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReportTable {
    pub schema_version: u32,
    pub rows: Vec<ReportRow>,
}

impl ReportTable {
    pub fn new(rows: Vec<ReportRow>) -> ReportTable {
        ReportTable { schema_version: 1, rows }
    }
}

/// Table-shaped rows from one run report: the frozen source row plus
/// per-phase target rows, mirroring the screening/evolving report layout.
pub fn report_table_from_dem(report: &DemReport, variant: &str) -> ReportTable {
    let mut rows = vec![ReportRow {
        dataset: "source".into(),
        phase: "frozen".into(),
        variant: variant.to_string(),
        metrics: report.source_frozen.clone(),
    }];
    if let Some(t) = &report.screening.target_test {
        rows.push(ReportRow {
            dataset: "target".into(),
            phase: "screening".into(),
            variant: variant.to_string(),
            metrics: t.clone(),
        });
    }
    if let Some(t) = &report.evolving.target_test {
        rows.push(ReportRow {
            dataset: "target".into(),
            phase: "evolving".into(),
            variant: variant.to_string(),
            metrics: t.clone(),
        });
    }
    rows.push(ReportRow {
        dataset: "source".into(),
        phase: "final".into(),
        variant: variant.to_string(),
        metrics: report.final_source.clone(),
    });
    if let Some(t) = &report.final_target {
        rows.push(ReportRow {
            dataset: "target".into(),
            phase: "final".into(),
            variant: variant.to_string(),
            metrics: t.clone(),
        });
    }
    ReportTable::new(rows)
}

/// Aggregated (mean over seeds) rows for an ablation outcome.
pub fn report_table_from_ablation(outcome: &AblationOutcome) -> Result<ReportTable> {
    let mut rows = Vec::new();
    let mut variants: Vec<String> = Vec::new();
    for row in &outcome.rows {
        if !variants.contains(&row.variant) {
            variants.push(row.variant.clone());
        }
    }
    for variant in &variants {
        let group = outcome.rows_for(variant);
        let sources: Vec<MetricsReport> = group.iter().map(|r| r.source.clone()).collect();
        rows.push(ReportRow {
            dataset: "source".into(),
            phase: "final".into(),
            variant: variant.clone(),
            metrics: mean_reports(
                &sources,
                ReportMeta { dataset: "source".into(), phase: "final".into(), seed: 0 },
            )?,
        });
        let targets: Vec<MetricsReport> =
            group.iter().filter_map(|r| r.target.clone()).collect();
        if targets.len() == group.len() {
            rows.push(ReportRow {
                dataset: "target".into(),
                phase: "final".into(),
                variant: variant.clone(),
                metrics: mean_reports(
                    &targets,
                    ReportMeta { dataset: "target".into(), phase: "final".into(), seed: 0 },
                )?,
            });
        }
    }
    Ok(ReportTable::new(rows))
}

fn format_metric_value(metric: Metric, value: &MetricValue) -> (String, String, String) {
    let fmt = |v: f64| {
        if metric.is_percent() {
            format!("{v:.2}")
        } else {
            crate::metrics::format_sig(v, 4)
        }
    };
    let (lo, hi) = match value.ci {
        Some((lo, hi)) => (fmt(lo), fmt(hi)),
        None => (String::new(), String::new()),
    };
    (fmt(value.point), lo, hi)
}

/// Writes `report.json` and/or `report.csv` under `dir` and returns the
/// paths. CSV rows are `(dataset, phase, variant, metric)` with columns
/// `metric, point, ci_low, ci_high`; percentages carry 2 decimals and AUC 4
/// significant digits.
pub fn emit_report(
    table: &ReportTable,
    dir: &Path,
    formats: &[ReportFormat],
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for format in formats {
        match format {
            ReportFormat::Json => {
                let path = dir.join("report.json");
                let json = serde_json::to_string_pretty(table)
                    .map_err(|e| Error::InvalidConfig(e.to_string()))?;
                std::fs::write(&path, json)?;
                written.push(path);
            }
            ReportFormat::Csv => {
                let path = dir.join("report.csv");
                let mut out = String::from("dataset,phase,variant,metric,point,ci_low,ci_high\n");
                for row in &table.rows {
                    for metric in Metric::ALL {
                        if let Some(value) = row.metrics.value_of(metric) {
                            let (point, lo, hi) = format_metric_value(metric, &value);
                            out.push_str(&format!(
                                "{},{},{},{},{},{},{}\n",
                                row.dataset,
                                row.phase,
                                row.variant,
                                metric.name(),
                                point,
                                lo,
                                hi
                            ));
                        }
                    }
                }
                std::fs::write(&path, out)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

/// Parses `report.json` back into a table.
pub fn load_report(path: &Path) -> Result<ReportTable> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::DataFormat(e.to_string()))
}
