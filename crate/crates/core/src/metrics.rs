//! Classification metrics with percentile-bootstrap confidence intervals.
//! ACC/sensitivity/specificity are reported as percentages, AUC on [0,1];
//! metrics undefined for a single-class sample are flagged, not NaN-propagated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Sensitivity,
    Specificity,
    Auc,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::Accuracy,
        Metric::Sensitivity,
        Metric::Specificity,
        Metric::Auc,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Sensitivity => "sensitivity",
            Metric::Specificity => "specificity",
            Metric::Auc => "auc",
        }
    }

    /// Percent metrics are scaled by 100 in reports; AUC is not.
    pub fn is_percent(&self) -> bool {
        !matches!(self, Metric::Auc)
    }
}

/// Point estimate with an optional 95% interval, in reporting units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub point: f64,
    pub ci: Option<(f64, f64)>,
}

impl MetricValue {
    fn new(point: f64, ci: Option<(f64, f64)>) -> MetricValue {
        // percentile intervals are widened to contain the point estimate
        let ci = ci.map(|(lo, hi)| (lo.min(point), hi.max(point)));
        MetricValue { point, ci }
    }

    /// Table-style rendering: `70.73 (68.42-73.03)` for percentages.
    pub fn display_percent(&self) -> String {
        match self.ci {
            Some((lo, hi)) => format!("{:.2} ({:.2}-{:.2})", self.point, lo, hi),
            None => format!("{:.2}", self.point),
        }
    }

    /// Table-style rendering with 4 significant digits, for AUC.
    pub fn display_auc(&self) -> String {
        match self.ci {
            Some((lo, hi)) => format!(
                "{} ({}-{})",
                format_sig(self.point, 4),
                format_sig(lo, 4),
                format_sig(hi, 4)
            ),
            None => format_sig(self.point, 4),
        }
    }
}

/// Rounds to `sig` significant digits for display.
pub fn format_sig(x: f64, sig: usize) -> String {
    if x == 0.0 {
        return format!("{:.*}", sig, 0.0);
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (sig as i32 - 1 - magnitude).max(0) as usize;
    format!("{:.*}", decimals, x)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub dataset: String,
    pub phase: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    /// Percent.
    pub accuracy: MetricValue,
    /// Percent; absent when no positive samples exist.
    pub sensitivity: Option<MetricValue>,
    /// Percent; absent when no negative samples exist.
    pub specificity: Option<MetricValue>,
    /// [0,1]; absent when either class is missing.
    pub auc: Option<MetricValue>,
    pub metadata: ReportMeta,
}

impl MetricsReport {
    pub fn value_of(&self, metric: Metric) -> Option<MetricValue> {
        match metric {
            Metric::Accuracy => Some(self.accuracy),
            Metric::Sensitivity => self.sensitivity,
            Metric::Specificity => self.specificity,
            Metric::Auc => self.auc,
        }
    }
}

struct Confusion {
    tp: usize,
    tn: usize,
    fp: usize,
    fn_: usize,
}

fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Confusion {
    let mut c = Confusion { tp: 0, tn: 0, fp: 0, fn_: 0 };
    for (&s, &y) in scores.iter().zip(labels) {
        let predicted = u8::from(s >= threshold);
        match (predicted, y) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => unreachable!(),
        }
    }
    c
}

/// Rank-statistic AUC with tie correction: the mean over positive-negative
/// pairs of `[s_pos > s_neg] + 0.5 [s_pos == s_neg]`. `None` when a class is
/// absent.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // average ranks over tie groups (1-based ranks)
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mean_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += mean_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

fn metric_fraction(metric: Metric, scores: &[f64], labels: &[u8], threshold: f64) -> Option<f64> {
    match metric {
        Metric::Accuracy => {
            let c = confusion(scores, labels, threshold);
            Some((c.tp + c.tn) as f64 / labels.len() as f64)
        }
        Metric::Sensitivity => {
            let c = confusion(scores, labels, threshold);
            let pos = c.tp + c.fn_;
            (pos > 0).then(|| c.tp as f64 / pos as f64)
        }
        Metric::Specificity => {
            let c = confusion(scores, labels, threshold);
            let neg = c.tn + c.fp;
            (neg > 0).then(|| c.tn as f64 / neg as f64)
        }
        Metric::Auc => auc(scores, labels),
    }
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Point estimates at the given decision threshold.
pub fn compute_metrics(
    scores: &[f64],
    labels: &[u8],
    threshold: f64,
    metadata: ReportMeta,
) -> Result<MetricsReport> {
    check_inputs(scores, labels)?;
    let scale = |metric: Metric, v: f64| if metric.is_percent() { 100.0 * v } else { v };
    let value = |metric: Metric| {
        metric_fraction(metric, scores, labels, threshold)
            .map(|v| MetricValue::new(scale(metric, v), None))
    };
    Ok(MetricsReport {
        n: labels.len(),
        accuracy: value(Metric::Accuracy).expect("accuracy is always defined"),
        sensitivity: value(Metric::Sensitivity),
        specificity: value(Metric::Specificity),
        auc: value(Metric::Auc),
        metadata,
    })
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let position = q * (sorted.len() - 1) as f64;
    let lower = position.floor() as usize;
    let upper = position.ceil() as usize;
    let weight = position - lower as f64;
    sorted[lower] * (1.0 - weight) + sorted[upper] * weight
}

/// Percentile bootstrap (2.5th, 97.5th) over stratified resamples with
/// replacement. Returned in the metric's natural fraction units.
pub fn bootstrap_ci(
    scores: &[f64],
    labels: &[u8],
    metric: Metric,
    threshold: f64,
    resamples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    check_inputs(scores, labels)?;
    if scores.len() < 2 {
        return Err(Error::TooFewSamples("bootstrap needs n >= 2".into()));
    }
    // canonical per-class score lists make the interval order-invariant
    let mut pos: Vec<f64> = Vec::new();
    let mut neg: Vec<f64> = Vec::new();
    for (&s, &y) in scores.iter().zip(labels) {
        if y == 1 {
            pos.push(s);
        } else {
            neg.push(s);
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::SingleClass("bootstrap needs both classes".into()));
    }
    pos.sort_by(|a, b| a.partial_cmp(b).unwrap());
    neg.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut rng = stream_rng(seed, streams::BOOTSTRAP);
    let mut values = Vec::with_capacity(resamples);
    let mut resample_scores = Vec::with_capacity(scores.len());
    let mut resample_labels = Vec::with_capacity(scores.len());
    for _ in 0..resamples {
        resample_scores.clear();
        resample_labels.clear();
        for _ in 0..pos.len() {
            resample_scores.push(pos[rand::Rng::gen_range(&mut rng, 0..pos.len())]);
            resample_labels.push(1u8);
        }
        for _ in 0..neg.len() {
            resample_scores.push(neg[rand::Rng::gen_range(&mut rng, 0..neg.len())]);
            resample_labels.push(0u8);
        }
        let v = metric_fraction(metric, &resample_scores, &resample_labels, threshold)
            .expect("stratified resample keeps both classes");
        values.push(v);
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok((percentile(&values, 0.025), percentile(&values, 0.975)))
}

/// Point estimates with bootstrap intervals attached, in reporting units.
pub fn metrics_with_ci(
    scores: &[f64],
    labels: &[u8],
    threshold: f64,
    resamples: usize,
    seed: u64,
    metadata: ReportMeta,
) -> Result<MetricsReport> {
    let mut report = compute_metrics(scores, labels, threshold, metadata)?;
    let both_classes = labels.contains(&0) && labels.contains(&1) && labels.len() >= 2;
    if !both_classes || resamples == 0 {
        return Ok(report);
    }
    for metric in Metric::ALL {
        let (lo, hi) = bootstrap_ci(scores, labels, metric, threshold, resamples, seed)?;
        let scale = if metric.is_percent() { 100.0 } else { 1.0 };
        let ci = Some((lo * scale, hi * scale));
        let update = |slot: &mut Option<MetricValue>| {
            if let Some(v) = slot {
                *slot = Some(MetricValue::new(v.point, ci));
            }
        };
        match metric {
            Metric::Accuracy => report.accuracy = MetricValue::new(report.accuracy.point, ci),
            Metric::Sensitivity => update(&mut report.sensitivity),
            Metric::Specificity => update(&mut report.specificity),
            Metric::Auc => update(&mut report.auc),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn meta() -> ReportMeta {
        ReportMeta::default()
    }

    /// All-pairs oracle for AUC, including ties.
    pub fn auc_brute_force(scores: &[f64], labels: &[u8]) -> Option<f64> {
        let pos: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y == 1)
            .map(|(&s, _)| s)
            .collect();
        let neg: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y == 0)
            .map(|(&s, _)| s)
            .collect();
        if pos.is_empty() || neg.is_empty() {
            return None;
        }
        let mut total = 0.0;
        for &p in &pos {
            for &n in &neg {
                if p > n {
                    total += 1.0;
                } else if p == n {
                    total += 0.5;
                }
            }
        }
        Some(total / (pos.len() * neg.len()) as f64)
    }

    #[test]
    fn perfect_separation() {
        let report =
            compute_metrics(&[0.9, 0.8, 0.3, 0.2], &[1, 1, 0, 0], 0.5, meta()).unwrap();
        assert_eq!(report.accuracy.point, 100.0);
        assert_eq!(report.sensitivity.unwrap().point, 100.0);
        assert_eq!(report.specificity.unwrap().point, 100.0);
        assert_eq!(report.auc.unwrap().point, 1.0);
    }

    #[test]
    fn all_tied_scores_give_half_auc() {
        let report = compute_metrics(&[0.4; 6], &[1, 0, 1, 0, 1, 0], 0.5, meta()).unwrap();
        assert_eq!(report.auc.unwrap().point, 0.5);
    }

    #[test]
    fn reversed_scores() {
        let report = compute_metrics(&[0.2, 0.8], &[1, 0], 0.5, meta()).unwrap();
        assert_eq!(report.auc.unwrap().point, 0.0);
        assert_eq!(report.accuracy.point, 0.0);
    }

    #[test]
    fn single_class_flags_undefined() {
        let report = compute_metrics(&[0.9, 0.7], &[1, 1], 0.5, meta()).unwrap();
        assert!(report.auc.is_none());
        assert!(report.specificity.is_none());
        assert!(report.sensitivity.is_some());
    }

    #[test]
    fn auc_matches_brute_force_on_random_instances() {
        let mut rng = crate::rng::stream_rng(33, 0);
        for _ in 0..1000 {
            let n = rng.gen_range(2..40);
            // coarse grid forces plenty of ties
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64 / 4.0).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2u8)).collect();
            match (auc(&scores, &labels), auc_brute_force(&scores, &labels)) {
                (Some(fast), Some(brute)) => {
                    assert!((fast - brute).abs() < 1e-12, "{fast} vs {brute}")
                }
                (None, None) => {}
                (a, b) => panic!("definedness mismatch: {a:?} vs {b:?}"),
            }
        }
    }

    #[test]
    fn confusion_consistency() {
        let mut rng = crate::rng::stream_rng(34, 0);
        for _ in 0..200 {
            let n = rng.gen_range(2..30);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2u8)).collect();
            let c = confusion(&scores, &labels, 0.5);
            let report = compute_metrics(&scores, &labels, 0.5, meta()).unwrap();
            let acc = report.accuracy.point / 100.0;
            assert!((acc + (c.fp + c.fn_) as f64 / n as f64 - 1.0).abs() < 1e-12);
            if let Some(sens) = report.sensitivity {
                assert!((sens.point / 100.0 - c.tp as f64 / (c.tp + c.fn_) as f64).abs() < 1e-12);
            }
            if let Some(spec) = report.specificity {
                assert!((spec.point / 100.0 - c.tn as f64 / (c.tn + c.fp) as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bootstrap_constant_metric_zero_width() {
        // perfectly separated scores stay perfectly separated in resamples
        let scores = [0.9, 0.95, 0.91, 0.1, 0.05, 0.2];
        let labels = [1, 1, 1, 0, 0, 0];
        let (lo, hi) = bootstrap_ci(&scores, &labels, Metric::Auc, 0.5, 500, 3).unwrap();
        assert_eq!((lo, hi), (1.0, 1.0));
    }

    #[test]
    fn bootstrap_interval_contains_point_estimate() {
        let mut rng = crate::rng::stream_rng(35, 0);
        for trial in 0..100 {
            let n = rng.gen_range(10..60);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let labels: Vec<u8> = (0..n)
                .map(|i| u8::from(i % 2 == 0 || rng.gen_bool(0.3)))
                .collect();
            if !labels.contains(&0) || !labels.contains(&1) {
                continue;
            }
            let report = metrics_with_ci(&scores, &labels, 0.5, 400, trial, meta()).unwrap();
            for metric in Metric::ALL {
                if let Some(v) = report.value_of(metric) {
                    let (lo, hi) = v.ci.unwrap();
                    assert!(lo <= v.point && v.point <= hi, "{metric:?}: {lo} {} {hi}", v.point);
                }
            }
        }
    }

    #[test]
    fn bootstrap_is_deterministic_and_order_invariant() {
        let scores = [0.9, 0.2, 0.7, 0.4, 0.6, 0.3, 0.8, 0.1];
        let labels = [1, 0, 1, 0, 1, 0, 1, 0];
        let a = bootstrap_ci(&scores, &labels, Metric::Accuracy, 0.5, 300, 11).unwrap();
        let b = bootstrap_ci(&scores, &labels, Metric::Accuracy, 0.5, 300, 11).unwrap();
        assert_eq!(a, b);
        // reversed sample order
        let rev_scores: Vec<f64> = scores.iter().rev().copied().collect();
        let rev_labels: Vec<u8> = labels.iter().rev().copied().collect();
        let c = bootstrap_ci(&rev_scores, &rev_labels, Metric::Accuracy, 0.5, 300, 11).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn bootstrap_single_class_is_rejected() {
        assert!(matches!(
            bootstrap_ci(&[0.4, 0.5], &[1, 1], Metric::Accuracy, 0.5, 100, 0),
            Err(Error::SingleClass(_))
        ));
    }

    #[test]
    fn significant_digit_formatting() {
        assert_eq!(format_sig(0.69234, 4), "0.6923");
        assert_eq!(format_sig(1.0, 4), "1.000");
        assert_eq!(format_sig(0.05123, 4), "0.05123");
        let v = MetricValue { point: 70.73, ci: Some((68.42, 73.03)) };
        assert_eq!(v.display_percent(), "70.73 (68.42-73.03)");
        let a = MetricValue { point: 0.6923, ci: Some((0.669, 0.716)) };
        assert_eq!(a.display_auc(), "0.6923 (0.6690-0.7160)");
    }
}
