//! Synthetic source/target domain pairs with controllable feature shift
//! (rotation), label shift (class prior), and decision-rule shift (label
//! flips), plus median-split binarization and stratified split plans.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, streams};

/// Distance from each class mean to the class boundary, in feature-noise units.
const CLASS_SEPARATION: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainTag::Source => write!(f, "source"),
            DomainTag::Target => write!(f, "target"),
        }
    }
}

/// One domain's worth of data. Labels are `None` when the domain is treated
/// as unlabeled; generated targets keep their labels for evaluation only.
#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub features: Array2<f64>,
    pub labels: Option<Vec<u8>>,
    pub continuous_outcome: Option<Vec<f64>>,
    pub domain_tag: DomainTag,
    pub sample_ids: Vec<u64>,
}

impl DomainDataset {
    pub fn n_samples(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Rows at `indices`, preserving ids and per-row metadata.
    pub fn subset(&self, indices: &[usize]) -> Result<DomainDataset> {
        let n = self.n_samples();
        let mut features = Array2::zeros((indices.len(), self.dim()));
        for (row, &i) in indices.iter().enumerate() {
            if i >= n {
                return Err(Error::IndexOutOfRange(format!("{i} >= {n}")));
            }
            features.row_mut(row).assign(&self.features.row(i));
        }
        let pick = |v: &Vec<f64>| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Ok(DomainDataset {
            features,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            continuous_outcome: self.continuous_outcome.as_ref().map(pick),
            domain_tag: self.domain_tag,
            sample_ids: indices.iter().map(|&i| self.sample_ids[i]).collect(),
        })
    }

    /// The same rows with labels withheld (adaptation-side view of a target).
    pub fn without_labels(&self) -> DomainDataset {
        DomainDataset {
            labels: None,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_samples();
        if self.sample_ids.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} ids for {} rows",
                self.sample_ids.len(),
                n
            )));
        }
        let mut ids = self.sample_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != n {
            return Err(Error::InvalidSpec("sample ids are not unique".into()));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "{} labels for {} rows",
                    labels.len(),
                    n
                )));
            }
            if n < 2 {
                return Err(Error::TooFewSamples(
                    "labeled dataset needs at least 2 samples".into(),
                ));
            }
            if labels.iter().any(|&y| y > 1) {
                return Err(Error::DegenerateLabels("labels must be 0/1".into()));
            }
        }
        Ok(())
    }

    /// UTF-8 CSV with header `id,domain,label,outcome,f0,...`; label `-1`
    /// when unlabeled, full-precision decimal text.
    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("id,domain,label,outcome");
        for j in 0..self.dim() {
            out.push_str(&format!(",f{j}"));
        }
        out.push('\n');
        for i in 0..self.n_samples() {
            let label = match &self.labels {
                Some(l) => i64::from(l[i]),
                None => -1,
            };
            let outcome = match &self.continuous_outcome {
                Some(c) => format!("{}", c[i]),
                None => String::new(),
            };
            out.push_str(&format!(
                "{},{},{},{}",
                self.sample_ids[i], self.domain_tag, label, outcome
            ));
            for j in 0..self.dim() {
                out.push_str(&format!(",{}", self.features[[i, j]]));
            }
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn from_csv(path: &Path) -> Result<DomainDataset> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::DataFormat("empty csv".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 5 || cols[0] != "id" || cols[1] != "domain" || cols[2] != "label" {
            return Err(Error::DataFormat(format!("unexpected header: {header}")));
        }
        let d = cols.len() - 4;
        let mut ids = Vec::new();
        let mut labels: Vec<i64> = Vec::new();
        let mut outcomes: Vec<Option<f64>> = Vec::new();
        let mut rows: Vec<f64> = Vec::new();
        let mut tag = None;
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(Error::DataFormat(format!(
                    "line {}: {} fields, expected {}",
                    lineno + 2,
                    fields.len(),
                    cols.len()
                )));
            }
            let parse_err =
                |what: &str| Error::DataFormat(format!("line {}: bad {}", lineno + 2, what));
            ids.push(fields[0].parse::<u64>().map_err(|_| parse_err("id"))?);
            let row_tag = match fields[1] {
                "source" => DomainTag::Source,
                "target" => DomainTag::Target,
                other => return Err(Error::DataFormat(format!("unknown domain: {other}"))),
            };
            if *tag.get_or_insert(row_tag) != row_tag {
                return Err(Error::DataFormat("mixed domain tags in one file".into()));
            }
            labels.push(fields[2].parse::<i64>().map_err(|_| parse_err("label"))?);
            outcomes.push(if fields[3].is_empty() {
                None
            } else {
                Some(fields[3].parse::<f64>().map_err(|_| parse_err("outcome"))?)
            });
            for f in &fields[4..] {
                rows.push(f.parse::<f64>().map_err(|_| parse_err("feature"))?);
            }
        }
        let n = ids.len();
        let features = Array2::from_shape_vec((n, d), rows)
            .map_err(|e| Error::DataFormat(e.to_string()))?;
        let labeled = labels.iter().all(|&l| l >= 0);
        let ds = DomainDataset {
            features,
            labels: if labeled {
                Some(labels.iter().map(|&l| l as u8).collect())
            } else {
                None
            },
            continuous_outcome: if outcomes.iter().all(|o| o.is_some()) {
                Some(outcomes.into_iter().map(|o| o.unwrap()).collect())
            } else {
                None
            },
            domain_tag: tag.unwrap_or(DomainTag::Source),
            sample_ids: ids,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Knobs for one source/target benchmark pair.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftSpec {
    pub d: usize,
    pub n_source: usize,
    pub n_target: usize,
    /// Feature shift: rotation applied to target features in the (0,1) plane.
    pub rotation_angle: f64,
    /// Label shift: class-1 prior of the target mixture.
    pub class_prior_target: f64,
    /// Decision-rule shift: fraction of target labels flipped after binarization.
    pub label_flip_rate: f64,
    /// Std of the noise added to the continuous outcome.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec {
            d: 10,
            n_source: 2000,
            n_target: 2000,
            rotation_angle: PI / 2.0,
            class_prior_target: 0.5,
            label_flip_rate: 0.1,
            noise_sigma: 0.25,
            seed: 42,
        }
    }
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidSpec(msg.into()));
        if self.d < 2 {
            return fail("d must be >= 2");
        }
        if self.n_source < 2 || self.n_target < 2 {
            return fail("n_source and n_target must be >= 2");
        }
        if !(0.0..2.0 * PI).contains(&self.rotation_angle) {
            return fail("rotation_angle must lie in [0, 2*pi)");
        }
        if !(self.class_prior_target > 0.0 && self.class_prior_target < 1.0) {
            return fail("class_prior_target must lie in (0,1)");
        }
        if !(0.0..1.0).contains(&self.label_flip_rate) {
            return fail("label_flip_rate must lie in [0,1)");
        }
        if !(self.noise_sigma >= 0.0) {
            return fail("noise_sigma must be >= 0");
        }
        Ok(())
    }
}

/// Unit class-signal direction. Dominant component on axis 0 with a small
/// residual on axis 2, which sits outside the (0,1) rotation plane: a full
/// quarter-turn removes most but not all transferable signal.
pub fn class_direction(d: usize) -> Array1<f64> {
    let mut u = Array1::zeros(d);
    if d >= 3 {
        let norm = (26.0f64).sqrt();
        u[0] = 5.0 / norm;
        u[2] = 1.0 / norm;
    } else {
        u[0] = 1.0;
    }
    u
}

fn draw_domain(
    rng: &mut impl Rng,
    n: usize,
    d: usize,
    direction: &Array1<f64>,
    class_prior: f64,
    noise_sigma: f64,
) -> (Array2<f64>, Vec<f64>) {
    let mut features = Array2::zeros((n, d));
    let mut outcomes = Vec::with_capacity(n);
    for i in 0..n {
        let class: bool = rng.gen_bool(class_prior);
        let sign = if class { 1.0 } else { -1.0 };
        let mut dot = 0.0;
        for j in 0..d {
            let noise: f64 = rng.sample(StandardNormal);
            let v = sign * CLASS_SEPARATION * direction[j] + noise;
            features[[i, j]] = v;
            dot += v * direction[j];
        }
        let outcome_noise: f64 = rng.sample(StandardNormal);
        // signed distance to the class boundary (the hyperplane u.x = 0)
        outcomes.push(dot + noise_sigma * outcome_noise);
    }
    (features, outcomes)
}

fn rotate_in_plane(features: &mut Array2<f64>, angle: f64) {
    let (c, s) = (angle.cos(), angle.sin());
    for mut row in features.rows_mut() {
        let (x0, x1) = (row[0], row[1]);
        row[0] = c * x0 - s * x1;
        row[1] = s * x0 + c * x1;
    }
}

/// Draws a labeled source and an internally-labeled target according to
/// `spec`. Target labels are kept for evaluation; adaptation must use
/// [`DomainDataset::without_labels`].
pub fn generate_domain_pair(spec: &ShiftSpec) -> Result<(DomainDataset, DomainDataset)> {
    spec.validate()?;
    let direction = class_direction(spec.d);

    let mut rng_s = stream_rng(spec.seed, streams::DATA_SOURCE);
    let (source_x, source_c) = draw_domain(
        &mut rng_s,
        spec.n_source,
        spec.d,
        &direction,
        0.5,
        spec.noise_sigma,
    );
    let source_y = median_split_labels(&source_c)?;

    let mut rng_t = stream_rng(spec.seed, streams::DATA_TARGET);
    let (mut target_x, target_c) = draw_domain(
        &mut rng_t,
        spec.n_target,
        spec.d,
        &direction,
        spec.class_prior_target,
        spec.noise_sigma,
    );
    let mut target_y = median_split_labels(&target_c)?;
    rotate_in_plane(&mut target_x, spec.rotation_angle);

    let n_flips = (spec.n_target as f64 * spec.label_flip_rate).round() as usize;
    if n_flips > 0 {
        let picks = rand::seq::index::sample(&mut rng_t, spec.n_target, n_flips);
        for i in picks {
            target_y[i] ^= 1;
        }
    }

    let source = DomainDataset {
        features: source_x,
        labels: Some(source_y),
        continuous_outcome: Some(source_c),
        domain_tag: DomainTag::Source,
        sample_ids: (0..spec.n_source as u64).collect(),
    };
    let target = DomainDataset {
        features: target_x,
        labels: Some(target_y),
        continuous_outcome: Some(target_c),
        domain_tag: DomainTag::Target,
        sample_ids: (spec.n_source as u64..(spec.n_source + spec.n_target) as u64).collect(),
    };
    Ok((source, target))
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Binarizes a continuous outcome: 1 iff strictly above the median, ties at
/// the median map to 0. Errors when the split leaves a single class.
pub fn median_split_labels(outcome: &[f64]) -> Result<Vec<u8>> {
    if outcome.len() < 2 {
        return Err(Error::TooFewSamples(format!(
            "median split needs >= 2 values, got {}",
            outcome.len()
        )));
    }
    let m = median(outcome);
    let labels: Vec<u8> = outcome.iter().map(|&v| u8::from(v > m)).collect();
    if labels.iter().all(|&y| y == 0) || labels.iter().all(|&y| y == 1) {
        return Err(Error::DegenerateLabels(
            "median split produced a single class".into(),
        ));
    }
    Ok(labels)
}

/// Disjoint train/val/test index sets covering one dataset, plus k-fold ids
/// over the non-test remainder.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SplitPlan {
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub fold_assignments: Option<Vec<usize>>,
}

impl SplitPlan {
    /// Remainder (train + val) indices of fold `fold`.
    pub fn fold_indices(&self, fold: usize) -> Vec<usize> {
        let folds = self.fold_assignments.as_ref().expect("no folds assigned");
        self.train_indices
            .iter()
            .chain(self.val_indices.iter())
            .copied()
            .filter(|&i| folds[i] == fold)
            .collect()
    }
}

/// Stratified 80/20-style split with k folds over the remainder. Fold 0
/// doubles as the default validation set.
pub fn make_split(
    dataset: &DomainDataset,
    test_fraction: f64,
    k_folds: usize,
    seed: u64,
) -> Result<SplitPlan> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidSpec("test_fraction must lie in (0,1)".into()));
    }
    if k_folds < 2 {
        return Err(Error::InvalidSpec("k_folds must be >= 2".into()));
    }
    let n = dataset.n_samples();
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::TooFewSamples(format!(
            "test split of {n_test} from {n} samples"
        )));
    }

    // Strata: per-class index lists when labeled, one stratum otherwise.
    let strata: Vec<Vec<usize>> = match &dataset.labels {
        Some(labels) => {
            let mut s = vec![Vec::new(), Vec::new()];
            for (i, &y) in labels.iter().enumerate() {
                s[y as usize].push(i);
            }
            s.into_iter().filter(|v| !v.is_empty()).collect()
        }
        None => vec![(0..n).collect()],
    };

    let stream = match dataset.domain_tag {
        DomainTag::Source => streams::SPLIT_SOURCE,
        DomainTag::Target => streams::SPLIT_TARGET,
    };
    let mut rng = stream_rng(seed, stream);
    let mut shuffled: Vec<Vec<usize>> = strata
        .iter()
        .map(|s| {
            let order = rand::seq::index::sample(&mut rng, s.len(), s.len());
            order.iter().map(|i| s[i]).collect()
        })
        .collect();

    // Largest-remainder allocation of the test quota across strata.
    let mut quota: Vec<usize> = Vec::new();
    let mut fractional: Vec<(usize, f64)> = Vec::new();
    let mut allocated = 0;
    for (si, s) in shuffled.iter().enumerate() {
        let exact = s.len() as f64 * n_test as f64 / n as f64;
        let base = exact.floor() as usize;
        quota.push(base);
        allocated += base;
        fractional.push((si, exact - base as f64));
    }
    fractional.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (si, _) in fractional.iter().take(n_test - allocated) {
        quota[*si] += 1;
    }
    for (s, &q) in shuffled.iter().zip(&quota) {
        if q == 0 || q >= s.len() {
            return Err(Error::TooFewSamples(
                "a class stratum would be empty in test or remainder".into(),
            ));
        }
    }

    let mut test_indices = Vec::new();
    let mut fold_of = vec![usize::MAX; n];
    let mut fold_sizes = vec![0usize; k_folds];
    let mut fold_cursor = 0;
    for (s, q) in shuffled.iter_mut().zip(&quota) {
        test_indices.extend(s.drain(..*q));
        for &i in s.iter() {
            fold_of[i] = fold_cursor;
            fold_sizes[fold_cursor] += 1;
            fold_cursor = (fold_cursor + 1) % k_folds;
        }
    }
    if fold_sizes.iter().any(|&c| c == 0) {
        return Err(Error::TooFewSamples("a fold would be empty".into()));
    }

    let mut train_indices = Vec::new();
    let mut val_indices = Vec::new();
    for i in 0..n {
        match fold_of[i] {
            usize::MAX => {}
            0 => val_indices.push(i),
            _ => train_indices.push(i),
        }
    }
    test_indices.sort_unstable();

    let fold_assignments = Some(
        (0..n)
            .map(|i| if fold_of[i] == usize::MAX { 0 } else { fold_of[i] })
            .collect(),
    );
    // fold_assignments is only meaningful off the test set; fold_indices
    // filters through train/val so test rows never leak into a fold.
    Ok(SplitPlan {
        train_indices,
        val_indices,
        test_indices,
        fold_assignments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_split_even_vector() {
        assert_eq!(median_split_labels(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![0, 0, 1, 1]);
    }

    #[test]
    fn median_split_all_equal_is_degenerate() {
        assert!(matches!(
            median_split_labels(&[5.0, 5.0, 5.0, 5.0]),
            Err(Error::DegenerateLabels(_))
        ));
    }

    #[test]
    fn median_split_tie_goes_to_zero() {
        // oracle: sorted [1,2,3], median 2; strictly-greater rule gives [1,0,0]
        assert_eq!(median_split_labels(&[3.0, 1.0, 2.0]).unwrap(), vec![1, 0, 0]);
    }

    #[test]
    fn median_split_single_class_after_split_is_degenerate() {
        // median equals the max: nothing is strictly above it
        assert!(matches!(
            median_split_labels(&[1.0, 5.0, 5.0]),
            Err(Error::DegenerateLabels(_))
        ));
    }

    #[test]
    fn median_split_both_classes_property() {
        let mut rng = stream_rng(7, 99);
        for _ in 0..500 {
            let n = rng.gen_range(2..40);
            let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0_f64).round()).collect();
            let distinct = {
                let mut v = values.clone();
                v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                v.dedup();
                v.len()
            };
            match median_split_labels(&values) {
                Ok(labels) => {
                    assert!(labels.contains(&0) && labels.contains(&1));
                }
                Err(Error::DegenerateLabels(_)) => assert!(distinct >= 1),
                Err(e) => panic!("unexpected error: {e}"),
            }
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let spec = ShiftSpec { seed: 42, ..ShiftSpec::default() };
        let (s1, t1) = generate_domain_pair(&spec).unwrap();
        let (s2, t2) = generate_domain_pair(&spec).unwrap();
        assert_eq!(s1.features, s2.features);
        assert_eq!(t1.features, t2.features);
        assert_eq!(s1.labels, s2.labels);
        assert_eq!(t1.labels, t2.labels);
        assert_eq!(t1.continuous_outcome, t2.continuous_outcome);
    }

    #[test]
    fn rotation_matches_givens_matrix_in_2d() {
        let base = ShiftSpec {
            d: 2,
            n_source: 50,
            n_target: 50,
            rotation_angle: 0.0,
            label_flip_rate: 0.0,
            noise_sigma: 0.1,
            seed: 5,
            ..ShiftSpec::default()
        };
        let quarter = ShiftSpec { rotation_angle: PI / 2.0, ..base.clone() };
        let (_, t0) = generate_domain_pair(&base).unwrap();
        let (_, t90) = generate_domain_pair(&quarter).unwrap();
        // [[0,-1],[1,0]] applied to the unrotated draw
        for i in 0..t0.n_samples() {
            let (x0, x1) = (t0.features[[i, 0]], t0.features[[i, 1]]);
            assert!((t90.features[[i, 0]] - (-x1)).abs() < 1e-9);
            assert!((t90.features[[i, 1]] - x0).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = [
            ShiftSpec { d: 1, ..ShiftSpec::default() },
            ShiftSpec { rotation_angle: 7.0, ..ShiftSpec::default() },
            ShiftSpec { class_prior_target: 0.0, ..ShiftSpec::default() },
            ShiftSpec { label_flip_rate: 1.0, ..ShiftSpec::default() },
            ShiftSpec { noise_sigma: -1.0, ..ShiftSpec::default() },
            ShiftSpec { n_target: 1, ..ShiftSpec::default() },
        ];
        for spec in bad {
            assert!(matches!(generate_domain_pair(&spec), Err(Error::InvalidSpec(_))));
        }
    }

    #[test]
    fn flip_count_is_exact() {
        let spec = ShiftSpec { label_flip_rate: 0.1, ..ShiftSpec::default() };
        let unflipped = ShiftSpec { label_flip_rate: 0.0, ..spec.clone() };
        let (_, t_f) = generate_domain_pair(&spec).unwrap();
        let (_, t_0) = generate_domain_pair(&unflipped).unwrap();
        let flips = t_f
            .labels
            .as_ref()
            .unwrap()
            .iter()
            .zip(t_0.labels.as_ref().unwrap())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(flips, 200);
    }

    #[test]
    fn split_sizes_forced_arithmetic() {
        let ds = DomainDataset {
            features: Array2::zeros((10, 3)),
            labels: None,
            continuous_outcome: None,
            domain_tag: DomainTag::Source,
            sample_ids: (0..10).collect(),
        };
        let plan = make_split(&ds, 0.2, 4, 1).unwrap();
        assert_eq!(plan.test_indices.len(), 2);
        let folds = plan.fold_assignments.as_ref().unwrap();
        let mut sizes = vec![0; 4];
        for i in plan.train_indices.iter().chain(&plan.val_indices) {
            sizes[folds[*i]] += 1;
        }
        assert_eq!(sizes, vec![2, 2, 2, 2]);
        // disjoint cover
        let mut all: Vec<usize> = plan
            .train_indices
            .iter()
            .chain(&plan.val_indices)
            .chain(&plan.test_indices)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn split_is_deterministic() {
        let (source, _) = generate_domain_pair(&ShiftSpec::default()).unwrap();
        let a = make_split(&source, 0.2, 5, 9).unwrap();
        let b = make_split(&source, 0.2, 5, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_is_stratified() {
        // oracle: count labels in the emitted plan
        let labels: Vec<u8> = (0..100).map(|i| u8::from(i >= 50)).collect();
        let ds = DomainDataset {
            features: Array2::zeros((100, 2)),
            labels: Some(labels.clone()),
            continuous_outcome: None,
            domain_tag: DomainTag::Source,
            sample_ids: (0..100).collect(),
        };
        let plan = make_split(&ds, 0.2, 5, 3).unwrap();
        assert_eq!(plan.test_indices.len(), 20);
        let ones = plan.test_indices.iter().filter(|&&i| labels[i] == 1).count();
        assert_eq!(ones, 10);
    }

    #[test]
    fn split_rejects_empty_strata() {
        let ds = DomainDataset {
            features: Array2::zeros((6, 2)),
            labels: Some(vec![0, 0, 0, 0, 0, 1]),
            continuous_outcome: None,
            domain_tag: DomainTag::Source,
            sample_ids: (0..6).collect(),
        };
        assert!(matches!(make_split(&ds, 0.2, 4, 1), Err(Error::TooFewSamples(_))));
    }

    #[test]
    fn csv_round_trip() {
        let spec = ShiftSpec { n_source: 20, n_target: 20, d: 3, ..ShiftSpec::default() };
        let (source, _) = generate_domain_pair(&spec).unwrap();
        let dir = std::env::temp_dir().join("dem_csv_round_trip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("source.csv");
        source.to_csv(&path).unwrap();
        let back = DomainDataset::from_csv(&path).unwrap();
        assert_eq!(source.features, back.features);
        assert_eq!(source.labels, back.labels);
        assert_eq!(source.continuous_outcome, back.continuous_outcome);
        assert_eq!(source.sample_ids, back.sample_ids);
        std::fs::remove_dir_all(&dir).ok();
    }
}
