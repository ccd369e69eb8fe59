//! Independent oracles used by the verification suites: central finite
//! differences against the analytic gradients, and a brute-force pairwise
//! AUC. Kept apart from the implementations they check.

use ndarray::Array2;
use rand::Rng;

use crate::error::Result;
use crate::nn::grad::{gradient_of, loss_value, LossBatch, LossSelector};
use crate::nn::ModelColumn;
use crate::rng::stream_rng;

/// Central-difference check of the analytic gradient at `probes` random
/// parameter coordinates. Returns the maximum relative error observed.
pub fn finite_difference_max_error(
    column: &ModelColumn,
    reference: Option<&ModelColumn>,
    batch: &LossBatch,
    selector: &LossSelector,
    probes: usize,
    step: f64,
    seed: u64,
) -> Result<f64> {
    let (_, grads) = gradient_of(column, reference, batch, selector)?;
    let grads = grads.to_flat();
    let flat = column.params.to_flat();
    let mut probe_rng = stream_rng(seed, 0xfd);
    let mut worst: f64 = 0.0;
    let mut perturbed = column.clone();
    for _ in 0..probes {
        let idx = probe_rng.gen_range(0..flat.len());
        let mut plus = flat.clone();
        plus[idx] += step;
        perturbed.params.assign_from_flat(&plus)?;
        let up = loss_value(&perturbed, reference, batch, selector)?;
        let mut minus = flat.clone();
        minus[idx] -= step;
        perturbed.params.assign_from_flat(&minus)?;
        let down = loss_value(&perturbed, reference, batch, selector)?;
        let numeric = (up - down) / (2.0 * step);
        let denom = numeric.abs().max(grads[idx].abs()).max(1e-6);
        worst = worst.max((numeric - grads[idx]).abs() / denom);
    }
    Ok(worst)
}

/// All-pairs AUC: mean of `[s_pos > s_neg] + 0.5 [s_pos == s_neg]`.
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

/// A random column/batch fixture for gradient checks.
pub struct GradFixture {
    pub column: ModelColumn,
    pub reference: ModelColumn,
    pub source_x: Array2<f64>,
    pub source_y: Vec<u8>,
    pub target_x: Array2<f64>,
    pub target_y: Vec<u8>,
    pub target_da_x: Array2<f64>,
}

impl GradFixture {
    pub fn new(seed: u64) -> GradFixture {
        use crate::nn::Architecture;
        let mut rng = stream_rng(seed, 0xf1);
        let arch = Architecture::new(5, vec![7, 6]);
        let column = ModelColumn::new(arch.clone(), &mut rng);
        let reference = ModelColumn::new(arch, &mut rng);
        let source_x = Array2::from_shape_fn((9, 5), |_| rng.gen_range(-1.5..1.5));
        let source_y = (0..9).map(|_| rng.gen_range(0..2u8)).collect();
        let target_x = Array2::from_shape_fn((8, 5), |_| rng.gen_range(-1.5..1.5));
        let target_y = (0..8).map(|_| rng.gen_range(0..2u8)).collect();
        let target_da_x = Array2::from_shape_fn((11, 5), |_| rng.gen_range(-1.5..1.5));
        GradFixture { column, reference, source_x, source_y, target_x, target_y, target_da_x }
    }

    pub fn batch(&self) -> LossBatch<'_> {
        LossBatch {
            source_x: Some(&self.source_x),
            source_y: Some(&self.source_y),
            target_x: Some(&self.target_x),
            target_y: Some(&self.target_y),
            target_da_x: None,
        }
    }

    /// Batch with a distinct alignment view of the target.
    pub fn batch_with_da(&self) -> LossBatch<'_> {
        LossBatch {
            target_da_x: Some(&self.target_da_x),
            ..self.batch()
        }
    }
}
