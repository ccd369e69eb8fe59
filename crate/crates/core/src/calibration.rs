//! Confidence calibration: per-sample confidences nudged each iteration by a
//! protecting term (rewards movement relative to the previous value) and a
//! forgetting term (pulls drifted values back toward their initial state),
//! mixed by a sigmoid of the iteration-level performance change.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mixing weight between protecting and forgetting: sigmoid(k * delta_acc).
pub fn compute_lambda(delta_acc: f64, k: f64) -> f64 {
    crate::nn::sigmoid(k * delta_acc)
}

/// The raw update for one sample, before clamping:
/// `prev + lambda (curr - prev)^2 - (1 - lambda) (prev - init)^2`.
pub fn update_kernel(prev: f64, init: f64, curr: f64, lambda: f64) -> f64 {
    prev + lambda * (curr - prev) * (curr - prev) - (1.0 - lambda) * (prev - init) * (prev - init)
}

/// Calibrated confidences over all N target training samples. `init` is
/// fixed at construction; `prev` carries the calibrated state; the current
/// sub-dataset is described by `index_map` into the full vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfidenceState {
    init: Vec<f64>,
    prev: Vec<f64>,
    curr_subset: Vec<f64>,
    index_map: Vec<usize>,
    pub lambda_scale: f64,
}

impl ConfidenceState {
    pub fn new(initial: Vec<f64>, lambda_scale: f64) -> Result<ConfidenceState> {
        if initial.is_empty() {
            return Err(Error::EmptySampleSet);
        }
        if initial.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidSpec("confidences must lie in [0,1]".into()));
        }
        if !(lambda_scale > 0.0) {
            return Err(Error::InvalidSpec("lambda scale k must be > 0".into()));
        }
        Ok(ConfidenceState {
            prev: initial.clone(),
            init: initial,
            curr_subset: Vec::new(),
            index_map: Vec::new(),
            lambda_scale,
        })
    }

    pub fn len(&self) -> usize {
        self.init.len()
    }

    pub fn is_empty(&self) -> bool {
        self.init.is_empty()
    }

    pub fn init(&self) -> &[f64] {
        &self.init
    }

    pub fn current(&self) -> &[f64] {
        &self.prev
    }

    pub fn index_map(&self) -> &[usize] {
        &self.index_map
    }

    /// Applies one calibration round for the sub-dataset at `index_map` with
    /// fresh confidences `curr_subset`; samples outside the subset keep their
    /// previous value. The result is clamped into [0,1] and becomes the new
    /// `prev`.
    pub fn update_confidences(
        &mut self,
        index_map: &[usize],
        curr_subset: &[f64],
        delta_acc: f64,
    ) -> Result<()> {
        let lambda = compute_lambda(delta_acc, self.lambda_scale);
        self.update_with_lambda(index_map, curr_subset, lambda)
    }

    /// Same as [`Self::update_confidences`] with the mixing weight supplied
    /// directly.
    pub fn update_with_lambda(
        &mut self,
        index_map: &[usize],
        curr_subset: &[f64],
        lambda: f64,
    ) -> Result<()> {
        if index_map.len() != curr_subset.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} indices for {} confidences",
                index_map.len(),
                curr_subset.len()
            )));
        }
        let n = self.init.len();
        let mut seen = vec![false; n];
        for &i in index_map {
            if i >= n {
                return Err(Error::IndexOutOfRange(format!("subset index {i} >= {n}")));
            }
            if seen[i] {
                return Err(Error::IndexOutOfRange(format!("duplicate subset index {i}")));
            }
            seen[i] = true;
        }
        for (&i, &curr) in index_map.iter().zip(curr_subset) {
            let updated = update_kernel(self.prev[i], self.init[i], curr, lambda);
            self.prev[i] = updated.clamp(0.0, 1.0);
        }
        self.index_map = index_map.to_vec();
        self.curr_subset = curr_subset.to_vec();
        Ok(())
    }
}

/// Current calibrated confidences, the selection prior fed to the policy
/// model (not a hard threshold).
pub fn screening_probabilities(state: &ConfidenceState) -> &[f64] {
    state.current()
}
