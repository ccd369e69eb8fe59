//! Compact differentiable model columns: a ReLU feature extractor shared by
//! twin classifier heads and a domain-discriminator head, with explicit
//! gradients, Adam, early stopping, continual-backprop reinitialization, and
//! binary checkpoints.

pub mod adam;
pub mod cbp;
pub mod checkpoint;
pub mod grad;
pub mod train;

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};

pub use adam::{adam_step, OptimizerState};
pub use cbp::{cbp_step, UtilityState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

/// Dense layer, `weight` is `[out x in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Linear {
        Linear {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    /// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] for weights and biases.
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Linear {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Linear {
            weight: Array2::from_shape_fn((out_dim, in_dim), |_| rng.gen_range(-bound..bound)),
            bias: Array1::from_shape_fn(out_dim, |_| rng.gen_range(-bound..bound)),
        }
    }

    /// `x [n x in] -> x W^T + b [n x out]`.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Parameters of one column in canonical order: extractor layers, then
/// classifier A, classifier B, and the discriminator head.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnParams {
    pub extractor: Vec<Linear>,
    pub classifier_a: Linear,
    pub classifier_b: Linear,
    pub discriminator: Linear,
}

impl ColumnParams {
    pub fn zeros(arch: &Architecture) -> ColumnParams {
        let mut extractor = Vec::new();
        let mut prev = arch.input_dim;
        for &h in &arch.hidden {
            extractor.push(Linear::zeros(h, prev));
            prev = h;
        }
        ColumnParams {
            extractor,
            classifier_a: Linear::zeros(1, prev),
            classifier_b: Linear::zeros(1, prev),
            discriminator: Linear::zeros(1, prev),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count()).sum()
    }

    fn layers(&self) -> Vec<&Linear> {
        let mut v: Vec<&Linear> = self.extractor.iter().collect();
        v.push(&self.classifier_a);
        v.push(&self.classifier_b);
        v.push(&self.discriminator);
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut Linear> {
        let mut v: Vec<&mut Linear> = self.extractor.iter_mut().collect();
        v.push(&mut self.classifier_a);
        v.push(&mut self.classifier_b);
        v.push(&mut self.discriminator);
        v
    }

    /// Canonical flat layout: per layer, row-major weights then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for layer in self.layers() {
            flat.extend(layer.weight.iter());
            flat.extend(layer.bias.iter());
        }
        flat
    }

    pub fn assign_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "flat vector of {} for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for layer in self.layers_mut() {
            for w in layer.weight.iter_mut() {
                *w = flat[offset];
                offset += 1;
            }
            for b in layer.bias.iter_mut() {
                *b = flat[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .iter()
            .all(|l| l.weight.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite()))
    }

    /// Squared euclidean distance to another parameter set.
    pub fn squared_distance(&self, other: &ColumnParams) -> f64 {
        let a = self.to_flat();
        let b = other.to_flat();
        a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum()
    }

    pub fn scale(&mut self, factor: f64) {
        for layer in self.layers_mut() {
            layer.weight.mapv_inplace(|v| v * factor);
            layer.bias.mapv_inplace(|v| v * factor);
        }
    }

    pub fn add_scaled(&mut self, other: &ColumnParams, factor: f64) {
        for (mine, theirs) in self.layers_mut().into_iter().zip(other.layers()) {
            mine.weight.scaled_add(factor, &theirs.weight);
            mine.bias.scaled_add(factor, &theirs.bias);
        }
    }
}

/// Layer sizes: `input_dim -> hidden[0] -> ... -> hidden.last()` with ReLU
/// after every hidden layer; heads are linear maps to one logit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden: Vec<usize>) -> Architecture {
        Architecture { input_dim, hidden }
    }

    pub fn feature_dim(&self) -> usize {
        *self.hidden.last().expect("at least one hidden layer")
    }

    /// Flat dims list used in checkpoints: input followed by hidden sizes.
    pub fn dims(&self) -> Vec<u32> {
        let mut v = vec![self.input_dim as u32];
        v.extend(self.hidden.iter().map(|&h| h as u32));
        v
    }

    pub fn from_dims(dims: &[u32]) -> Result<Architecture> {
        if dims.len() < 2 {
            return Err(Error::CorruptCheckpoint("architecture needs >= 2 dims".into()));
        }
        Ok(Architecture {
            input_dim: dims[0] as usize,
            hidden: dims[1..].iter().map(|&d| d as usize).collect(),
        })
    }
}

/// One model column. The source column is frozen after pretraining; frozen
/// columns reject every mutating operation.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelColumn {
    pub arch: Architecture,
    pub params: ColumnParams,
    pub frozen: bool,
}

impl ModelColumn {
    pub fn new(arch: Architecture, rng: &mut impl Rng) -> ModelColumn {
        let mut extractor = Vec::new();
        let mut prev = arch.input_dim;
        for &h in &arch.hidden {
            extractor.push(Linear::init(h, prev, rng));
            prev = h;
        }
        let params = ColumnParams {
            extractor,
            classifier_a: Linear::init(1, prev, rng),
            classifier_b: Linear::init(1, prev, rng),
            discriminator: Linear::init(1, prev, rng),
        };
        ModelColumn { arch, params, frozen: false }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn ensure_unfrozen(&self) -> Result<()> {
        if self.frozen {
            Err(Error::FrozenColumn)
        } else {
            Ok(())
        }
    }

    /// Unfrozen copy used to spawn target columns from a frozen source.
    pub fn thawed_clone(&self) -> ModelColumn {
        ModelColumn { frozen: false, ..self.clone() }
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.arch.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "input width {} for extractor expecting {}",
                x.ncols(),
                self.arch.input_dim
            )));
        }
        Ok(())
    }

    /// Hidden representation `[n x feature_dim]`.
    pub fn forward_features(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x)?.hidden().clone())
    }

    /// Forward pass retaining pre-activations for backprop.
    pub fn forward_cached(&self, x: &Array2<f64>) -> Result<ForwardCache> {
        self.check_input(x)?;
        let mut pre = Vec::with_capacity(self.params.extractor.len());
        let mut act = Vec::with_capacity(self.params.extractor.len());
        let mut current = x.clone();
        for layer in &self.params.extractor {
            let z = layer.forward(&current);
            let a = z.mapv(|v| v.max(0.0));
            pre.push(z);
            current = a.clone();
            act.push(a);
        }
        Ok(ForwardCache { input: x.clone(), pre, act })
    }
}

/// Activations of one extractor pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Array2<f64>,
    pub pre: Vec<Array2<f64>>,
    pub act: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn hidden(&self) -> &Array2<f64> {
        self.act.last().expect("at least one layer")
    }
}

/// Affine head on a hidden batch: one logit per row.
pub fn forward_logit(head: &Linear, hidden: &Array2<f64>) -> Result<Array1<f64>> {
    if head.weight.ncols() != hidden.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "head expects width {}, hidden has {}",
            head.weight.ncols(),
            hidden.ncols()
        )));
    }
    Ok(head.forward(hidden).column(0).to_owned())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Twin-classifier probabilities `(p_a, p_b)` for a feature batch.
pub fn predict_pair(column: &ModelColumn, x: &Array2<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
    let h = column.forward_features(x)?;
    let la = forward_logit(&column.params.classifier_a, &h)?;
    let lb = forward_logit(&column.params.classifier_b, &h)?;
    Ok((la.mapv(sigmoid), lb.mapv(sigmoid)))
}

/// Mean twin probability, the column's prediction score.
pub fn predict_probs(column: &ModelColumn, x: &Array2<f64>) -> Result<Array1<f64>> {
    let (pa, pb) = predict_pair(column, x)?;
    Ok((pa + pb) * 0.5)
}

/// Fraction of thresholded predictions matching `labels`.
pub fn accuracy_of(column: &ModelColumn, x: &Array2<f64>, labels: &[u8]) -> Result<f64> {
    let probs = predict_probs(column, x)?;
    if probs.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let correct = probs
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| u8::from(p >= 0.5) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn zero_column_maps_to_zero_hidden() {
        let arch = Architecture::new(4, vec![6, 3]);
        let column = ModelColumn {
            params: ColumnParams::zeros(&arch),
            arch,
            frozen: false,
        };
        let x = Array2::from_shape_fn((5, 4), |(i, j)| (i + j) as f64);
        let h = column.forward_features(&x).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_nonnegative_input() {
        let arch = Architecture::new(3, vec![3]);
        let mut params = ColumnParams::zeros(&arch);
        params.extractor[0].weight = Array2::eye(3);
        let column = ModelColumn { arch, params, frozen: false };
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64);
        let h = column.forward_features(&x).unwrap();
        assert_eq!(h, x);
    }

    #[test]
    fn forward_is_deterministic_under_seed() {
        let arch = Architecture::new(5, vec![8, 4]);
        let a = ModelColumn::new(arch.clone(), &mut stream_rng(9, 2));
        let b = ModelColumn::new(arch, &mut stream_rng(9, 2));
        let x = Array2::from_shape_fn((7, 5), |(i, j)| (i as f64 - j as f64) / 3.0);
        assert_eq!(a.forward_features(&x).unwrap(), b.forward_features(&x).unwrap());
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let arch = Architecture::new(5, vec![4]);
        let column = ModelColumn::new(arch, &mut stream_rng(1, 0));
        let x = Array2::zeros((2, 3));
        assert!(matches!(column.forward_features(&x), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn logit_zero_params_gives_half_probability() {
        let head = Linear::zeros(1, 4);
        let hidden = Array2::from_shape_fn((3, 4), |(i, _)| i as f64);
        let logits = forward_logit(&head, &hidden).unwrap();
        assert!(logits.iter().all(|&l| l == 0.0));
        assert!(logits.iter().all(|&l| (sigmoid(l) - 0.5).abs() < 1e-15));
    }

    #[test]
    fn logit_scalar_case() {
        // oracle: sigmoid(2) evaluated directly
        let mut head = Linear::zeros(1, 3);
        head.weight[[0, 0]] = 1.0;
        let mut hidden = Array2::zeros((1, 3));
        hidden[[0, 0]] = 2.0;
        let logits = forward_logit(&head, &hidden).unwrap();
        assert!((logits[0] - 2.0).abs() < 1e-15);
        assert!((sigmoid(logits[0]) - 0.8807970779778823).abs() < 1e-9);
    }

    #[test]
    fn bias_only_head_is_constant() {
        let mut head = Linear::zeros(1, 2);
        head.bias[0] = -1.25;
        let hidden = Array2::from_shape_fn((4, 2), |(i, j)| (i + j) as f64);
        let logits = forward_logit(&head, &hidden).unwrap();
        assert!(logits.iter().all(|&l| l == -1.25));
    }

    #[test]
    fn flat_round_trip() {
        let arch = Architecture::new(4, vec![5, 3]);
        let column = ModelColumn::new(arch.clone(), &mut stream_rng(3, 7));
        let flat = column.params.to_flat();
        let mut rebuilt = ColumnParams::zeros(&arch);
        rebuilt.assign_from_flat(&flat).unwrap();
        assert_eq!(rebuilt, column.params);
    }
}
