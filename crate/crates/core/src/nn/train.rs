//! Supervised training with early stopping, and the shared joint-loss epoch
//! used by pretraining and per-action adaptation.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossWeights, Phase};
use crate::nn::adam::{adam_step, OptimizerState};
use crate::nn::cbp::{cbp_step, UtilityState};
use crate::nn::grad::{gradient_of, joint_training_grad, loss_value, LossBatch, LossSelector};
use crate::nn::{ColumnParams, ModelColumn};
use crate::synth::DomainDataset;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 100,
            batch_size: 64,
            patience: 20,
            learning_rate: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn epochs_run(&self) -> usize {
        self.val_loss.len()
    }
}

pub fn gather_rows(x: &Array2<f64>, indices: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((indices.len(), x.ncols()));
    for (row, &i) in indices.iter().enumerate() {
        out.row_mut(row).assign(&x.row(i));
    }
    out
}

fn gather_labels(y: &[u8], indices: &[usize]) -> Vec<u8> {
    indices.iter().map(|&i| y[i]).collect()
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    rand::seq::index::sample(rng, n, n).into_vec()
}

/// One Adam update of a column from structured gradients.
pub fn apply_adam(
    column: &mut ModelColumn,
    grads: &ColumnParams,
    opt: &mut OptimizerState,
) -> Result<()> {
    column.ensure_unfrozen()?;
    let mut flat = column.params.to_flat();
    adam_step(&mut flat, &grads.to_flat(), opt)?;
    column.params.assign_from_flat(&flat)
}

fn labeled(dataset: &DomainDataset) -> Result<&[u8]> {
    let labels = dataset
        .labels
        .as_deref()
        .ok_or_else(|| Error::DegenerateLabels("dataset is unlabeled".into()))?;
    if labels.iter().all(|&y| y == 0) || labels.iter().all(|&y| y == 1) {
        return Err(Error::DegenerateLabels("single-class dataset".into()));
    }
    Ok(labels)
}

/// Minimizes twin-head binary cross-entropy with Adam, stopping when the
/// validation loss has not improved for `patience` consecutive epochs.
/// Returns the parameters with the best validation loss.
pub fn train_supervised(
    column: ModelColumn,
    dataset: &DomainDataset,
    val_set: &DomainDataset,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ModelColumn, TrainHistory)> {
    column.ensure_unfrozen()?;
    let labels = labeled(dataset)?;
    let val_labels = val_set
        .labels
        .as_deref()
        .ok_or_else(|| Error::DegenerateLabels("validation set is unlabeled".into()))?;

    let mut column = column;
    let mut opt = OptimizerState::new(column.params.param_count(), config.learning_rate);
    let mut history = TrainHistory::default();
    let mut best_val = f64::INFINITY;
    let mut best_params = column.params.clone();
    let mut since_best = 0;

    for epoch in 0..config.max_epochs {
        let order = shuffled(dataset.n_samples(), rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(config.batch_size) {
            let x = gather_rows(&dataset.features, chunk);
            let y = gather_labels(labels, chunk);
            let batch = LossBatch {
                source_x: Some(&x),
                source_y: Some(&y),
                ..LossBatch::default()
            };
            let (value, grads) = gradient_of(&column, None, &batch, &LossSelector::SupervisedBce)?;
            apply_adam(&mut column, &grads, &mut opt)?;
            epoch_loss += value;
            steps += 1;
        }
        history.train_loss.push(epoch_loss / steps.max(1) as f64);

        let val_batch_x = val_set.features.clone();
        let batch = LossBatch {
            source_x: Some(&val_batch_x),
            source_y: Some(val_labels),
            ..LossBatch::default()
        };
        let val = loss_value(&column, None, &batch, &LossSelector::SupervisedBce)?;
        history.val_loss.push(val);

        if val < best_val {
            best_val = val;
            best_params = column.params.clone();
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                history.stopped_early = true;
                break;
            }
        }
    }

    column.params = best_params;
    Ok((column, history))
}

/// Paired source/target views for joint-loss training.
#[derive(Debug, Clone, Copy)]
pub struct JointData<'a> {
    pub source_x: &'a Array2<f64>,
    pub source_y: Option<&'a [u8]>,
    pub target_x: &'a Array2<f64>,
    pub target_y: Option<&'a [u8]>,
    /// Full unlabeled target pool for the alignment terms; when absent they
    /// see `target_x` itself.
    pub target_da_x: Option<&'a Array2<f64>>,
}

/// One epoch of joint training. The phase's own domain drives the batch
/// schedule; the other side is cycled from its own shuffled order. Returns
/// the mean joint loss over steps.
#[allow(clippy::too_many_arguments)]
pub fn joint_epoch(
    column: &mut ModelColumn,
    opt: &mut OptimizerState,
    utility: Option<&mut UtilityState>,
    reference: Option<&ModelColumn>,
    data: &JointData,
    weights: &LossWeights,
    phase: Phase,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    column.ensure_unfrozen()?;
    let n_source = data.source_x.nrows();
    let n_target = data.target_x.nrows();
    if n_source == 0 || n_target == 0 {
        return Err(Error::EmptyBatch);
    }
    let (primary_n, secondary_n) = match phase {
        Phase::SourcePretrain => (n_source, n_target),
        Phase::TargetAdapt => (n_target, n_source),
    };
    let primary_order = shuffled(primary_n, rng);
    let secondary_order = shuffled(secondary_n, rng);
    let mut secondary_cursor = 0usize;
    let da_pool = data.target_da_x;
    let da_order = da_pool.map(|pool| shuffled(pool.nrows(), rng));
    let mut da_cursor = 0usize;
    let mut utility = utility;

    let mut total = 0.0;
    let mut steps = 0;
    for chunk in primary_order.chunks(batch_size) {
        let secondary_chunk: Vec<usize> = (0..batch_size.min(secondary_n))
            .map(|k| secondary_order[(secondary_cursor + k) % secondary_n])
            .collect();
        secondary_cursor = (secondary_cursor + secondary_chunk.len()) % secondary_n;

        let (src_idx, tgt_idx) = match phase {
            Phase::SourcePretrain => (chunk, secondary_chunk.as_slice()),
            Phase::TargetAdapt => (secondary_chunk.as_slice(), chunk),
        };
        let xs = gather_rows(data.source_x, src_idx);
        let xt = gather_rows(data.target_x, tgt_idx);
        let ys = data.source_y.map(|y| gather_labels(y, src_idx));
        let yt = data.target_y.map(|y| gather_labels(y, tgt_idx));
        let x_da = da_pool.zip(da_order.as_ref()).map(|(pool, order)| {
            let rows: Vec<usize> = (0..batch_size.min(order.len()))
                .map(|k| order[(da_cursor + k) % order.len()])
                .collect();
            da_cursor = (da_cursor + rows.len()) % order.len();
            gather_rows(pool, &rows)
        });
        let batch = LossBatch {
            source_x: Some(&xs),
            source_y: ys.as_deref(),
            target_x: Some(&xt),
            target_y: yt.as_deref(),
            target_da_x: x_da.as_ref(),
        };
        let (_, value, grads) = joint_training_grad(column, reference, &batch, weights, phase)?;
        apply_adam(column, &grads, opt)?;
        if let Some(state) = utility.as_deref_mut() {
            cbp_step(column, state, &xt, rng)?;
        }
        total += value;
        steps += 1;
    }
    Ok(total / steps.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;
    use crate::rng::stream_rng;
    use crate::synth::{DomainDataset, DomainTag};

    fn blobs(n: usize, seed: u64) -> DomainDataset {
        use rand::Rng;
        let mut rng = stream_rng(seed, 0);
        let mut features = Array2::zeros((n, 2));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = u8::from(i % 2 == 0);
            let offset = if y == 1 { 2.0 } else { -2.0 };
            features[[i, 0]] = offset + rng.gen_range(-0.5..0.5);
            features[[i, 1]] = rng.gen_range(-0.5..0.5);
            labels.push(y);
        }
        DomainDataset {
            features,
            labels: Some(labels),
            continuous_outcome: None,
            domain_tag: DomainTag::Source,
            sample_ids: (0..n as u64).collect(),
        }
    }

    #[test]
    fn separable_blobs_reach_high_accuracy() {
        // oracle: any convergent logistic-style fit separates these blobs
        let train = blobs(200, 3);
        let val = blobs(60, 4);
        let arch = Architecture::new(2, vec![16, 8]);
        let column = ModelColumn::new(arch, &mut stream_rng(1, 2));
        let config = TrainConfig { learning_rate: 1e-2, max_epochs: 60, ..TrainConfig::default() };
        let (trained, _) =
            train_supervised(column, &train, &val, &config, &mut stream_rng(1, 3)).unwrap();
        let acc = crate::nn::accuracy_of(&trained, &train.features, train.labels.as_ref().unwrap())
            .unwrap();
        assert!(acc >= 0.99, "train accuracy {acc}");
    }

    #[test]
    fn patience_stops_after_exactly_twenty_flat_epochs() {
        // lr = 0 keeps the validation loss constant: epoch 1 improves on +inf,
        // then exactly `patience` non-improving epochs run
        let train = blobs(40, 5);
        let val = blobs(20, 6);
        let arch = Architecture::new(2, vec![4]);
        let column = ModelColumn::new(arch, &mut stream_rng(2, 2));
        let config = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        let (_, history) =
            train_supervised(column, &train, &val, &config, &mut stream_rng(2, 3)).unwrap();
        assert_eq!(history.epochs_run(), 21);
        assert!(history.stopped_early);
        assert_eq!(history.best_epoch, 0);
    }

    #[test]
    fn frozen_column_is_rejected() {
        let train = blobs(10, 7);
        let arch = Architecture::new(2, vec![4]);
        let mut column = ModelColumn::new(arch, &mut stream_rng(3, 2));
        column.freeze();
        let result = train_supervised(
            column,
            &train,
            &train,
            &TrainConfig::default(),
            &mut stream_rng(3, 3),
        );
        assert!(matches!(result, Err(Error::FrozenColumn)));
    }

    #[test]
    fn training_is_bit_deterministic() {
        let train = blobs(64, 8);
        let val = blobs(32, 9);
        let arch = Architecture::new(2, vec![8, 4]);
        let config = TrainConfig { max_epochs: 5, ..TrainConfig::default() };
        let run = |seed| {
            let column = ModelColumn::new(arch.clone(), &mut stream_rng(seed, 2));
            let (trained, history) =
                train_supervised(column, &train, &val, &config, &mut stream_rng(seed, 3)).unwrap();
            (trained.params.to_flat(), history.val_loss)
        };
        assert_eq!(run(11), run(11));
    }

    #[test]
    fn unlabeled_dataset_is_degenerate() {
        let mut train = blobs(10, 7);
        train.labels = None;
        let arch = Architecture::new(2, vec![4]);
        let column = ModelColumn::new(arch, &mut stream_rng(4, 2));
        let result = train_supervised(
            column,
            &train,
            &train,
            &TrainConfig::default(),
            &mut stream_rng(4, 3),
        );
        assert!(matches!(result, Err(Error::DegenerateLabels(_))));
    }
}
