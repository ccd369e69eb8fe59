//! The directed-evolution pipeline: source-led pretraining, policy-driven
//! screening over pseudo-labeled subsets, evolving via mutation + crossover,
//! a beam-search replay buffer with patience stopping, and final evaluation.

pub mod beam;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{compute_lambda, ConfidenceState};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, Phase};
use crate::metrics::{metrics_with_ci, MetricsReport, ReportMeta};
use crate::nn::adam::OptimizerState;
use crate::nn::cbp::UtilityState;
use crate::nn::grad::{loss_value, LossBatch, LossSelector};
use crate::nn::train::{gather_rows, joint_epoch, JointData};
use crate::nn::{predict_pair, predict_probs, Architecture, ModelColumn};
use crate::policy::{
    action_entropy, compute_reward, policy_features, sample_bernoulli_mask, ActionBatch,
    ActionKind, ActionSample, PolicyModel,
};
use crate::rng::{action_stream, stream_rng, streams};
use crate::synth::{make_split, DomainDataset};

pub use beam::{uniform_crossover, BeamCandidate, CheckpointStore, ReplayBuffer};

/// Loop hyperparameters and ablation switches. Serialized as-is into run
/// configuration files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    pub beam_width: usize,
    pub patience: usize,
    pub screening_iterations: usize,
    pub evolving_iterations: usize,
    pub actions_per_iteration: usize,
    pub action_epochs: usize,
    pub crossover_children: usize,
    /// Reward blend between source-validation accuracy and pseudo-label
    /// agreement.
    pub alpha: f64,
    /// Entropy coefficient of the policy loss.
    pub beta: f64,
    pub seed: u64,
    /// Train each candidate from a fresh initialization instead of the best
    /// beam checkpoint.
    pub scratch: bool,
    /// Utility-based unit reinitialization during candidate training.
    pub continual_backprop: bool,
    /// Calibrated-confidence policies; when off, screening uses a fixed
    /// confidence threshold and evolving mutates uniformly at random.
    pub confidence_calibration: bool,
    /// Discriminator/CORAL/discrepancy terms in both phases.
    pub adaptation_losses: bool,
    /// Frozen source column coupling: proximal term, frozen features, and
    /// the source share of the reward. Off for the domain-specific variant.
    pub source_anchoring: bool,
    pub center_rewards: bool,
    pub fixed_confidence_threshold: f64,
    pub random_mutation_rate: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub pretrain_max_epochs: usize,
    pub pretrain_patience: usize,
    /// Independent pretraining initializations; the most target-confident
    /// column wins.
    pub restarts: usize,
    pub extractor_hidden: Vec<usize>,
    pub lambda_scale: f64,
    pub test_fraction: f64,
    pub k_folds: usize,
    pub bootstrap_resamples: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            beam_width: 5,
            patience: 5,
            screening_iterations: 30,
            evolving_iterations: 30,
            actions_per_iteration: 8,
            action_epochs: 5,
            crossover_children: 2,
            alpha: 0.5,
            beta: 0.01,
            seed: 42,
            scratch: false,
            continual_backprop: true,
            confidence_calibration: true,
            adaptation_losses: true,
            source_anchoring: true,
            center_rewards: true,
            fixed_confidence_threshold: 0.8,
            random_mutation_rate: 0.1,
            learning_rate: 1e-3,
            batch_size: 64,
            pretrain_max_epochs: 100,
            pretrain_patience: 20,
            restarts: 3,
            extractor_hidden: vec![64, 32],
            lambda_scale: 10.0,
            test_fraction: 0.2,
            k_folds: 5,
            bootstrap_resamples: 2000,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.beam_width,
            self.patience,
            self.screening_iterations,
            self.evolving_iterations,
            self.actions_per_iteration,
            self.action_epochs,
            self.batch_size,
            self.k_folds,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(Error::InvalidConfig("loop counts must be >= 1".into()));
        }
        if self.extractor_hidden.is_empty() {
            return Err(Error::InvalidConfig("extractor needs at least one hidden layer".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig("alpha must lie in [0,1]".into()));
        }
        if !(self.lambda_scale > 0.0) {
            return Err(Error::InvalidConfig("lambda_scale must be > 0".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::InvalidConfig("test_fraction must lie in (0,1)".into()));
        }
        Ok(())
    }

    /// Weights actually used in training, after ablation switches.
    pub fn effective_weights(&self, base: &LossWeights) -> LossWeights {
        let mut weights = *base;
        if !self.adaptation_losses || !self.source_anchoring {
            weights.w_disc = 0.0;
            weights.w_coral = 0.0;
            weights.w_mcd = 0.0;
        }
        if !self.source_anchoring {
            weights.w_prox = 0.0;
        }
        weights
    }

    pub fn effective_alpha(&self) -> f64 {
        if self.source_anchoring {
            self.alpha
        } else {
            0.0
        }
    }
}

/// Patience over a quantity that should keep improving; `observe` returns
/// true once `limit` consecutive non-improvements occur.
#[derive(Debug, Clone)]
pub struct PatienceTracker {
    best: f64,
    since: usize,
    limit: usize,
}

impl PatienceTracker {
    pub fn new(limit: usize) -> PatienceTracker {
        PatienceTracker { best: f64::NEG_INFINITY, since: 0, limit }
    }

    pub fn observe(&mut self, value: f64) -> bool {
        if value > self.best {
            self.best = value;
            self.since = 0;
        } else {
            self.since += 1;
        }
        self.since >= self.limit
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Rewards of every evaluated candidate this iteration.
    pub rewards: Vec<f64>,
    pub best_reward: f64,
    pub beam_best_reward: f64,
    pub delta_acc: f64,
    pub lambda: f64,
    pub skipped: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PhaseReport {
    pub iterations: Vec<IterationRecord>,
    pub best_reward: f64,
    pub target_test: Option<MetricsReport>,
    pub source_test: MetricsReport,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DemReport {
    pub schema_version: u32,
    pub seed: u64,
    /// Against the generator's hidden labels, when available.
    pub initial_pseudo_label_accuracy: Option<f64>,
    pub source_frozen: MetricsReport,
    pub screening: PhaseReport,
    pub evolving: PhaseReport,
    pub final_source: MetricsReport,
    pub final_target: Option<MetricsReport>,
    pub final_reward: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PseudoLabelRow {
    pub id: u64,
    pub label: u8,
    pub confidence: f64,
}

/// Everything a full run produces.
#[derive(Debug, Clone)]
pub struct DemRunResult {
    pub report: DemReport,
    pub final_pseudo: Vec<PseudoLabelRow>,
    pub best_column: ModelColumn,
    pub frozen_source: ModelColumn,
    pub store: CheckpointStore,
    pub beam_refs: Vec<String>,
}

/// Split views of the benchmark consumed by the pipeline.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub source_train: DomainDataset,
    pub source_val: DomainDataset,
    pub source_test: DomainDataset,
    /// Label-stripped adaptation view.
    pub target_train: DomainDataset,
    /// Evaluation-only labels of the target training rows.
    pub target_train_hidden: Option<Vec<u8>>,
    pub target_test: Option<DomainDataset>,
}

/// Stratified 80/20 splits for both domains; fold 0 of the source remainder
/// doubles as the validation set.
pub fn prepare_benchmark(
    source: &DomainDataset,
    target: &DomainDataset,
    config: &LoopConfig,
) -> Result<PreparedData> {
    source.validate()?;
    target.validate()?;
    let source_split = make_split(source, config.test_fraction, config.k_folds, config.seed)?;
    let target_split = make_split(target, config.test_fraction, config.k_folds, config.seed)?;
    let target_trainval: Vec<usize> = target_split
        .train_indices
        .iter()
        .chain(&target_split.val_indices)
        .copied()
        .collect();
    let target_train_full = target.subset(&target_trainval)?;
    let target_test = target
        .labels
        .as_ref()
        .map(|_| target.subset(&target_split.test_indices))
        .transpose()?;
    Ok(PreparedData {
        source_train: source.subset(&source_split.train_indices)?,
        source_val: source.subset(&source_split.val_indices)?,
        source_test: source.subset(&source_split.test_indices)?,
        target_train_hidden: target_train_full.labels.clone(),
        target_train: target_train_full.without_labels(),
        target_test,
    })
}

/// Label-free diagnostics of one pretraining restart, used to pick the
/// best-aligned column.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RestartDiagnostics {
    pub restart: usize,
    pub best_val_loss: f64,
    pub mean_target_confidence: f64,
    /// Agreement with the stable-coordinate probe's target labeling.
    pub probe_agreement: f64,
}

/// Coarse target labeling from the coordinates whose marginals did not
/// shift between domains. Adversarial alignment of a strong feature shift
/// has a sign ambiguity; class information carried by shift-free
/// coordinates is the one label-free signal that survives it, so restart
/// selection trusts agreement with this probe.
///
/// Returns `None` when no coordinate is shift-free.
pub fn stable_coordinate_probe(
    source: &DomainDataset,
    target_x: &Array2<f64>,
) -> Result<Option<Vec<u8>>> {
    let labels = source
        .labels
        .as_deref()
        .ok_or_else(|| Error::DegenerateLabels("probe needs labeled source".into()))?;
    let d = source.dim();
    let n_s = source.n_samples() as f64;
    let n_t = target_x.nrows() as f64;
    if n_s < 2.0 || n_t < 2.0 {
        return Err(Error::TooFewSamples("probe needs 2+ samples per domain".into()));
    }

    let moments = |x: &Array2<f64>, j: usize| {
        let col = x.column(j);
        let mean = col.sum() / x.nrows() as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (x.nrows() as f64 - 1.0);
        (mean, var)
    };
    // shift score per coordinate: standardized mean shift + log variance ratio
    let mut stable = Vec::new();
    for j in 0..d {
        let (ms, vs) = moments(&source.features, j);
        let (mt, vt) = moments(target_x, j);
        let pooled = (0.5 * (vs + vt)).max(1e-12).sqrt();
        let score = (ms - mt).abs() / pooled + (vs.max(1e-12) / vt.max(1e-12)).ln().abs();
        if score < 0.25 {
            stable.push(j);
        }
    }
    if stable.is_empty() {
        return Ok(None);
    }

    // class-mean-difference direction over the stable coordinates, with the
    // midpoint as intercept
    let mut mean1 = vec![0.0; stable.len()];
    let mut mean0 = vec![0.0; stable.len()];
    let (mut n1, mut n0) = (0.0, 0.0);
    for i in 0..source.n_samples() {
        let into = if labels[i] == 1 {
            n1 += 1.0;
            &mut mean1
        } else {
            n0 += 1.0;
            &mut mean0
        };
        for (k, &j) in stable.iter().enumerate() {
            into[k] += source.features[[i, j]];
        }
    }
    if n1 == 0.0 || n0 == 0.0 {
        return Err(Error::SingleClass("probe needs both source classes".into()));
    }
    for k in 0..stable.len() {
        mean1[k] /= n1;
        mean0[k] /= n0;
    }
    let labels_t: Vec<u8> = (0..target_x.nrows())
        .map(|i| {
            let mut score = 0.0;
            for (k, &j) in stable.iter().enumerate() {
                let w = mean1[k] - mean0[k];
                let mid = 0.5 * (mean1[k] + mean0[k]);
                score += w * (target_x[[i, j]] - mid);
            }
            u8::from(score > 0.0)
        })
        .collect();
    Ok(Some(labels_t))
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub frozen: ModelColumn,
    pub pseudo_labels: Vec<u8>,
    pub confidence: ConfidenceState,
    pub val_loss: Vec<f64>,
    pub restarts: Vec<RestartDiagnostics>,
    pub chosen_restart: usize,
}

fn pretrain_single(
    prepared: &PreparedData,
    config: &LoopConfig,
    weights: &LossWeights,
    restart: usize,
) -> Result<(ModelColumn, Vec<f64>, f64)> {
    let labels = prepared
        .source_train
        .labels
        .as_deref()
        .ok_or_else(|| Error::DegenerateLabels("source must be labeled".into()))?;
    let val_labels = prepared
        .source_val
        .labels
        .as_deref()
        .ok_or_else(|| Error::DegenerateLabels("source validation must be labeled".into()))?;

    let arch = Architecture::new(prepared.source_train.dim(), config.extractor_hidden.clone());
    let init_stream = streams::COLUMN_INIT + 64 * restart as u64;
    let shuffle_stream = streams::PRETRAIN + 64 * restart as u64;
    let mut column = ModelColumn::new(arch, &mut stream_rng(config.seed, init_stream));
    let mut opt = OptimizerState::new(column.params.param_count(), config.learning_rate);
    let pretrain_weights = config.effective_weights(weights);
    let mut rng = stream_rng(config.seed, shuffle_stream);

    let data = JointData {
        source_x: &prepared.source_train.features,
        source_y: Some(labels),
        target_x: &prepared.target_train.features,
        target_y: None,
        target_da_x: None,
    };

    let mut best_val = f64::INFINITY;
    let mut best_params = column.params.clone();
    let mut since_best = 0;
    let mut val_curve = Vec::new();
    for _ in 0..config.pretrain_max_epochs {
        joint_epoch(
            &mut column,
            &mut opt,
            None,
            None,
            &data,
            &pretrain_weights,
            Phase::SourcePretrain,
            config.batch_size,
            &mut rng,
        )?;
        let batch = LossBatch {
            source_x: Some(&prepared.source_val.features),
            source_y: Some(val_labels),
            ..LossBatch::default()
        };
        let val = loss_value(&column, None, &batch, &LossSelector::SupervisedBce)?;
        val_curve.push(val);
        if val < best_val {
            best_val = val;
            best_params = column.params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.pretrain_patience {
                break;
            }
        }
    }
    column.params = best_params;
    Ok((column, val_curve, best_val))
}

fn restart_diagnostics(
    column: &ModelColumn,
    prepared: &PreparedData,
    probe: Option<&[u8]>,
    restart: usize,
    best_val_loss: f64,
) -> Result<RestartDiagnostics> {
    let probs = predict_probs(column, &prepared.target_train.features)?;
    let mean_target_confidence =
        probs.iter().map(|&p| p.max(1.0 - p)).sum::<f64>() / probs.len().max(1) as f64;
    let probe_agreement = match probe {
        Some(reference) => {
            let agree = probs
                .iter()
                .zip(reference)
                .filter(|&(&p, &l)| u8::from(p >= 0.5) == l)
                .count();
            agree as f64 / reference.len() as f64
        }
        // without a probe, fall back to ranking by target confidence
        None => mean_target_confidence,
    };
    Ok(RestartDiagnostics {
        restart,
        best_val_loss,
        mean_target_confidence,
        probe_agreement,
    })
}

/// One restart's trained (unfrozen) column, for diagnostics.
pub fn pretrain_restart_column(
    prepared: &PreparedData,
    config: &LoopConfig,
    weights: &LossWeights,
    restart: usize,
) -> Result<ModelColumn> {
    Ok(pretrain_single(prepared, config, weights, restart)?.0)
}

/// Trains the source column on labeled source plus unlabeled target under
/// the pretraining joint loss, freezes it, and thresholds its target
/// predictions into the initial pseudo-labels. Runs `restarts` independent
/// initializations and keeps the one agreeing most with the
/// stable-coordinate probe (see [`stable_coordinate_probe`]).
pub fn pretrain_source_led(
    prepared: &PreparedData,
    config: &LoopConfig,
    weights: &LossWeights,
) -> Result<PretrainOutcome> {
    config.validate()?;
    weights.validate()?;

    let probe = stable_coordinate_probe(&prepared.source_train, &prepared.target_train.features)?;
    let mut diagnostics = Vec::new();
    let mut candidates = Vec::new();
    for restart in 0..config.restarts.max(1) {
        let (column, val_curve, best_val) = pretrain_single(prepared, config, weights, restart)?;
        diagnostics.push(restart_diagnostics(
            &column,
            prepared,
            probe.as_deref(),
            restart,
            best_val,
        )?);
        candidates.push((column, val_curve));
    }
    let chosen_restart = diagnostics
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.probe_agreement.partial_cmp(&b.probe_agreement).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    let (mut column, val_curve) = candidates.swap_remove(chosen_restart);
    column.freeze();

    let probs = predict_probs(&column, &prepared.target_train.features)?;
    let pseudo_labels: Vec<u8> = probs.iter().map(|&p| u8::from(p >= 0.5)).collect();
    if pseudo_labels.iter().all(|&y| y == 0) || pseudo_labels.iter().all(|&y| y == 1) {
        return Err(Error::DegeneratePseudoLabels);
    }
    let confidences: Vec<f64> = probs.iter().map(|&p| p.max(1.0 - p)).collect();
    let confidence = ConfidenceState::new(confidences, config.lambda_scale)?;
    Ok(PretrainOutcome {
        frozen: column,
        pseudo_labels,
        confidence,
        val_loss: val_curve,
        restarts: diagnostics,
        chosen_restart,
    })
}

/// Read-only context shared by every candidate evaluation in a run.
#[derive(Debug, Clone)]
pub struct SharedData {
    pub source_train_x: Array2<f64>,
    pub source_train_y: Vec<u8>,
    pub source_val: DomainDataset,
    pub target_x: Array2<f64>,
    pub target_ids: Vec<u64>,
    pub frozen: ModelColumn,
    pub config: LoopConfig,
    pub weights: LossWeights,
    pub alpha: f64,
}

/// One candidate to train and score.
#[derive(Debug)]
pub struct CandidateContext<'a> {
    pub shared: &'a SharedData,
    pub base: &'a ModelColumn,
    pub base_optimizer: Option<&'a OptimizerState>,
    pub base_utility: Option<&'a UtilityState>,
    pub labels: &'a [u8],
    pub subset: &'a [usize],
    pub train_stream: u64,
}

#[derive(Debug, Clone)]
pub struct EvaluatedCandidate {
    pub column: ModelColumn,
    pub optimizer: OptimizerState,
    pub utility: Option<UtilityState>,
    pub reward: f64,
    /// Candidate's own prediction confidence on the trained subset.
    pub subset_confidences: Vec<f64>,
}

/// Trains one candidate and computes its reward. Swappable for tests.
pub trait CandidateTrainer: Sync {
    fn evaluate(&self, ctx: &CandidateContext) -> Result<EvaluatedCandidate>;
}

/// The production trainer: warm-start (or scratch) joint adaptation over the
/// selected pseudo-labeled subset with the source batch supplying alignment
/// features, continual backprop each step, reward from the blended criterion.
pub struct AdaptTrainer;

impl CandidateTrainer for AdaptTrainer {
    fn evaluate(&self, ctx: &CandidateContext) -> Result<EvaluatedCandidate> {
        let config = &ctx.shared.config;
        if ctx.subset.is_empty() {
            return Err(Error::EmptySelection);
        }
        let mut rng = stream_rng(config.seed, ctx.train_stream);
        let (mut column, mut opt, mut utility) = if config.scratch {
            let column = ModelColumn::new(ctx.base.arch.clone(), &mut rng);
            let opt = OptimizerState::new(column.params.param_count(), config.learning_rate);
            (column, opt, None)
        } else {
            let column = ctx.base.thawed_clone();
            let opt = ctx
                .base_optimizer
                .cloned()
                .unwrap_or_else(|| OptimizerState::new(column.params.param_count(), config.learning_rate));
            let utility = config
                .continual_backprop
                .then(|| ctx.base_utility.cloned().unwrap_or_else(|| UtilityState::new(&column.arch)));
            (column, opt, utility)
        };

        let subset_x = gather_rows(&ctx.shared.target_x, ctx.subset);
        let subset_y: Vec<u8> = ctx.subset.iter().map(|&i| ctx.labels[i]).collect();
        let reference = ctx.shared.config.source_anchoring.then_some(&ctx.shared.frozen);
        let data = JointData {
            source_x: &ctx.shared.source_train_x,
            source_y: None,
            target_x: &subset_x,
            target_y: Some(&subset_y),
            target_da_x: Some(&ctx.shared.target_x),
        };
        for _ in 0..config.action_epochs {
            joint_epoch(
                &mut column,
                &mut opt,
                utility.as_mut(),
                reference,
                &data,
                &ctx.shared.weights,
                Phase::TargetAdapt,
                config.batch_size,
                &mut rng,
            )?;
        }

        let reward = compute_reward(&column, &ctx.shared.source_val, &subset_x, &subset_y, ctx.shared.alpha)?;
        let probs = predict_probs(&column, &subset_x)?;
        let subset_confidences = probs.iter().map(|&p| p.max(1.0 - p)).collect();
        Ok(EvaluatedCandidate { column, optimizer: opt, utility, reward, subset_confidences })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseKind {
    Screening,
    Evolving,
}

impl PhaseKind {
    fn train_stream_phase(&self) -> u64 {
        match self {
            PhaseKind::Screening => 0,
            PhaseKind::Evolving => 1,
        }
    }

    fn mask_stream_phase(&self) -> u64 {
        match self {
            PhaseKind::Screening => 4,
            PhaseKind::Evolving => 5,
        }
    }
}

struct PlannedCandidate {
    labels: Vec<u8>,
    subset: Vec<usize>,
    /// Index into the action list when policy-sampled.
    action_index: Option<usize>,
    train_stream: u64,
}

/// Mutable state of one adaptation run.
pub struct Pipeline {
    pub shared: SharedData,
    pub beam: ReplayBuffer,
    pub store: CheckpointStore,
    pub confidence: ConfidenceState,
    pub selection_policy: PolicyModel,
    pub mutation_policy: PolicyModel,
    pub prev_reward: f64,
    pub screening_records: Vec<IterationRecord>,
    pub evolving_records: Vec<IterationRecord>,
}

fn single_class(labels: &[u8]) -> bool {
    labels.iter().all(|&y| y == 0) || labels.iter().all(|&y| y == 1)
}

impl Pipeline {
    /// Seeds the beam with the pretrained column carrying the initial
    /// pseudo-labels.
    pub fn new(
        shared: SharedData,
        confidence: ConfidenceState,
        initial_pseudo_labels: Vec<u8>,
    ) -> Result<Pipeline> {
        if single_class(&initial_pseudo_labels) {
            return Err(Error::DegeneratePseudoLabels);
        }
        let config = shared.config.clone();
        let mut store = CheckpointStore::new();
        let initial_column = shared.frozen.thawed_clone();
        let checkpoint_ref = store.put_column(&initial_column);
        let mut beam = ReplayBuffer::new(config.beam_width);
        // the root candidate only supplies the warm-start column and the
        // initial labels; reward 0 so the first trained candidate replaces it
        beam.insert(BeamCandidate {
            pseudo_labels: initial_pseudo_labels,
            confidence_state: confidence.clone(),
            reward: 0.0,
            checkpoint_ref,
            birth_iteration: 0,
        });
        let selection_policy =
            PolicyModel::new(&mut stream_rng(config.seed, streams::SELECTION_POLICY), 1.0, 1e-2);
        let mutation_policy =
            PolicyModel::new(&mut stream_rng(config.seed, streams::MUTATION_POLICY), -2.5, 1e-2);
        Ok(Pipeline {
            shared,
            beam,
            store,
            confidence,
            selection_policy,
            mutation_policy,
            prev_reward: 0.0,
            screening_records: Vec::new(),
            evolving_records: Vec::new(),
        })
    }

    pub fn best_column(&self) -> Result<ModelColumn> {
        let best = self.beam.best().ok_or(Error::EmptySampleSet)?;
        self.store.get_column(&best.checkpoint_ref)
    }

    /// Per-sample policy inputs: calibrated confidence, the column's support
    /// for the sample's current pseudo-label, and twin-classifier
    /// disagreement.
    fn policy_feature_matrix(
        &self,
        column: &ModelColumn,
        current_labels: &[u8],
    ) -> Result<Array2<f64>> {
        let (pa, pb) = predict_pair(column, &self.shared.target_x)?;
        let label_support: Vec<f64> = pa
            .iter()
            .zip(pb.iter())
            .zip(current_labels)
            .map(|((&a, &b), &y)| {
                let p = 0.5 * (a + b);
                if y == 1 {
                    p
                } else {
                    1.0 - p
                }
            })
            .collect();
        let disagreement: Vec<f64> = pa.iter().zip(pb.iter()).map(|(&a, &b)| (a - b).abs()).collect();
        policy_features(self.confidence.current(), &label_support, &disagreement)
    }

    pub fn run_screening(&mut self, trainer: &dyn CandidateTrainer) -> Result<()> {
        let records = self.run_phase(PhaseKind::Screening, trainer)?;
        self.screening_records = records;
        Ok(())
    }

    pub fn run_evolving(&mut self, trainer: &dyn CandidateTrainer) -> Result<()> {
        let records = self.run_phase(PhaseKind::Evolving, trainer)?;
        self.evolving_records = records;
        Ok(())
    }

    fn run_phase(
        &mut self,
        kind: PhaseKind,
        trainer: &dyn CandidateTrainer,
    ) -> Result<Vec<IterationRecord>> {
        let max_iterations = match kind {
            PhaseKind::Screening => self.shared.config.screening_iterations,
            PhaseKind::Evolving => self.shared.config.evolving_iterations,
        };
        let mut patience = PatienceTracker::new(self.shared.config.patience);
        let mut records = Vec::new();
        for iteration in 1..=max_iterations {
            let record = self.run_iteration(kind, iteration, trainer)?;
            let beam_best = self.beam.best().map(|c| c.reward).unwrap_or(f64::NEG_INFINITY);
            records.push(record);
            if patience.observe(beam_best) {
                break;
            }
        }
        Ok(records)
    }

    fn plan_screening(
        &mut self,
        iteration: usize,
        base_labels: &[u8],
        features: &Array2<f64>,
        actions: &mut Vec<ActionSample>,
        skipped: &mut usize,
    ) -> Result<Vec<PlannedCandidate>> {
        let config = &self.shared.config;
        let mut planned = Vec::new();
        if config.confidence_calibration {
            let probs = self.selection_policy.probabilities(features)?;
            let p = probs.as_slice().unwrap();
            let entropy = action_entropy(p);
            for slot in 0..config.actions_per_iteration {
                let mut rng = stream_rng(
                    config.seed,
                    action_stream(PhaseKind::Screening.mask_stream_phase(), iteration, slot),
                );
                let mut sampled = sample_bernoulli_mask(p, &mut rng);
                if sampled.0.iter().all(|&m| m == 0) {
                    sampled = sample_bernoulli_mask(p, &mut rng);
                }
                if sampled.0.iter().all(|&m| m == 0) {
                    *skipped += 1;
                    continue;
                }
                let (mask, logp) = sampled;
                let subset: Vec<usize> = mask
                    .iter()
                    .enumerate()
                    .filter(|(_, &m)| m == 1)
                    .map(|(i, _)| i)
                    .collect();
                actions.push(ActionSample { mask, joint_logp: logp, entropy, reward: 0.0 });
                planned.push(PlannedCandidate {
                    labels: base_labels.to_vec(),
                    subset,
                    action_index: Some(actions.len() - 1),
                    train_stream: action_stream(
                        PhaseKind::Screening.train_stream_phase(),
                        iteration,
                        slot,
                    ),
                });
            }
        } else {
            // fixed-filter ablation: threshold the (static) confidences
            let subset: Vec<usize> = self
                .confidence
                .current()
                .iter()
                .enumerate()
                .filter(|(_, &c)| c >= config.fixed_confidence_threshold)
                .map(|(i, _)| i)
                .collect();
            if subset.is_empty() {
                *skipped += config.actions_per_iteration;
                return Ok(planned);
            }
            for slot in 0..config.actions_per_iteration {
                planned.push(PlannedCandidate {
                    labels: base_labels.to_vec(),
                    subset: subset.clone(),
                    action_index: None,
                    train_stream: action_stream(
                        PhaseKind::Screening.train_stream_phase(),
                        iteration,
                        slot,
                    ),
                });
            }
        }
        Ok(planned)
    }

    fn plan_evolving(
        &mut self,
        iteration: usize,
        base_labels: &[u8],
        features: &Array2<f64>,
        actions: &mut Vec<ActionSample>,
        skipped: &mut usize,
    ) -> Result<Vec<PlannedCandidate>> {
        let config = &self.shared.config;
        let n_samples = base_labels.len();
        let all: Vec<usize> = (0..n_samples).collect();
        let mut planned = Vec::new();
        let mut slot = 0usize;

        if config.confidence_calibration {
            let probs = self.mutation_policy.probabilities(features)?;
            let p = probs.as_slice().unwrap();
            let entropy = action_entropy(p);
            for _ in 0..config.actions_per_iteration {
                let mut rng = stream_rng(
                    config.seed,
                    action_stream(PhaseKind::Evolving.mask_stream_phase(), iteration, slot),
                );
                let (mask, logp) = sample_bernoulli_mask(p, &mut rng);
                let mutated = crate::policy::apply_mutation(base_labels, &mask);
                slot += 1;
                if single_class(&mutated) {
                    *skipped += 1;
                    continue;
                }
                actions.push(ActionSample { mask, joint_logp: logp, entropy, reward: 0.0 });
                planned.push(PlannedCandidate {
                    labels: mutated,
                    subset: all.clone(),
                    action_index: Some(actions.len() - 1),
                    train_stream: action_stream(
                        PhaseKind::Evolving.train_stream_phase(),
                        iteration,
                        slot - 1,
                    ),
                });
            }
        } else {
            // random-mutation ablation: component-wise coin at a fixed rate
            for _ in 0..config.actions_per_iteration {
                let mut rng = stream_rng(
                    config.seed,
                    action_stream(PhaseKind::Evolving.mask_stream_phase(), iteration, slot),
                );
                let mutated: Vec<u8> = base_labels
                    .iter()
                    .map(|&y| {
                        if rand::Rng::gen_bool(&mut rng, config.random_mutation_rate) {
                            1 - y
                        } else {
                            y
                        }
                    })
                    .collect();
                slot += 1;
                if single_class(&mutated) {
                    *skipped += 1;
                    continue;
                }
                planned.push(PlannedCandidate {
                    labels: mutated,
                    subset: all.clone(),
                    action_index: None,
                    train_stream: action_stream(
                        PhaseKind::Evolving.train_stream_phase(),
                        iteration,
                        slot - 1,
                    ),
                });
            }
        }

        // uniform crossover of the top two beam parents; skipped (not an
        // error) when only one parent exists
        if let Some(second) = self.beam.second() {
            let first = self.beam.best().expect("beam non-empty");
            for child in 0..config.crossover_children {
                let mut rng =
                    stream_rng(config.seed, action_stream(6, iteration, child));
                let labels =
                    uniform_crossover(&first.pseudo_labels, &second.pseudo_labels, &mut rng);
                if single_class(&labels) {
                    *skipped += 1;
                    continue;
                }
                planned.push(PlannedCandidate {
                    labels,
                    subset: all.clone(),
                    action_index: None,
                    train_stream: action_stream(
                        PhaseKind::Evolving.train_stream_phase(),
                        iteration,
                        config.actions_per_iteration + child,
                    ),
                });
            }
        }
        Ok(planned)
    }

    fn run_iteration(
        &mut self,
        kind: PhaseKind,
        iteration: usize,
        trainer: &dyn CandidateTrainer,
    ) -> Result<IterationRecord> {
        let best = self.beam.best().ok_or(Error::EmptySampleSet)?.clone();
        let (base_column, base_opt, base_utility) = self.store.get_state(&best.checkpoint_ref)?;
        let features = self.policy_feature_matrix(&base_column, &best.pseudo_labels)?;

        let mut actions: Vec<ActionSample> = Vec::new();
        let mut skipped = 0usize;
        let planned = match kind {
            PhaseKind::Screening => self.plan_screening(
                iteration,
                &best.pseudo_labels,
                &features,
                &mut actions,
                &mut skipped,
            )?,
            PhaseKind::Evolving => self.plan_evolving(
                iteration,
                &best.pseudo_labels,
                &features,
                &mut actions,
                &mut skipped,
            )?,
        };

        let shared = &self.shared;
        let evaluated: Result<Vec<EvaluatedCandidate>> = planned
            .par_iter()
            .map(|plan| {
                trainer.evaluate(&CandidateContext {
                    shared,
                    base: &base_column,
                    base_optimizer: base_opt.as_ref(),
                    base_utility: base_utility.as_ref(),
                    labels: &plan.labels,
                    subset: &plan.subset,
                    train_stream: plan.train_stream,
                })
            })
            .collect();
        let evaluated = evaluated?;

        let rewards: Vec<f64> = evaluated.iter().map(|e| e.reward).collect();
        for (plan, result) in planned.iter().zip(&evaluated) {
            if let Some(idx) = plan.action_index {
                actions[idx].reward = result.reward;
            }
        }

        if self.shared.config.confidence_calibration && !actions.is_empty() {
            let batch = ActionBatch {
                kind: match kind {
                    PhaseKind::Screening => ActionKind::Selection,
                    PhaseKind::Evolving => ActionKind::Mutation,
                },
                features,
                actions,
                beta: self.shared.config.beta,
            };
            let policy = match kind {
                PhaseKind::Screening => &mut self.selection_policy,
                PhaseKind::Evolving => &mut self.mutation_policy,
            };
            crate::policy::update_policy(policy, &batch, self.shared.config.center_rewards)?;
        }

        let mut record = IterationRecord {
            iteration,
            rewards: rewards.clone(),
            best_reward: self.prev_reward,
            beam_best_reward: best.reward,
            delta_acc: 0.0,
            lambda: 0.5,
            skipped,
        };

        let best_index = rewards
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
            .map(|(i, _)| i);
        if let Some(index) = best_index {
            let winner = &evaluated[index];
            let plan = &planned[index];
            let delta_acc = winner.reward - self.prev_reward;
            record.delta_acc = delta_acc;
            record.lambda = compute_lambda(delta_acc, self.confidence.lambda_scale);
            record.best_reward = winner.reward;
            self.prev_reward = winner.reward;

            if self.shared.config.confidence_calibration {
                self.confidence.update_confidences(
                    &plan.subset,
                    &winner.subset_confidences,
                    delta_acc,
                )?;
            }

            if !self.beam.dominates(&plan.labels, winner.reward) {
                let checkpoint_ref = self.store.put_state(
                    &winner.column,
                    Some(&winner.optimizer),
                    winner.utility.as_ref(),
                );
                self.beam.insert(BeamCandidate {
                    pseudo_labels: plan.labels.clone(),
                    confidence_state: self.confidence.clone(),
                    reward: winner.reward,
                    checkpoint_ref,
                    birth_iteration: iteration,
                });
                let keep: Vec<String> =
                    self.beam.iter().map(|c| c.checkpoint_ref.clone()).collect();
                self.store.retain_refs(keep.iter().map(|s| s.as_str()));
            }
        }

        record.beam_best_reward = self.beam.best().map(|c| c.reward).unwrap_or(f64::NEG_INFINITY);
        Ok(record)
    }
}

/// Scores a column on a labeled dataset with bootstrap intervals.
pub fn evaluate_column(
    column: &ModelColumn,
    dataset: &DomainDataset,
    resamples: usize,
    seed: u64,
    metadata: ReportMeta,
) -> Result<MetricsReport> {
    let labels = dataset
        .labels
        .as_deref()
        .ok_or_else(|| Error::DegenerateLabels("evaluation set is unlabeled".into()))?;
    let scores = predict_probs(column, &dataset.features)?;
    metrics_with_ci(scores.as_slice().unwrap(), labels, 0.5, resamples, seed, metadata)
}

fn phase_report(
    pipeline: &Pipeline,
    records: Vec<IterationRecord>,
    prepared: &PreparedData,
    phase_name: &str,
) -> Result<PhaseReport> {
    let config = &pipeline.shared.config;
    let column = pipeline.best_column()?;
    let target_test = prepared
        .target_test
        .as_ref()
        .map(|ds| {
            evaluate_column(
                &column,
                ds,
                config.bootstrap_resamples,
                config.seed,
                ReportMeta {
                    dataset: "target".into(),
                    phase: phase_name.into(),
                    seed: config.seed,
                },
            )
        })
        .transpose()?;
    let source_test = evaluate_column(
        &column,
        &prepared.source_test,
        config.bootstrap_resamples,
        config.seed,
        ReportMeta { dataset: "source".into(), phase: phase_name.into(), seed: config.seed },
    )?;
    let best_reward = pipeline.beam.best().map(|c| c.reward).unwrap_or(f64::NEG_INFINITY);
    Ok(PhaseReport { iterations: records, best_reward, target_test, source_test })
}

/// The full pipeline: pretrain, screen, evolve, evaluate.
pub fn run_dem(
    source: &DomainDataset,
    target: &DomainDataset,
    config: &LoopConfig,
    weights: &LossWeights,
) -> Result<DemRunResult> {
    let prepared = prepare_benchmark(source, target, config)?;
    let pretrain = pretrain_source_led(&prepared, config, weights)?;
    run_dem_prepared(&prepared, pretrain, config, weights)
}

/// The adaptation half, reusable when pretraining artifacts already exist.
pub fn run_dem_prepared(
    prepared: &PreparedData,
    pretrain: PretrainOutcome,
    config: &LoopConfig,
    weights: &LossWeights,
) -> Result<DemRunResult> {
    let initial_pseudo_accuracy = prepared.target_train_hidden.as_ref().map(|hidden| {
        let agree = pretrain
            .pseudo_labels
            .iter()
            .zip(hidden)
            .filter(|(a, b)| a == b)
            .count();
        agree as f64 / hidden.len() as f64
    });

    let source_frozen = evaluate_column(
        &pretrain.frozen,
        &prepared.source_test,
        config.bootstrap_resamples,
        config.seed,
        ReportMeta { dataset: "source".into(), phase: "frozen".into(), seed: config.seed },
    )?;

    let shared = SharedData {
        source_train_x: prepared.source_train.features.clone(),
        source_train_y: prepared.source_train.labels.clone().unwrap_or_default(),
        source_val: prepared.source_val.clone(),
        target_x: prepared.target_train.features.clone(),
        target_ids: prepared.target_train.sample_ids.clone(),
        frozen: pretrain.frozen.clone(),
        config: config.clone(),
        weights: config.effective_weights(weights),
        alpha: config.effective_alpha(),
    };
    let mut pipeline = Pipeline::new(shared, pretrain.confidence, pretrain.pseudo_labels)?;

    let trainer = AdaptTrainer;
    pipeline.run_screening(&trainer)?;
    let screening_records = std::mem::take(&mut pipeline.screening_records);
    let screening = phase_report(&pipeline, screening_records, prepared, "screening")?;

    pipeline.run_evolving(&trainer)?;
    let evolving_records = std::mem::take(&mut pipeline.evolving_records);
    let evolving = phase_report(&pipeline, evolving_records, prepared, "evolving")?;

    let best = pipeline.beam.best().ok_or(Error::EmptySampleSet)?.clone();
    let best_column = pipeline.best_column()?;
    let final_source = evaluate_column(
        &best_column,
        &prepared.source_test,
        config.bootstrap_resamples,
        config.seed,
        ReportMeta { dataset: "source".into(), phase: "final".into(), seed: config.seed },
    )?;
    let final_target = prepared
        .target_test
        .as_ref()
        .map(|ds| {
            evaluate_column(
                &best_column,
                ds,
                config.bootstrap_resamples,
                config.seed,
                ReportMeta { dataset: "target".into(), phase: "final".into(), seed: config.seed },
            )
        })
        .transpose()?;

    let final_pseudo: Vec<PseudoLabelRow> = pipeline
        .shared
        .target_ids
        .iter()
        .zip(&best.pseudo_labels)
        .zip(pipeline.confidence.current())
        .map(|((&id, &label), &confidence)| PseudoLabelRow { id, label, confidence })
        .collect();

    let report = DemReport {
        schema_version: 1,
        seed: config.seed,
        initial_pseudo_label_accuracy: initial_pseudo_accuracy,
        source_frozen,
        screening,
        evolving,
        final_source,
        final_target,
        final_reward: best.reward,
    };
    let beam_refs: Vec<String> = pipeline.beam.iter().map(|c| c.checkpoint_ref.clone()).collect();
    Ok(DemRunResult {
        report,
        final_pseudo,
        best_column,
        frozen_source: pipeline.shared.frozen.clone(),
        store: pipeline.store,
        beam_refs,
    })
}
