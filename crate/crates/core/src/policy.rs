//! Bernoulli action policies for sample selection and pseudo-label mutation:
//! a whole mask is one action whose joint log-probability is the sum of its
//! per-component Bernoulli log-likelihoods, trained by a score-function
//! estimator with entropy regularization.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::adam::{adam_step, OptimizerState};
use crate::nn::{accuracy_of, predict_probs, Linear, ModelColumn};
use crate::synth::DomainDataset;

/// Emitted Bernoulli parameters are clamped into this range.
pub const POLICY_PROB_MIN: f64 = 1e-6;

pub const POLICY_FEATURES: usize = 3;
const POLICY_HIDDEN: usize = 8;

/// Per-sample feature map (calibrated confidence, prediction probability,
/// twin-classifier disagreement) -> affine+sigmoid network -> Bernoulli
/// parameter per sample.
#[derive(Debug, Clone)]
pub struct PolicyModel {
    pub hidden: Linear,
    pub output: Linear,
    pub opt: OptimizerState,
}

impl PolicyModel {
    /// `output_bias` sets the initial Bernoulli level: selection policies
    /// start permissive, mutation policies start sparse.
    pub fn new(rng: &mut impl Rng, output_bias: f64, learning_rate: f64) -> PolicyModel {
        let hidden = Linear::init(POLICY_HIDDEN, POLICY_FEATURES, rng);
        let mut output = Linear::init(1, POLICY_HIDDEN, rng);
        output.bias[0] = output_bias;
        let param_count = hidden.param_count() + output.param_count();
        PolicyModel {
            hidden,
            output,
            opt: OptimizerState::new(param_count, learning_rate),
        }
    }

    fn forward(&self, features: &Array2<f64>) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
        let z1 = self.hidden.forward(features);
        let a = z1.mapv(crate::nn::sigmoid);
        let z2 = a.dot(&self.output.weight.t()).column(0).to_owned() + self.output.bias[0];
        let raw = z2.mapv(crate::nn::sigmoid);
        (a, z2, raw)
    }

    /// Clamped Bernoulli parameters, one per feature row.
    pub fn probabilities(&self, features: &Array2<f64>) -> Result<Array1<f64>> {
        if features.ncols() != POLICY_FEATURES {
            return Err(Error::ShapeMismatch(format!(
                "policy features must have width {POLICY_FEATURES}, got {}",
                features.ncols()
            )));
        }
        let (_, _, raw) = self.forward(features);
        Ok(raw.mapv(|p| p.clamp(POLICY_PROB_MIN, 1.0 - POLICY_PROB_MIN)))
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        flat.extend(self.hidden.weight.iter());
        flat.extend(self.hidden.bias.iter());
        flat.extend(self.output.weight.iter());
        flat.extend(self.output.bias.iter());
        flat
    }

    fn assign_from_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for w in self.hidden.weight.iter_mut() {
            *w = it.next().unwrap();
        }
        for b in self.hidden.bias.iter_mut() {
            *b = it.next().unwrap();
        }
        for w in self.output.weight.iter_mut() {
            *w = it.next().unwrap();
        }
        for b in self.output.bias.iter_mut() {
            *b = it.next().unwrap();
        }
    }
}

/// Stacks the three per-sample policy inputs into a `[K x 3]` feature matrix.
pub fn policy_features(
    confidence: &[f64],
    probability: &[f64],
    disagreement: &[f64],
) -> Result<Array2<f64>> {
    let k = confidence.len();
    if probability.len() != k || disagreement.len() != k {
        return Err(Error::ShapeMismatch(format!(
            "policy feature lengths {k}/{}/{}",
            probability.len(),
            disagreement.len()
        )));
    }
    let mut out = Array2::zeros((k, POLICY_FEATURES));
    for i in 0..k {
        out[[i, 0]] = confidence[i];
        out[[i, 1]] = probability[i];
        out[[i, 2]] = disagreement[i];
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionKind {
    Selection,
    Mutation,
}

/// One sampled mask with its sampling-time statistics.
#[derive(Debug, Clone)]
pub struct ActionSample {
    pub mask: Vec<u8>,
    pub joint_logp: f64,
    pub entropy: f64,
    pub reward: f64,
}

/// A batch of N actions drawn from one policy evaluation.
#[derive(Debug, Clone)]
pub struct ActionBatch {
    pub kind: ActionKind,
    pub features: Array2<f64>,
    pub actions: Vec<ActionSample>,
    pub beta: f64,
}

/// Joint log-probability of a full Bernoulli pattern: selected components
/// contribute `ln p`, unselected ones `ln(1-p)`.
pub fn joint_log_probability(probs: &[f64], mask: &[u8]) -> f64 {
    probs
        .iter()
        .zip(mask)
        .map(|(&p, &m)| if m == 1 { p.ln() } else { (1.0 - p).ln() })
        .sum()
}

/// Draws a mask component-wise and returns it with its joint log-probability.
pub fn sample_bernoulli_mask(probs: &[f64], rng: &mut impl Rng) -> (Vec<u8>, f64) {
    let mask: Vec<u8> = probs
        .iter()
        .map(|&p| u8::from(rng.gen::<f64>() < p))
        .collect();
    let logp = joint_log_probability(probs, &mask);
    (mask, logp)
}

/// Entropy of the independent-Bernoulli action, with `0 ln 0 := 0`.
pub fn action_entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .map(|&p| {
            let a = if p > 0.0 { p * p.ln() } else { 0.0 };
            let q = 1.0 - p;
            let b = if q > 0.0 { q * q.ln() } else { 0.0 };
            -(a + b)
        })
        .sum()
}

/// Samples one selection pattern as a single action.
pub fn sample_selection_action(
    policy: &PolicyModel,
    sample_features: &Array2<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<u8>, f64)> {
    if sample_features.nrows() == 0 {
        return Err(Error::EmptySampleSet);
    }
    let probs = policy.probabilities(sample_features)?;
    Ok(sample_bernoulli_mask(probs.as_slice().unwrap(), rng))
}

/// Flips `labels` where `mask` is set.
pub fn apply_mutation(labels: &[u8], mask: &[u8]) -> Vec<u8> {
    labels
        .iter()
        .zip(mask)
        .map(|(&y, &m)| if m == 1 { 1 - y } else { y })
        .collect()
}

/// Samples one mutation pattern as a single action and applies it.
pub fn sample_mutation_action(
    policy: &PolicyModel,
    current_pseudo_labels: &[u8],
    sample_features: &Array2<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<u8>, Vec<u8>, f64)> {
    if current_pseudo_labels.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    if sample_features.nrows() != current_pseudo_labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature rows for {} labels",
            sample_features.nrows(),
            current_pseudo_labels.len()
        )));
    }
    let probs = policy.probabilities(sample_features)?;
    let (mask, logp) = sample_bernoulli_mask(probs.as_slice().unwrap(), rng);
    let mutated = apply_mutation(current_pseudo_labels, &mask);
    Ok((mutated, mask, logp))
}

/// Total policy loss over a batch: mean of `-log P(a) * R - beta * H(a)`.
pub fn policy_loss(batch: &ActionBatch) -> Result<f64> {
    if batch.actions.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    if batch.actions.iter().any(|a| !a.reward.is_finite()) {
        return Err(Error::NonFiniteReward);
    }
    let total: f64 = batch
        .actions
        .iter()
        .map(|a| -a.joint_logp * a.reward - batch.beta * a.entropy)
        .sum();
    Ok(total / batch.actions.len() as f64)
}

/// The loss recomputed from the current policy parameters with masks and
/// rewards held fixed; the differentiable surrogate behind [`update_policy`].
pub fn surrogate_loss(policy: &PolicyModel, batch: &ActionBatch, rewards: &[f64]) -> Result<f64> {
    let probs = policy.probabilities(&batch.features)?;
    let p = probs.as_slice().unwrap();
    let entropy = action_entropy(p);
    let total: f64 = batch
        .actions
        .iter()
        .zip(rewards)
        .map(|(a, &r)| -joint_log_probability(p, &a.mask) * r - batch.beta * entropy)
        .sum();
    Ok(total / batch.actions.len() as f64)
}

/// Analytic gradient of [`surrogate_loss`] with respect to policy parameters.
fn policy_gradient(
    policy: &PolicyModel,
    batch: &ActionBatch,
    rewards: &[f64],
) -> Result<Vec<f64>> {
    let (hidden_act, _, raw) = policy.forward(&batch.features);
    let k = raw.len();
    let n = batch.actions.len() as f64;

    let mut d_p: Array1<f64> = Array1::zeros(k);
    for (action, &reward) in batch.actions.iter().zip(rewards) {
        for i in 0..k {
            let p = raw[i].clamp(POLICY_PROB_MIN, 1.0 - POLICY_PROB_MIN);
            let dlogp = if action.mask[i] == 1 { 1.0 / p } else { -1.0 / (1.0 - p) };
            d_p[i] += -reward * dlogp / n;
        }
    }
    for i in 0..k {
        let p = raw[i].clamp(POLICY_PROB_MIN, 1.0 - POLICY_PROB_MIN);
        // d(-beta H)/dp = beta * ln(p / (1-p))
        d_p[i] += batch.beta * (p.ln() - (1.0 - p).ln());
    }

    // chain through the output sigmoid; flat where the clamp is active
    let mut d_z2: Array1<f64> = Array1::zeros(k);
    for i in 0..k {
        let r = raw[i];
        let interior = r > POLICY_PROB_MIN && r < 1.0 - POLICY_PROB_MIN;
        d_z2[i] = if interior { d_p[i] * r * (1.0 - r) } else { 0.0 };
    }

    let d_w2 = d_z2.view().insert_axis(Axis(0)).dot(&hidden_act);
    let d_b2 = d_z2.sum();
    let d_a = d_z2
        .view()
        .insert_axis(Axis(1))
        .dot(&policy.output.weight.view());
    let d_z1 = &d_a * &hidden_act.mapv(|a| a * (1.0 - a));
    let d_w1 = d_z1.t().dot(&batch.features);
    let d_b1 = d_z1.sum_axis(Axis(0));

    let mut flat = Vec::new();
    flat.extend(d_w1.iter());
    flat.extend(d_b1.iter());
    flat.extend(d_w2.iter());
    flat.push(d_b2);
    Ok(flat)
}

/// Reward for one evaluated action: `alpha` x source-validation accuracy plus
/// `(1-alpha)` x confidence-weighted agreement between the candidate's
/// predictions and the selected pseudo-labels.
pub fn compute_reward(
    candidate: &ModelColumn,
    source_val: &DomainDataset,
    selected_features: &Array2<f64>,
    selected_pseudo_labels: &[u8],
    alpha: f64,
) -> Result<f64> {
    if selected_features.nrows() == 0 {
        return Err(Error::EmptySelection);
    }
    if selected_features.nrows() != selected_pseudo_labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} selected rows for {} pseudo-labels",
            selected_features.nrows(),
            selected_pseudo_labels.len()
        )));
    }
    let val_labels = source_val
        .labels
        .as_deref()
        .ok_or_else(|| Error::DegenerateLabels("source validation set is unlabeled".into()))?;
    let source_acc = accuracy_of(candidate, &source_val.features, val_labels)?;

    let probs = predict_probs(candidate, selected_features)?;
    let mut agreement = 0.0;
    for (i, &y) in selected_pseudo_labels.iter().enumerate() {
        let p = probs[i];
        let predicted = u8::from(p >= 0.5);
        if predicted == y {
            agreement += p.max(1.0 - p);
        }
    }
    agreement /= selected_pseudo_labels.len() as f64;

    let reward = alpha * source_acc + (1.0 - alpha) * agreement;
    if !reward.is_finite() {
        return Err(Error::NonFiniteReward);
    }
    Ok(reward.clamp(0.0, 1.0))
}

/// One Adam step on the policy against the batch loss. Rewards are centered
/// by the batch mean when `center_rewards` is set.
pub fn update_policy(
    policy: &mut PolicyModel,
    batch: &ActionBatch,
    center_rewards: bool,
) -> Result<()> {
    if batch.actions.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    if batch.actions.iter().any(|a| !a.reward.is_finite()) {
        return Err(Error::NonFiniteReward);
    }
    let mut rewards: Vec<f64> = batch.actions.iter().map(|a| a.reward).collect();
    if center_rewards {
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        for r in rewards.iter_mut() {
            *r -= mean;
        }
    }
    let grads = policy_gradient(policy, batch, &rewards)?;
    let mut flat = policy.to_flat();
    let mut opt = std::mem::replace(&mut policy.opt, OptimizerState::new(0, 0.0));
    let step = adam_step(&mut flat, &grads, &mut opt);
    policy.opt = opt;
    step?;
    policy.assign_from_flat(&flat);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn constant_features(k: usize) -> Array2<f64> {
        Array2::from_shape_fn((k, POLICY_FEATURES), |(i, j)| 0.1 * (i + j) as f64)
    }

    #[test]
    fn deterministic_pattern_has_zero_logp() {
        let probs = [1.0, 0.0, 1.0];
        let mut rng = stream_rng(1, 0);
        let (mask, logp) = sample_bernoulli_mask(&probs, &mut rng);
        assert_eq!(mask, vec![1, 0, 1]);
        assert_eq!(logp, 0.0);
    }

    #[test]
    fn half_probabilities_any_mask_logp() {
        let probs = [0.5, 0.5];
        for mask in [[0u8, 0], [0, 1], [1, 0], [1, 1]] {
            let logp = joint_log_probability(&probs, &mask);
            assert!((logp - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        }
        let three = [0.5, 0.5, 0.5];
        assert!((joint_log_probability(&three, &[1, 0, 1]) - 3.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_deterministic_under_seed() {
        let policy = PolicyModel::new(&mut stream_rng(2, 0), 0.0, 1e-2);
        let features = constant_features(6);
        let a = sample_selection_action(&policy, &features, &mut stream_rng(2, 1)).unwrap();
        let b = sample_selection_action(&policy, &features, &mut stream_rng(2, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_sample_set_is_rejected() {
        let policy = PolicyModel::new(&mut stream_rng(2, 0), 0.0, 1e-2);
        let features = Array2::zeros((0, POLICY_FEATURES));
        assert!(matches!(
            sample_selection_action(&policy, &features, &mut stream_rng(0, 0)),
            Err(Error::EmptySampleSet)
        ));
    }

    #[test]
    fn zero_probability_mutation_keeps_labels() {
        let labels = vec![0, 1, 0, 1];
        let mask = vec![0, 0, 0, 0];
        assert_eq!(apply_mutation(&labels, &mask), labels);
        let logp = joint_log_probability(&[0.0; 4], &mask);
        assert_eq!(logp, 0.0);
    }

    #[test]
    fn all_ones_mask_complements_labels() {
        assert_eq!(apply_mutation(&[0, 1, 0], &[1, 1, 1]), vec![1, 0, 1]);
    }

    #[test]
    fn entropy_cases() {
        assert!((action_entropy(&[0.5]) - (2.0f64).ln()).abs() < 1e-12);
        assert_eq!(action_entropy(&[0.0, 1.0, 0.0]), 0.0);
        // additivity over components
        assert!((action_entropy(&[0.5, 0.5]) - 2.0 * (2.0f64).ln()).abs() < 1e-12);
        let h = action_entropy(&[0.3, 0.8]);
        assert!((h - (action_entropy(&[0.3]) + action_entropy(&[0.8]))).abs() < 1e-12);
    }

    #[test]
    fn entropy_is_maximized_at_half() {
        for p in [0.1, 0.25, 0.49, 0.51, 0.9] {
            assert!(action_entropy(&[p]) < action_entropy(&[0.5]));
        }
    }

    fn batch_of(actions: Vec<ActionSample>, beta: f64, k: usize) -> ActionBatch {
        ActionBatch {
            kind: ActionKind::Selection,
            features: constant_features(k),
            actions,
            beta,
        }
    }

    #[test]
    fn policy_loss_direct_cases() {
        // oracle: direct evaluation of (1/N) sum(-logP * R - beta H)
        let single = batch_of(
            vec![ActionSample { mask: vec![1], joint_logp: -1.0, entropy: 0.0, reward: 1.0 }],
            0.0,
            1,
        );
        assert!((policy_loss(&single).unwrap() - 1.0).abs() < 1e-12);

        let zero_rewards = batch_of(
            vec![
                ActionSample { mask: vec![1], joint_logp: -0.5, entropy: 0.3, reward: 0.0 },
                ActionSample { mask: vec![0], joint_logp: -1.5, entropy: 0.3, reward: 0.0 },
            ],
            0.0,
            1,
        );
        assert_eq!(policy_loss(&zero_rewards).unwrap(), 0.0);

        let with_entropy = batch_of(
            vec![ActionSample { mask: vec![1], joint_logp: -1.0, entropy: 0.6931, reward: 1.0 }],
            0.1,
            1,
        );
        assert!((policy_loss(&with_entropy).unwrap() - 0.93069).abs() < 1e-9);
    }

    #[test]
    fn non_finite_reward_is_rejected() {
        let bad = batch_of(
            vec![ActionSample { mask: vec![1], joint_logp: -1.0, entropy: 0.0, reward: f64::NAN }],
            0.0,
            1,
        );
        assert!(matches!(policy_loss(&bad), Err(Error::NonFiniteReward)));
    }

    #[test]
    fn mask_probabilities_sum_to_one_small_k() {
        // exhaustive enumeration oracle for K <= 10
        let policy = PolicyModel::new(&mut stream_rng(5, 0), 0.2, 1e-2);
        for k in [1usize, 3, 6, 10] {
            let features = constant_features(k);
            let probs = policy.probabilities(&features).unwrap();
            let p = probs.as_slice().unwrap();
            let mut total = 0.0;
            for bits in 0..(1u32 << k) {
                let mask: Vec<u8> = (0..k).map(|i| ((bits >> i) & 1) as u8).collect();
                total += joint_log_probability(p, &mask).exp();
            }
            assert!((total - 1.0).abs() < 1e-12, "k={k} total={total}");
        }
    }

    #[test]
    fn sampled_frequencies_match_probabilities() {
        let policy = PolicyModel::new(&mut stream_rng(6, 0), -0.4, 1e-2);
        let k = 5;
        let features = constant_features(k);
        let probs = policy.probabilities(&features).unwrap();
        let p = probs.as_slice().unwrap();
        let draws = 100_000usize;
        let mut counts = vec![0usize; k];
        let mut rng = stream_rng(6, 1);
        for _ in 0..draws {
            let (mask, _) = sample_bernoulli_mask(p, &mut rng);
            for (c, m) in counts.iter_mut().zip(&mask) {
                *c += *m as usize;
            }
        }
        for i in 0..k {
            let freq = counts[i] as f64 / draws as f64;
            let sigma = (p[i] * (1.0 - p[i]) / draws as f64).sqrt();
            assert!(
                (freq - p[i]).abs() < 3.0 * sigma + 1e-9,
                "component {i}: freq {freq} vs p {}",
                p[i]
            );
        }
    }

    #[test]
    fn equal_rewards_with_zero_beta_leave_policy_unchanged() {
        let mut policy = PolicyModel::new(&mut stream_rng(7, 0), 0.0, 1e-2);
        let before = policy.to_flat();
        let features = constant_features(4);
        let probs = policy.probabilities(&features).unwrap();
        let p = probs.as_slice().unwrap();
        let mut rng = stream_rng(7, 1);
        let actions: Vec<ActionSample> = (0..4)
            .map(|_| {
                let (mask, logp) = sample_bernoulli_mask(p, &mut rng);
                ActionSample { mask, joint_logp: logp, entropy: action_entropy(p), reward: 0.7 }
            })
            .collect();
        let batch = ActionBatch { kind: ActionKind::Selection, features, actions, beta: 0.0 };
        update_policy(&mut policy, &batch, true).unwrap();
        assert_eq!(policy.to_flat(), before);
    }

    #[test]
    fn one_sample_bandit_probability_rises_monotonically() {
        // oracle: repeated reward for selecting the only sample must push its
        // Bernoulli parameter up at every update
        let mut policy = PolicyModel::new(&mut stream_rng(8, 0), 0.0, 5e-2);
        let features = constant_features(1);
        let mut rng = stream_rng(8, 1);
        let mut last_p = policy.probabilities(&features).unwrap()[0];
        let first_p = last_p;
        for _ in 0..50 {
            let probs = policy.probabilities(&features).unwrap();
            let p = probs.as_slice().unwrap();
            let actions: Vec<ActionSample> = (0..4)
                .map(|_| {
                    let (mask, logp) = sample_bernoulli_mask(p, &mut rng);
                    let reward = f64::from(mask[0]);
                    ActionSample { mask, joint_logp: logp, entropy: action_entropy(p), reward }
                })
                .collect();
            let batch = ActionBatch {
                kind: ActionKind::Selection,
                features: features.clone(),
                actions,
                beta: 0.0,
            };
            update_policy(&mut policy, &batch, true).unwrap();
            let now = policy.probabilities(&features).unwrap()[0];
            assert!(now >= last_p - 1e-12, "p regressed: {last_p} -> {now}");
            last_p = now;
        }
        assert!(last_p > first_p + 0.05, "no overall rise: {first_p} -> {last_p}");
    }

    /// Column over one-hot rows: (1,0) scores logit +50, (0,1) scores -50.
    fn confident_column() -> ModelColumn {
        use crate::nn::{Architecture, ColumnParams};
        let arch = Architecture::new(2, vec![2]);
        let mut params = ColumnParams::zeros(&arch);
        params.extractor[0].weight = Array2::eye(2);
        for head in [&mut params.classifier_a, &mut params.classifier_b] {
            head.weight[[0, 0]] = 50.0;
            head.weight[[0, 1]] = -50.0;
        }
        ModelColumn { arch, params, frozen: false }
    }

    fn one_hot(rows: &[u8]) -> Array2<f64> {
        let mut x = Array2::zeros((rows.len(), 2));
        for (i, &r) in rows.iter().enumerate() {
            x[[i, usize::from(r == 0)]] = 1.0;
        }
        x
    }

    fn val_set(patterns: &[u8], labels: Vec<u8>) -> DomainDataset {
        DomainDataset {
            features: one_hot(patterns),
            labels: Some(labels),
            continuous_outcome: None,
            domain_tag: crate::synth::DomainTag::Source,
            sample_ids: (0..patterns.len() as u64).collect(),
        }
    }

    #[test]
    fn reward_ceiling_case() {
        let column = confident_column();
        let val = val_set(&[1, 0, 1, 0], vec![1, 0, 1, 0]);
        let selected = one_hot(&[1, 1, 0]);
        let reward = compute_reward(&column, &val, &selected, &[1, 1, 0], 0.5).unwrap();
        assert!(reward > 1.0 - 1e-9, "reward {reward}");
    }

    #[test]
    fn reward_alpha_one_is_source_accuracy() {
        let column = confident_column();
        // 8 of 10 validation rows agree with their label
        let patterns = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
        let labels = vec![1, 1, 1, 1, 0, 1, 0, 0, 0, 0];
        let val = val_set(&patterns, labels);
        let selected = one_hot(&[1]);
        let reward = compute_reward(&column, &val, &selected, &[0], 1.0).unwrap();
        assert!((reward - 0.8).abs() < 1e-12);
    }

    #[test]
    fn reward_weighted_mean_case() {
        // oracle: 0.5 * 0.8 + 0.5 * 0.6 = 0.7
        let column = confident_column();
        let patterns = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
        let labels = vec![1, 1, 1, 1, 0, 1, 0, 0, 0, 0];
        let val = val_set(&patterns, labels);
        // five confident class-1 predictions agreeing with 3 of 5 pseudo-labels
        let selected = one_hot(&[1, 1, 1, 1, 1]);
        let reward = compute_reward(&column, &val, &selected, &[1, 1, 1, 0, 0], 0.5).unwrap();
        assert!((reward - 0.7).abs() < 1e-9, "reward {reward}");
    }

    #[test]
    fn reward_rejects_empty_selection() {
        let column = confident_column();
        let val = val_set(&[1, 0], vec![1, 0]);
        let selected = Array2::zeros((0, 2));
        assert!(matches!(
            compute_reward(&column, &val, &selected, &[], 0.5),
            Err(Error::EmptySelection)
        ));
    }

    #[test]
    fn update_is_deterministic() {
        let run = || {
            let mut policy = PolicyModel::new(&mut stream_rng(9, 0), 0.0, 1e-2);
            let features = constant_features(3);
            let mut rng = stream_rng(9, 1);
            for _ in 0..5 {
                let probs = policy.probabilities(&features).unwrap();
                let p = probs.as_slice().unwrap();
                let actions: Vec<ActionSample> = (0..3)
                    .map(|i| {
                        let (mask, logp) = sample_bernoulli_mask(p, &mut rng);
                        ActionSample {
                            mask,
                            joint_logp: logp,
                            entropy: action_entropy(p),
                            reward: 0.2 * i as f64,
                        }
                    })
                    .collect();
                let batch = ActionBatch {
                    kind: ActionKind::Mutation,
                    features: features.clone(),
                    actions,
                    beta: 0.01,
                };
                update_policy(&mut policy, &batch, true).unwrap();
            }
            policy.to_flat()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let mut policy = PolicyModel::new(&mut stream_rng(10, 0), 0.1, 1e-2);
        let features = constant_features(5);
        let probs = policy.probabilities(&features).unwrap();
        let p = probs.as_slice().unwrap().to_vec();
        let mut rng = stream_rng(10, 1);
        let actions: Vec<ActionSample> = (0..4)
            .map(|i| {
                let (mask, logp) = sample_bernoulli_mask(&p, &mut rng);
                ActionSample {
                    mask,
                    joint_logp: logp,
                    entropy: action_entropy(&p),
                    reward: 0.3 + 0.1 * i as f64,
                }
            })
            .collect();
        let rewards: Vec<f64> = actions.iter().map(|a| a.reward).collect();
        let batch = ActionBatch {
            kind: ActionKind::Selection,
            features,
            actions,
            beta: 0.05,
        };
        let analytic = policy_gradient(&policy, &batch, &rewards).unwrap();
        let flat = policy.to_flat();
        let mut check_rng = stream_rng(10, 2);
        for _ in 0..20 {
            let idx = check_rng.gen_range(0..flat.len());
            let step = 1e-5;
            let mut plus = flat.clone();
            plus[idx] += step;
            policy.assign_from_flat(&plus);
            let up = surrogate_loss(&policy, &batch, &rewards).unwrap();
            let mut minus = flat.clone();
            minus[idx] -= step;
            policy.assign_from_flat(&minus);
            let down = surrogate_loss(&policy, &batch, &rewards).unwrap();
            policy.assign_from_flat(&flat);
            let numeric = (up - down) / (2.0 * step);
            let denom = numeric.abs().max(analytic[idx].abs()).max(1e-8);
            assert!(
                (numeric - analytic[idx]).abs() / denom < 1e-4,
                "param {idx}: analytic {} vs numeric {numeric}",
                analytic[idx]
            );
        }
    }
}
