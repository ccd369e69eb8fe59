//! Finite-difference verification of every analytic gradient path, plus the
//! adversarial-routing behavior of one optimization step.

use dem_core::losses::{LossWeights, Phase};
use dem_core::nn::adam::OptimizerState;
use dem_core::nn::grad::{joint_training_grad, loss_value, LossSelector};
use dem_core::nn::train::apply_adam;
use dem_core::testkit::{finite_difference_max_error, GradFixture};

const PROBES: usize = 20;
const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;

fn check(selector: LossSelector, needs_reference: bool) {
    for seed in [1u64, 2, 3] {
        let fx = GradFixture::new(seed);
        let reference = needs_reference.then_some(&fx.reference);
        let err = finite_difference_max_error(
            &fx.column,
            reference,
            &fx.batch(),
            &selector,
            PROBES,
            STEP,
            seed,
        )
        .unwrap();
        assert!(err < TOLERANCE, "seed {seed}: max relative error {err}");
    }
}

#[test]
fn supervised_bce_gradient() {
    check(LossSelector::SupervisedBce, false);
}

#[test]
fn classification_gradient_both_phases() {
    check(LossSelector::Classification(Phase::SourcePretrain), false);
    check(LossSelector::Classification(Phase::TargetAdapt), false);
}

#[test]
fn discriminator_gradient_both_phases() {
    check(LossSelector::Discriminator(Phase::SourcePretrain), false);
    check(LossSelector::Discriminator(Phase::TargetAdapt), true);
}

#[test]
fn coral_gradient_both_phases() {
    check(LossSelector::Coral(Phase::SourcePretrain), false);
    check(LossSelector::Coral(Phase::TargetAdapt), true);
}

#[test]
fn discrepancy_gradient() {
    check(LossSelector::Discrepancy, false);
}

#[test]
fn joint_gradient_both_phases() {
    let weights = LossWeights::default();
    check(LossSelector::Joint { phase: Phase::SourcePretrain, weights }, false);
    check(LossSelector::Joint { phase: Phase::TargetAdapt, weights }, true);
    let uneven = LossWeights {
        w_cls: 0.7,
        w_disc: 1.3,
        w_coral: 2.0,
        w_mcd: 0.4,
        w_prox: 0.05,
        grl_coefficient: 1.0,
    };
    check(LossSelector::Joint { phase: Phase::TargetAdapt, weights: uneven }, true);
}

/// During adaptation the alignment terms read a separate target view; the
/// gradients through that extra forward pass must also match finite
/// differences.
#[test]
fn joint_adapt_gradient_with_alignment_view() {
    let weights = LossWeights::default();
    for seed in [4u64, 5] {
        let fx = GradFixture::new(seed);
        let err = finite_difference_max_error(
            &fx.column,
            Some(&fx.reference),
            &fx.batch_with_da(),
            &LossSelector::Joint { phase: Phase::TargetAdapt, weights },
            PROBES,
            STEP,
            seed,
        )
        .unwrap();
        assert!(err < TOLERANCE, "seed {seed}: max relative error {err}");
    }
}

/// One adversarial step must push the discriminator head downhill on its
/// loss and the extractor uphill, each judged with the other part held at
/// its pre-step values.
#[test]
fn adversarial_step_moves_heads_and_extractor_oppositely() {
    let fx = GradFixture::new(9);
    let batch = fx.batch();
    let selector = LossSelector::Discriminator(Phase::SourcePretrain);
    let before = loss_value(&fx.column, None, &batch, &selector).unwrap();

    let weights = LossWeights {
        w_cls: 0.0,
        w_coral: 0.0,
        w_mcd: 0.0,
        w_prox: 0.0,
        w_disc: 1.0,
        grl_coefficient: 1.0,
    };
    let (_, _, grads) = joint_training_grad(
        &fx.column,
        None,
        &batch,
        &weights,
        Phase::SourcePretrain,
    )
    .unwrap();
    let mut stepped = fx.column.clone();
    let mut opt = OptimizerState::new(stepped.params.param_count(), 1e-3);
    apply_adam(&mut stepped, &grads, &mut opt).unwrap();

    // new discriminator head, old extractor
    let mut disc_only = fx.column.clone();
    disc_only.params.discriminator = stepped.params.discriminator.clone();
    let after_disc = loss_value(&disc_only, None, &batch, &selector).unwrap();
    assert!(
        after_disc < before,
        "discriminator step did not decrease the loss: {before} -> {after_disc}"
    );

    // new extractor, old discriminator head
    let mut extractor_only = fx.column.clone();
    extractor_only.params.extractor = stepped.params.extractor.clone();
    let after_extractor = loss_value(&extractor_only, None, &batch, &selector).unwrap();
    assert!(
        after_extractor > before,
        "extractor step did not increase the loss: {before} -> {after_extractor}"
    );
}
