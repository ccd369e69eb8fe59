//! Exact reverse-mode gradients of every training loss through a model
//! column, plus the adversarial routing used by the discriminator term
//! (gradient reversal into the extractor).

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::losses::{joint_loss, LossTerms, LossWeights, Phase};
use crate::nn::{sigmoid, softplus, ColumnParams, ForwardCache, Linear, ModelColumn};

/// Feature/label views for one loss evaluation. Sides not used by the
/// selected loss may be absent.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBatch<'a> {
    pub source_x: Option<&'a Array2<f64>>,
    pub source_y: Option<&'a [u8]>,
    pub target_x: Option<&'a Array2<f64>>,
    pub target_y: Option<&'a [u8]>,
    /// Alignment view of the target during adaptation: the marginal the
    /// discriminator/CORAL/discrepancy terms see. Falls back to `target_x`,
    /// which stays the pseudo-labeled classification batch.
    pub target_da_x: Option<&'a Array2<f64>>,
}

/// Which loss to evaluate or differentiate.
#[derive(Debug, Clone, Copy)]
pub enum LossSelector {
    /// Twin-head binary cross-entropy on the labeled source batch.
    SupervisedBce,
    /// Phase-dependent classification term: source labels during pretraining,
    /// pseudo-labeled target samples during adaptation.
    Classification(Phase),
    Discriminator(Phase),
    Coral(Phase),
    /// Twin-classifier discrepancy on target features.
    Discrepancy,
    Joint { phase: Phase, weights: LossWeights },
}

/// How the discriminator term reaches the extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Routing {
    /// Plain analytic gradient (what finite differences see).
    TrueGradient,
    /// Discriminator head keeps its gradient; the extractor receives the
    /// negated gradient scaled by `grl_coefficient`.
    Adversarial,
}

fn require<'a, T: ?Sized>(value: Option<&'a T>, what: &str) -> Result<&'a T> {
    value.ok_or_else(|| Error::ShapeMismatch(format!("loss needs {what}")))
}

/// Mean BCE-with-logits and its per-logit derivative.
fn bce_terms(logits: &Array1<f64>, labels: &[u8]) -> Result<(f64, Array1<f64>)> {
    if logits.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if logits.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logits vs {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut dl = Array1::zeros(logits.len());
    for i in 0..logits.len() {
        let l = logits[i];
        let y = f64::from(labels[i]);
        loss += softplus(l) - y * l;
        dl[i] = (sigmoid(l) - y) / n;
    }
    Ok((loss / n, dl))
}

fn head_logits(head: &Linear, hidden: &Array2<f64>) -> Array1<f64> {
    hidden.dot(&head.weight.t()).column(0).to_owned() + head.bias[0]
}

/// Accumulates head gradients for `dlogit` and returns the hidden-batch
/// gradient contribution.
fn backprop_head(
    head: &Linear,
    hidden: &Array2<f64>,
    dlogit: &Array1<f64>,
    grad: &mut Linear,
) -> Array2<f64> {
    let dl_row = dlogit.view().insert_axis(Axis(0));
    grad.weight += &dl_row.dot(hidden);
    grad.bias[0] += dlogit.sum();
    dlogit
        .view()
        .insert_axis(Axis(1))
        .dot(&head.weight.view())
}

/// Backprop a hidden-batch gradient through the ReLU extractor.
fn backprop_extractor(
    column: &ModelColumn,
    cache: &ForwardCache,
    mut d_act: Array2<f64>,
    grads: &mut ColumnParams,
) {
    for l in (0..column.params.extractor.len()).rev() {
        let mask = cache.pre[l].mapv(|v| f64::from(v > 0.0));
        let dz = &d_act * &mask;
        let prev: &Array2<f64> = if l == 0 { &cache.input } else { &cache.act[l - 1] };
        grads.extractor[l].weight += &dz.t().dot(prev);
        grads.extractor[l].bias += &dz.sum_axis(Axis(0));
        d_act = dz.dot(&column.params.extractor[l].weight);
    }
}

/// Mean-centers rows and returns (centered, n).
fn centered(h: &Array2<f64>) -> (Array2<f64>, usize) {
    let mean = h.mean_axis(Axis(0)).expect("non-empty batch");
    (h - &mean, h.nrows())
}

struct CoralGrad {
    value: f64,
    d_source: Array2<f64>,
    d_target: Array2<f64>,
}

fn coral_terms(h_source: &Array2<f64>, h_target: &Array2<f64>) -> Result<CoralGrad> {
    if h_source.nrows() < 2 || h_target.nrows() < 2 {
        return Err(Error::TooFewSamples(
            "covariance needs at least 2 rows per batch".into(),
        ));
    }
    let d = h_source.ncols() as f64;
    let (cs_bar, ns) = centered(h_source);
    let (ct_bar, nt) = centered(h_target);
    let cov_s = cs_bar.t().dot(&cs_bar) / (ns as f64 - 1.0);
    let cov_t = ct_bar.t().dot(&ct_bar) / (nt as f64 - 1.0);
    let delta = &cov_s - &cov_t;
    let value = delta.iter().map(|v| v * v).sum::<f64>() / (4.0 * d * d);
    // dL/dCov_s = delta / (2 d^2); rows of centered . delta stay centered, so
    // the centering projection is the identity on this gradient
    let scale_s = 1.0 / (d * d * (ns as f64 - 1.0));
    let scale_t = -1.0 / (d * d * (nt as f64 - 1.0));
    Ok(CoralGrad {
        value,
        d_source: cs_bar.dot(&delta) * scale_s,
        d_target: ct_bar.dot(&delta) * scale_t,
    })
}

/// Forward-cache slots the losses may draw hidden batches from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Source,
    Target,
    TargetDa,
}

/// Everything a single evaluation may touch, accumulated then backpropped
/// once per forward cache.
struct Accumulator<'c> {
    column: &'c ModelColumn,
    grads: ColumnParams,
    caches: [Option<ForwardCache>; 3],
    d_hidden: [Option<Array2<f64>>; 3],
}

impl<'c> Accumulator<'c> {
    fn new(column: &'c ModelColumn) -> Accumulator<'c> {
        Accumulator {
            column,
            grads: ColumnParams::zeros(&column.arch),
            caches: [None, None, None],
            d_hidden: [None, None, None],
        }
    }

    fn cache(&mut self, slot: Slot, x: &Array2<f64>) -> Result<&ForwardCache> {
        let idx = slot as usize;
        if self.caches[idx].is_none() {
            self.caches[idx] = Some(self.column.forward_cached(x)?);
        }
        Ok(self.caches[idx].as_ref().unwrap())
    }

    fn hidden(&mut self, slot: Slot, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.cache(slot, x)?.hidden().clone())
    }

    fn add_d_hidden(&mut self, slot: Slot, dh: Array2<f64>) {
        match &mut self.d_hidden[slot as usize] {
            Some(acc) => *acc += &dh,
            empty => *empty = Some(dh),
        }
    }

    fn finish(mut self) -> ColumnParams {
        for idx in 0..3 {
            if let (Some(cache), Some(dh)) = (&self.caches[idx], self.d_hidden[idx].take()) {
                backprop_extractor(self.column, cache, dh, &mut self.grads);
            }
        }
        self.grads
    }
}

/// Twin-head classification on the hidden batch of `slot`.
fn classification_into(
    acc: &mut Accumulator,
    hidden: Array2<f64>,
    labels: &[u8],
    weight: f64,
    slot: Slot,
) -> Result<f64> {
    let params = &acc.column.params;
    let la = head_logits(&params.classifier_a, &hidden);
    let lb = head_logits(&params.classifier_b, &hidden);
    let (loss_a, mut dla) = bce_terms(&la, labels)?;
    let (loss_b, mut dlb) = bce_terms(&lb, labels)?;
    dla *= 0.5 * weight;
    dlb *= 0.5 * weight;
    let mut dh = backprop_head(&params.classifier_a, &hidden, &dla, &mut acc.grads.classifier_a);
    dh += &backprop_head(&params.classifier_b, &hidden, &dlb, &mut acc.grads.classifier_b);
    acc.add_d_hidden(slot, dh);
    Ok(0.5 * (loss_a + loss_b))
}

/// Discriminator term. `source_slot` is `None` when the source features come
/// from a frozen reference (adaptation) rather than the trained column.
#[allow(clippy::too_many_arguments)]
fn discriminator_into(
    acc: &mut Accumulator,
    h_source: Array2<f64>,
    h_target: Array2<f64>,
    source_slot: Option<Slot>,
    target_slot: Slot,
    weight: f64,
    routing: Routing,
    grl: f64,
) -> Result<f64> {
    if h_source.nrows() == 0 || h_target.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let params = &acc.column.params;
    let ls = head_logits(&params.discriminator, &h_source);
    let lt = head_logits(&params.discriminator, &h_target);
    let ns = ls.len() as f64;
    let nt = lt.len() as f64;
    let value = ls.mapv(|l| softplus(-l)).sum() / ns + lt.mapv(|l| softplus(l)).sum() / nt;

    let dls = ls.mapv(|l| weight * (sigmoid(l) - 1.0) / ns);
    let dlt = lt.mapv(|l| weight * sigmoid(l) / nt);
    let mut dh_source = backprop_head(&params.discriminator, &h_source, &dls, &mut acc.grads.discriminator);
    let mut dh_target = backprop_head(&params.discriminator, &h_target, &dlt, &mut acc.grads.discriminator);
    if routing == Routing::Adversarial {
        dh_source *= -grl;
        dh_target *= -grl;
    }
    if let Some(slot) = source_slot {
        acc.add_d_hidden(slot, dh_source);
    }
    acc.add_d_hidden(target_slot, dh_target);
    Ok(value)
}

fn discrepancy_into(
    acc: &mut Accumulator,
    hidden: Array2<f64>,
    weight: f64,
    slot: Slot,
) -> Result<f64> {
    if hidden.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let params = &acc.column.params;
    let la = head_logits(&params.classifier_a, &hidden);
    let lb = head_logits(&params.classifier_b, &hidden);
    let n = la.len() as f64;
    let mut value = 0.0;
    let mut dla = Array1::zeros(la.len());
    let mut dlb = Array1::zeros(lb.len());
    for i in 0..la.len() {
        let pa = sigmoid(la[i]);
        let pb = sigmoid(lb[i]);
        let diff = pa - pb;
        value += diff.abs();
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        dla[i] = weight * sign * pa * (1.0 - pa) / n;
        dlb[i] = -weight * sign * pb * (1.0 - pb) / n;
    }
    let mut dh = backprop_head(&params.classifier_a, &hidden, &dla, &mut acc.grads.classifier_a);
    dh += &backprop_head(&params.classifier_b, &hidden, &dlb, &mut acc.grads.classifier_b);
    acc.add_d_hidden(slot, dh);
    Ok(value / n)
}

fn coral_into(
    acc: &mut Accumulator,
    h_source: Array2<f64>,
    h_target: Array2<f64>,
    source_slot: Option<Slot>,
    target_slot: Slot,
    weight: f64,
) -> Result<f64> {
    let coral = coral_terms(&h_source, &h_target)?;
    if let Some(slot) = source_slot {
        acc.add_d_hidden(slot, coral.d_source * weight);
    }
    acc.add_d_hidden(target_slot, coral.d_target * weight);
    Ok(coral.value)
}

/// Squared parameter distance to the frozen reference, accumulated with
/// weight `w`.
fn proximal_into(acc: &mut Accumulator, reference: &ModelColumn, weight: f64) -> f64 {
    let value = acc.column.params.squared_distance(&reference.params);
    if weight != 0.0 {
        let mut delta = acc.column.params.clone();
        delta.add_scaled(&reference.params, -1.0);
        delta.scale(2.0 * weight);
        acc.grads.add_scaled(&delta, 1.0);
    }
    value
}

/// Frozen-reference features for the adaptation phase.
fn reference_features(reference: Option<&ModelColumn>, x: &Array2<f64>) -> Result<Array2<f64>> {
    let column = reference.ok_or_else(|| {
        Error::ShapeMismatch("target-adapt losses need a frozen reference column".into())
    })?;
    column.forward_features(x)
}

struct Evaluation {
    value: f64,
    terms: LossTerms,
    grads: ColumnParams,
}

fn evaluate(
    column: &ModelColumn,
    reference: Option<&ModelColumn>,
    batch: &LossBatch,
    selector: &LossSelector,
    routing: Routing,
) -> Result<Evaluation> {
    let mut acc = Accumulator::new(column);
    let mut terms = LossTerms::default();

    // the alignment terms read this view of the target during adaptation
    let da_x = batch.target_da_x.or(batch.target_x);
    let da_slot = if batch.target_da_x.is_some() { Slot::TargetDa } else { Slot::Target };

    let value = match *selector {
        LossSelector::SupervisedBce => {
            let x = require(batch.source_x, "source features")?;
            let y = require(batch.source_y, "source labels")?;
            let hidden = acc.hidden(Slot::Source, x)?;
            let v = classification_into(&mut acc, hidden, y, 1.0, Slot::Source)?;
            terms.cls = v;
            v
        }
        LossSelector::Classification(phase) => {
            let (x, y, slot) = match phase {
                Phase::SourcePretrain => (
                    require(batch.source_x, "source features")?,
                    require(batch.source_y, "source labels")?,
                    Slot::Source,
                ),
                Phase::TargetAdapt => (
                    require(batch.target_x, "target features")?,
                    require(batch.target_y, "target pseudo-labels")?,
                    Slot::Target,
                ),
            };
            let hidden = acc.hidden(slot, x)?;
            let v = classification_into(&mut acc, hidden, y, 1.0, slot)?;
            terms.cls = v;
            v
        }
        LossSelector::Discriminator(phase) => {
            let xs = require(batch.source_x, "source features")?;
            let (h_source, source_slot, xt, target_slot) = match phase {
                Phase::SourcePretrain => {
                    let xt = require(batch.target_x, "target features")?;
                    (acc.hidden(Slot::Source, xs)?, Some(Slot::Source), xt, Slot::Target)
                }
                Phase::TargetAdapt => {
                    let xt = require(da_x, "target features")?;
                    (reference_features(reference, xs)?, None, xt, da_slot)
                }
            };
            let h_target = acc.hidden(target_slot, xt)?;
            let v = discriminator_into(
                &mut acc, h_source, h_target, source_slot, target_slot, 1.0, routing, 1.0,
            )?;
            terms.disc = v;
            v
        }
        LossSelector::Coral(phase) => {
            let xs = require(batch.source_x, "source features")?;
            let (h_source, source_slot, xt, target_slot) = match phase {
                Phase::SourcePretrain => {
                    let xt = require(batch.target_x, "target features")?;
                    (acc.hidden(Slot::Source, xs)?, Some(Slot::Source), xt, Slot::Target)
                }
                Phase::TargetAdapt => {
                    let xt = require(da_x, "target features")?;
                    (reference_features(reference, xs)?, None, xt, da_slot)
                }
            };
            let h_target = acc.hidden(target_slot, xt)?;
            let v = coral_into(&mut acc, h_source, h_target, source_slot, target_slot, 1.0)?;
            terms.coral = v;
            v
        }
        LossSelector::Discrepancy => {
            let xt = require(da_x, "target features")?;
            let hidden = acc.hidden(da_slot, xt)?;
            let v = discrepancy_into(&mut acc, hidden, 1.0, da_slot)?;
            terms.mcd = v;
            v
        }
        LossSelector::Joint { phase, weights } => {
            let xs = require(batch.source_x, "source features")?;
            match phase {
                Phase::SourcePretrain => {
                    let xt = require(batch.target_x, "target features")?;
                    let y = require(batch.source_y, "source labels")?;
                    if weights.w_cls != 0.0 {
                        let hidden = acc.hidden(Slot::Source, xs)?;
                        terms.cls =
                            classification_into(&mut acc, hidden, y, weights.w_cls, Slot::Source)?;
                    }
                    if weights.w_disc != 0.0 {
                        let hs = acc.hidden(Slot::Source, xs)?;
                        let ht = acc.hidden(Slot::Target, xt)?;
                        terms.disc = discriminator_into(
                            &mut acc,
                            hs,
                            ht,
                            Some(Slot::Source),
                            Slot::Target,
                            weights.w_disc,
                            routing,
                            weights.grl_coefficient,
                        )?;
                    }
                    if weights.w_coral != 0.0 {
                        let hs = acc.hidden(Slot::Source, xs)?;
                        let ht = acc.hidden(Slot::Target, xt)?;
                        terms.coral = coral_into(
                            &mut acc,
                            hs,
                            ht,
                            Some(Slot::Source),
                            Slot::Target,
                            weights.w_coral,
                        )?;
                    }
                    if weights.w_mcd != 0.0 {
                        let ht = acc.hidden(Slot::Target, xt)?;
                        terms.mcd = discrepancy_into(&mut acc, ht, weights.w_mcd, Slot::Target)?;
                    }
                }
                Phase::TargetAdapt => {
                    if weights.w_cls != 0.0 {
                        let xt = require(batch.target_x, "target features")?;
                        let y = require(batch.target_y, "target pseudo-labels")?;
                        let hidden = acc.hidden(Slot::Target, xt)?;
                        terms.cls =
                            classification_into(&mut acc, hidden, y, weights.w_cls, Slot::Target)?;
                    }
                    let h_ref = if weights.w_disc != 0.0 || weights.w_coral != 0.0 {
                        Some(reference_features(reference, xs)?)
                    } else {
                        None
                    };
                    if weights.w_disc != 0.0 {
                        let xt = require(da_x, "target features")?;
                        let ht = acc.hidden(da_slot, xt)?;
                        terms.disc = discriminator_into(
                            &mut acc,
                            h_ref.clone().unwrap(),
                            ht,
                            None,
                            da_slot,
                            weights.w_disc,
                            routing,
                            weights.grl_coefficient,
                        )?;
                    }
                    if weights.w_coral != 0.0 {
                        let xt = require(da_x, "target features")?;
                        let ht = acc.hidden(da_slot, xt)?;
                        terms.coral =
                            coral_into(&mut acc, h_ref.unwrap(), ht, None, da_slot, weights.w_coral)?;
                    }
                    if weights.w_mcd != 0.0 {
                        let xt = require(da_x, "target features")?;
                        let ht = acc.hidden(da_slot, xt)?;
                        terms.mcd = discrepancy_into(&mut acc, ht, weights.w_mcd, da_slot)?;
                    }
                    if weights.w_prox != 0.0 {
                        let reference = reference.ok_or_else(|| {
                            Error::ShapeMismatch("proximal term needs a reference column".into())
                        })?;
                        terms.prox = proximal_into(&mut acc, reference, weights.w_prox);
                    }
                }
            }
            joint_loss(&terms, &weights, phase)
        }
    };

    if !value.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let grads = acc.finish();
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    Ok(Evaluation { value, terms, grads })
}

/// Scalar loss value (no gradient).
pub fn loss_value(
    column: &ModelColumn,
    reference: Option<&ModelColumn>,
    batch: &LossBatch,
    selector: &LossSelector,
) -> Result<f64> {
    evaluate(column, reference, batch, selector, Routing::TrueGradient).map(|e| e.value)
}

/// Analytic gradient of the selected loss with respect to every parameter of
/// `column`. This is the true gradient; adversarial routing is applied only
/// by [`joint_training_grad`].
pub fn gradient_of(
    column: &ModelColumn,
    reference: Option<&ModelColumn>,
    batch: &LossBatch,
    selector: &LossSelector,
) -> Result<(f64, ColumnParams)> {
    let eval = evaluate(column, reference, batch, selector, Routing::TrueGradient)?;
    Ok((eval.value, eval.grads))
}

/// Joint loss with gradient-reversal routing for the discriminator term; the
/// update direction used by every training step.
pub fn joint_training_grad(
    column: &ModelColumn,
    reference: Option<&ModelColumn>,
    batch: &LossBatch,
    weights: &LossWeights,
    phase: Phase,
) -> Result<(LossTerms, f64, ColumnParams)> {
    let selector = LossSelector::Joint { phase, weights: *weights };
    let eval = evaluate(column, reference, batch, &selector, Routing::Adversarial)?;
    Ok((eval.terms, eval.value, eval.grads))
}
