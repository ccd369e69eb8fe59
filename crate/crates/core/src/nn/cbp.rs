//! Continual backpropagation: utility-tracked reinitialization of low-use
//! extractor units to maintain plasticity during long adaptation runs.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{Architecture, ModelColumn};

/// Per-hidden-unit bookkeeping, one entry set per extractor layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityState {
    /// Running decayed mean of |activation| x sum of outgoing weight magnitudes.
    pub utilities: Vec<Vec<f64>>,
    /// Steps since (re)initialization.
    pub ages: Vec<Vec<u64>>,
    /// Fractional replacement accumulator per layer.
    pub accumulators: Vec<f64>,
    pub decay: f64,
    pub replacement_rate: f64,
    pub maturity_threshold: u64,
}

impl UtilityState {
    pub fn new(arch: &Architecture) -> UtilityState {
        UtilityState {
            utilities: arch.hidden.iter().map(|&h| vec![0.0; h]).collect(),
            ages: arch.hidden.iter().map(|&h| vec![0; h]).collect(),
            accumulators: vec![0.0; arch.hidden.len()],
            decay: 0.99,
            replacement_rate: 1e-4,
            maturity_threshold: 100,
        }
    }
}

/// Sum of |outgoing weight| for unit `j` of extractor layer `layer`.
/// The last extractor layer feeds all three heads.
fn outgoing_magnitude(column: &ModelColumn, layer: usize, unit: usize) -> f64 {
    if layer + 1 < column.params.extractor.len() {
        column.params.extractor[layer + 1]
            .weight
            .column(unit)
            .iter()
            .map(|w| w.abs())
            .sum()
    } else {
        column.params.classifier_a.weight[[0, unit]].abs()
            + column.params.classifier_b.weight[[0, unit]].abs()
            + column.params.discriminator.weight[[0, unit]].abs()
    }
}

fn reinitialize_unit(column: &mut ModelColumn, layer: usize, unit: usize, rng: &mut impl Rng) {
    let fan_in = column.params.extractor[layer].weight.ncols();
    let bound = 1.0 / (fan_in as f64).sqrt();
    {
        let incoming = &mut column.params.extractor[layer];
        for w in incoming.weight.row_mut(unit).iter_mut() {
            *w = rng.gen_range(-bound..bound);
        }
        incoming.bias[unit] = rng.gen_range(-bound..bound);
    }
    if layer + 1 < column.params.extractor.len() {
        for w in column.params.extractor[layer + 1].weight.column_mut(unit).iter_mut() {
            *w = 0.0;
        }
    } else {
        column.params.classifier_a.weight[[0, unit]] = 0.0;
        column.params.classifier_b.weight[[0, unit]] = 0.0;
        column.params.discriminator.weight[[0, unit]] = 0.0;
    }
}

/// One maintenance step: decay-update utilities from the batch activations,
/// age every unit, and reinitialize the lowest-utility mature units at the
/// fractionally-accumulated replacement rate. Returns how many units were
/// reinitialized.
pub fn cbp_step(
    column: &mut ModelColumn,
    utility: &mut UtilityState,
    batch_x: &Array2<f64>,
    rng: &mut impl Rng,
) -> Result<usize> {
    column.ensure_unfrozen()?;
    let cache = column.forward_cached(batch_x)?;
    let n = batch_x.nrows().max(1) as f64;

    let mut replaced = 0;
    for layer in 0..column.params.extractor.len() {
        let width = utility.utilities[layer].len();
        for unit in 0..width {
            let mean_abs: f64 =
                cache.act[layer].column(unit).iter().map(|a| a.abs()).sum::<f64>() / n;
            let contribution = mean_abs * outgoing_magnitude(column, layer, unit);
            let u = &mut utility.utilities[layer][unit];
            *u = utility.decay * *u + (1.0 - utility.decay) * contribution;
            utility.ages[layer][unit] += 1;
        }

        let eligible: Vec<usize> = (0..width)
            .filter(|&j| utility.ages[layer][j] >= utility.maturity_threshold)
            .collect();
        if eligible.is_empty() {
            continue;
        }
        utility.accumulators[layer] += utility.replacement_rate * eligible.len() as f64;
        let quota = utility.accumulators[layer].floor() as usize;
        if quota == 0 {
            continue;
        }
        utility.accumulators[layer] -= quota as f64;

        let mut ranked = eligible;
        ranked.sort_by(|&a, &b| {
            utility.utilities[layer][a]
                .partial_cmp(&utility.utilities[layer][b])
                .unwrap()
                .then(a.cmp(&b))
        });
        for &unit in ranked.iter().take(quota) {
            reinitialize_unit(column, layer, unit, rng);
            utility.utilities[layer][unit] = 0.0;
            utility.ages[layer][unit] = 0;
            replaced += 1;
        }
    }
    Ok(replaced)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::rng::stream_rng;

    fn setup(h2: usize) -> (ModelColumn, UtilityState, Array2<f64>) {
        let arch = Architecture::new(3, vec![8, h2]);
        let column = ModelColumn::new(arch.clone(), &mut stream_rng(21, 0));
        let utility = UtilityState::new(&arch);
        let x = Array2::from_shape_fn((16, 3), |(i, j)| ((i * 3 + j) as f64).sin());
        (column, utility, x)
    }

    #[test]
    fn zero_replacement_rate_leaves_column_unchanged() {
        let (mut column, mut utility, x) = setup(4);
        utility.replacement_rate = 0.0;
        let before = column.params.clone();
        let replaced = cbp_step(&mut column, &mut utility, &x, &mut stream_rng(1, 1)).unwrap();
        assert_eq!(replaced, 0);
        assert_eq!(column.params, before);
    }

    #[test]
    fn immature_units_are_never_reinitialized() {
        let (mut column, mut utility, x) = setup(4);
        utility.replacement_rate = 10.0;
        let before = column.params.clone();
        let replaced = cbp_step(&mut column, &mut utility, &x, &mut stream_rng(2, 1)).unwrap();
        assert_eq!(replaced, 0);
        assert_eq!(column.params, before);
        assert!(utility.ages.iter().flatten().all(|&a| a == 1));
    }

    #[test]
    fn lowest_utility_unit_gets_zero_outgoing_weights() {
        let (mut column, mut utility, x) = setup(32);
        for layer in 0..utility.ages.len() {
            for age in utility.ages[layer].iter_mut() {
                *age = 200;
            }
            for (j, u) in utility.utilities[layer].iter_mut().enumerate() {
                *u = 1.0 + j as f64;
            }
        }
        // unit 7 of the last layer is the unique minimum there; force exactly
        // one replacement in that layer and none in the first
        utility.utilities[1][7] = 0.001;
        utility.replacement_rate = 0.0;
        utility.accumulators[1] = 1.0;
        let replaced = cbp_step(&mut column, &mut utility, &x, &mut stream_rng(3, 1)).unwrap();
        assert_eq!(replaced, 1);
        assert_eq!(column.params.classifier_a.weight[[0, 7]], 0.0);
        assert_eq!(column.params.classifier_b.weight[[0, 7]], 0.0);
        assert_eq!(column.params.discriminator.weight[[0, 7]], 0.0);
        assert_eq!(utility.ages[1][7], 0);
        assert_eq!(utility.utilities[1][7], 0.0);
    }

    #[test]
    fn fractional_accumulation_controls_replacements() {
        let (mut column, mut utility, x) = setup(4);
        for layer in 0..utility.ages.len() {
            for age in utility.ages[layer].iter_mut() {
                *age = 500;
            }
        }
        utility.replacement_rate = 0.5 / 8.0;
        let mut rng = stream_rng(4, 1);
        let mut totals = Vec::new();
        for _ in 0..4 {
            totals.push(cbp_step(&mut column, &mut utility, &x, &mut rng).unwrap());
        }
        // layer 0 (8 eligible): acc 0.5, 1.0 -> replace at step 2, then the
        // reset unit drops out of the eligible pool (0.4375, 0.875)
        // layer 1 (4 eligible): acc 0.25 .. 1.0 -> replace at step 4
        assert_eq!(totals, vec![0, 1, 0, 1]);
    }

    #[test]
    fn frozen_column_is_rejected() {
        let (mut column, mut utility, x) = setup(4);
        column.freeze();
        assert!(matches!(
            cbp_step(&mut column, &mut utility, &x, &mut stream_rng(5, 1)),
            Err(Error::FrozenColumn)
        ));
    }
}
