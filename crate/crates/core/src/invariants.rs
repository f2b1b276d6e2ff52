//! Structural checks over random models and bags: row-stochastic attention,
//! the top-k mask's support size, the hyper matrix, monotone survival,
//! patch-permutation invariance and the detached association path.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::HeadMerge;
use crate::data::CATEGORY_COUNT;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::hsb::{kept_patches, nll_loss, survival_curve};
use crate::model::{Model, ModelConfig, Variant};
use crate::params::normal_init;
use crate::tensor::Tensor;

/// Largest deviation seen for each invariant over all trials.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InvariantReport {
    pub trials: usize,
    /// `|Σ_row softmax − 1|`, over association softmax rows and the
    /// morphology weights.
    pub softmax_row_error: f64,
    pub mask_row_error: f64,
    /// Rows whose nonzero count differs from `max(1, round(k·N_p/100))`.
    pub mask_support_violations: usize,
    pub hyper_row_error: f64,
    pub hyper_negative_entries: usize,
    /// Adjacent survival pairs with `S_{j+1} > S_j`, or values outside (0, 1].
    pub survival_violations: usize,
    pub permutation_error: f64,
    /// Largest `|∂L_NLL/∂θ|` over CAB parameters with the bridge detached.
    pub detached_cab_gradient: f64,
}

impl InvariantReport {
    pub fn passes(&self) -> bool {
        self.softmax_row_error <= 1e-12
            && self.mask_row_error <= 1e-12
            && self.mask_support_violations == 0
            && self.hyper_row_error <= 1e-12
            && self.hyper_negative_entries == 0
            && self.survival_violations == 0
            && self.permutation_error <= 1e-12
            && self.detached_cab_gradient == 0.0
    }
}

fn random_config<R: Rng>(rng: &mut R) -> ModelConfig {
    let heads = rng.random_range(1..=2);
    let mut gene_lengths: [usize; CATEGORY_COUNT] = core::array::from_fn(|_| rng.random_range(0..=4));
    gene_lengths[rng.random_range(0..CATEGORY_COUNT)] += 1;
    ModelConfig {
        input_dim: rng.random_range(3..=10),
        width: heads * rng.random_range(2..=4),
        heads,
        gate_width: rng.random_range(2..=6),
        compressed: rng.random_range(2..=5),
        bins: 4,
        gene_lengths,
        k_percent: rng.random_range(1.0..=100.0),
        head_merge: HeadMerge::Mean,
        variant: Variant::Full,
    }
}

fn row_sum_error(t: &Tensor) -> f64 {
    (0..t.rows())
        .map(|r| (t.row(r).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Runs every structural check on `trials` random (model, bag) pairs.
pub fn check_structure(trials: usize, seed: u64) -> Result<InvariantReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = InvariantReport {
        trials,
        ..InvariantReport::default()
    };
    for _ in 0..trials {
        let config = random_config(&mut rng);
        let patches = rng.random_range(1..=24);
        let keep = kept_patches(config.k_percent, patches);
        let features = normal_init(&mut rng, &[patches, config.input_dim], 1.0);
        let model = Model::new(config, rng.random())?;
        let (cab, hsb) = match (model.cab(), model.hsb()) {
            (Some(c), Some(h)) => (c, h),
            _ => return Err(Error::Contract("full model without both branches".into())),
        };

        let mut g = Graph::new();
        let b = model.params().bind(&mut g);
        let bag = g.constant(features.clone());
        let c = cab.forward(&mut g, &b, bag)?;
        let soft = g.softmax(c.association, 1)?;
        let f2 = g.stop_gradient(c.f2);
        let out = hsb.forward(&mut g, &b, bag, c.association, Some(f2))?;

        let morph = g.transpose(out.morphology)?;
        report.softmax_row_error = report
            .softmax_row_error
            .max(row_sum_error(g.value(soft)))
            .max(row_sum_error(g.value(morph)));
        report.mask_row_error = report.mask_row_error.max(row_sum_error(&out.masked));
        report.mask_support_violations += (0..out.masked.rows())
            .filter(|&r| out.masked.row(r).iter().filter(|&&v| v != 0.0).count() != keep)
            .count();
        let hyper = g.value(out.hyper);
        report.hyper_row_error = report.hyper_row_error.max(row_sum_error(hyper));
        report.hyper_negative_entries += hyper.data().iter().filter(|&&v| v < 0.0).count();

        let survival = survival_curve(g.value(out.hazards).data());
        report.survival_violations += survival.windows(2).filter(|w| w[1] > w[0]).count()
            + survival.iter().filter(|&&s| !(s > 0.0 && s <= 1.0)).count();

        // reconstruction loss left out and f_F2 detached: nothing may reach CAB
        let bin = rng.random_range(0..model.config().bins);
        let nll = nll_loss(&mut g, out.hazards, bin, rng.random_bool(0.3))?;
        let grads = g.backward(nll)?;
        for id in model.params().ids() {
            if model.params().name(id).starts_with("cab.") {
                let grad = grads.get(b.node(id));
                let worst = grad.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
                report.detached_cab_gradient = report.detached_cab_gradient.max(worst);
            }
        }

        let mut order: Vec<usize> = (0..patches).collect();
        order.shuffle(&mut rng);
        let rows: Vec<Vec<f64>> = order.iter().map(|&i| features.row(i).to_vec()).collect();
        let base = model.predict_features(&features)?;
        let permuted = model.predict_features(&Tensor::from_rows(&rows)?)?;
        for (a, p) in base.hazards.iter().zip(&permuted.hazards) {
            report.permutation_error = report.permutation_error.max((a - p).abs());
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_models_hold_every_invariant() {
        let report = check_structure(25, 11).unwrap();
        assert!(report.passes(), "{report:?}");
    }
}
