//! Training loop, held-out evaluation and cross-validation.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::HeadMerge;
use crate::data::{discretize_survival, Binning, Cohort, GenomicProfile, Survival, CATEGORY_COUNT};
use crate::error::{Error, Result};
use crate::evaluation::{c_index, log_rank, spearman_by_category, split_by_median_risk, CategoryCorrelation, LogRank};
use crate::folds::{make_folds, Fold};
use crate::genes::{differential_select, GeneSelection, SelectionConfig};
use crate::hsb::HazardOutput;
use crate::math;
use crate::model::{LossWeights, Model, ModelConfig, Variant};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Patients per forward pass; only 1 is supported (bags differ in size).
    pub batch: usize,
    /// Patients whose gradients are averaged into one optimizer step.
    pub accumulation: usize,
    /// Weight of the reconstruction loss.
    pub alpha: f64,
    /// Exponent of the scaled cosine error.
    pub gamma: f64,
    /// Share of patches kept per category by the association mask.
    pub k_percent: f64,
    pub bins: usize,
    pub width: usize,
    pub heads: usize,
    pub gate_width: usize,
    pub compressed: usize,
    pub head_merge: HeadMerge,
    pub variant: Variant,
    pub folds: usize,
    pub seed: u64,
    pub selection: SelectionConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            epochs: 20,
            batch: 1,
            accumulation: 32,
            alpha: 0.3,
            gamma: 2.0,
            k_percent: 20.0,
            bins: 4,
            width: 64,
            heads: 2,
            gate_width: 32,
            compressed: 32,
            head_merge: HeadMerge::Mean,
            variant: Variant::Full,
            folds: crate::folds::FOLDS,
            seed: 0,
            selection: SelectionConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch != 1 {
            return fail("batch must be 1: bags have different patch counts");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if self.epochs == 0 || self.accumulation == 0 || self.bins == 0 || self.folds < 2 {
            return fail("epochs, accumulation and bins must be positive and folds at least 2");
        }
        if self.width == 0 || self.heads == 0 || self.gate_width == 0 || self.compressed == 0 {
            return fail("widths and heads must be positive");
        }
        if !self.width.is_multiple_of(self.heads) {
            return fail("width must be divisible by heads");
        }
        if !(self.k_percent > 0.0 && self.k_percent <= 100.0) {
            return fail("k_percent must lie in (0, 100]");
        }
        if !(self.alpha >= 0.0 && self.gamma >= 1.0) {
            return fail("alpha must be non-negative and gamma at least 1");
        }
        if let HeadMerge::Head(h) = self.head_merge {
            if h >= self.heads {
                return fail("head_merge names a head that does not exist");
            }
        }
        if !(self.selection.alpha > 0.0 && self.selection.alpha <= 1.0) {
            return fail("selection.alpha must lie in (0, 1]");
        }
        Ok(())
    }

    pub fn model_config(&self, input_dim: usize, gene_lengths: [usize; CATEGORY_COUNT]) -> ModelConfig {
        ModelConfig {
            input_dim,
            width: self.width,
            heads: self.heads,
            gate_width: self.gate_width,
            compressed: self.compressed,
            bins: self.bins,
            gene_lengths,
            k_percent: self.k_percent,
            head_merge: self.head_merge,
            variant: self.variant,
        }
    }

    fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            gamma: self.gamma,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        self.step += 1;
        let c1 = 1.0 - math::powf(self.beta1, f64::from(self.step));
        let c2 = 1.0 - math::powf(self.beta2, f64::from(self.step));
        for (k, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = self.v[k].data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let (m, v) = (self.m[k].data(), self.v[k].data());
            for (j, p) in params.get_mut(id).data_mut().iter_mut().enumerate() {
                *p -= self.lr * (m[j] / c1) / (math::sqrt(v[j] / c2) + self.eps);
            }
        }
    }
}

/// Per-gene z-scoring fitted on training patients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: [Vec<f64>; CATEGORY_COUNT],
    pub std: [Vec<f64>; CATEGORY_COUNT],
}

impl Standardization {
    /// Genes with zero spread get unit scale so they map to 0.
    pub fn fit(profiles: &[&GenomicProfile]) -> Self {
        let lengths = profiles.first().map_or([0; CATEGORY_COUNT], |p| p.lengths());
        let mut mean: [Vec<f64>; CATEGORY_COUNT] = Default::default();
        let mut std: [Vec<f64>; CATEGORY_COUNT] = Default::default();
        for c in 0..CATEGORY_COUNT {
            for j in 0..lengths[c] {
                let column: Vec<f64> = profiles.iter().map(|p| p.categories[c][j]).collect();
                let (m, s) = math::mean_std(&column);
                mean[c].push(m);
                std[c].push(if s > 0.0 { s } else { 1.0 });
            }
        }
        Standardization { mean, std }
    }

    pub fn apply(&self, profile: &GenomicProfile) -> [Vec<f64>; CATEGORY_COUNT] {
        core::array::from_fn(|c| {
            profile.categories[c]
                .iter()
                .zip(self.mean[c].iter().zip(&self.std[c]))
                .map(|(x, (m, s))| (x - m) / s)
                .collect()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub total: f64,
    pub nll: f64,
    pub reconstruction: f64,
}

/// A fitted model plus everything needed to apply it to new patients.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Model,
    pub binning: Binning,
    /// Absent for the baseline, which never reads genomics.
    pub selection: Option<GeneSelection>,
    pub standardization: Option<Standardization>,
    pub loss_trace: Vec<EpochLoss>,
}

impl TrainedModel {
    pub fn predict(&self, features: &Tensor) -> Result<HazardOutput> {
        self.model.predict_features(features)
    }

    /// Standardized ground truth on the retained genes.
    pub fn reconstruction_target(&self, profile: &GenomicProfile) -> Option<[Vec<f64>; CATEGORY_COUNT]> {
        let selection = self.selection.as_ref()?;
        let standardization = self.standardization.as_ref()?;
        Some(standardization.apply(&profile.select(&selection.retained)))
    }
}

fn training_profiles<'a>(cohort: &'a Cohort, indices: &[usize]) -> Result<Vec<&'a GenomicProfile>> {
    indices
        .iter()
        .map(|&i| {
            let p = &cohort.patients[i];
            p.genomics.as_ref().ok_or_else(|| {
                Error::Config(format!("training patient {} has no genomic profile", p.id()))
            })
        })
        .collect()
}

/// Fits one model on `train` patients. Gene selection, standardization and
/// interval boundaries all come from those patients only.
pub fn train(config: &TrainConfig, cohort: &Cohort, train: &[usize], seed: u64) -> Result<TrainedModel> {
    config.validate()?;
    let input_dim = cohort
        .feature_dim()
        .ok_or_else(|| Error::Config("cohort is empty".into()))?;
    let survivals: Vec<Survival> = train.iter().map(|&i| cohort.patients[i].survival).collect();
    let (binning, bins) = discretize_survival(&survivals, config.bins)?;

    let needs_genes = config.variant != Variant::GatedBaseline;
    let (selection, standardization, targets) = if needs_genes {
        let profiles = training_profiles(cohort, train)?;
        let selection = differential_select(&profiles, &survivals, &config.selection)?;
        let selected: Vec<GenomicProfile> = profiles.iter().map(|p| p.select(&selection.retained)).collect();
        let refs: Vec<&GenomicProfile> = selected.iter().collect();
        let standardization = Standardization::fit(&refs);
        let targets: Vec<[Vec<f64>; CATEGORY_COUNT]> =
            selected.iter().map(|p| standardization.apply(p)).collect();
        (Some(selection), Some(standardization), targets)
    } else {
        (None, None, Vec::new())
    };
    let lengths = selection.as_ref().map_or([0; CATEGORY_COUNT], GeneSelection::lengths);
    let mut model = Model::new(config.model_config(input_dim, lengths), seed)?;
    let mut adam = Adam::new(model.params(), config.lr);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_0dde_c0de);
    let weights = config.weights();

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = EpochLoss {
            total: 0.0,
            nll: 0.0,
            reconstruction: 0.0,
        };
        let mut pending: Option<Vec<Tensor>> = None;
        let mut count = 0usize;
        for (step, &k) in order.iter().enumerate() {
            let patient = &cohort.patients[train[k]];
            let label = binning.label(patient.survival);
            debug_assert_eq!(label.bin, bins[k]);
            let diverged = |reason: String| Error::Diverged {
                epoch: epoch + 1,
                patient: patient.id().to_string(),
                reason,
            };
            let (loss, grads) = model
                .loss_and_gradients(&patient.bag.features, targets.get(k), label, weights)
                .map_err(|e| diverged(e.to_string()))?;
            if !loss.total.is_finite() {
                return Err(diverged(format!("loss is {}", loss.total)));
            }
            sums.total += loss.total;
            sums.nll += loss.nll;
            sums.reconstruction += loss.reconstruction;
            match pending.as_mut() {
                None => pending = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                }
            }
            count += 1;
            if count == config.accumulation || step + 1 == order.len() {
                let mut acc = pending.take().expect("gradients were accumulated");
                let scale = 1.0 / count as f64;
                for t in &mut acc {
                    for x in t.data_mut() {
                        *x *= scale;
                    }
                }
                adam.step(model.params_mut(), &acc);
                count = 0;
            }
        }
        let n = order.len() as f64;
        trace.push(EpochLoss {
            total: sums.total / n,
            nll: sums.nll / n,
            reconstruction: sums.reconstruction / n,
        });
    }
    // checkpoints hold f32, so evaluate exactly what will be saved
    model.params_mut().round_to_f32();
    Ok(TrainedModel {
        model,
        binning,
        selection,
        standardization,
        loss_trace: trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientPrediction {
    pub patient_id: String,
    pub hazards: Vec<f64>,
    pub survival: Vec<f64>,
    pub risk: f64,
    pub outcome: Survival,
}

/// Slide-only predictions for the given patients.
pub fn predict(trained: &TrainedModel, cohort: &Cohort, indices: &[usize]) -> Result<Vec<PatientPrediction>> {
    indices
        .iter()
        .map(|&i| {
            let p = &cohort.patients[i];
            let out = trained.predict(&p.bag.features)?;
            Ok(PatientPrediction {
                patient_id: p.id().to_string(),
                hazards: out.hazards,
                survival: out.survival,
                risk: out.risk,
                outcome: p.survival,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskSplit {
    pub high: Vec<usize>,
    pub low: Vec<usize>,
    pub log_rank: LogRank,
}

/// Median split on survival at the middle interval, then a log-rank test.
pub fn risk_split(predictions: &[PatientPrediction]) -> Result<RiskSplit> {
    let curves: Vec<Vec<f64>> = predictions.iter().map(|p| p.survival.clone()).collect();
    let (high, low) = split_by_median_risk(&curves)?;
    let pick = |idx: &[usize]| -> Vec<Survival> { idx.iter().map(|&i| predictions[i].outcome).collect() };
    let log_rank = log_rank(&pick(&high), &pick(&low))?;
    Ok(RiskSplit { high, low, log_rank })
}

pub fn concordance(predictions: &[PatientPrediction]) -> Result<f64> {
    let risks: Vec<f64> = predictions.iter().map(|p| p.risk).collect();
    let outcomes: Vec<Survival> = predictions.iter().map(|p| p.outcome).collect();
    c_index(&risks, &outcomes)
}

/// Per-patient Spearman between reconstructed and true standardized genes.
/// Needs genomics for the listed patients; used for analysis only.
pub fn reconstruction_report(
    trained: &TrainedModel,
    cohort: &Cohort,
    indices: &[usize],
) -> Result<Vec<CategoryCorrelation>> {
    let mut pairs = Vec::with_capacity(indices.len());
    for &i in indices {
        let p = &cohort.patients[i];
        let profile = p
            .genomics
            .as_ref()
            .ok_or_else(|| Error::Config(format!("patient {} has no genomic profile", p.id())))?;
        let truth = trained
            .reconstruction_target(profile)
            .ok_or_else(|| Error::Config("this model does not reconstruct genes".into()))?;
        let predicted = trained
            .model
            .reconstruct_genes(&p.bag.features)?
            .ok_or_else(|| Error::Config("this model does not reconstruct genes".into()))?;
        let mut truth = truth.into_iter();
        let mut predicted = predicted.into_iter();
        pairs.push(core::array::from_fn(|_| {
            (predicted.next().unwrap_or_default(), truth.next().unwrap_or_default())
        }));
    }
    Ok(spearman_by_category(&pairs))
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: Fold,
    pub trained: TrainedModel,
    pub predictions: Vec<PatientPrediction>,
    pub c_index: f64,
}

#[derive(Debug, Clone)]
pub struct CrossValidation {
    pub folds: Vec<FoldResult>,
    pub mean: f64,
    pub std: f64,
}

impl CrossValidation {
    pub fn c_indices(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.c_index).collect()
    }

    /// Held-out predictions of every patient, in cohort order.
    pub fn pooled_predictions(&self) -> Vec<(usize, &PatientPrediction)> {
        let mut all: Vec<(usize, &PatientPrediction)> = self
            .folds
            .iter()
            .flat_map(|f| f.fold.validation.iter().copied().zip(&f.predictions))
            .collect();
        all.sort_by_key(|(i, _)| *i);
        all
    }
}

/// Seed for the model of fold `fold`, derived from the run seed.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(fold as u64 + 1)
}

pub fn run_fold(config: &TrainConfig, cohort: &Cohort, fold: Fold, index: usize) -> Result<FoldResult> {
    let trained = train(config, cohort, &fold.train, fold_seed(config.seed, index))?;
    let predictions = predict(&trained, cohort, &fold.validation)?;
    let c_index = concordance(&predictions)?;
    Ok(FoldResult {
        fold,
        trained,
        predictions,
        c_index,
    })
}

/// k-fold cross-validation; the mean and sample std of per-fold c-indices.
pub fn cross_validate(config: &TrainConfig, cohort: &Cohort) -> Result<CrossValidation> {
    config.validate()?;
    cohort.validate()?;
    let folds = make_folds(&cohort.survivals(), config.folds, config.seed)?;
    let results = folds
        .into_iter()
        .enumerate()
        .map(|(i, f)| run_fold(config, cohort, f, i))
        .collect::<Result<Vec<_>>>()?;
    let cs: Vec<f64> = results.iter().map(|r| r.c_index).collect();
    let (mean, std) = math::mean_std(&cs);
    Ok(CrossValidation {
        folds: results,
        mean,
        std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn small() -> (Cohort, TrainConfig) {
        let (cohort, _) = generate(
            &SynthConfig {
                patients: 40,
                min_patches: 8,
                max_patches: 16,
                dim: 8,
                prototypes: 3,
                genes_per_category: [2, 3, 3, 2, 4, 2],
                ..SynthConfig::default()
            },
            1,
        )
        .unwrap();
        let config = TrainConfig {
            epochs: 2,
            accumulation: 8,
            width: 8,
            gate_width: 4,
            compressed: 4,
            ..TrainConfig::default()
        };
        (cohort, config)
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(alloc::vec![1.0, -2.0]));
        let mut adam = Adam::new(&store, 0.1);
        adam.step(&mut store, &[Tensor::vector(alloc::vec![3.0, -0.5])]);
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-7);
        assert!((w[1] + 1.9).abs() < 1e-7);
    }

    #[test]
    fn standardization_handles_constant_genes() {
        let mut a = GenomicProfile::default();
        a.categories[0] = alloc::vec![1.0, 5.0];
        let mut b = GenomicProfile::default();
        b.categories[0] = alloc::vec![3.0, 5.0];
        let s = Standardization::fit(&[&a, &b]);
        let z = s.apply(&a);
        assert!((z[0][0] + core::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(z[0][1], 0.0);
    }

    #[test]
    fn rejects_batches_above_one() {
        let cfg = TrainConfig {
            batch: 2,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn training_is_deterministic_and_f32_exact() {
        let (cohort, config) = small();
        let idx: Vec<usize> = (0..30).collect();
        let a = train(&config, &cohort, &idx, 4).unwrap();
        let b = train(&config, &cohort, &idx, 4).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.loss_trace, b.loss_trace);
        for (_, t) in a.model.params().iter() {
            assert!(t.data().iter().all(|&v| v as f32 as f64 == v));
        }
        assert!(a.loss_trace.iter().all(|l| l.total.is_finite()));
    }

    #[test]
    fn every_variant_cross_validates() {
        let (cohort, config) = small();
        for variant in [Variant::Full, Variant::GatedBaseline, Variant::GatedCab] {
            let cfg = TrainConfig {
                variant,
                epochs: 1,
                ..config.clone()
            };
            let cv = cross_validate(&cfg, &cohort).unwrap();
            assert_eq!(cv.folds.len(), 5);
            assert_eq!(cv.pooled_predictions().len(), 40);
            assert!(cv.c_indices().iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }

    #[test]
    fn baseline_trains_without_genomics() {
        let (mut cohort, config) = small();
        for p in &mut cohort.patients {
            p.genomics = None;
        }
        let cfg = TrainConfig {
            variant: Variant::GatedBaseline,
            epochs: 1,
            ..config.clone()
        };
        let idx: Vec<usize> = (0..30).collect();
        assert!(train(&cfg, &cohort, &idx, 0).is_ok());
        assert!(matches!(train(&config, &cohort, &idx, 0), Err(Error::Config(_))));
    }
}
