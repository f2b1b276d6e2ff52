//! The assembled network and its ablation variants.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{GatedAttention, HeadMerge, Linear, Norm};
use crate::cab::{reconstruction_loss, Cab, CabShape};
use crate::data::{PatchBag, SurvivalLabel, CATEGORY_COUNT};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::hsb::{nll_loss, total_loss, Fusion, HazardOutput, Hsb, HsbShape};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Architecture variants used for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Cross-attention CAB feeding the hyper-attention survival branch.
    #[default]
    Full,
    /// Gated-attention MIL on the bag alone; never sees genomics.
    GatedBaseline,
    /// CAB features produced by per-category gated attention.
    GatedCab,
    /// Survival branch without the functional-feature bridge.
    NoBridge,
    /// Survival branch aggregating with the masked association only.
    AssociationOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub width: usize,
    pub heads: usize,
    pub gate_width: usize,
    pub compressed: usize,
    pub bins: usize,
    pub gene_lengths: [usize; CATEGORY_COUNT],
    pub k_percent: f64,
    pub head_merge: HeadMerge,
    pub variant: Variant,
}

#[derive(Debug, Clone)]
pub struct Baseline {
    pub input: Linear,
    pub gate: GatedAttention,
    pub compress: Linear,
    pub norm: Norm,
    pub classifier: Linear,
}

// one per model, so the size gap costs nothing
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
enum Arch {
    Hyper { cab: Cab, hsb: Hsb },
    Baseline(Baseline),
}

/// Loss weighting: `L = L_NLL + alpha·(L_MSE + L_SCE)`, SCE exponent `gamma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub total: f64,
    pub nll: f64,
    pub reconstruction: f64,
}

/// Association scores for one bag: raw pre-softmax and top-k masked.
#[derive(Debug, Clone, PartialEq)]
pub struct Associations {
    pub raw: Tensor,
    pub masked: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    arch: Arch,
    params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.bins == 0 || config.width == 0 || config.compressed == 0 {
            return Err(Error::Config("model widths and bins must be positive".into()));
        }
        if !(config.k_percent > 0.0 && config.k_percent <= 100.0) {
            return Err(Error::Config("k_percent must lie in (0, 100]".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let arch = match config.variant {
            Variant::GatedBaseline => Arch::Baseline(Baseline {
                input: Linear::new(&mut store, &mut rng, "base.input", config.input_dim, config.width),
                gate: GatedAttention::new(
                    &mut store,
                    &mut rng,
                    "base.gate",
                    config.width,
                    config.gate_width,
                    1,
                ),
                compress: Linear::new(
                    &mut store,
                    &mut rng,
                    "base.compress",
                    config.width,
                    config.compressed,
                ),
                norm: Norm::new(&mut store, "base.compress_norm", config.compressed),
                classifier: Linear::new(
                    &mut store,
                    &mut rng,
                    "base.classifier",
                    config.compressed,
                    config.bins,
                ),
            }),
            variant => {
                let cab = Cab::new(
                    &mut store,
                    &mut rng,
                    &CabShape {
                        input_dim: config.input_dim,
                        width: config.width,
                        heads: config.heads,
                        gate_width: config.gate_width,
                        gene_lengths: config.gene_lengths,
                        gated: variant == Variant::GatedCab,
                        merge: config.head_merge,
                    },
                )?;
                let hsb = Hsb::new(
                    &mut store,
                    &mut rng,
                    &HsbShape {
                        input_dim: config.input_dim,
                        width: config.width,
                        heads: config.heads,
                        gate_width: config.gate_width,
                        compressed: config.compressed,
                        bins: config.bins,
                        bridge: variant != Variant::NoBridge,
                        fusion: if variant == Variant::AssociationOnly {
                            Fusion::AssociationOnly
                        } else {
                            Fusion::Hyper
                        },
                        k_percent: config.k_percent,
                    },
                )?;
                Arch::Hyper { cab, hsb }
            }
        };
        Ok(Model {
            config,
            arch,
            params: store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Whether training uses a reconstruction target.
    pub fn uses_genomics(&self) -> bool {
        matches!(self.arch, Arch::Hyper { .. })
    }

    pub fn cab(&self) -> Option<&Cab> {
        match &self.arch {
            Arch::Hyper { cab, .. } => Some(cab),
            Arch::Baseline(_) => None,
        }
    }

    pub fn hsb(&self) -> Option<&Hsb> {
        match &self.arch {
            Arch::Hyper { hsb, .. } => Some(hsb),
            Arch::Baseline(_) => None,
        }
    }

    fn check_bag(&self, bag: &Tensor) -> Result<()> {
        if bag.shape().len() != 2 || bag.cols() != self.config.input_dim {
            return Err(Error::Dimension {
                op: "model input",
                lhs: bag.shape().to_vec(),
                rhs: alloc::vec![self.config.input_dim],
            });
        }
        Ok(())
    }

    /// Forward to the hazard node; also returns CAB's `f_F2` when present.
    fn hazards(
        &self,
        g: &mut Graph,
        b: &Bound,
        bag: NodeId,
        mask: Option<&Tensor>,
    ) -> Result<(NodeId, Option<NodeId>)> {
        match &self.arch {
            Arch::Hyper { cab, hsb } => {
                let c = cab.forward(g, b, bag)?;
                let out = match mask {
                    Some(m) => hsb.forward_with_mask(g, b, bag, m.clone(), Some(c.f2))?,
                    None => hsb.forward(g, b, bag, c.association, Some(c.f2))?,
                };
                Ok((out.hazards, Some(c.f2)))
            }
            Arch::Baseline(base) => {
                let projected = base.input.forward(g, b, bag)?;
                let w = base.gate.weights(g, b, projected)?;
                let wt = g.transpose(w)?;
                let pooled = g.matmul(wt, projected)?;
                let c = base.compress.forward(g, b, pooled)?;
                let c = base.norm.forward(g, b, c)?;
                let c = g.relu(c);
                let logits = base.classifier.forward(g, b, c)?;
                Ok((g.sigmoid(logits), None))
            }
        }
    }

    /// Slide-only survival inference.
    pub fn predict(&self, bag: &PatchBag) -> Result<HazardOutput> {
        self.predict_features(&bag.features)
    }

    pub fn predict_features(&self, features: &Tensor) -> Result<HazardOutput> {
        self.check_bag(features)?;
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let bag = g.constant(features.clone());
        let (h, _) = self.hazards(&mut g, &b, bag, None)?;
        if let Some(op) = g.non_finite_op() {
            return Err(Error::NonFinite { op });
        }
        Ok(HazardOutput::from_hazards(g.value(h).data().to_vec()))
    }

    /// Raw and masked association matrices; `None` for the baseline.
    pub fn associations(&self, features: &Tensor) -> Result<Option<Associations>> {
        self.check_bag(features)?;
        let Arch::Hyper { cab, hsb } = &self.arch else {
            return Ok(None);
        };
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let bag = g.constant(features.clone());
        let c = cab.forward(&mut g, &b, bag)?;
        let raw = g.value(c.association).clone();
        let masked = crate::hsb::topk_masked_softmax(&raw, hsb.k_percent);
        Ok(Some(Associations { raw, masked }))
    }

    /// Predicted (standardized) genes per category, for analysis only.
    pub fn reconstruct_genes(&self, features: &Tensor) -> Result<Option<[Vec<f64>; CATEGORY_COUNT]>> {
        self.check_bag(features)?;
        let Arch::Hyper { cab, .. } = &self.arch else {
            return Ok(None);
        };
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let bag = g.constant(features.clone());
        let c = cab.forward(&mut g, &b, bag)?;
        let preds = cab.reconstruct(&mut g, &b, c.f2)?;
        Ok(Some(core::array::from_fn(|k| {
            preds[k].map_or_else(Vec::new, |p| g.value(p).data().to_vec())
        })))
    }

    /// Builds the training loss on `g`. `targets` are the standardized genes
    /// per category and are required unless this is the baseline.
    pub fn training_loss(
        &self,
        g: &mut Graph,
        b: &Bound,
        features: &Tensor,
        targets: Option<&[Vec<f64>; CATEGORY_COUNT]>,
        label: SurvivalLabel,
        weights: LossWeights,
    ) -> Result<(NodeId, Option<NodeId>, NodeId)> {
        self.loss_inner(g, b, features, targets, label, weights, None)
    }

    /// Training loss with the masked association held at `mask` instead of
    /// recomputed from the current parameters. Since the mask carries no
    /// gradient, this is the function whose derivative backward computes.
    #[allow(clippy::too_many_arguments)]
    pub fn training_loss_with_mask(
        &self,
        g: &mut Graph,
        b: &Bound,
        features: &Tensor,
        targets: Option<&[Vec<f64>; CATEGORY_COUNT]>,
        label: SurvivalLabel,
        weights: LossWeights,
        mask: &Tensor,
    ) -> Result<(NodeId, Option<NodeId>, NodeId)> {
        self.loss_inner(g, b, features, targets, label, weights, Some(mask))
    }

    #[allow(clippy::too_many_arguments)]
    fn loss_inner(
        &self,
        g: &mut Graph,
        b: &Bound,
        features: &Tensor,
        targets: Option<&[Vec<f64>; CATEGORY_COUNT]>,
        label: SurvivalLabel,
        weights: LossWeights,
        mask: Option<&Tensor>,
    ) -> Result<(NodeId, Option<NodeId>, NodeId)> {
        self.check_bag(features)?;
        let bag = g.constant(features.clone());
        let (hazards, f2) = self.hazards(g, b, bag, mask)?;
        let nll = nll_loss(g, hazards, label.bin, label.censored)?;
        let recon = match (&self.arch, f2) {
            (Arch::Hyper { cab, .. }, Some(f2)) => {
                let targets = targets.ok_or_else(|| {
                    Error::Contract("training this variant needs genomic targets".into())
                })?;
                let preds = cab.reconstruct(g, b, f2)?;
                let mut p = Vec::new();
                let mut x = Vec::new();
                for c in 0..CATEGORY_COUNT {
                    if let Some(node) = preds[c] {
                        let t = &targets[c];
                        let tn = g.constant(Tensor::matrix(1, t.len(), t.clone())?);
                        p.push(node);
                        x.push(tn);
                    } else if !targets[c].is_empty() {
                        return Err(Error::Contract(alloc::format!(
                            "category {c} has targets but no reconstruction head"
                        )));
                    }
                }
                if p.is_empty() {
                    None
                } else {
                    Some(reconstruction_loss(g, &p, &x, weights.gamma)?.total)
                }
            }
            _ => None,
        };
        let total = total_loss(g, nll, recon, weights.alpha)?;
        Ok((total, recon, nll))
    }

    /// One forward/backward pass; gradients are in parameter order.
    pub fn loss_and_gradients(
        &self,
        features: &Tensor,
        targets: Option<&[Vec<f64>; CATEGORY_COUNT]>,
        label: SurvivalLabel,
        weights: LossWeights,
    ) -> Result<(LossValues, Vec<Tensor>)> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let (total, recon, nll) = self.training_loss(&mut g, &b, features, targets, label, weights)?;
        let values = LossValues {
            total: g.value(total).data()[0],
            nll: g.value(nll).data()[0],
            reconstruction: recon.map_or(0.0, |r| g.value(r).data()[0]),
        };
        let grads = g.backward(total)?;
        let out = self.params.ids().map(|id| grads.get(b.node(id))).collect();
        Ok((values, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::normal_init;

    pub(crate) fn toy_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            input_dim: 8,
            width: 8,
            heads: 2,
            gate_width: 4,
            compressed: 4,
            bins: 4,
            gene_lengths: [3, 2, 0, 0, 0, 0],
            k_percent: 50.0,
            head_merge: HeadMerge::Mean,
            variant,
        }
    }

    fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| t.row(p).to_vec()).collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn hazards_are_patch_permutation_invariant() {
        let model = Model::new(toy_config(Variant::Full), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bag = normal_init(&mut rng, &[6, 8], 1.0);
        let a = model.predict_features(&bag).unwrap();
        let b = model.predict_features(&permute_rows(&bag, &[5, 3, 1, 0, 2, 4])).unwrap();
        for (x, y) in a.hazards.iter().zip(&b.hazards) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_classifier_gives_half_hazards() {
        let mut model = Model::new(toy_config(Variant::Full), 3).unwrap();
        let cls = model.hsb().unwrap().classifier.clone();
        for id in [cls.weight, cls.bias.unwrap()] {
            for v in model.params_mut().get_mut(id).data_mut() {
                *v = 0.0;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = model.predict_features(&normal_init(&mut rng, &[5, 8], 1.0)).unwrap();
        assert_eq!(out.hazards, alloc::vec![0.5; 4]);
        assert_eq!(out.survival, alloc::vec![0.5, 0.25, 0.125, 0.0625]);
    }

    #[test]
    fn parameter_census_counts_one_shared_attention() {
        let cfg = toy_config(Variant::Full);
        let model = Model::new(cfg.clone(), 0).unwrap();
        let (d, w, a, c, bins) = (cfg.input_dim, cfg.width, cfg.gate_width, cfg.compressed, cfg.bins);
        let lin = |i: usize, o: usize| i * o + o;
        let ffn = |x: usize| 2 * x + lin(x, 2 * x) + lin(2 * x, x);
        // the key projection has no bias
        let attn = |x: usize| 4 * lin(x, x) - x;
        let snn = |g: usize| lin(w, w) + 2 * w + lin(w, g);
        let cab = lin(d, w) + 6 * w + attn(w) + 2 * ffn(w) + snn(3) + snn(2);
        let fused = 2 * w;
        let hsb = lin(d, w)
            + 2 * lin(w, a)
            + a
            + attn(fused)
            + ffn(fused)
            + lin(fused, c)
            + 2 * c
            + lin(6 * c, bins);
        assert_eq!(model.params().scalar_count(), cab + hsb);
        let shared = model
            .params()
            .iter()
            .filter(|(name, _)| name.starts_with("cab.mhca"))
            .count();
        assert_eq!(shared, 7);
    }

    #[test]
    fn every_variant_builds_and_predicts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bag = normal_init(&mut rng, &[7, 8], 1.0);
        for v in [
            Variant::Full,
            Variant::GatedBaseline,
            Variant::GatedCab,
            Variant::NoBridge,
            Variant::AssociationOnly,
        ] {
            let model = Model::new(toy_config(v), 9).unwrap();
            let out = model.predict_features(&bag).unwrap();
            assert_eq!(out.hazards.len(), 4);
            assert_eq!(model.uses_genomics(), v != Variant::GatedBaseline);
            let assoc = model.associations(&bag).unwrap();
            assert_eq!(assoc.is_some(), v != Variant::GatedBaseline);
        }
    }

    #[test]
    fn rejects_wrong_feature_width() {
        let model = Model::new(toy_config(Variant::Full), 0).unwrap();
        assert!(matches!(
            model.predict_features(&Tensor::zeros(&[3, 5])),
            Err(Error::Dimension { .. })
        ));
    }
}
