//! Hyper-attention survival branch, the survival losses and hazard outputs.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::blocks::{Ffn, GatedAttention, Linear, Mhsa, Norm};
use crate::data::CATEGORY_COUNT;
use crate::error::{Error, Result};
use crate::graph::{softmax_values, Graph, NodeId};
use crate::math;
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Probabilities are clamped here before taking logs.
pub const PROB_FLOOR: f64 = 1e-7;

/// Number of patches kept per row: `max(1, round(k·N_p/100))`.
pub fn kept_patches(k_percent: f64, patches: usize) -> usize {
    let m = math::round(k_percent * patches as f64 / 100.0) as usize;
    m.clamp(1, patches)
}

/// Keeps each row's top-k% scores (ties go to the lower patch index),
/// softmaxes them and zeroes the rest. Plain values: nothing here is on the
/// tape, which is what detaches the association path from the survival loss.
pub fn topk_masked_softmax(scores: &Tensor, k_percent: f64) -> Tensor {
    let (rows, cols) = (scores.rows(), scores.cols());
    let keep = kept_patches(k_percent, cols);
    let mut out = vec![0.0; rows * cols];
    let mut order: Vec<usize> = (0..cols).collect();
    for r in 0..rows {
        let row = scores.row(r);
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let kept = &order[..keep];
        let vals = Tensor::vector(kept.iter().map(|&j| row[j]).collect());
        let soft = softmax_values(&vals, 0);
        for (&j, &p) in kept.iter().zip(soft.data()) {
            out[r * cols + j] = p;
        }
    }
    Tensor::matrix(rows, cols, out).expect("same shape as input")
}

/// `(w_morᵀ + M′) / 2`, broadcasting the morphology weights over every
/// category row.
pub fn hyper_matrix(g: &mut Graph, morphology: NodeId, masked: NodeId) -> Result<NodeId> {
    let wt = g.transpose(morphology)?;
    let sum = g.add_row(masked, wt)?;
    Ok(g.scale(sum, 0.5))
}

/// How the two attention views are combined into patch weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    Hyper,
    AssociationOnly,
}

#[derive(Debug, Clone)]
pub struct Hsb {
    pub value: Linear,
    pub gate: GatedAttention,
    pub mhsa: Mhsa,
    pub ffn: Ffn,
    pub compress: Linear,
    pub compress_norm: Norm,
    pub classifier: Linear,
    /// Concatenate CAB's functional features onto the aggregated features.
    pub bridge: bool,
    pub fusion: Fusion,
    pub k_percent: f64,
}

pub struct HsbShape {
    pub input_dim: usize,
    pub width: usize,
    pub heads: usize,
    pub gate_width: usize,
    pub compressed: usize,
    pub bins: usize,
    pub bridge: bool,
    pub fusion: Fusion,
    pub k_percent: f64,
}

#[derive(Debug, Clone)]
pub struct HsbOutput {
    /// `1 × B` discrete hazards.
    pub hazards: NodeId,
    /// `N_g × d″` fused feature matrix.
    pub fused: NodeId,
    /// `N_p × 1` morphology weights.
    pub morphology: NodeId,
    /// Top-k masked association weights, detached.
    pub masked: Tensor,
    pub hyper: NodeId,
}

impl Hsb {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, shape: &HsbShape) -> Result<Self> {
        let fused = if shape.bridge {
            2 * shape.width
        } else {
            shape.width
        };
        Ok(Hsb {
            value: Linear::new(store, rng, "hsb.value", shape.input_dim, shape.width),
            gate: GatedAttention::new(store, rng, "hsb.gate", shape.width, shape.gate_width, 1),
            mhsa: Mhsa::new(store, rng, "hsb.mhsa", fused, shape.heads)?,
            ffn: Ffn::new(store, rng, "hsb.ffn", fused),
            compress: Linear::new(store, rng, "hsb.compress", fused, shape.compressed),
            compress_norm: Norm::new(store, "hsb.compress_norm", shape.compressed),
            classifier: Linear::new(
                store,
                rng,
                "hsb.classifier",
                CATEGORY_COUNT * shape.compressed,
                shape.bins,
            ),
            bridge: shape.bridge,
            fusion: shape.fusion,
            k_percent: shape.k_percent,
        })
    }

    /// `association` is read by value only; `functional` is CAB's `f_F2`
    /// and is required when bridging.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        bag: NodeId,
        association: NodeId,
        functional: Option<NodeId>,
    ) -> Result<HsbOutput> {
        let masked = topk_masked_softmax(g.value(association), self.k_percent);
        self.forward_with_mask(g, b, bag, masked, functional)
    }

    /// Same as [`Hsb::forward`] with the masked association supplied
    /// directly, e.g. held fixed while finite-differencing.
    pub fn forward_with_mask(
        &self,
        g: &mut Graph,
        b: &Bound,
        bag: NodeId,
        masked: Tensor,
        functional: Option<NodeId>,
    ) -> Result<HsbOutput> {
        let projected = self.value.forward(g, b, bag)?;
        let morphology = self.gate.weights(g, b, projected)?;
        let masked_node = g.constant(masked.clone());
        let hyper = match self.fusion {
            Fusion::Hyper => hyper_matrix(g, morphology, masked_node)?,
            Fusion::AssociationOnly => masked_node,
        };
        let genome_informed = g.matmul(hyper, projected)?;
        let fused = if self.bridge {
            let f2 = functional
                .ok_or_else(|| Error::Contract("bridging needs the functional features".into()))?;
            g.concat_cols(&[genome_informed, f2])?
        } else {
            genome_informed
        };
        let x = self.mhsa.forward(g, b, fused)?;
        let x = self.ffn.forward(g, b, x)?;
        let c = self.compress.forward(g, b, x)?;
        let c = self.compress_norm.forward(g, b, c)?;
        let c = g.relu(c);
        let width = g.value(c).numel();
        let flat = g.reshape(c, vec![1, width])?;
        let logits = self.classifier.forward(g, b, flat)?;
        let hazards = g.sigmoid(logits);
        Ok(HsbOutput {
            hazards,
            fused,
            morphology,
            masked,
            hyper,
        })
    }
}

/// `S_j = Π_{t ≤ j} (1 − h_t)`.
pub fn survival_curve(hazards: &[f64]) -> Vec<f64> {
    let mut s = 1.0;
    hazards
        .iter()
        .map(|h| {
            s *= 1.0 - h;
            s
        })
        .collect()
}

/// Higher means worse predicted outcome.
pub fn risk_score(survival: &[f64]) -> f64 {
    -survival.iter().sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HazardOutput {
    pub hazards: Vec<f64>,
    pub survival: Vec<f64>,
    pub risk: f64,
}

impl HazardOutput {
    pub fn from_hazards(hazards: Vec<f64>) -> Self {
        let survival = survival_curve(&hazards);
        let risk = risk_score(&survival);
        HazardOutput {
            hazards,
            survival,
            risk,
        }
    }
}

/// Discrete-time negative log-likelihood for one patient:
/// `−c·log S(y) − (1−c)·log S(y−1) − (1−c)·log h_y`, with `S(−1) = 1`.
pub fn nll_loss(g: &mut Graph, hazards: NodeId, bin: usize, censored: bool) -> Result<NodeId> {
    let bins = g.value(hazards).numel();
    if bin >= bins {
        return Err(Error::Contract(alloc::format!(
            "interval {bin} out of range for {bins} hazards"
        )));
    }
    let neg = g.scale(hazards, -1.0);
    let complement = g.add_scalar(neg, 1.0);
    // S(y - 1)
    let mut before: Option<NodeId> = None;
    for t in 0..bin {
        let f = g.select(complement, t)?;
        before = Some(match before {
            None => f,
            Some(p) => g.mul(p, f)?,
        });
    }
    let neg_log = |g: &mut Graph, p: NodeId| {
        let p = g.clamp_min(p, PROB_FLOOR);
        let l = g.log(p);
        g.scale(l, -1.0)
    };
    if censored {
        let last = g.select(complement, bin)?;
        let s = match before {
            None => last,
            Some(p) => g.mul(p, last)?,
        };
        Ok(neg_log(g, s))
    } else {
        let h = g.select(hazards, bin)?;
        let hazard_term = neg_log(g, h);
        match before {
            None => Ok(hazard_term),
            Some(p) => {
                let survival_term = neg_log(g, p);
                g.add(survival_term, hazard_term)
            }
        }
    }
}

/// `L_NLL + α·L_recon`; without a reconstruction term this is the NLL.
pub fn total_loss(
    g: &mut Graph,
    nll: NodeId,
    reconstruction: Option<NodeId>,
    alpha: f64,
) -> Result<NodeId> {
    match reconstruction {
        None => Ok(nll),
        Some(r) => {
            let weighted = g.scale(r, alpha);
            g.add(nll, weighted)
        }
    }
}
