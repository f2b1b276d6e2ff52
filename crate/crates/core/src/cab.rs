//! Cross-modal associating branch.
//!
//! Learnable gene-function tokens attend over the projected bag twice with
//! one shared cross-attention module; the second round's pre-softmax scores
//! are the association matrix between gene categories and patches, and the
//! second round's features feed one reconstruction head per category.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::blocks::{GatedAttention, HeadMerge, Ffn, Linear, Mhca, SnnHead};
use crate::data::CATEGORY_COUNT;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{normal_init, Bound, ParamId, ParamStore};

/// Norms below this are clamped inside the cosine.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub enum FeatureGenerator {
    /// Two rounds of shared-parameter cross-attention driven by tokens.
    CrossAttention {
        tokens: ParamId,
        mhca: Mhca,
        ffn0: Ffn,
    },
    /// One gated-attention pooling per category (ablation variant).
    Gated { gate: GatedAttention },
}

#[derive(Debug, Clone)]
pub struct Cab {
    pub input: Linear,
    pub generator: FeatureGenerator,
    pub ffn1: Ffn,
    /// `None` for categories with no retained genes.
    pub heads: [Option<SnnHead>; CATEGORY_COUNT],
    pub merge: HeadMerge,
}

#[derive(Debug, Clone, Copy)]
pub struct CabOutput {
    /// First-round functional features (`N_g × d′`); absent for the gated variant.
    pub f1: Option<NodeId>,
    /// Final functional features, `N_g × d′`.
    pub f2: NodeId,
    /// Pre-softmax association scores, `N_g × N_p`.
    pub association: NodeId,
}

pub struct CabShape {
    pub input_dim: usize,
    pub width: usize,
    pub heads: usize,
    pub gate_width: usize,
    pub gene_lengths: [usize; CATEGORY_COUNT],
    pub gated: bool,
    pub merge: HeadMerge,
}

impl Cab {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, shape: &CabShape) -> Result<Self> {
        let width = shape.width;
        let input = Linear::new(store, rng, "cab.input", shape.input_dim, width);
        let generator = if shape.gated {
            FeatureGenerator::Gated {
                gate: GatedAttention::new(
                    store,
                    rng,
                    "cab.gate",
                    width,
                    shape.gate_width,
                    CATEGORY_COUNT,
                ),
            }
        } else {
            let tokens = store.add("cab.tokens", normal_init(rng, &[CATEGORY_COUNT, width], 0.02));
            FeatureGenerator::CrossAttention {
                tokens,
                mhca: Mhca::new(store, rng, "cab.mhca", width, shape.heads)?,
                ffn0: Ffn::new(store, rng, "cab.ffn0", width),
            }
        };
        let ffn1 = Ffn::new(store, rng, "cab.ffn1", width);
        let heads = core::array::from_fn(|c| {
            let genes = shape.gene_lengths[c];
            (genes > 0).then(|| {
                SnnHead::new(store, rng, &format!("cab.snn{c}"), width, width, genes)
            })
        });
        Ok(Cab {
            input,
            generator,
            ffn1,
            heads,
            merge: shape.merge,
        })
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, bag: NodeId) -> Result<CabOutput> {
        if g.value(bag).rows() == 0 {
            return Err(Error::Contract("empty bag".into()));
        }
        let projected = self.input.forward(g, b, bag)?;
        match &self.generator {
            FeatureGenerator::CrossAttention { tokens, mhca, ffn0 } => {
                let tokens = b.node(*tokens);
                // same module, same bag: keys and values are shared by both rounds
                let kv = mhca.project(g, b, projected)?;
                let first = mhca.attend(g, b, tokens, &kv, self.merge)?;
                let f1 = ffn0.forward(g, b, first.out)?;
                let query = g.add(tokens, f1)?;
                let second = mhca.attend(g, b, query, &kv, self.merge)?;
                let f2 = self.ffn1.forward(g, b, second.out)?;
                Ok(CabOutput {
                    f1: Some(f1),
                    f2,
                    association: second.scores,
                })
            }
            FeatureGenerator::Gated { gate } => {
                let scores = gate.scores(g, b, projected)?;
                let association = g.transpose(scores)?;
                let attn = g.softmax(association, 1)?;
                let pooled = g.matmul(attn, projected)?;
                let f2 = self.ffn1.forward(g, b, pooled)?;
                Ok(CabOutput {
                    f1: None,
                    f2,
                    association,
                })
            }
        }
    }

    /// Predicted genes per category (`1 × len` each), `None` where a
    /// category has no genes.
    pub fn reconstruct(
        &self,
        g: &mut Graph,
        b: &Bound,
        f2: NodeId,
    ) -> Result<[Option<NodeId>; CATEGORY_COUNT]> {
        let mut out = [None; CATEGORY_COUNT];
        for (c, head) in self.heads.iter().enumerate() {
            if let Some(head) = head {
                let row = g.slice_rows(f2, c, 1)?;
                out[c] = Some(head.forward(g, b, row)?);
            }
        }
        Ok(out)
    }
}

fn check_pairs(g: &Graph, preds: &[NodeId], targets: &[NodeId]) -> Result<()> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::Contract(format!(
            "{} predicted categories vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    for (i, (&p, &x)) in preds.iter().zip(targets).enumerate() {
        if g.value(p).numel() != g.value(x).numel() {
            return Err(Error::Contract(format!(
                "category {i}: {} predicted genes vs {} targets",
                g.value(p).numel(),
                g.value(x).numel()
            )));
        }
    }
    Ok(())
}

/// Per-category mean squared error, then the mean over categories.
pub fn mse_loss(g: &mut Graph, preds: &[NodeId], targets: &[NodeId]) -> Result<NodeId> {
    check_pairs(g, preds, targets)?;
    let mut total = None;
    for (&p, &x) in preds.iter().zip(targets) {
        let x = if g.value(x).shape() == g.value(p).shape() {
            x
        } else {
            g.reshape(x, g.value(p).shape().to_vec())?
        };
        let d = g.sub(p, x)?;
        let sq = g.mul(d, d)?;
        let m = g.mean(sq);
        total = Some(match total {
            None => m,
            Some(t) => g.add(t, m)?,
        });
    }
    let total = total.expect("non-empty");
    Ok(g.scale(total, 1.0 / preds.len() as f64))
}

fn clamped_norm(g: &mut Graph, v: NodeId) -> (NodeId, bool) {
    let sq = g.mul(v, v).expect("same node");
    let s = g.sum(sq);
    let floor = NORM_FLOOR * NORM_FLOOR;
    let clamped = g.value(s).data()[0] < floor;
    let s = g.clamp_min(s, floor);
    (g.sqrt(s), clamped)
}

/// Scaled cosine error `(1/N_g) Σ (1 − cos(p_i, x_i))^γ`. Also returns the
/// categories whose norm had to be clamped.
pub fn sce_loss(
    g: &mut Graph,
    preds: &[NodeId],
    targets: &[NodeId],
    gamma: f64,
) -> Result<(NodeId, Vec<usize>)> {
    check_pairs(g, preds, targets)?;
    let mut clamped = Vec::new();
    let mut total = None;
    for (i, (&p, &x)) in preds.iter().zip(targets).enumerate() {
        let x = if g.value(x).shape() == g.value(p).shape() {
            x
        } else {
            g.reshape(x, g.value(p).shape().to_vec())?
        };
        let px = g.mul(p, x)?;
        let dot = g.sum(px);
        let (np, cp) = clamped_norm(g, p);
        let (nx, cx) = clamped_norm(g, x);
        if cp || cx {
            clamped.push(i);
        }
        let denom = g.mul(np, nx)?;
        let cos = g.div(dot, denom)?;
        let neg = g.scale(cos, -1.0);
        let err = g.add_scalar(neg, 1.0);
        let err = g.clamp_min(err, 0.0);
        let term = g.pow(err, gamma);
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    let total = total.expect("non-empty");
    Ok((g.scale(total, 1.0 / preds.len() as f64), clamped))
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub mse: NodeId,
    pub sce: NodeId,
    pub total: NodeId,
    pub clamped: Vec<usize>,
}

/// `L_MSE + L_SCE`.
pub fn reconstruction_loss(
    g: &mut Graph,
    preds: &[NodeId],
    targets: &[NodeId],
    gamma: f64,
) -> Result<Reconstruction> {
    let mse = mse_loss(g, preds, targets)?;
    let (sce, clamped) = sce_loss(g, preds, targets, gamma)?;
    let total = g.add(mse, sce)?;
    Ok(Reconstruction {
        mse,
        sce,
        total,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn consts(g: &mut Graph, rows: &[&[f64]]) -> Vec<NodeId> {
        rows.iter()
            .map(|r| g.constant(Tensor::matrix(1, r.len(), r.to_vec()).unwrap()))
            .collect()
    }

    #[test]
    fn mse_examples() {
        let mut g = Graph::new();
        let p = consts(&mut g, &[&[1.0, 2.0], &[3.0]]);
        let l = mse_loss(&mut g, &p, &p).unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);

        let p = consts(&mut g, &[&[2.0]]);
        let x = consts(&mut g, &[&[0.0]]);
        let l = mse_loss(&mut g, &p, &x).unwrap();
        assert_eq!(g.value(l).data(), &[4.0]);

        let x = consts(&mut g, &[&[0.0, 1.0]]);
        assert!(matches!(mse_loss(&mut g, &p, &x), Err(Error::Contract(_))));
    }

    #[test]
    fn sce_examples() {
        let mut g = Graph::new();
        let x = consts(&mut g, &[&[1.0, 2.0], &[-0.5, 3.0, 1.0]]);
        let (l, _) = sce_loss(&mut g, &x, &x, 2.0).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-15);

        let neg = consts(&mut g, &[&[-1.0, -2.0], &[0.5, -3.0, -1.0]]);
        let (l, _) = sce_loss(&mut g, &neg, &x, 1.0).unwrap();
        assert!((g.value(l).data()[0] - 2.0).abs() < 1e-15);

        let ortho = consts(&mut g, &[&[2.0, -1.0], &[0.0, 1.0, -3.0]]);
        let (l, _) = sce_loss(&mut g, &ortho, &x, 2.0).unwrap();
        assert!((g.value(l).data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sce_flags_zero_norm() {
        let mut g = Graph::new();
        let p = consts(&mut g, &[&[0.0, 0.0], &[1.0]]);
        let x = consts(&mut g, &[&[1.0, 0.0], &[1.0]]);
        let (l, clamped) = sce_loss(&mut g, &p, &x, 2.0).unwrap();
        assert_eq!(clamped, vec![0]);
        // cosine of the zero vector is 0, so the term is 1
        assert!((g.value(l).data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_is_sum_of_parts() {
        let mut g = Graph::new();
        let p = consts(&mut g, &[&[0.3, -1.2, 0.8], &[2.0, 0.1]]);
        let x = consts(&mut g, &[&[1.0, -1.0, 0.0], &[1.5, 0.4]]);
        let r = reconstruction_loss(&mut g, &p, &x, 2.0).unwrap();
        let mse = g.value(r.mse).data()[0];
        let sce = g.value(r.sce).data()[0];
        assert!((g.value(r.total).data()[0] - (mse + sce)).abs() < 1e-12);

        let r = reconstruction_loss(&mut g, &x, &x, 2.0).unwrap();
        assert!(g.value(r.total).data()[0].abs() < 1e-15);
    }
}
