//! Differentiable building blocks shared by both branches.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::math;
use crate::params::{uniform_init, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Affine map `x · W + b` with `W: in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let mut layer = Linear::unbiased(store, rng, name, in_dim, out_dim);
        layer.bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        layer
    }

    /// `x · W` only. Used where a bias would be a per-row constant ahead of
    /// a softmax and so could never receive gradient.
    pub fn unbiased<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            uniform_init(rng, &[in_dim, out_dim], in_dim),
        );
        Linear {
            weight,
            bias: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: NodeId) -> Result<NodeId> {
        let y = g.matmul(x, b.node(self.weight))?;
        match self.bias {
            Some(bias) => g.add_row(y, b.node(bias)),
            None => Ok(y),
        }
    }
}

/// Layer-norm gain and bias.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Norm {
            gain: store.add(format!("{name}.gain"), Tensor::filled(&[dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: NodeId) -> Result<NodeId> {
        g.layer_norm(x, b.node(self.gain), b.node(self.bias))
    }
}

/// How per-head pre-softmax scores are merged into one association matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadMerge {
    #[default]
    Mean,
    Head(usize),
}

/// Multi-head attention: queries attend over a separate key/value set.
#[derive(Debug, Clone)]
pub struct Mhca {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub width: usize,
}

/// Keys and values projected once so several query rounds can reuse them.
#[derive(Debug, Clone, Copy)]
pub struct KeyValues {
    pub keys: NodeId,
    pub values: NodeId,
    pub len: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// `N_q × width`, after the output projection.
    pub out: NodeId,
    /// `N_q × N_k` pre-softmax scores merged across heads.
    pub scores: NodeId,
}

impl Mhca {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        width: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(Mhca {
            query: Linear::new(store, rng, &format!("{name}.query"), width, width),
            key: Linear::unbiased(store, rng, &format!("{name}.key"), width, width),
            value: Linear::new(store, rng, &format!("{name}.value"), width, width),
            output: Linear::new(store, rng, &format!("{name}.output"), width, width),
            heads,
            width,
        })
    }

    pub fn project(&self, g: &mut Graph, b: &Bound, bag: NodeId) -> Result<KeyValues> {
        let len = g.value(bag).rows();
        if len == 0 {
            return Err(Error::Contract("attention over an empty bag".into()));
        }
        Ok(KeyValues {
            keys: self.key.forward(g, b, bag)?,
            values: self.value.forward(g, b, bag)?,
            len,
        })
    }

    pub fn attend(
        &self,
        g: &mut Graph,
        b: &Bound,
        queries: NodeId,
        kv: &KeyValues,
        merge: HeadMerge,
    ) -> Result<AttentionOutput> {
        let q = self.query.forward(g, b, queries)?;
        let dk = self.width / self.heads;
        let scale = 1.0 / math::sqrt(dk as f64);
        let mut head_outputs = Vec::with_capacity(self.heads);
        let mut head_scores = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, kv.keys, kv.values)
            } else {
                (
                    g.slice_cols(q, h * dk, dk)?,
                    g.slice_cols(kv.keys, h * dk, dk)?,
                    g.slice_cols(kv.values, h * dk, dk)?,
                )
            };
            let kt = g.transpose(kh)?;
            let raw = g.matmul(qh, kt)?;
            let scores = g.scale(raw, scale);
            let attn = g.softmax(scores, 1)?;
            head_outputs.push(g.matmul(attn, vh)?);
            head_scores.push(scores);
        }
        let merged_scores = match merge {
            HeadMerge::Mean => {
                let mut acc = head_scores[0];
                for &s in &head_scores[1..] {
                    acc = g.add(acc, s)?;
                }
                if self.heads == 1 {
                    acc
                } else {
                    g.scale(acc, 1.0 / self.heads as f64)
                }
            }
            HeadMerge::Head(h) => *head_scores.get(h).ok_or_else(|| {
                Error::Config(format!("head {h} requested but only {} heads", self.heads))
            })?,
        };
        let joined = if self.heads == 1 {
            head_outputs[0]
        } else {
            g.concat_cols(&head_outputs)?
        };
        Ok(AttentionOutput {
            out: self.output.forward(g, b, joined)?,
            scores: merged_scores,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        queries: NodeId,
        bag: NodeId,
        merge: HeadMerge,
    ) -> Result<AttentionOutput> {
        let kv = self.project(g, b, bag)?;
        self.attend(g, b, queries, &kv, merge)
    }
}

/// Self-attention with a residual connection: `x + attn(x, x)`.
#[derive(Debug, Clone)]
pub struct Mhsa {
    pub attention: Mhca,
}

impl Mhsa {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        width: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Mhsa {
            attention: Mhca::new(store, rng, name, width, heads)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: NodeId) -> Result<NodeId> {
        let attended = self.attention.forward(g, b, x, x, HeadMerge::Mean)?;
        g.add(x, attended.out)
    }
}

/// Pre-norm feed-forward block with residual:
/// `x + W₂ relu(W₁ norm(x))`, hidden width `2·width`.
#[derive(Debug, Clone)]
pub struct Ffn {
    pub norm: Norm,
    pub hidden: Linear,
    pub output: Linear,
}

impl Ffn {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, width: usize) -> Self {
        Ffn {
            norm: Norm::new(store, &format!("{name}.norm"), width),
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), width, 2 * width),
            output: Linear::new(store, rng, &format!("{name}.output"), 2 * width, width),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: NodeId) -> Result<NodeId> {
        let n = self.norm.forward(g, b, x)?;
        let h = self.hidden.forward(g, b, n)?;
        let h = g.relu(h);
        let y = self.output.forward(g, b, h)?;
        g.add(x, y)
    }
}

/// Gated attention scoring: `score = W (tanh(U f) ⊙ sigmoid(V f))`.
///
/// `outputs` is 1 for the morphology weights; the gated CAB variant uses one
/// output column per gene category.
#[derive(Debug, Clone)]
pub struct GatedAttention {
    pub tanh_branch: Linear,
    pub sigmoid_branch: Linear,
    pub score: Linear,
}

impl GatedAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        width: usize,
        attention_width: usize,
        outputs: usize,
    ) -> Self {
        GatedAttention {
            tanh_branch: Linear::new(store, rng, &format!("{name}.tanh"), width, attention_width),
            sigmoid_branch: Linear::new(
                store,
                rng,
                &format!("{name}.sigmoid"),
                width,
                attention_width,
            ),
            score: Linear::unbiased(store, rng, &format!("{name}.score"), attention_width, outputs),
        }
    }

    /// Pre-softmax instance scores, `N_p × outputs`.
    pub fn scores(&self, g: &mut Graph, b: &Bound, bag: NodeId) -> Result<NodeId> {
        let t = self.tanh_branch.forward(g, b, bag)?;
        let t = g.tanh(t);
        let s = self.sigmoid_branch.forward(g, b, bag)?;
        let s = g.sigmoid(s);
        let gated = g.mul(t, s)?;
        self.score.forward(g, b, gated)
    }

    /// Instance weights, softmax over the instance axis; `N_p × outputs`.
    pub fn weights(&self, g: &mut Graph, b: &Bound, bag: NodeId) -> Result<NodeId> {
        let s = self.scores(g, b, bag)?;
        g.softmax(s, 0)
    }
}

/// Per-category reconstruction head: linear → layer norm → elu → linear.
#[derive(Debug, Clone)]
pub struct SnnHead {
    pub hidden: Linear,
    pub norm: Norm,
    pub output: Linear,
}

impl SnnHead {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        width: usize,
        hidden: usize,
        genes: usize,
    ) -> Self {
        SnnHead {
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), width, hidden),
            norm: Norm::new(store, &format!("{name}.norm"), hidden),
            output: Linear::new(store, rng, &format!("{name}.output"), hidden, genes),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, f: NodeId) -> Result<NodeId> {
        let h = self.hidden.forward(g, b, f)?;
        let h = self.norm.forward(g, b, h)?;
        let h = g.elu(h);
        self.output.forward(g, b, h)
    }
}

