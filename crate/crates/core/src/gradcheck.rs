//! Central finite-difference gradient checking.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Ffn, GatedAttention, HeadMerge, Mhca, Mhsa, Norm, SnnHead};
use crate::cab::{mse_loss, reconstruction_loss, sce_loss};
use crate::data::{SurvivalLabel, CATEGORY_COUNT};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::hsb::nll_loss;
use crate::model::{LossWeights, Model, ModelConfig, Variant};
use crate::params::{normal_init, Bound, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter and flat index where the maximum occurred.
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &Bound) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let bound = store.bind_frozen(&mut g);
    let out = f(&mut g, &bound)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::Contract("gradient check needs a scalar function".into()));
    }
    Ok(v.data()[0])
}

/// Compares backward-pass gradients of the scalar `f` against central
/// differences for every scalar in `store`.
pub fn grad_check<F>(store: &ParamStore, f: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let out = f(&mut g, &bound)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = store.clone();
    for id in store.ids() {
        let analytic = grads.get(bound.node(id));
        for index in 0..store.get(id).numel() {
            let original = store.get(id).data()[index];
            probe.get_mut(id).data_mut()[index] = original + eps;
            let plus = evaluate(&probe, &f)?;
            probe.get_mut(id).data_mut()[index] = original - eps;
            let minus = evaluate(&probe, &f)?;
            probe.get_mut(id).data_mut()[index] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::GradCheck {
                    param: store.name(id).to_string(),
                    index,
                    reason: "function is not finite under perturbation".to_string(),
                });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[index];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = store.name(id).to_string();
                report.worst_index = index;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Weighted sum with fixed random weights, so every output entry matters.
fn probe_sum(g: &mut Graph, x: NodeId, rng: &mut ChaCha8Rng) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    let w = g.constant(normal_init(rng, &shape, 1.0));
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn row(rng: &mut ChaCha8Rng, len: usize) -> Tensor {
    normal_init(rng, &[1, len], 1.0)
}

/// Runs the gradient check over every building block, each loss and a small
/// end-to-end model (4 patches, 8 features, 2 gene categories).
pub fn block_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let eps = DEFAULT_EPS;

    {
        let mut store = ParamStore::new();
        let x = store.add("x", normal_init(&mut rng, &[3, 5], 1.0));
        let norm = Norm::new(&mut store, "norm", 5);
        *store.get_mut(norm.gain) = normal_init(&mut rng, &[5], 1.0);
        *store.get_mut(norm.bias) = normal_init(&mut rng, &[5], 1.0);
        let w = normal_init(&mut rng, &[3, 5], 1.0);
        out.push(("layer_norm", grad_check(&store, |g, b| {
            let y = norm.forward(g, b, b.node(x))?;
            let w = g.constant(w.clone());
            let p = g.mul(y, w)?;
            Ok(g.sum(p))
        }, eps)?));
    }
    {
        let mut store = ParamStore::new();
        let mhca = Mhca::new(&mut store, &mut rng, "mhca", 4, 2)?;
        let q = store.add("queries", normal_init(&mut rng, &[3, 4], 1.0));
        let bag = store.add("bag", normal_init(&mut rng, &[5, 4], 1.0));
        let r = rng.clone();
        out.push(("mhca", grad_check(&store, |g, b| {
            let mut r = r.clone();
            let o = mhca.forward(g, b, b.node(q), b.node(bag), HeadMerge::Mean)?;
            let a = probe_sum(g, o.out, &mut r)?;
            let s = probe_sum(g, o.scores, &mut r)?;
            g.add(a, s)
        }, eps)?));
    }
    {
        let mut store = ParamStore::new();
        let mhsa = Mhsa::new(&mut store, &mut rng, "mhsa", 4, 2)?;
        let x = store.add("x", normal_init(&mut rng, &[3, 4], 1.0));
        let r = rng.clone();
        out.push(("mhsa", grad_check(&store, |g, b| {
            let y = mhsa.forward(g, b, b.node(x))?;
            probe_sum(g, y, &mut r.clone())
        }, eps)?));
    }
    {
        let mut store = ParamStore::new();
        let ffn = Ffn::new(&mut store, &mut rng, "ffn", 4);
        let x = store.add("x", normal_init(&mut rng, &[3, 4], 1.0));
        let r = rng.clone();
        out.push(("ffn", grad_check(&store, |g, b| {
            let y = ffn.forward(g, b, b.node(x))?;
            probe_sum(g, y, &mut r.clone())
        }, eps)?));
    }
    {
        let mut store = ParamStore::new();
        let gate = GatedAttention::new(&mut store, &mut rng, "gate", 4, 3, 1);
        let x = store.add("bag", normal_init(&mut rng, &[5, 4], 1.0));
        let r = rng.clone();
        out.push(("gated_attention", grad_check(&store, |g, b| {
            let w = gate.weights(g, b, b.node(x))?;
            probe_sum(g, w, &mut r.clone())
        }, eps)?));
    }
    {
        let mut store = ParamStore::new();
        let head = SnnHead::new(&mut store, &mut rng, "snn", 4, 4, 3);
        let f = store.add("f", normal_init(&mut rng, &[1, 4], 1.0));
        let r = rng.clone();
        out.push(("snn_head", grad_check(&store, |g, b| {
            let y = head.forward(g, b, b.node(f))?;
            probe_sum(g, y, &mut r.clone())
        }, eps)?));
    }
    {
        let mut store = ParamStore::new();
        let p: Vec<_> = [3, 2]
            .iter()
            .enumerate()
            .map(|(i, &n)| store.add(alloc::format!("pred{i}"), row(&mut rng, n)))
            .collect();
        let targets = [row(&mut rng, 3), row(&mut rng, 2)];
        let consts = |g: &mut Graph| -> Vec<NodeId> { targets.iter().map(|t| g.constant(t.clone())).collect() };
        out.push(("mse_loss", grad_check(&store, |g, b| {
            let x = consts(g);
            let preds: Vec<NodeId> = p.iter().map(|&id| b.node(id)).collect();
            mse_loss(g, &preds, &x)
        }, eps)?));
        out.push(("sce_loss", grad_check(&store, |g, b| {
            let x = consts(g);
            let preds: Vec<NodeId> = p.iter().map(|&id| b.node(id)).collect();
            Ok(sce_loss(g, &preds, &x, 2.0)?.0)
        }, eps)?));
        out.push(("reconstruction_loss", grad_check(&store, |g, b| {
            let x = consts(g);
            let preds: Vec<NodeId> = p.iter().map(|&id| b.node(id)).collect();
            Ok(reconstruction_loss(g, &preds, &x, 2.0)?.total)
        }, eps)?));
    }
    {
        let mut store = ParamStore::new();
        let logits = store.add("logits", row(&mut rng, 4));
        out.push(("nll_loss", grad_check(&store, |g, b| {
            let h = g.sigmoid(b.node(logits));
            let event = nll_loss(g, h, 2, false)?;
            let censored = nll_loss(g, h, 1, true)?;
            g.add(event, censored)
        }, eps)?));
    }
    {
        let config = ModelConfig {
            input_dim: 8,
            width: 8,
            heads: 2,
            gate_width: 4,
            compressed: 4,
            bins: 4,
            gene_lengths: [3, 2, 0, 0, 0, 0],
            k_percent: 25.0,
            head_merge: HeadMerge::Mean,
            variant: Variant::Full,
        };
        // Its own stream, so the evaluation point depends only on `seed`.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Model::new(config, seed)?;
        // At initialization the tokens are nearly equal and the attention
        // logits nearly flat, which leaves the query/key gradients at the
        // finite-difference noise floor. Move to a generic point first.
        let ids: Vec<_> = model.params().ids().collect();
        for id in ids {
            let value = model.params_mut().get_mut(id);
            let noise = normal_init(&mut rng, value.shape(), 0.2);
            for (v, n) in value.data_mut().iter_mut().zip(noise.data()) {
                *v += n;
            }
        }
        let tokens = model.params().find("cab.tokens").expect("cross-attention tokens");
        *model.params_mut().get_mut(tokens) = normal_init(&mut rng, &[CATEGORY_COUNT, 8], 1.0);
        let bag = normal_init(&mut rng, &[4, 8], 2.0);
        let mut targets: [Vec<f64>; CATEGORY_COUNT] = Default::default();
        targets[0] = alloc::vec![0.1, -0.3, 0.5];
        targets[1] = alloc::vec![1.0, 0.2];
        let label = SurvivalLabel {
            time_months: 10.0,
            censored: false,
            bin: 1,
        };
        let weights = LossWeights { alpha: 0.3, gamma: 2.0 };
        // the top-k mask is detached, so hold it at its base-point value
        let mask = model
            .associations(&bag)?
            .map(|a| a.masked)
            .expect("full model has associations");
        out.push(("end_to_end", grad_check(model.params(), |g, b| {
            Ok(model.training_loss_with_mask(g, b, &bag, Some(&targets), label, weights, &mask)?.0)
        }, eps)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn every_block_passes() {
        for (name, report) in block_suite(0).unwrap() {
            assert!(report.max_rel_error < 1e-4, "{name}: {report:?}");
            assert!(report.checked > 0);
        }
    }

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::scalar(3.0));
        let report = grad_check(&store, |g, b| {
            let x = b.nodes()[0];
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        }, DEFAULT_EPS)
        .unwrap();
        assert!((report.analytic - 6.0).abs() < 1e-12);
        assert!((report.numeric - 6.0).abs() < 1e-8);
    }

    #[test]
    fn nan_names_the_parameter() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::scalar(1.0));
        store.add("b", Tensor::scalar(0.0));
        // log(b) is -inf at the base point, so the analytic pass already fails
        let err = grad_check(&store, |g, b| {
            let l = g.log(b.nodes()[1]);
            let s = g.add(l, b.nodes()[0])?;
            Ok(g.sum(s))
        }, DEFAULT_EPS)
        .unwrap_err();
        assert_eq!(err, Error::NonFinite { op: "log" });

        // sqrt(x) is finite at x = 1e-6 but NaN at x - eps
        let mut store = ParamStore::new();
        store.add("root", Tensor::scalar(1e-6));
        let err = grad_check(&store, |g, b| {
            let shifted = g.add_scalar(b.nodes()[0], 1.0);
            let r = g.sqrt(b.nodes()[0]);
            let s = g.add(r, shifted)?;
            Ok(g.sum(s))
        }, DEFAULT_EPS);
        assert!(matches!(err, Err(Error::GradCheck { ref param, .. }) if param == "root"));
    }
}
