//! Gradient-weighted attention relevancy over a generation trace, and the
//! threshold rule that turns relevancy into patch labels.

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Layout, Tensor};
use crate::toy::generate::GenerationTrace;
use crate::toy::model::{AttnHooks, AttnOverride, ToyModel};

/// Default fraction of the maximum a patch must reach to be labeled relevant.
pub const LABEL_THRESHOLD: f64 = 0.3;

/// Attention maps of one replayed step and the gradient of the chosen
/// token's logit with respect to each of them.
#[derive(Clone, Debug)]
pub struct AttentionGrads {
    pub token_index: usize,
    /// `[heads, n, n]` per layer, `n = n_in + token_index`.
    pub attention: Vec<Tensor>,
    pub grads: Vec<Tensor>,
}

/// `R_i`: relevancy of every position to every other, up to output token `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevancyMatrix {
    pub token_index: usize,
    pub matrix: Tensor,
}

impl RelevancyMatrix {
    pub fn size(&self) -> usize {
        self.matrix.rows()
    }
}

fn check_trace(model: &ToyModel, trace: &GenerationTrace, i: usize) -> Result<()> {
    if trace.model_fingerprint != model.fingerprint() {
        return Err(Error::State("trace was produced by a different checkpoint; its forward pass cannot be replayed".into()));
    }
    if i >= trace.n_out() {
        return Err(Error::Bounds { index: i, extent: trace.n_out() });
    }
    Ok(())
}

/// Replays the forward pass that produced output token `i` and
/// differentiates that token's logit with respect to every attention map.
pub fn attention_grads(model: &ToyModel, trace: &GenerationTrace, i: usize) -> Result<AttentionGrads> {
    attention_grads_with(model, trace, i, None)
}

/// As [`attention_grads`], with an optional additive change to one layer's
/// attention. Exposed for finite-difference probing.
pub fn attention_grads_with(
    model: &ToyModel,
    trace: &GenerationTrace,
    i: usize,
    delta: Option<AttnOverride>,
) -> Result<AttentionGrads> {
    check_trace(model, trace, i)?;
    let (logit, g, attention) = replay(model, trace, i, delta)?;
    let mut g = g;
    g.backward(logit)?;
    let grads = attention.iter().map(|&a| g.grad_or_zeros(a)).collect();
    let attention = attention.iter().map(|&a| g.value(a).clone()).collect();
    Ok(AttentionGrads {
        token_index: i,
        attention,
        grads,
    })
}

/// Chosen-token logit of the replayed step `i`. Used as the oracle side of
/// finite-difference checks.
pub fn replayed_logit(model: &ToyModel, trace: &GenerationTrace, i: usize, delta: Option<AttnOverride>) -> Result<f64> {
    check_trace(model, trace, i)?;
    let (logit, g, _) = replay(model, trace, i, delta)?;
    Ok(g.value(logit).data()[0])
}

fn replay(
    model: &ToyModel,
    trace: &GenerationTrace,
    i: usize,
    delta: Option<AttnOverride>,
) -> Result<(crate::autodiff::Var, Graph, Vec<crate::autodiff::Var>)> {
    let input = trace.replay_input(i)?;
    let n = input.len();
    let mut g = Graph::new();
    let pv = model.bind(&mut g, false);
    let hooks = AttnHooks { watch: true, delta };
    let fwd = model.forward_graph(&mut g, &pv, std::slice::from_ref(&input), &hooks)?;
    let logits = model.logits_graph(&mut g, &pv, fwd.hidden, &[n - 1])?;
    let mut pick = Tensor::zeros(g.value(logits).shape());
    pick.data_mut()[trace.output[i]] = 1.0;
    let pick = g.constant(pick);
    let chosen = g.mul(logits, pick)?;
    let logit = g.sum(chosen);
    Ok((logit, g, fwd.attention))
}

/// `R = I`, then per layer `R <- R + mean_h((grad * A)+) R`.
pub fn propagate(attention: &[Tensor], grads: &[Tensor]) -> Result<Tensor> {
    if attention.len() != grads.len() || attention.is_empty() {
        return Err(Error::dim("relevancy", &[attention.len()], &[grads.len()]));
    }
    let n = attention[0].shape()[1];
    let mut r = Tensor::eye(n);
    let mut bar = Tensor::zeros(&[n, n]);
    let mut next = Tensor::zeros(&[n, n]);
    for (a, ga) in attention.iter().zip(grads) {
        if a.shape() != ga.shape() || a.shape().len() != 3 || a.shape()[1] != n || a.shape()[2] != n {
            return Err(Error::dim("relevancy", a.shape(), ga.shape()));
        }
        let h = a.shape()[0];
        let inv = 1.0 / h as f64;
        bar.data_mut().fill(0.0);
        for head in a.data().chunks(n * n).zip(ga.data().chunks(n * n)) {
            for ((o, &av), &gv) in bar.data_mut().iter_mut().zip(head.0).zip(head.1) {
                *o += inv * (av * gv).max(0.0);
            }
        }
        next.data_mut().copy_from_slice(r.data());
        gemm(n, n, n, bar.data(), Layout::Normal, r.data(), Layout::Normal, next.data_mut(), 1.0);
        std::mem::swap(&mut r, &mut next);
    }
    Ok(r)
}

/// Relevancy matrix for output token `i`, replaying the forward pass.
pub fn compute_relevancy(model: &ToyModel, trace: &GenerationTrace, i: usize) -> Result<RelevancyMatrix> {
    let ag = attention_grads(model, trace, i)?;
    Ok(RelevancyMatrix {
        token_index: i,
        matrix: propagate(&ag.attention, &ag.grads)?,
    })
}

/// Last row of `R`, restricted to the first `p` columns (the patches).
pub fn extract_vision(r: &RelevancyMatrix, p: usize) -> Result<Vec<f64>> {
    let n = r.matrix.cols();
    if p > n {
        return Err(Error::Bounds { index: p, extent: n });
    }
    Ok(r.matrix.row(r.matrix.rows() - 1)[..p].to_vec())
}

/// Bit `j` is set iff `v[j] >= max(v) * threshold`.
pub fn binarize(v: &[f64], threshold: f64) -> Result<Vec<bool>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!("labeling threshold {threshold} outside (0, 1]")));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(Error::Degenerate("relevancy vector has no positive entry".into()));
    }
    let cut = max * threshold;
    Ok(v.iter().map(|&x| x >= cut).collect())
}

/// Vision relevancy for every output token of `trace`.
pub fn explain_all(model: &ToyModel, trace: &GenerationTrace) -> Result<Vec<Vec<f64>>> {
    (0..trace.n_out())
        .map(|i| extract_vision(&compute_relevancy(model, trace, i)?, trace.n_patches))
        .collect()
}

/// Head-averaged last-layer attention from the position predicting token
/// `i` to each patch. A gradient-free comparator.
pub fn raw_attention(trace: &GenerationTrace, i: usize) -> Result<Vec<f64>> {
    if i >= trace.n_out() {
        return Err(Error::Bounds { index: i, extent: trace.n_out() });
    }
    let a = trace.attention.last().ok_or_else(|| Error::State("trace holds no attention".into()))?;
    let (h, n) = (a.shape()[0], a.shape()[1]);
    let row = trace.n_in() + i - 1;
    let mut out = vec![0.0; trace.n_patches];
    for head in 0..h {
        let base = head * n * n + row * n;
        for (o, v) in out.iter_mut().zip(&a.data()[base..base + trace.n_patches]) {
            *o += v / h as f64;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_worked_example() {
        assert_eq!(binarize(&[0.9, 0.2, 0.31], 0.3).unwrap(), vec![true, false, true]);
    }

    #[test]
    fn binarize_full_threshold_marks_ties_at_max() {
        assert_eq!(binarize(&[0.5, 0.2, 0.5, 0.0], 1.0).unwrap(), vec![true, false, true, false]);
    }

    #[test]
    fn binarize_rejects_degenerate_and_bad_threshold() {
        assert!(matches!(binarize(&[0.0, 0.0], 0.3), Err(Error::Degenerate(_))));
        assert!(binarize(&[1.0], 0.0).is_err());
        assert!(binarize(&[1.0], 1.5).is_err());
    }

    #[test]
    fn zero_gradients_leave_identity() {
        let a = Tensor::full(&[2, 3, 3], 1.0 / 3.0);
        let z = Tensor::zeros(&[2, 3, 3]);
        assert_eq!(propagate(&[a.clone(), a], &[z.clone(), z]).unwrap(), Tensor::eye(3));
    }

    #[test]
    fn extract_vision_bounds() {
        let r = RelevancyMatrix { token_index: 0, matrix: Tensor::eye(4) };
        assert_eq!(extract_vision(&r, 4).unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(extract_vision(&r, 2).unwrap(), vec![0.0, 0.0]);
        assert!(extract_vision(&r, 5).is_err());
    }
}
