//! Feature-norm bounds, the contraction mapping, and the softmax loss family
//! over a unit-weight, zero-bias classifier head.
//!
//! All losses share one pipeline: row-normalize the features, column-normalize
//! the head weights, take cosines (clamped before any arccos), optionally
//! apply an angular/cosine margin to the true class, scale every logit of
//! sample i by a per-sample factor, and finish with softmax cross entropy.
//! The public losses differ only in how that per-sample scale is built:
//! the raw feature norm, a fixed constant, or the contraction mapping.

use crate::autodiff::{
    sigmoid_range, sigmoid_range_deriv, Graph, NodeId, SigmoidRangeParams, COS_CLAMP_HI,
    COS_CLAMP_LO,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lowest feature norm that achieves a designated true-class probability `p`
/// with `c` classes: ln(p*(c-2)/(1-p)).
pub fn lower_bound(p: f64, c: usize) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!(
            "designated probability must lie in (0,1), got {p}"
        )));
    }
    if c <= 2 {
        return Err(Error::Domain(format!(
            "class count must be at least 3 for the lower bound, got {c}"
        )));
    }
    let arg = p * (c as f64 - 2.0) / (1.0 - p);
    if arg <= 1.0 {
        return Err(Error::Domain(format!(
            "lower bound is non-positive: p*(c-2)/(1-p) = {arg} <= 1"
        )));
    }
    Ok(arg.ln())
}

/// Upper feature-norm bound, fixed at three times the lower bound.
pub fn upper_bound(s_lower: f64) -> Result<f64> {
    if !(s_lower > 0.0) || !s_lower.is_finite() {
        return Err(Error::Domain(format!(
            "upper bound requires a positive lower bound, got {s_lower}"
        )));
    }
    Ok(3.0 * s_lower)
}

/// Parameters of the norm-compression map
/// f(n) = s_lower + (2*sigmoid(gamma*n) - 1) * (s_upper - s_lower).
///
/// Immutable after construction and freely shareable across threads.
#[derive(Debug, Clone, Copy)]
pub struct ContractionSpec {
    p: f64,
    classes: usize,
    gamma: f64,
    s_lower: f64,
    s_upper: f64,
}

impl ContractionSpec {
    pub fn new(p: f64, classes: usize, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::Domain(format!(
                "compression intensity gamma must be positive, got {gamma}"
            )));
        }
        let s_lower = lower_bound(p, classes)?;
        let s_upper = upper_bound(s_lower)?;
        Ok(ContractionSpec {
            p,
            classes,
            gamma,
            s_lower,
            s_upper,
        })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn s_lower(&self) -> f64 {
        self.s_lower
    }

    pub fn s_upper(&self) -> f64 {
        self.s_upper
    }

    pub(crate) fn range_params(&self) -> SigmoidRangeParams {
        SigmoidRangeParams {
            gamma: self.gamma,
            lo: self.s_lower,
            hi: self.s_upper,
        }
    }

    /// The contracted norm: strictly increasing in `norm` with values in
    /// [s_lower, s_upper).
    pub fn apply(&self, norm: f64) -> Result<f64> {
        if norm < 0.0 || !norm.is_finite() {
            return Err(Error::Domain(format!(
                "contraction mapping requires a non-negative norm, got {norm}"
            )));
        }
        Ok(sigmoid_range(self.range_params(), norm))
    }

    /// d f / d norm, strictly positive and strictly decreasing on norm > 0.
    pub fn derivative(&self, norm: f64) -> f64 {
        sigmoid_range_deriv(self.range_params(), norm)
    }
}

/// Margin variant inserted into the true-class score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginVariant {
    /// psi(theta) = cos(theta) - m
    AdditiveCosine,
    /// psi(theta) = cos(theta + m)
    AdditiveAngle,
}

#[derive(Debug, Clone, Copy)]
pub struct MarginSpec {
    variant: MarginVariant,
    margin: f64,
}

impl MarginSpec {
    pub fn new(variant: MarginVariant, margin: f64) -> Result<Self> {
        if !(margin >= 0.0) || !margin.is_finite() {
            return Err(Error::Domain(format!(
                "margin must be non-negative and finite, got {margin}"
            )));
        }
        let cap = match variant {
            MarginVariant::AdditiveCosine => 1.0,
            MarginVariant::AdditiveAngle => std::f64::consts::FRAC_PI_2,
        };
        if margin >= cap {
            return Err(Error::Domain(format!(
                "margin {margin} exceeds the limit {cap} for {variant:?}"
            )));
        }
        Ok(MarginSpec { variant, margin })
    }

    pub fn variant(&self) -> MarginVariant {
        self.variant
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    /// The adjusted true-class score as a function of the cosine. For the
    /// angle variant the arccos argument is clamped to [-1+1e-7, 1-1e-7].
    pub fn psi(&self, cosine: f64) -> f64 {
        match self.variant {
            MarginVariant::AdditiveCosine => cosine - self.margin,
            MarginVariant::AdditiveAngle => {
                (cosine.clamp(COS_CLAMP_LO, COS_CLAMP_HI).acos() + self.margin).cos()
            }
        }
    }
}

/// Fixed feature norm (NormFace / L2-softmax style scaling).
#[derive(Debug, Clone, Copy)]
pub struct FixedNormSpec {
    s: f64,
}

impl FixedNormSpec {
    pub fn new(s: f64) -> Result<Self> {
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Domain(format!(
                "fixed norm must be positive and finite, got {s}"
            )));
        }
        Ok(FixedNormSpec { s })
    }

    pub fn s(&self) -> f64 {
        self.s
    }
}

/// Zero-bias classifier head; `weight` is a [d, c] node whose column j is the
/// class-j weight vector. Columns are normalized to unit length in-graph on
/// every loss evaluation, so the stored weights stay unconstrained.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierHead {
    pub weight: NodeId,
    pub feature_dim: usize,
    pub classes: usize,
}

impl ClassifierHead {
    pub fn new(graph: &Graph, weight: NodeId) -> Result<Self> {
        let s = graph.value(weight).shape();
        if s.len() != 2 {
            return Err(Error::Dimension {
                context: "ClassifierHead",
                left: s.to_vec(),
                right: vec![],
            });
        }
        Ok(ClassifierHead {
            weight,
            feature_dim: s[0],
            classes: s[1],
        })
    }
}

/// Everything a loss evaluation reports besides the differentiable loss node.
///
/// `probabilities`, `cosines`, `norms`, and `logits` are detached snapshots;
/// `loss` stays in the graph for backward.
pub struct LossOutput {
    pub loss: NodeId,
    pub loss_value: f64,
    /// P_{y_i}: softmax probability of the true class, per sample. [m]
    pub probabilities: Tensor,
    /// Clamped cosine matrix. [m, c] (empty for raw-logit cross entropy)
    pub cosines: Tensor,
    /// Raw feature norms. [m] (empty for raw-logit cross entropy)
    pub norms: Tensor,
    /// Final pre-softmax scores. [m, c]
    pub logits: Tensor,
}

fn check_labels(labels: &[usize], m: usize, classes: usize) -> Result<()> {
    if labels.len() != m {
        return Err(Error::Dimension {
            context: "labels",
            left: vec![m],
            right: vec![labels.len()],
        });
    }
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Index(format!(
                "label {y} out of range for {classes} classes (sample {i})"
            )));
        }
    }
    Ok(())
}

/// Column-normalizes the head weights in-graph, so weight gradients flow
/// through the normalization.
fn normalized_weights(g: &mut Graph, head: &ClassifierHead) -> Result<NodeId> {
    let wt = g.transpose(head.weight)?; // [c, d]
    let col_norms = g.row_l2_norm(wt)?;
    if let Some(j) = g.value(col_norms).data().iter().position(|&n| n == 0.0) {
        return Err(Error::DegenerateFeature(format!(
            "classifier weight column {j} has zero norm"
        )));
    }
    let inv = g.recip(col_norms);
    let unit_rows = g.scale_rows(wt, inv)?;
    g.transpose(unit_rows)
}

/// Cosine matrix (clamped) plus raw per-sample feature norms.
fn cosine_and_norms(
    g: &mut Graph,
    features: NodeId,
    head: &ClassifierHead,
) -> Result<(NodeId, NodeId)> {
    let s = g.value(features).shape();
    if s.len() != 2 || s[1] != head.feature_dim {
        return Err(Error::Dimension {
            context: "cosine_logits",
            left: s.to_vec(),
            right: vec![head.feature_dim, head.classes],
        });
    }
    let norms = g.row_l2_norm(features)?;
    if let Some(i) = g.value(norms).data().iter().position(|&n| n == 0.0) {
        return Err(Error::DegenerateFeature(format!(
            "feature row {i} has zero norm; its cosine is undefined"
        )));
    }
    let inv = g.recip(norms);
    let unit = g.scale_rows(features, inv)?;
    let wn = normalized_weights(g, head)?;
    let raw = g.matmul(unit, wn)?;
    let cos = g.clamp(raw, COS_CLAMP_LO, COS_CLAMP_HI);
    Ok((cos, norms))
}

/// cos(theta_{W_j, x_i}) for every sample/class pair, clamped to
/// [-1+1e-7, 1-1e-7].
pub fn cosine_logits(g: &mut Graph, features: NodeId, head: &ClassifierHead) -> Result<NodeId> {
    Ok(cosine_and_norms(g, features, head)?.0)
}

fn assemble(
    g: &Graph,
    loss: NodeId,
    probs: &Tensor,
    labels: &[usize],
    logits: NodeId,
    cosines: Option<NodeId>,
    norms: Option<NodeId>,
) -> LossOutput {
    let c = probs.shape()[1];
    let probabilities = Tensor::new(
        vec![labels.len()],
        labels
            .iter()
            .enumerate()
            .map(|(i, &y)| probs.data()[i * c + y])
            .collect(),
    )
    .expect("probability shape");
    LossOutput {
        loss,
        loss_value: g.value(loss).item(),
        probabilities,
        cosines: cosines.map_or(Tensor::zeros(&[0]), |id| g.value(id).clone()),
        norms: norms.map_or(Tensor::zeros(&[0]), |id| g.value(id).clone()),
        logits: g.value(logits).clone(),
    }
}

/// Numerically stable softmax cross entropy over raw logits (batch mean).
pub fn softmax_xent(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<LossOutput> {
    let (loss, probs) = g.softmax_xent(logits, labels)?;
    Ok(assemble(g, loss, &probs, labels, logits, None, None))
}

/// One-hot constant mask for blending the margin into the true class only.
fn one_hot_leaf(g: &mut Graph, labels: &[usize], classes: usize) -> NodeId {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        data[i * classes + y] = 1.0;
    }
    g.leaf(Tensor::new(vec![labels.len(), classes], data).expect("one-hot shape"))
}

fn head_loss(
    g: &mut Graph,
    features: NodeId,
    head: &ClassifierHead,
    labels: &[usize],
    margin: Option<&MarginSpec>,
    make_scale: impl FnOnce(&mut Graph, NodeId) -> Result<NodeId>,
) -> Result<LossOutput> {
    check_labels(labels, g.value(features).shape()[0], head.classes)?;
    let (cos, norms) = cosine_and_norms(g, features, head)?;
    let scale = make_scale(g, norms)?;
    let adjusted = match margin {
        None => cos,
        Some(spec) => {
            let psi_all = match spec.variant() {
                MarginVariant::AdditiveCosine => g.add_const(cos, -spec.margin()),
                MarginVariant::AdditiveAngle => g.cos_angle_add(cos, spec.margin()),
            };
            let delta = g.sub(psi_all, cos)?;
            let mask = one_hot_leaf(g, labels, head.classes);
            let masked = g.mul(delta, mask)?;
            g.add(cos, masked)?
        }
    };
    let logits = g.scale_rows(adjusted, scale)?;
    let (loss, probs) = g.softmax_xent(logits, labels)?;
    Ok(assemble(g, loss, &probs, labels, logits, Some(cos), Some(norms)))
}

/// Shared core of the loss family: softmax cross entropy over
/// `scales[i] * psi-adjusted cosines`, with psi applied to the true class
/// only. The per-sample scale vector is caller-supplied; the public losses
/// differ only in how they build it.
pub fn scaled_softmax_loss(
    g: &mut Graph,
    features: NodeId,
    head: &ClassifierHead,
    labels: &[usize],
    scales: NodeId,
    margin: Option<&MarginSpec>,
) -> Result<LossOutput> {
    head_loss(g, features, head, labels, margin, |_, _| Ok(scales))
}

/// Softmax loss over ||x_i|| * cos(theta): the zero-bias, unit-weight form of
/// the classical softmax loss.
pub fn plain_softmax_loss(
    g: &mut Graph,
    features: NodeId,
    head: &ClassifierHead,
    labels: &[usize],
) -> Result<LossOutput> {
    head_loss(g, features, head, labels, None, |_, norms| Ok(norms))
}

/// Softmax loss over s * cos(theta): feature norms are replaced by a fixed
/// constant, so only feature directions matter.
pub fn fixed_norm_loss(
    g: &mut Graph,
    features: NodeId,
    head: &ClassifierHead,
    labels: &[usize],
    spec: &FixedNormSpec,
) -> Result<LossOutput> {
    let m = g.value(features).shape()[0];
    let s = spec.s();
    head_loss(g, features, head, labels, None, |g, _| {
        Ok(g.leaf(Tensor::full(&[m], s)))
    })
}

/// Softmax loss over f(||x_i||) * cos(theta) with the contraction mapping f
/// applied uniformly to all class scores of sample i. Gradient flows through
/// f and the cosines.
pub fn cm_softmax_loss(
    g: &mut Graph,
    features: NodeId,
    head: &ClassifierHead,
    labels: &[usize],
    spec: &ContractionSpec,
) -> Result<LossOutput> {
    let params = spec.range_params();
    head_loss(g, features, head, labels, None, |g, norms| {
        Ok(g.sigmoid_range(norms, params))
    })
}

/// Contraction-mapped loss with a margin on the true-class score:
/// f(||x_i||) * psi(theta_{y_i}) in the true-class slot, plain cosines for
/// the false classes.
pub fn cm_margin_softmax_loss(
    g: &mut Graph,
    features: NodeId,
    head: &ClassifierHead,
    labels: &[usize],
    spec: &ContractionSpec,
    margin: &MarginSpec,
) -> Result<LossOutput> {
    let params = spec.range_params();
    head_loss(g, features, head, labels, Some(margin), |g, norms| {
        Ok(g.sigmoid_range(norms, params))
    })
}

/// Fixed-norm loss with a margin on the true-class score (ArcFace/CosFace
/// style baseline).
pub fn fixed_margin_loss(
    g: &mut Graph,
    features: NodeId,
    head: &ClassifierHead,
    labels: &[usize],
    spec: &FixedNormSpec,
    margin: &MarginSpec,
) -> Result<LossOutput> {
    let m = g.value(features).shape()[0];
    let s = spec.s();
    head_loss(g, features, head, labels, Some(margin), |g, _| {
        Ok(g.leaf(Tensor::full(&[m], s)))
    })
}
