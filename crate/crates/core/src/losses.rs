//! Training objectives. All batch reductions are means over the batch.

use serde::{Deserialize, Serialize};

use crate::bake::{build_soft_targets, BakeConfig};
use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Tensor};

/// Largest deviation of a target row sum from 1 accepted by [`kl_distillation`].
pub const TARGET_ROW_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Weight λ of the distillation term.
    pub lambda: f64,
    /// Temperature τ of the distillation term.
    pub tau: f64,
    /// ε for the label-smoothing baseline.
    pub smoothing_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            tau: 4.0,
            smoothing_epsilon: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        check_tau(self.tau)?;
        check_epsilon(self.smoothing_epsilon)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("tau must be > 0, got {tau}")))
    }
}

fn check_epsilon(eps: f64) -> Result<()> {
    if (0.0..1.0).contains(&eps) {
        Ok(())
    } else {
        Err(Error::config(format!("smoothing epsilon must lie in [0,1), got {eps}")))
    }
}

/// Row-wise `softmax(z / τ)`.
pub fn temperature_probs(logits: &Tensor, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    logits.scale(1.0 / tau).softmax_rows(None)
}

/// Differentiable form of [`temperature_probs`].
pub fn temperature_probs_node(g: &mut Graph, logits: NodeId, tau: f64) -> Result<NodeId> {
    check_tau(tau)?;
    let scaled = g.scale(logits, 1.0 / tau);
    g.softmax_rows(scaled, None)
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        check_label(i, y, classes)?;
        t.set(i, y, 1.0);
    }
    Ok(t)
}

fn check_label(index: usize, label: usize, classes: usize) -> Result<()> {
    if label < classes {
        Ok(())
    } else {
        Err(Error::LabelRange { index, label, classes })
    }
}

/// `−mean_i Σ_k t_ik · log softmax(z_i)_k` for a constant target matrix.
fn soft_cross_entropy(g: &mut Graph, logits: NodeId, targets: Tensor) -> Result<NodeId> {
    let n = g.value(logits).rows();
    if targets.shape() != g.value(logits).shape() {
        return Err(Error::shape("cross_entropy", g.value(logits).shape(), targets.shape()));
    }
    let log_p = g.log_softmax_rows(logits)?;
    let t = g.constant(targets);
    let weighted = g.mul(log_p, t)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, -1.0 / n as f64))
}

fn check_batch(g: &Graph, logits: NodeId, labels: &[usize]) -> Result<()> {
    let z = g.value(logits);
    z.require_matrix("loss")?;
    if z.rows() != labels.len() {
        return Err(Error::shape("loss labels", z.shape(), &[labels.len()]));
    }
    Ok(())
}

/// Mean of `−log softmax(z)(y)`, with no temperature.
pub fn cross_entropy(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    check_batch(g, logits, labels)?;
    let targets = one_hot(labels, g.value(logits).cols())?;
    soft_cross_entropy(g, logits, targets)
}

/// Cross-entropy against `(1−ε)·onehot + ε/K`.
pub fn label_smoothing_loss(g: &mut Graph, logits: NodeId, labels: &[usize], epsilon: f64) -> Result<NodeId> {
    check_epsilon(epsilon)?;
    check_batch(g, logits, labels)?;
    let k = g.value(logits).cols();
    let targets = one_hot(labels, k)?.map(|v| (1.0 - epsilon) * v + epsilon / k as f64);
    soft_cross_entropy(g, logits, targets)
}

/// `τ² · mean_i KL(q_i ‖ softmax(z_i/τ))`. Gradient flows into `logits` only.
pub fn kl_distillation(g: &mut Graph, logits: NodeId, targets: &Tensor, tau: f64) -> Result<NodeId> {
    check_tau(tau)?;
    targets.require_matrix("kl_distillation")?;
    for (row, sum) in targets.row_sums().into_iter().enumerate() {
        if !((sum - 1.0).abs() <= TARGET_ROW_TOLERANCE) || targets.row(row).iter().any(|&q| q < 0.0) {
            return Err(Error::NonStochasticTarget { row, sum });
        }
    }
    g.soft_target_kl(logits, targets, tau)
}

/// Handles to the pieces of the combined objective.
#[derive(Clone, Copy, Debug)]
pub struct BakeLoss {
    pub total: NodeId,
    pub ce: NodeId,
    /// The distillation term before λ weighting (τ² already applied).
    pub kl: NodeId,
}

/// `CE(z, y) + λ·τ²·KL(q ‖ p^τ)` where `q` is built from the same forward
/// pass's features and logits, read as plain values.
pub fn bake_loss(
    g: &mut Graph,
    logits: NodeId,
    features: NodeId,
    labels: &[usize],
    bake_cfg: &BakeConfig,
    loss_cfg: &LossConfig,
) -> Result<BakeLoss> {
    loss_cfg.validate()?;
    check_batch(g, logits, labels)?;
    let targets = build_soft_targets(g.value(features), g.value(logits), Some(labels), bake_cfg)?;
    let ce = cross_entropy(g, logits, labels)?;
    let kl = kl_distillation(g, logits, targets.as_tensor(), loss_cfg.tau)?;
    let weighted = g.scale(kl, loss_cfg.lambda);
    let total = g.add(ce, weighted)?;
    Ok(BakeLoss { total, ce, kl })
}
