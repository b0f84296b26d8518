//! Batch knowledge ensembling: refined soft targets built from the
//! predictions of the other samples in a mini-batch.
//!
//! Given features `F` and temperature-scaled predictions `P`, the affinity
//! matrix `Â` is the row softmax of cosine similarities with the diagonal
//! excluded. Targets are then either one propagation step
//! `ωÂP + (1−ω)P`, `t` iterations of `Q ← ωÂQ + (1−ω)P`, or the limit of that
//! recursion, `(1−ω)(I−ωÂ)⁻¹P`, obtained with a linear solve.
//!
//! Everything here operates on plain tensors, outside any [`Graph`], so the
//! resulting targets cannot carry gradients.
//!
//! [`Graph`]: crate::numerics::Graph

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{one_hot, temperature_probs};
use crate::numerics::{linear_solve, Tensor};

/// Row-stochastic `N×N` matrix with a zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix(Tensor);

impl AffinityMatrix {
    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn size(&self) -> usize {
        self.0.rows()
    }
}

/// Row-stochastic `N×K` refined targets. Detached by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTargets(Tensor);

impl SoftTargets {
    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Propagation {
    /// Infinite-iteration limit via a linear solve.
    ClosedForm,
    /// A fixed number of propagation iterations.
    Iterate(u32),
    OneStep,
}

impl fmt::Display for Propagation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Propagation::ClosedForm => f.write_str("closed"),
            Propagation::Iterate(t) => write!(f, "iterate:{t}"),
            Propagation::OneStep => f.write_str("one-step"),
        }
    }
}

impl FromStr for Propagation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed" | "closed-form" => Ok(Propagation::ClosedForm),
            "one-step" => Ok(Propagation::OneStep),
            _ => {
                let t = s
                    .strip_prefix("iterate:")
                    .and_then(|t| t.parse::<u32>().ok())
                    .ok_or_else(|| Error::config(format!("unknown propagation mode `{s}` (closed|iterate:t|one-step)")))?;
                Ok(Propagation::Iterate(t))
            }
        }
    }
}

serde_via_str!(Propagation);

/// What gets propagated across the batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KnowledgeSource {
    /// The network's own temperature-scaled predictions.
    Predictions,
    /// One-hot ground-truth labels (random-walk style baseline).
    GroundTruthOneHot,
}

impl fmt::Display for KnowledgeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KnowledgeSource::Predictions => "pred",
            KnowledgeSource::GroundTruthOneHot => "onehot",
        })
    }
}

impl FromStr for KnowledgeSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pred" | "predictions" => Ok(KnowledgeSource::Predictions),
            "onehot" | "ground-truth" => Ok(KnowledgeSource::GroundTruthOneHot),
            _ => Err(Error::config(format!("unknown knowledge source `{s}` (pred|onehot)"))),
        }
    }
}

serde_via_str!(KnowledgeSource);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BakeConfig {
    /// Ensembling weight ω in [0, 1].
    pub omega: f64,
    /// Softmax temperature τ > 0.
    pub tau: f64,
    pub propagation: Propagation,
    pub knowledge: KnowledgeSource,
}

impl Default for BakeConfig {
    fn default() -> Self {
        BakeConfig {
            omega: 0.5,
            tau: 4.0,
            propagation: Propagation::ClosedForm,
            knowledge: KnowledgeSource::Predictions,
        }
    }
}

impl BakeConfig {
    pub fn validate(&self) -> Result<()> {
        check_omega(self.omega)?;
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("tau must be > 0, got {}", self.tau)));
        }
        match self.propagation {
            Propagation::Iterate(0) => Err(Error::config("iterate mode needs t >= 1")),
            Propagation::ClosedForm if self.omega >= 1.0 => Err(closed_form_omega_error(self.omega)),
            _ => Ok(()),
        }
    }
}

fn check_omega(omega: f64) -> Result<()> {
    if (0.0..=1.0).contains(&omega) {
        Ok(())
    } else {
        Err(Error::config(format!("omega must lie in the valid range [0,1], got {omega}")))
    }
}

fn closed_form_omega_error(omega: f64) -> Error {
    Error::config(format!(
        "closed-form propagation needs omega < 1 (got {omega}); use one-step mode for omega = 1"
    ))
}

fn check_batch(a: &AffinityMatrix, p: &Tensor) -> Result<()> {
    p.require_matrix("propagate")?;
    if p.rows() != a.size() {
        return Err(Error::shape("propagate", a.0.shape(), p.shape()));
    }
    Ok(())
}

/// `Â(i,j) = exp(σ(fᵢ)·σ(fⱼ)) / Σ_{j'≠i} exp(σ(fᵢ)·σ(f_j'))`, `Â(i,i) = 0`,
/// where `σ` scales a row to unit norm.
pub fn affinity_matrix(features: &Tensor) -> Result<AffinityMatrix> {
    features.require_matrix("affinity_matrix")?;
    let n = features.rows();
    if n < 2 {
        return Err(Error::DegenerateBatch { size: n });
    }
    let unit = features.row_l2_normalize()?;
    let sim = unit.matmul_nt(&unit)?;
    let diagonal: Vec<_> = (0..n).map(|i| (i, i)).collect();
    Ok(AffinityMatrix(sim.softmax_rows(Some(&diagonal))?))
}

/// `ωÂP + (1−ω)P`
pub fn propagate_one_step(a: &AffinityMatrix, p: &Tensor, omega: f64) -> Result<SoftTargets> {
    check_omega(omega)?;
    check_batch(a, p)?;
    Ok(SoftTargets(mix(a, p, p, omega)?))
}

/// `ωÂQ + (1−ω)P`
fn mix(a: &AffinityMatrix, q: &Tensor, p: &Tensor, omega: f64) -> Result<Tensor> {
    let spread = a.0.matmul(q)?;
    spread.zip_map(p, "propagate", |s, own| omega * s + (1.0 - omega) * own)
}

/// Successive iterates `Q₍₁₎, Q₍₂₎, …` of `Q₍ₜ₎ = ωÂQ₍ₜ₋₁₎ + (1−ω)P` with
/// `Q₍₀₎ = P`.
pub struct PropagationSteps<'a> {
    affinity: &'a AffinityMatrix,
    initial: &'a Tensor,
    current: Tensor,
    omega: f64,
}

impl<'a> PropagationSteps<'a> {
    pub fn new(affinity: &'a AffinityMatrix, initial: &'a Tensor, omega: f64) -> Result<Self> {
        check_omega(omega)?;
        check_batch(affinity, initial)?;
        Ok(PropagationSteps {
            affinity,
            initial,
            current: initial.clone(),
            omega,
        })
    }
}

impl Iterator for PropagationSteps<'_> {
    type Item = Tensor;

    fn next(&mut self) -> Option<Tensor> {
        let next = mix(self.affinity, &self.current, self.initial, self.omega)
            .expect("shapes checked at construction");
        self.current = next.clone();
        Some(next)
    }
}

/// `t` iterations of propagation; `t = 0` returns `P` itself.
pub fn propagate_iterative(a: &AffinityMatrix, p: &Tensor, omega: f64, t: u32) -> Result<SoftTargets> {
    let steps = PropagationSteps::new(a, p, omega)?;
    Ok(SoftTargets(steps.take(t as usize).last().unwrap_or_else(|| p.clone())))
}

/// `(1−ω)(I−ωÂ)⁻¹P`, computed as a solve. Requires `ω < 1`.
///
/// `I−ωÂ` has unit diagonal and off-diagonal row sums of `ω`, so it is
/// strictly diagonally dominant whenever `ω < 1`.
pub fn propagate_closed_form(a: &AffinityMatrix, p: &Tensor, omega: f64) -> Result<SoftTargets> {
    check_omega(omega)?;
    if omega >= 1.0 {
        return Err(closed_form_omega_error(omega));
    }
    check_batch(a, p)?;
    let n = a.size();
    let mut system = a.0.scale(-omega);
    for i in 0..n {
        system.set(i, i, 1.0 - omega * a.0.at(i, i));
    }
    let solved = linear_solve(&system, p)?;
    Ok(SoftTargets(solved.scale(1.0 - omega)))
}

/// The per-batch target pipeline: knowledge matrix, affinities from the
/// features, then the configured propagation.
pub fn build_soft_targets(
    features: &Tensor,
    logits: &Tensor,
    labels: Option<&[usize]>,
    cfg: &BakeConfig,
) -> Result<SoftTargets> {
    cfg.validate()?;
    if features.rows() != logits.rows() {
        return Err(Error::shape("build_soft_targets", features.shape(), logits.shape()));
    }
    let knowledge = match cfg.knowledge {
        KnowledgeSource::Predictions => temperature_probs(logits, cfg.tau)?,
        KnowledgeSource::GroundTruthOneHot => {
            let labels = labels.ok_or_else(|| Error::config("ground-truth knowledge source requires labels"))?;
            if labels.len() != logits.rows() {
                return Err(Error::shape("build_soft_targets labels", logits.shape(), &[labels.len()]));
            }
            one_hot(labels, logits.cols())?
        }
    };
    let affinity = affinity_matrix(features)?;
    match cfg.propagation {
        Propagation::ClosedForm => propagate_closed_form(&affinity, &knowledge, cfg.omega),
        Propagation::Iterate(t) => propagate_iterative(&affinity, &knowledge, cfg.omega, t),
        Propagation::OneStep => propagate_one_step(&affinity, &knowledge, cfg.omega),
    }
}
