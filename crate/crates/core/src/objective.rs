//! Per-example losses over the network's softmax output and their gradients
//! with respect to that output.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transition::ExtendedTransitionMatrix;

/// Floor applied to probabilities inside `log` for plain cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

/// Default floor on the mapped noisy posterior `(Tᵀg)_ỹ`.
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Cross-entropy on the network output itself.
    Ce,
    /// Cross-entropy on `Tᵀg`.
    Forward,
    /// Cross-entropy on `g` weighted by `g_ỹ / (Tᵀg)_ỹ`.
    Reweighted,
    /// Cross-entropy on `Tᵀg` weighted by `g_ỹ / (Tᵀg)_ỹ` ([`reweighted_loss`]).
    ReweightedMapped,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Forward => "forward",
            LossKind::Reweighted => "reweighted",
            LossKind::ReweightedMapped => "reweighted_mapped",
        }
    }

    pub fn needs_matrix(self) -> bool {
        !matches!(self, LossKind::Ce)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::Ce),
            "forward" | "forward_corrected" => Ok(LossKind::Forward),
            "reweighted" => Ok(LossKind::Reweighted),
            "reweighted_mapped" => Ok(LossKind::ReweightedMapped),
            other => Err(Error::config(format!("unknown loss kind `{other}`"))),
        }
    }
}

/// How the importance ratio enters the gradient of the reweighted loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightGradient {
    /// The ratio is a constant within the step.
    #[default]
    StopGradient,
    /// Differentiate through the ratio as well.
    Full,
}

/// Result of one per-example loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub loss: f64,
    /// `∂loss/∂g` for the network output `g`.
    pub grad_output: Vec<f64>,
    /// Importance weight (1 for the unweighted losses).
    pub weight: f64,
    /// Whether a probability floor was active.
    pub floored: bool,
}

fn check_label(label: usize, len: usize) -> Result<()> {
    if label >= len {
        return Err(Error::shape(format!("label {label} out of range for {len} outputs")));
    }
    Ok(())
}

fn mapped(g: &[f64], label: usize, t: &ExtendedTransitionMatrix) -> Result<f64> {
    if g.len() != t.c() + 1 {
        return Err(Error::shape(format!(
            "output of length {} used with a {}×{} transition matrix",
            g.len(),
            t.c() + 1,
            t.c()
        )));
    }
    check_label(label, t.c())?;
    let e = t.entries();
    Ok(g.iter().enumerate().map(|(k, gk)| gk * e[[k, label]]).sum())
}

/// `−log max(probs[label], 1e-12)`.
pub fn ce_loss(probs: &[f64], label: usize) -> Result<f64> {
    check_label(label, probs.len())?;
    Ok(-probs[label].max(PROB_FLOOR).ln())
}

/// `−log max((Tᵀg)_ỹ, ε)`.
pub fn forward_loss(g: &[f64], label: usize, t: &ExtendedTransitionMatrix, epsilon: f64) -> Result<f64> {
    Ok(-mapped(g, label, t)?.max(epsilon).ln())
}

/// `g_ỹ / max((Tᵀg)_ỹ, ε)`.
pub fn importance_weight(g: &[f64], label: usize, t: &ExtendedTransitionMatrix, epsilon: f64) -> Result<f64> {
    Ok(g[label] / mapped(g, label, t)?.max(epsilon))
}

/// `importance_weight · forward_loss`.
pub fn reweighted_loss(g: &[f64], label: usize, t: &ExtendedTransitionMatrix, epsilon: f64) -> Result<f64> {
    let f = mapped(g, label, t)?.max(epsilon);
    Ok(g[label] / f * -f.ln())
}

/// `importance_weight · (−log max(g_ỹ, 1e-12))`.
pub fn reweighted_output_loss(g: &[f64], label: usize, t: &ExtendedTransitionMatrix, epsilon: f64) -> Result<f64> {
    let f = mapped(g, label, t)?.max(epsilon);
    Ok(g[label] / f * -g[label].max(PROB_FLOOR).ln())
}

/// Evaluates the loss of `kind` and its gradient with respect to `g`.
pub fn evaluate(
    kind: LossKind,
    g: &[f64],
    label: usize,
    matrix: Option<&ExtendedTransitionMatrix>,
    epsilon: f64,
    weight_gradient: WeightGradient,
) -> Result<LossEval> {
    let mut grad = vec![0.0; g.len()];
    match kind {
        LossKind::Ce => {
            check_label(label, g.len())?;
            let p = g[label];
            let floored = p < PROB_FLOOR;
            if !floored {
                grad[label] = -1.0 / p;
            }
            Ok(LossEval {
                loss: -p.max(PROB_FLOOR).ln(),
                grad_output: grad,
                weight: 1.0,
                floored,
            })
        }
        LossKind::Forward | LossKind::Reweighted | LossKind::ReweightedMapped => {
            let t = matrix.ok_or_else(|| Error::config(format!("{kind} loss needs a transition matrix")))?;
            let raw = mapped(g, label, t)?;
            let mut floored = raw < epsilon;
            let f = raw.max(epsilon);
            let nll = -f.ln();
            let column = t.entries().column(label);
            if kind == LossKind::Forward {
                if !floored {
                    for (gk, tk) in grad.iter_mut().zip(column) {
                        *gk = -tk / f;
                    }
                }
                return Ok(LossEval {
                    loss: nll,
                    grad_output: grad,
                    weight: 1.0,
                    floored,
                });
            }
            let weight = g[label] / f;
            // the weighted term: −log f for the mapped form, −log g_ỹ otherwise
            let (base, base_floored) = match kind {
                LossKind::ReweightedMapped => (nll, floored),
                _ => (-g[label].max(PROB_FLOOR).ln(), g[label] < PROB_FLOOR),
            };
            match (kind, weight_gradient) {
                (LossKind::ReweightedMapped, WeightGradient::StopGradient) => {
                    if !floored {
                        for (gk, tk) in grad.iter_mut().zip(column) {
                            *gk = -weight * tk / f;
                        }
                    }
                }
                (_, WeightGradient::StopGradient) => {
                    if !base_floored {
                        grad[label] = -weight / g[label];
                    }
                }
                (LossKind::ReweightedMapped, WeightGradient::Full) => {
                    // d/dg_k [g_ỹ · nll(f) / f] with f = Σ_k T_kỹ g_k
                    grad[label] = nll / f;
                    if !floored {
                        let scale = -g[label] * (1.0 + nll) / (f * f);
                        for (gk, tk) in grad.iter_mut().zip(column) {
                            *gk += scale * tk;
                        }
                    }
                }
                (_, WeightGradient::Full) => {
                    // d/dg_k [g_ỹ · ce(g_ỹ) / f]
                    grad[label] = if base_floored { base / f } else { (base - 1.0) / f };
                    if !floored {
                        let scale = -g[label] * base / (f * f);
                        for (gk, tk) in grad.iter_mut().zip(column) {
                            *gk += scale * tk;
                        }
                    }
                }
            }
            floored |= base_floored;
            Ok(LossEval {
                loss: weight * base,
                grad_output: grad,
                weight,
                floored,
            })
        }
    }
}
