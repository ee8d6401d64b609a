//! Soft-rank channel activation and the intervention machinery around it.
//!
//! For a pooled feature vector `f` with `K` channels the layer computes
//!
//! ```text
//! r_k = Σ_j σ((f_k − f_j) / τ)          soft rank, in (0, K)
//! M_k = σ(r_k − K/2 + b·K)              channel mask, in (0, 1)
//! out = f ⊙ M
//! ```
//!
//! As `τ → 0` with distinct entries, `r_k` tends to the 1-based hard rank
//! minus one half. Gradients flow through both `f` and `M`.
//!
//! The intervention heads perturb either the unmasked or the masked part of
//! the features:
//!
//! ```text
//! c = (FC_φ f) ⊙ (1 − M) + f ⊙ M
//! s = (FC_ξ f) ⊙ M + f ⊙ M            (SBranch::AsPrinted, default)
//! s = (FC_ξ f) ⊙ M + f ⊙ (1 − M)      (SBranch::Complement)
//! ```

use cprl_autodiff::{sigmoid, Function, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CprlConfig {
    /// Number of channels `K` in the pooled feature vector.
    pub channels: usize,
    /// Mask bias `b` in `[0, 1]`.
    pub bias: f64,
    /// Soft-rank temperature `τ`.
    pub temperature: f64,
    pub s_branch: SBranch,
}

impl Default for CprlConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            bias: 0.4,
            temperature: 1.0,
            s_branch: SBranch::AsPrinted,
        }
    }
}

impl CprlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 {
            return Err(invalid(format!(
                "channel count must be at least 2, got {}",
                self.channels
            )));
        }
        if !(0.0..=1.0).contains(&self.bias) {
            return Err(invalid(format!(
                "mask bias must lie in [0, 1], got {}",
                self.bias
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid(format!(
                "soft-rank temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Constant added to the soft rank inside the mask sigmoid.
    pub fn mask_offset(&self) -> f64 {
        let k = self.channels as f64;
        self.bias * k - k / 2.0
    }
}

/// Which features the ξ-intervention keeps outside the perceptual mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SBranch {
    /// `s = (FC_ξ f) ⊙ M + f ⊙ M`.
    AsPrinted,
    /// `s = (FC_ξ f) ⊙ M + f ⊙ (1 − M)`.
    Complement,
}

/// Intervention symbol driving one training iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionPhase {
    None,
    Sf,
    Nc,
}

impl InterventionPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            InterventionPhase::None => "none",
            InterventionPhase::Sf => "sf",
            InterventionPhase::Nc => "nc",
        }
    }
}

/// Soft rank of a single vector.
pub fn soft_rank(v: &[f64], temperature: f64) -> Vec<f64> {
    v.iter()
        .map(|&vk| v.iter().map(|&vj| sigmoid((vk - vj) / temperature)).sum())
        .collect()
}

/// Channel mask of a single feature vector.
pub fn channel_mask(f: &[f64], cfg: &CprlConfig) -> Vec<f64> {
    let offset = cfg.mask_offset();
    soft_rank(f, cfg.temperature)
        .into_iter()
        .map(|r| sigmoid(r + offset))
        .collect()
}

/// Row-wise soft rank over a `[n, K]` matrix.
struct SoftRankOp {
    temperature: f64,
}

impl Function for SoftRankOp {
    fn name(&self) -> &'static str {
        "soft_rank"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Vec<Tensor> {
        let x = inputs[0];
        let k = x.shape()[1];
        let mut grad = vec![0.0; x.len()];
        for ((row, g), out) in x
            .data()
            .chunks(k)
            .zip(grad_output.data().chunks(k))
            .zip(grad.chunks_mut(k))
        {
            // ∂r_a/∂v_a = Σ_{j≠a} d_aj, ∂r_a/∂v_b = −d_ab, with d symmetric.
            for i in 0..k {
                let mut acc = 0.0;
                for j in 0..k {
                    if i == j {
                        continue;
                    }
                    let s = sigmoid((row[i] - row[j]) / self.temperature);
                    acc += s * (1.0 - s) / self.temperature * (g[i] - g[j]);
                }
                out[i] = acc;
            }
        }
        vec![Tensor::new(x.shape().to_vec(), grad).expect("same shape as input")]
    }
}

/// Soft rank of each row of `f: [n, K]`, recorded on the tape.
pub fn soft_rank_rows(g: &mut Graph, f: Var, temperature: f64) -> Result<Var> {
    let x = g.value(f);
    if x.ndim() != 2 {
        return Err(invalid(format!(
            "soft rank expects [n, K] features, got {:?}",
            x.shape()
        )));
    }
    let k = x.shape()[1];
    let data: Vec<f64> = x
        .data()
        .chunks(k.max(1))
        .flat_map(|row| soft_rank(row, temperature))
        .collect();
    let value = Tensor::new(x.shape().to_vec(), data)?;
    Ok(g.custom(&[f], value, Box::new(SoftRankOp { temperature }))?)
}

/// Mask `M` for each row of `f: [n, K]`.
pub fn mask_rows(g: &mut Graph, f: Var, cfg: &CprlConfig) -> Result<Var> {
    check_channels(g, f, cfg)?;
    let ranks = soft_rank_rows(g, f, cfg.temperature)?;
    let shifted = g.add_scalar(ranks, cfg.mask_offset())?;
    Ok(g.sigmoid(shifted)?)
}

/// Activated features `f ⊙ M` together with the mask that produced them.
pub fn activate(g: &mut Graph, f: Var, cfg: &CprlConfig) -> Result<(Var, Var)> {
    let mask = mask_rows(g, f, cfg)?;
    Ok((g.mul(f, mask)?, mask))
}

/// `f ⊙ M` with a caller-provided mask; used to pin the mask in experiments.
pub fn activate_with_mask(g: &mut Graph, f: Var, mask: Var) -> Result<Var> {
    Ok(g.mul(f, mask)?)
}

fn check_channels(g: &Graph, f: Var, cfg: &CprlConfig) -> Result<()> {
    let shape = g.value(f).shape();
    if shape.len() != 2 || shape[1] != cfg.channels {
        return Err(invalid(format!(
            "channel activation configured for K = {} but features have shape {:?}",
            cfg.channels, shape
        )));
    }
    Ok(())
}

/// Graph handles for one intervention head `x ↦ x Wᵀ + b`.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

/// `c = (FC_φ f) ⊙ (1 − M) + f ⊙ M`.
pub fn intervene_c(g: &mut Graph, f: Var, mask: Var, phi: HeadVars) -> Result<Var> {
    let moved = g.linear(f, phi.weight, phi.bias)?;
    let inv = g.one_minus(mask)?;
    let a = g.mul(moved, inv)?;
    let kept = g.mul(f, mask)?;
    Ok(g.add(a, kept)?)
}

/// `s = (FC_ξ f) ⊙ M + f ⊙ M`, or `+ f ⊙ (1 − M)` for [`SBranch::Complement`].
pub fn intervene_s(g: &mut Graph, f: Var, mask: Var, xi: HeadVars, branch: SBranch) -> Result<Var> {
    let moved = g.linear(f, xi.weight, xi.bias)?;
    let a = g.mul(moved, mask)?;
    let kept = match branch {
        SBranch::AsPrinted => g.mul(f, mask)?,
        SBranch::Complement => {
            let inv = g.one_minus(mask)?;
            g.mul(f, inv)?
        }
    };
    Ok(g.add(a, kept)?)
}

/// `mean(‖y_c − y‖² − ‖y_s − y‖²)` over the batch.
pub fn pns_risk(g: &mut Graph, y_c: Var, y_s: Var, y: Var) -> Result<Var> {
    let sf = sf_term(g, y_c, y)?;
    let nc = sf_term(g, y_s, y)?;
    Ok(g.sub(sf, nc)?)
}

/// `mean(‖y_i − y‖²)`: the sufficiency part of the risk for `y_i = y_c`, and
/// the negated necessity part for `y_i = y_s`.
pub fn sf_term(g: &mut Graph, y_i: Var, y: Var) -> Result<Var> {
    let d = g.sub(y_i, y)?;
    let sq = g.square(d)?;
    Ok(g.mean(sq)?)
}

/// Value-level risk, for reporting and tests.
pub fn pns_risk_value(y_c: &[f64], y_s: &[f64], y: &[f64]) -> Result<f64> {
    if y_c.len() != y.len() || y_s.len() != y.len() {
        return Err(invalid(format!(
            "risk inputs differ in length: y_c {}, y_s {}, y {}",
            y_c.len(),
            y_s.len(),
            y.len()
        )));
    }
    if y.is_empty() {
        return Err(invalid("risk over an empty batch"));
    }
    let total: f64 = y_c
        .iter()
        .zip(y_s)
        .zip(y)
        .map(|((c, s), t)| (c - t) * (c - t) - (s - t) * (s - t))
        .sum();
    Ok(total / y.len() as f64)
}
