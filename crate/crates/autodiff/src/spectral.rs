//! Spectral normalization by power iteration.
//!
//! The left singular-vector estimate is kept between calls so that a single
//! iteration per training step tracks the top singular direction as the
//! weight drifts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

/// Lower clamp applied to the singular-value estimate before dividing.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Persistent power-iteration state for one weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerIteration {
    u: Vec<f64>,
}

impl PowerIteration {
    /// Random unit start vector of length `rows`, drawn from `seed`.
    pub fn new(rows: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        if !normalize(&mut u) {
            u = vec![1.0 / (rows.max(1) as f64).sqrt(); rows];
        }
        Self { u }
    }

    pub fn from_vector(u: Vec<f64>) -> Self {
        Self { u }
    }

    pub fn vector(&self) -> &[f64] {
        &self.u
    }

    /// Runs `iters` rounds of `v ← Wᵀu/‖Wᵀu‖, u ← Wv/‖Wv‖` and returns the
    /// estimate `‖Wv‖` of the largest singular value.
    pub fn estimate(&mut self, w: &Tensor, iters: usize) -> Result<f64> {
        let (rows, cols) = matrix_dims(w)?;
        if iters == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "spectral_normalize",
                reason: "iteration count must be at least 1".into(),
            });
        }
        if self.u.len() != rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "spectral_normalize",
                left: w.shape().to_vec(),
                right: vec![self.u.len()],
            });
        }
        let data = w.data();
        let mut sigma = 0.0;
        for _ in 0..iters {
            let mut v = vec![0.0; cols];
            for (i, &ui) in self.u.iter().enumerate() {
                for (vj, &wij) in v.iter_mut().zip(&data[i * cols..(i + 1) * cols]) {
                    *vj += wij * ui;
                }
            }
            if !normalize(&mut v) {
                return Ok(0.0);
            }
            let mut u: Vec<f64> = (0..rows)
                .map(|i| {
                    data[i * cols..(i + 1) * cols]
                        .iter()
                        .zip(&v)
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect();
            sigma = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !normalize(&mut u) {
                return Ok(0.0);
            }
            self.u = u;
        }
        Ok(sigma)
    }

    /// Runs at least `min_iters` rounds, then keeps iterating until the
    /// estimate moves by at most `rel_tol` relative to itself or `max_iters`
    /// rounds have run in total.
    pub fn estimate_converged(
        &mut self,
        w: &Tensor,
        min_iters: usize,
        rel_tol: f64,
        max_iters: usize,
    ) -> Result<f64> {
        let mut sigma = self.estimate(w, min_iters)?;
        let mut done = min_iters;
        while done < max_iters {
            let next = self.estimate(w, 1)?;
            done += 1;
            let settled = (next - sigma).abs() <= rel_tol * next;
            sigma = next;
            if settled {
                break;
            }
        }
        Ok(sigma)
    }
}

/// Returns `W / σ̂` where `σ̂` is the power-iteration estimate of the largest
/// singular value of `W`, clamped below by [`SIGMA_FLOOR`].
pub fn spectral_normalize(w: &Tensor, state: &mut PowerIteration, iters: usize) -> Result<Tensor> {
    let sigma = state.estimate(w, iters)?.max(SIGMA_FLOOR);
    Ok(w.scale(1.0 / sigma))
}

/// As [`spectral_normalize`], with the estimate iterated to convergence by
/// [`PowerIteration::estimate_converged`].
pub fn spectral_normalize_converged(
    w: &Tensor,
    state: &mut PowerIteration,
    min_iters: usize,
    rel_tol: f64,
    max_iters: usize,
) -> Result<Tensor> {
    let sigma = state
        .estimate_converged(w, min_iters, rel_tol, max_iters)?
        .max(SIGMA_FLOOR);
    Ok(w.scale(1.0 / sigma))
}

/// Largest singular value measured from a fresh deterministic start.
pub fn largest_singular_value(w: &Tensor, iters: usize) -> Result<f64> {
    let (rows, _) = matrix_dims(w)?;
    PowerIteration::new(rows, 0x5eed).estimate(w, iters)
}

fn matrix_dims(w: &Tensor) -> Result<(usize, usize)> {
    match w.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(AutodiffError::InvalidShape {
            op: "spectral_normalize",
            shape: s.to_vec(),
            reason: "expected a matrix",
        }),
    }
}

fn normalize(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= f64::MIN_POSITIVE {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}
