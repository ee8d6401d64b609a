//! Output landscapes and channel activation dumps.

use cprl_autodiff::{signum0, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::Scorer;
use crate::error::{invalid, Result};
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeSpec {
    /// Half-width of the grid in pixel units (1 pixel = 1/255).
    pub extent: f64,
    /// Points per axis; odd values put a cell exactly at the origin.
    pub resolution: usize,
    /// Seed of the random ±1 direction.
    pub direction_seed: u64,
}

impl Default for LandscapeSpec {
    fn default() -> Self {
        Self {
            extent: 1.0,
            resolution: 11,
            direction_seed: 0,
        }
    }
}

impl LandscapeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 {
            return Err(invalid(format!(
                "landscape resolution must be at least 2, got {}",
                self.resolution
            )));
        }
        if !(self.extent >= 0.0 && self.extent.is_finite()) {
            return Err(invalid("landscape extent must be finite and non-negative"));
        }
        Ok(())
    }

    /// Axis coordinates in pixel units, symmetric around 0.
    pub fn axis(&self) -> Vec<f64> {
        let r = self.resolution as f64 - 1.0;
        (0..self.resolution)
            .map(|i| self.extent * (2.0 * i as f64 - r) / r)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landscape {
    /// Pixel-unit offsets along each axis.
    pub axis: Vec<f64>,
    /// `scores[i][j]` at `x + (axis[i]·a + axis[j]·b) / 255`, with `a` the
    /// FGSM sign direction and `b` the random direction.
    pub scores: Vec<Vec<f64>>,
    pub clean: f64,
}

impl Landscape {
    /// `max − min` over the grid.
    pub fn range(&self) -> f64 {
        let all = self.scores.iter().flatten();
        let hi = all.clone().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = all.cloned().fold(f64::INFINITY, f64::min);
        hi - lo
    }
}

/// Seeded ±1 direction with the shape of `like`.
pub fn random_direction(like: &Tensor, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..like.len())
        .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    Tensor::new(like.shape().to_vec(), data).expect("same length")
}

/// Scores over the plane spanned by `sign(∇x (h(x) − y)²)` and a seeded
/// random sign direction around a single image `x: [1, C, H, W]`. All grid
/// points are scored as one batch; no clipping is applied.
pub fn landscape(
    scorer: &dyn Scorer,
    x: &Tensor,
    y: f64,
    spec: &LandscapeSpec,
) -> Result<Landscape> {
    spec.validate()?;
    scorer.check_input(x)?;
    if x.shape()[0] != 1 {
        return Err(invalid(format!(
            "landscape takes one image, got a batch of {}",
            x.shape()[0]
        )));
    }
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let h = scorer.score(&mut g, xv)?;
    let t = g.constant(Tensor::vector(vec![y]));
    let d = g.sub(h, t)?;
    let loss = g.square(d)?;
    let loss = g.sum(loss)?;
    g.backward(loss)?;
    let clean = g.value(h).data()[0];
    let dir_a = g.grad_or_zeros(xv).map(signum0);
    let dir_b = random_direction(x, spec.direction_seed);

    let axis = spec.axis();
    let n = axis.len();
    let mut points = Vec::with_capacity(n * n);
    for &u in &axis {
        for &v in &axis {
            let (su, sv) = (u / 255.0, v / 255.0);
            let data = x
                .data()
                .iter()
                .zip(dir_a.data())
                .zip(dir_b.data())
                .map(|((xi, a), b)| xi + (su * a + sv * b))
                .collect();
            points.push(Tensor::new(x.shape()[1..].to_vec(), data)?);
        }
    }
    let refs: Vec<&Tensor> = points.iter().collect();
    let batch = Tensor::stack(&refs)?;
    let flat = scorer.predict(&batch)?;
    Ok(Landscape {
        axis,
        scores: flat.chunks(n).map(|r| r.to_vec()).collect(),
        clean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationPair {
    pub channel: usize,
    pub clean: f64,
    pub adversarial: f64,
}

/// Batch-mean pooled features for clean and attacked inputs, ordered by
/// clean magnitude, largest first (ties keep channel order).
pub fn activation_dump(
    model: &Model,
    x_clean: &Tensor,
    x_adv: &Tensor,
) -> Result<Vec<ActivationPair>> {
    if x_clean.shape() != x_adv.shape() {
        return Err(invalid(format!(
            "clean batch {:?} and adversarial batch {:?} differ",
            x_clean.shape(),
            x_adv.shape()
        )));
    }
    let mean_rows = |f: Tensor| {
        let (n, k) = (f.shape()[0], f.shape()[1]);
        (0..k)
            .map(|c| (0..n).map(|r| f.data()[r * k + c]).sum::<f64>() / n as f64)
            .collect::<Vec<f64>>()
    };
    let clean = mean_rows(model.features(x_clean)?);
    let adv = mean_rows(model.features(x_adv)?);
    let mut pairs: Vec<ActivationPair> = clean
        .iter()
        .zip(&adv)
        .enumerate()
        .map(|(channel, (&c, &a))| ActivationPair {
            channel,
            clean: c,
            adversarial: a,
        })
        .collect();
    pairs.sort_by(|p, q| q.clean.abs().total_cmp(&p.clean.abs()));
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_is_symmetric_with_exact_center() {
        let s = LandscapeSpec {
            extent: 1.0,
            resolution: 5,
            direction_seed: 0,
        };
        assert_eq!(s.axis(), vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert!(LandscapeSpec { resolution: 1, ..s }.validate().is_err());
    }

    #[test]
    fn random_direction_is_sign_valued_and_seeded() {
        let t = Tensor::zeros(&[1, 1, 4, 4]);
        let a = random_direction(&t, 3);
        assert!(a.data().iter().all(|v| v.abs() == 1.0));
        assert_eq!(a, random_direction(&t, 3));
        assert_ne!(a, random_direction(&t, 4));
    }
}
