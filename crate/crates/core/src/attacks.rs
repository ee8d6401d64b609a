//! ℓ∞-bounded gradient attacks on score regressors.
//!
//! Every attack works on pixel space `[0, 1]` and perturbs each sample along
//! the sign of its own input gradient, with `sign(0) = 0`.

use cprl_autodiff::{signum0, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::metrics::MetricTriple;
use crate::model::Model;

/// Anything that maps an image batch to one score per sample on a graph.
pub trait Scorer: Sync {
    fn check_input(&self, x: &Tensor) -> Result<()>;

    /// Scores `[n]` for the batch `x: [n, ...]`.
    fn score(&self, g: &mut Graph, x: Var) -> Result<Var>;

    fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let s = self.score(&mut g, xv)?;
        Ok(g.value(s).data().to_vec())
    }
}

impl Scorer for Model {
    fn check_input(&self, x: &Tensor) -> Result<()> {
        Model::check_input(self, x)
    }

    fn score(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let p = self.bind(g, |_| false);
        Ok(self.forward(g, &p, x)?.score)
    }
}

/// `h(x) = wᵀ vec(x) + b` per sample; the analytic reference for attack tests.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearScorer {
    pub weight: Tensor,
    pub bias: f64,
}

impl Scorer for LinearScorer {
    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.ndim() < 2 || x.shape()[1..] != *self.weight.shape() || x.shape()[0] == 0 {
            return Err(invalid(format!(
                "linear scorer expects [n, {:?}], got {:?}",
                self.weight.shape(),
                x.shape()
            )));
        }
        Ok(())
    }

    fn score(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = g.value(x).shape()[0];
        let d = self.weight.len();
        let flat = g.reshape(x, &[n, d])?;
        let w = g.constant(self.weight.reshape(&[d, 1])?);
        let h = g.matmul(flat, w)?;
        let h = g.reshape(h, &[n])?;
        Ok(g.add_scalar(h, self.bias)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackFamily {
    Fgsm,
    Pgd,
    ScoreReflection,
}

impl AttackFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackFamily::Fgsm => "fgsm",
            AttackFamily::Pgd => "pgd",
            AttackFamily::ScoreReflection => "score_reflection",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub family: AttackFamily,
    /// ℓ∞ budget in `[0, 1]` pixel units.
    pub epsilon: f64,
    /// PGD step size as a fraction of `epsilon`.
    pub step_ratio: f64,
    /// PGD iterations.
    pub steps: usize,
    /// PGD uniform random start inside the ball.
    pub random_start: bool,
    /// Seed for the random start.
    pub start_seed: u64,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            family: AttackFamily::Fgsm,
            epsilon: 1.0 / 255.0,
            step_ratio: 0.25,
            steps: 10,
            random_start: false,
            start_seed: 0,
        }
    }
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        check_epsilon(self.epsilon)?;
        if self.family == AttackFamily::Pgd
            && (self.steps == 0 || !(self.step_ratio > 0.0 && self.step_ratio.is_finite()))
        {
            return Err(invalid("pgd needs steps >= 1 and a positive step ratio"));
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        self.step_ratio * self.epsilon
    }

    pub fn run(&self, scorer: &dyn Scorer, x: &Tensor, y: &[f64]) -> Result<AdversarialResult> {
        self.validate()?;
        match self.family {
            AttackFamily::Fgsm => fgsm(scorer, x, y, self.epsilon),
            AttackFamily::ScoreReflection => score_reflection(scorer, x, y, self.epsilon),
            AttackFamily::Pgd => {
                let start = self.random_start.then_some(self.start_seed);
                pgd_with_start(
                    scorer,
                    x,
                    y,
                    self.epsilon,
                    self.step_size(),
                    self.steps,
                    start,
                )
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialResult {
    pub x_adv: Tensor,
    /// Mean attack objective at `x_adv`.
    pub loss: f64,
    pub scores_before: Vec<f64>,
    pub scores_after: Vec<f64>,
}

fn check_epsilon(eps: f64) -> Result<()> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(invalid(format!(
            "epsilon must be finite and non-negative, got {eps}"
        )));
    }
    Ok(())
}

fn check_targets(scorer: &dyn Scorer, x: &Tensor, y: &[f64]) -> Result<()> {
    scorer.check_input(x)?;
    if x.shape()[0] != y.len() {
        return Err(invalid(format!(
            "{} images but {} labels",
            x.shape()[0],
            y.len()
        )));
    }
    Ok(())
}

/// Objective `Σ (h(x) − t)²`, its per-sample mean, the scores and `∇x`.
fn objective_grad(
    scorer: &dyn Scorer,
    x: &Tensor,
    targets: &[f64],
) -> Result<(f64, Vec<f64>, Tensor)> {
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let h = scorer.score(&mut g, xv)?;
    let t = g.constant(Tensor::vector(targets.to_vec()));
    let d = g.sub(h, t)?;
    let sq = g.square(d)?;
    let loss = g.sum(sq)?;
    g.backward(loss)?;
    let n = targets.len() as f64;
    Ok((
        g.value(loss).item() / n,
        g.value(h).data().to_vec(),
        g.grad_or_zeros(xv),
    ))
}

fn objective(scorer: &dyn Scorer, x: &Tensor, targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    let h = scorer.predict(x)?;
    let loss = h
        .iter()
        .zip(targets)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / targets.len() as f64;
    Ok((loss, h))
}

/// Projects `v` onto `[x − ε, x + ε] ∩ [0, 1]` so that `|v − x| ≤ ε` holds
/// in floating point, not just in exact arithmetic.
fn project_pixel(v: f64, x: f64, eps: f64) -> f64 {
    let mut p = v.clamp(x - eps, x + eps);
    while (p - x).abs() > eps {
        p = if p > x { p.next_down() } else { p.next_up() };
    }
    p.clamp(0.0, 1.0)
}

fn sign_step(x: &Tensor, grad: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(x.zip_map(grad, "fgsm", |xi, gi| {
        project_pixel(xi + eps * signum0(gi), xi, eps)
    })?)
}

fn single_step(
    scorer: &dyn Scorer,
    x: &Tensor,
    targets: &[f64],
    eps: f64,
) -> Result<AdversarialResult> {
    check_epsilon(eps)?;
    let (_, before, grad) = objective_grad(scorer, x, targets)?;
    let x_adv = sign_step(x, &grad, eps)?;
    let (loss, after) = objective(scorer, &x_adv, targets)?;
    Ok(AdversarialResult {
        x_adv,
        loss,
        scores_before: before,
        scores_after: after,
    })
}

/// `clip(x + ε·sign(∇x Σ(h(x) − y)²))`.
pub fn fgsm(scorer: &dyn Scorer, x: &Tensor, y: &[f64], eps: f64) -> Result<AdversarialResult> {
    check_targets(scorer, x, y)?;
    single_step(scorer, x, y, eps)
}

/// Reflected targets `sign(y − 0.5)`; a label of exactly 0.5 maps to 0.
pub fn reflection_targets(y: &[f64]) -> Vec<f64> {
    y.iter().map(|&v| signum0(v - 0.5)).collect()
}

/// `clip(x + ε·sign(∇x Σ(h(x) − sign(y − 0.5))²))`.
pub fn score_reflection(
    scorer: &dyn Scorer,
    x: &Tensor,
    y: &[f64],
    eps: f64,
) -> Result<AdversarialResult> {
    check_targets(scorer, x, y)?;
    single_step(scorer, x, &reflection_targets(y), eps)
}

/// Projected sign-gradient ascent on `Σ(h(x) − y)²` from `x` itself.
pub fn pgd(
    scorer: &dyn Scorer,
    x: &Tensor,
    y: &[f64],
    eps: f64,
    alpha: f64,
    steps: usize,
) -> Result<AdversarialResult> {
    pgd_with_start(scorer, x, y, eps, alpha, steps, None)
}

/// As [`pgd`]; `start_seed` enables a uniform random start inside the ball.
pub fn pgd_with_start(
    scorer: &dyn Scorer,
    x: &Tensor,
    y: &[f64],
    eps: f64,
    alpha: f64,
    steps: usize,
    start_seed: Option<u64>,
) -> Result<AdversarialResult> {
    check_targets(scorer, x, y)?;
    check_epsilon(eps)?;
    // A zero budget admits a zero step, as produced by step_ratio · ε.
    if steps == 0 || !(alpha.is_finite() && (alpha > 0.0 || (alpha == 0.0 && eps == 0.0))) {
        return Err(invalid("pgd needs steps >= 1 and a positive step size"));
    }
    let project = |v: &Tensor| v.zip_map(x, "pgd", |vi, xi| project_pixel(vi, xi, eps));
    let mut cur = match start_seed {
        None => x.clone(),
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut start = x.clone();
            for v in start.data_mut() {
                *v += if eps > 0.0 {
                    rng.random_range(-eps..=eps)
                } else {
                    0.0
                };
            }
            project(&start)?
        }
    };
    let before = scorer.predict(x)?;
    for _ in 0..steps {
        let (_, _, grad) = objective_grad(scorer, &cur, y)?;
        let stepped = cur.zip_map(&grad, "pgd", |ci, gi| ci + alpha * signum0(gi))?;
        cur = project(&stepped)?;
    }
    let (loss, after) = objective(scorer, &cur, y)?;
    Ok(AdversarialResult {
        x_adv: cur,
        loss,
        scores_before: before,
        scores_after: after,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub metrics: MetricTriple,
}

/// Attacks the whole set at every budget and evaluates the attacked scores.
pub fn attack_sweep(
    scorer: &dyn Scorer,
    x: &Tensor,
    y: &[f64],
    spec: &AttackSpec,
    grid: &[f64],
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(invalid("epsilon grid is empty"));
    }
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(invalid("epsilon grid must be sorted ascending"));
    }
    grid.iter()
        .map(|&eps| {
            let s = AttackSpec {
                epsilon: eps,
                ..*spec
            };
            let res = s.run(scorer, x, y)?;
            Ok(SweepRow {
                epsilon: eps,
                metrics: MetricTriple::compute(&res.scores_after, y)?,
            })
        })
        .collect()
}
