//! Alternating min-max training.
//!
//! Each iteration `t` takes its phase from a repeating cycle (default
//! `[none, sf, nc]`):
//!
//! * `none`: one AdamW step of `{θ, w}` on `MSE(y, label)`.
//! * `sf`: ascent of `φ` on `mean((y_c − ŷ)²)`, spectral normalization of
//!   `φ`, then one step of `{θ, w}` on the minimized objective.
//! * `nc`: ascent of `ξ` on `−mean((y_s − ŷ)²)`, normalization of `ξ`, then
//!   the same `{θ, w}` step.
//!
//! `ŷ` is the clean prediction with gradients stopped. The minimized objective
//! is `MSE + R` with `R = mean((y_c − ŷ)² − (y_s − ŷ)²)` by default, or only
//! the active branch of `R` with [`MinObjective::Branch`]. Every gradient is
//! clipped to a global norm before its optimizer step.

use cprl_autodiff::{Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cprl::{self, InterventionPhase};
use crate::data::Dataset;
use crate::error::{invalid, CprlError, Result};
use crate::metrics::MetricTriple;
use crate::model::{Model, ModelKind, ParamGroup};
use crate::optim::{clip_global_norm, AdamW, AdamWConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinObjective {
    /// `MSE + SF + NC` in both intervention phases.
    Full,
    /// `MSE + SF` in the sf phase and `MSE − NC` in the nc phase.
    Branch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Disables every intervention phase when false (mask-only training).
    pub pns: bool,
    pub phase_cycle: Vec<InterventionPhase>,
    pub min_objective: MinObjective,
    /// Ascent steps of the active head before each `{θ, w}` step.
    pub ascent_steps: usize,
    /// Power iterations per spectral normalization.
    pub power_iterations: usize,
    /// Global gradient-norm cap applied to every update.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            optimizer: AdamWConfig::default(),
            pns: true,
            phase_cycle: vec![
                InterventionPhase::None,
                InterventionPhase::Sf,
                InterventionPhase::Nc,
            ],
            min_objective: MinObjective::Full,
            ascent_steps: 1,
            power_iterations: 1,
            grad_clip: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if self.phase_cycle.is_empty() {
            return Err(invalid("phase cycle is empty"));
        }
        if self.power_iterations == 0 {
            return Err(invalid("power iterations must be at least 1"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(invalid("gradient clip norm must be positive"));
        }
        Ok(())
    }

    /// Phase of iteration `t` for a model of `kind`.
    pub fn phase_at(&self, kind: ModelKind, t: u64) -> InterventionPhase {
        if !self.pns || kind == ModelKind::Baseline {
            return InterventionPhase::None;
        }
        self.phase_cycle[(t % self.phase_cycle.len() as u64) as usize]
    }
}

/// Optimizer states of the three players plus the iteration counter.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub predictor: AdamW,
    pub phi: AdamW,
    pub xi: AdamW,
    pub iteration: u64,
}

impl TrainerState {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            predictor: AdamW::new(cfg.optimizer),
            phi: AdamW::new(cfg.optimizer),
            xi: AdamW::new(cfg.optimizer),
            iteration: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: InterventionPhase,
    /// Minimized objective before the `{θ, w}` update.
    pub loss: f64,
    pub mse: f64,
    /// Full risk `R` before the `{θ, w}` update (intervention phases only).
    pub risk: Option<f64>,
    /// Head objective before the last ascent step.
    pub ascent: Option<f64>,
}

fn require_cprl(model: &Model, phase: InterventionPhase) -> Result<()> {
    if phase != InterventionPhase::None && model.kind() != ModelKind::Cprl {
        return Err(CprlError::Unsupported(format!(
            "phase {} needs the CPRL model",
            phase.as_str()
        )));
    }
    Ok(())
}

fn apply(
    model: &mut Model,
    g: &Graph,
    vars: &[Var],
    group: ParamGroup,
    opt: &mut AdamW,
    clip: f64,
) -> Result<()> {
    let mut grads: Vec<Tensor> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();
    clip_global_norm(&mut grads, clip);
    let mut params = model.group_mut(group);
    opt.step(&mut params, &grads)
}

/// One ascent step of the head selected by `phase`, followed by its spectral
/// normalization. Returns the head objective before the step.
pub fn ascent_step(
    model: &mut Model,
    state: &mut TrainerState,
    x: &Tensor,
    phase: InterventionPhase,
    cfg: &TrainConfig,
) -> Result<f64> {
    require_cprl(model, phase)?;
    let group = match phase {
        InterventionPhase::Sf => ParamGroup::Phi,
        InterventionPhase::Nc => ParamGroup::Xi,
        InterventionPhase::None => return Err(invalid("the none phase has no ascent step")),
    };
    let mut g = Graph::new();
    let p = model.bind(&mut g, |grp| grp == group);
    let xv = g.constant(x.clone());
    let fwd = model.forward(&mut g, &p, xv)?;
    let y = g.detach(fwd.score);
    let yi = model.intervened(&mut g, &p, &fwd, phase)?;
    let term = cprl::sf_term(&mut g, yi, y)?;
    // φ maximizes the sufficiency term; ξ maximizes its negation. Both are
    // applied as descent on the negated objective.
    let (objective, descent) = match phase {
        InterventionPhase::Sf => (g.value(term).item(), g.mul_scalar(term, -1.0)?),
        _ => (-g.value(term).item(), term),
    };
    g.backward(descent)?;
    let vars = p.group(group);
    let opt = if group == ParamGroup::Phi {
        &mut state.phi
    } else {
        &mut state.xi
    };
    apply(model, &g, &vars, group, opt, cfg.grad_clip)?;
    model.normalize_head(group, cfg.power_iterations)?;
    Ok(objective)
}

/// One minimizing step of `{θ, w}` for `phase`.
pub fn min_step(
    model: &mut Model,
    state: &mut TrainerState,
    x: &Tensor,
    labels: &[f64],
    phase: InterventionPhase,
    cfg: &TrainConfig,
) -> Result<StepRecord> {
    require_cprl(model, phase)?;
    if labels.len() != x.shape().first().copied().unwrap_or(0) {
        return Err(invalid(format!(
            "{} labels for batch {:?}",
            labels.len(),
            x.shape()
        )));
    }
    let mut g = Graph::new();
    let p = model.bind(&mut g, |grp| grp == ParamGroup::Predictor);
    let xv = g.constant(x.clone());
    let fwd = model.forward(&mut g, &p, xv)?;
    let target = g.constant(Tensor::vector(labels.to_vec()));
    let mse = g.mse(fwd.score, target)?;
    let (loss, risk) = if phase == InterventionPhase::None {
        (mse, None)
    } else {
        let y = g.detach(fwd.score);
        let y_c = model.intervened(&mut g, &p, &fwd, InterventionPhase::Sf)?;
        let y_s = model.intervened(&mut g, &p, &fwd, InterventionPhase::Nc)?;
        let sf = cprl::sf_term(&mut g, y_c, y)?;
        let nc = cprl::sf_term(&mut g, y_s, y)?;
        let risk = g.sub(sf, nc)?;
        let term = match (cfg.min_objective, phase) {
            (MinObjective::Full, _) => risk,
            (MinObjective::Branch, InterventionPhase::Sf) => sf,
            (MinObjective::Branch, _) => g.mul_scalar(nc, -1.0)?,
        };
        (g.add(mse, term)?, Some(g.value(risk).item()))
    };
    let record = StepRecord {
        phase,
        loss: g.value(loss).item(),
        mse: g.value(mse).item(),
        risk,
        ascent: None,
    };
    g.backward(loss)?;
    let vars = p.group(ParamGroup::Predictor);
    apply(
        model,
        &g,
        &vars,
        ParamGroup::Predictor,
        &mut state.predictor,
        cfg.grad_clip,
    )?;
    Ok(record)
}

/// Ascent steps for the active head (if any) followed by the `{θ, w}` step.
pub fn train_step(
    model: &mut Model,
    state: &mut TrainerState,
    x: &Tensor,
    labels: &[f64],
    phase: InterventionPhase,
    cfg: &TrainConfig,
) -> Result<StepRecord> {
    require_cprl(model, phase)?;
    let mut ascent = None;
    if phase != InterventionPhase::None {
        for _ in 0..cfg.ascent_steps {
            ascent = Some(ascent_step(model, state, x, phase, cfg)?);
        }
    }
    let mut record = min_step(model, state, x, labels, phase, cfg)?;
    record.ascent = ascent;
    state.iteration += 1;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub split: String,
    pub metrics: MetricTriple,
    /// Mean minimized objective over the epoch.
    pub loss: f64,
    /// Iterations spent in the none / sf / nc phases.
    pub phase_counts: [usize; 3],
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Parameters after the last epoch.
    pub model: Model,
    /// Parameters of the epoch with the highest held-out SRCC.
    pub best: Model,
    pub best_epoch: Option<usize>,
    pub curve: Vec<CurveRow>,
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<MetricTriple> {
    let (x, y) = data.all()?;
    MetricTriple::compute(&model.predict(&x)?, &y)
}

/// Trains for `cfg.epochs` epochs over shuffled mini-batches and evaluates on
/// `test` after each epoch.
pub fn fit(
    model: Model,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(CprlError::Data(
            "training needs non-empty train and test sets".into(),
        ));
    }
    let mut model = model;
    let mut state = TrainerState::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best = (model.clone(), None::<usize>, None::<f64>);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut counts = [0usize; 3];
        let mut total = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch(chunk)?;
            let phase = cfg.phase_at(model.kind(), state.iteration);
            let rec = train_step(&mut model, &mut state, &x, &y, phase, cfg)?;
            counts[phase as usize] += 1;
            total += rec.loss;
            steps += 1;
        }
        let metrics = evaluate(&model, test)?;
        curve.push(CurveRow {
            epoch,
            split: "test".into(),
            metrics,
            loss: total / steps as f64,
            phase_counts: counts,
        });
        let better = match (metrics.srcc, best.2) {
            (Some(s), Some(b)) => s > b,
            (Some(_), None) => true,
            (None, _) => best.1.is_none() && epoch == 1,
        };
        if better {
            best = (model.clone(), Some(epoch), metrics.srcc);
        }
    }
    Ok(FitOutcome {
        model,
        best: best.0,
        best_epoch: best.1,
        curve,
    })
}
