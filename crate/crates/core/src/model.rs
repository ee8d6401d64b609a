//! Desk-scale quality regressors.
//!
//! Both variants share the same predictor:
//!
//! ```text
//! conv3x3(C→w1) relu pool2 → conv3x3(w1→w2) relu pool2 → conv3x3(w2→K) relu → GAP → f(x)
//! score = sigmoid(g_w(f(x) ⊙ M))
//! ```
//!
//! The baseline uses `M = 1`. The CPRL variant computes `M` with the soft-rank
//! channel mask and carries the two intervention heads `φ` and `ξ`, which
//! never enter the clean prediction.

use std::path::Path;

use cprl_autodiff::{checkpoint, spectral_normalize_converged, Graph, PowerIteration, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cprl::{self, CprlConfig, HeadVars, InterventionPhase};
use crate::error::{invalid, CprlError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Baseline,
    Cprl,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Baseline => "baseline",
            ModelKind::Cprl => "cprl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub input_channels: usize,
    /// Square input side; must be divisible by 4.
    pub image_size: usize,
    /// Output widths of the first two conv blocks.
    pub widths: [usize; 2],
    /// Channel activation settings; `cprl.channels` is also the width of the
    /// last conv block for both variants.
    pub cprl: CprlConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Cprl,
            input_channels: 1,
            image_size: 32,
            widths: [8, 16],
            cprl: CprlConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.cprl.validate()?;
        if self.input_channels == 0 || self.widths.contains(&0) {
            return Err(invalid("layer widths must be positive"));
        }
        if self.image_size < 4 || self.image_size % 4 != 0 {
            return Err(invalid(format!(
                "image size must be a positive multiple of 4, got {}",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn architecture(&self) -> String {
        let [w1, w2] = self.widths;
        let k = self.cprl.channels;
        let mut s = format!(
            "conv3x3({}->{w1})+relu+pool2|conv3x3({w1}->{w2})+relu+pool2|conv3x3({w2}->{k})+relu|gap",
            self.input_channels
        );
        if self.kind == ModelKind::Cprl {
            s.push_str(&format!(
                "|softrank_mask(K={k},b={},tau={})",
                self.cprl.bias, self.cprl.temperature
            ));
        }
        s.push_str(&format!("|linear({k}->1)+sigmoid"));
        if self.kind == ModelKind::Cprl {
            s.push_str(&format!("|heads(phi,xi:{k}x{k},sn)"));
        }
        s
    }

    fn layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        let [w1, w2] = self.widths;
        let k = self.cprl.channels;
        let mut l = vec![
            ("conv1.weight", vec![w1, self.input_channels, 3, 3]),
            ("conv1.bias", vec![w1]),
            ("conv2.weight", vec![w2, w1, 3, 3]),
            ("conv2.bias", vec![w2]),
            ("conv3.weight", vec![k, w2, 3, 3]),
            ("conv3.bias", vec![k]),
            ("head.weight", vec![1, k]),
            ("head.bias", vec![1]),
        ];
        if self.kind == ModelKind::Cprl {
            l.extend([
                ("phi.weight", vec![k, k]),
                ("phi.bias", vec![k]),
                ("xi.weight", vec![k, k]),
                ("xi.bias", vec![k]),
            ]);
        }
        l
    }
}

/// Parameter groups updated by different players of the min-max game.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Backbone and regression head, `{θ, w}`.
    Predictor,
    /// Intervention head `φ`.
    Phi,
    /// Intervention head `ξ`.
    Xi,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.starts_with("phi.") {
            ParamGroup::Phi
        } else if name.starts_with("xi.") {
            ParamGroup::Xi
        } else {
            ParamGroup::Predictor
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<(String, Tensor)>,
    phi_power: Option<PowerIteration>,
    xi_power: Option<PowerIteration>,
    forced_mask: Option<f64>,
}

/// Graph leaves for every parameter of a [`Model`], in parameter order.
#[derive(Debug, Clone)]
pub struct Bound {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Leaves of one parameter group, in parameter order.
    pub fn group(&self, group: ParamGroup) -> Vec<Var> {
        self.names
            .iter()
            .zip(&self.vars)
            .filter(|(n, _)| ParamGroup::of(n) == group)
            .map(|(_, v)| *v)
            .collect()
    }
}

/// Nodes produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Pooled features `f(x)`, `[n, K]`.
    pub features: Var,
    /// Channel mask, `[n, K]`; absent for the baseline.
    pub mask: Option<Var>,
    /// Features entering the head.
    pub gated: Var,
    /// Scores in `(0, 1)`, `[n]`.
    pub score: Var,
}

const SPECTRAL_TOL: f64 = 1e-13;
const SPECTRAL_MAX_ITERS: usize = 20_000;
const POWER_SEED_PHI: u64 = 0x7068_6900;
const POWER_SEED_XI: u64 = 0x7869_0000;

impl Model {
    /// Fresh model: uniform fan-in weights, zero biases, intervention heads
    /// spectrally normalized.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let gain: f64 = if name.starts_with("conv") { 6.0 } else { 3.0 };
                    let bound = (gain / fan_in as f64).sqrt();
                    let n = shape.iter().product();
                    Tensor::new(
                        shape,
                        (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
                    )
                    .expect("layout shapes are consistent")
                };
                (name.to_string(), t)
            })
            .collect();
        let k = config.cprl.channels;
        let cprl = config.kind == ModelKind::Cprl;
        let mut model = Self {
            config,
            params,
            phi_power: cprl.then(|| PowerIteration::new(k, seed ^ POWER_SEED_PHI)),
            xi_power: cprl.then(|| PowerIteration::new(k, seed ^ POWER_SEED_XI)),
            forced_mask: None,
        };
        if cprl {
            model.normalize_head(ParamGroup::Phi, 100)?;
            model.normalize_head(ParamGroup::Xi, 100)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| invalid(format!("unknown parameter {name}")))?;
        if slot.1.shape() != value.shape() {
            return Err(invalid(format!(
                "parameter {name} has shape {:?}, got {:?}",
                slot.1.shape(),
                value.shape()
            )));
        }
        slot.1 = value;
        Ok(())
    }

    /// Mutable parameters of one group, in parameter order.
    pub fn group_mut(&mut self, group: ParamGroup) -> Vec<&mut Tensor> {
        self.params
            .iter_mut()
            .filter(|(n, _)| ParamGroup::of(n) == group)
            .map(|(_, t)| t)
            .collect()
    }

    /// Total scalar count of the `{θ, w}` group.
    pub fn predictor_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| ParamGroup::of(n) == ParamGroup::Predictor)
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Pins every mask entry to `value` (CPRL variant only); `None` restores
    /// the soft-rank mask.
    pub fn force_mask(&mut self, value: Option<f64>) {
        self.forced_mask = value;
    }

    pub fn forced_mask(&self) -> Option<f64> {
        self.forced_mask
    }

    pub fn power_state(&self, group: ParamGroup) -> Option<&PowerIteration> {
        match group {
            ParamGroup::Phi => self.phi_power.as_ref(),
            ParamGroup::Xi => self.xi_power.as_ref(),
            ParamGroup::Predictor => None,
        }
    }

    /// Divides the head weight by its power-iteration estimate of the top
    /// singular value. The persisted iteration vector advances by at least
    /// `iters` rounds and then until the estimate settles, so the normalized
    /// head keeps `σ_max ≤ 1 + 1e-6` after every update.
    pub fn normalize_head(&mut self, group: ParamGroup, iters: usize) -> Result<()> {
        let (name, state) = match group {
            ParamGroup::Phi => ("phi.weight", self.phi_power.as_mut()),
            ParamGroup::Xi => ("xi.weight", self.xi_power.as_mut()),
            ParamGroup::Predictor => {
                return Err(invalid("only intervention heads are spectrally normalized"))
            }
        };
        let state = state
            .ok_or_else(|| CprlError::Unsupported("model has no intervention heads".into()))?;
        let slot = self
            .params
            .iter_mut()
            .find(|(n, _)| n == name)
            .expect("cprl models carry both heads");
        slot.1 =
            spectral_normalize_converged(&slot.1, state, iters, SPECTRAL_TOL, SPECTRAL_MAX_ITERS)?;
        Ok(())
    }

    /// Adds every parameter to `g`; `trainable` decides which ones are
    /// differentiated.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(ParamGroup) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(n, t)| g.leaf(t.clone(), trainable(ParamGroup::of(n))))
            .collect();
        Bound {
            names: self.params.iter().map(|(n, _)| n.clone()).collect(),
            vars,
        }
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let c = &self.config;
        let expected = [c.input_channels, c.image_size, c.image_size];
        if x.ndim() != 4 || x.shape()[1..] != expected || x.shape()[0] == 0 {
            return Err(invalid(format!(
                "model expects input [n, {}, {}, {}], got {:?}",
                expected[0],
                expected[1],
                expected[2],
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Forward> {
        self.check_input(g.value(x))?;
        let mut h = x;
        for (i, layer) in ["conv1", "conv2", "conv3"].iter().enumerate() {
            let w = p.get(&format!("{layer}.weight"));
            let b = p.get(&format!("{layer}.bias"));
            h = g.conv2d(h, w, Some(b), 1)?;
            h = g.relu(h)?;
            if i < 2 {
                h = g.avg_pool2(h)?;
            }
        }
        let features = g.global_avg_pool(h)?;
        let (gated, mask) = match self.config.kind {
            ModelKind::Baseline => (features, None),
            ModelKind::Cprl => match self.forced_mask {
                Some(v) => {
                    let shape = g.value(features).shape().to_vec();
                    let m = g.constant(Tensor::full(&shape, v));
                    (cprl::activate_with_mask(g, features, m)?, Some(m))
                }
                None => {
                    let (out, m) = cprl::activate(g, features, &self.config.cprl)?;
                    (out, Some(m))
                }
            },
        };
        let score = self.head(g, p, gated)?;
        Ok(Forward {
            features,
            mask,
            gated,
            score,
        })
    }

    /// `sigmoid(g_w(z))` for features `z: [n, K]`, as an `[n]` vector.
    pub fn head(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        let logits = g.linear(z, p.get("head.weight"), p.get("head.bias"))?;
        let n = g.value(logits).shape()[0];
        let flat = g.reshape(logits, &[n])?;
        Ok(g.sigmoid(flat)?)
    }

    /// Score through the φ head (`Sf`) or the ξ head (`Nc`).
    pub fn intervened(
        &self,
        g: &mut Graph,
        p: &Bound,
        fwd: &Forward,
        phase: InterventionPhase,
    ) -> Result<Var> {
        let mask = match (self.config.kind, fwd.mask) {
            (ModelKind::Cprl, Some(m)) => m,
            _ => {
                return Err(CprlError::Unsupported(
                    "interventions need the CPRL variant".into(),
                ))
            }
        };
        let z = match phase {
            InterventionPhase::Sf => {
                let phi = HeadVars {
                    weight: p.get("phi.weight"),
                    bias: p.get("phi.bias"),
                };
                cprl::intervene_c(g, fwd.features, mask, phi)?
            }
            InterventionPhase::Nc => {
                let xi = HeadVars {
                    weight: p.get("xi.weight"),
                    bias: p.get("xi.bias"),
                };
                cprl::intervene_s(g, fwd.features, mask, xi, self.config.cprl.s_branch)?
            }
            InterventionPhase::None => return Err(invalid("intervention phase must be sf or nc")),
        };
        self.head(g, p, z)
    }

    /// Clean scores, one per sample.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, |_| false);
        let xv = g.constant(x.clone());
        let fwd = self.forward(&mut g, &p, xv)?;
        Ok(g.value(fwd.score).data().to_vec())
    }

    /// Clean scores and scores through the intervention selected by `phase`.
    pub fn predict_intervened(
        &self,
        x: &Tensor,
        phase: InterventionPhase,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.config.kind != ModelKind::Cprl {
            return Err(CprlError::Unsupported(
                "the baseline model has no intervention heads".into(),
            ));
        }
        if phase == InterventionPhase::None {
            return Err(invalid("intervention phase must be sf or nc"));
        }
        self.check_input(x)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, |_| false);
        let xv = g.constant(x.clone());
        let fwd = self.forward(&mut g, &p, xv)?;
        let yi = self.intervened(&mut g, &p, &fwd, phase)?;
        Ok((
            g.value(fwd.score).data().to_vec(),
            g.value(yi).data().to_vec(),
        ))
    }

    /// Pooled features `f(x)` before the mask, `[n, K]`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, |_| false);
        let xv = g.constant(x.clone());
        let fwd = self.forward(&mut g, &p, xv)?;
        Ok(g.value(fwd.features).clone())
    }

    /// Checkpoint records: parameters in layout order, then the power
    /// iteration vectors of the heads.
    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        let mut out = self.params.clone();
        for (name, state) in [
            ("phi.power_u", &self.phi_power),
            ("xi.power_u", &self.xi_power),
        ] {
            if let Some(s) = state {
                out.push((name.to_string(), Tensor::vector(s.vector().to_vec())));
            }
        }
        out
    }

    pub fn from_records(config: ModelConfig, records: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let expected = model.to_records();
        if records.len() != expected.len() {
            return Err(invalid(format!(
                "checkpoint holds {} records, model {} expects {}",
                records.len(),
                config.architecture(),
                expected.len()
            )));
        }
        for ((name, t), (exp_name, exp_t)) in records.iter().zip(&expected) {
            if name != exp_name || t.shape() != exp_t.shape() {
                return Err(invalid(format!(
                    "checkpoint record {name} {:?} does not match expected {exp_name} {:?}",
                    t.shape(),
                    exp_t.shape()
                )));
            }
        }
        let mut it = records.into_iter();
        for slot in model.params.iter_mut() {
            slot.1 = it.next().expect("length checked").1;
        }
        if model.config.kind == ModelKind::Cprl {
            model.phi_power = Some(PowerIteration::from_vector(
                it.next().expect("length checked").1.into_data(),
            ));
            model.xi_power = Some(PowerIteration::from_vector(
                it.next().expect("length checked").1.into_data(),
            ));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_records()).map_err(|e| CprlError::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path, config: ModelConfig) -> Result<Self> {
        let wrap = |reason: String| CprlError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let records = checkpoint::load(path).map_err(|e| wrap(e.to_string()))?;
        Self::from_records(config, records).map_err(|e| wrap(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: ModelKind) -> ModelConfig {
        ModelConfig {
            kind,
            input_channels: 1,
            image_size: 8,
            widths: [3, 4],
            cprl: CprlConfig {
                channels: 5,
                ..CprlConfig::default()
            },
        }
    }

    #[test]
    fn zero_head_scores_half() {
        let mut m = Model::new(small(ModelKind::Cprl), 1).unwrap();
        m.set_param("head.weight", Tensor::zeros(&[1, 5])).unwrap();
        let s = m.predict(&Tensor::zeros(&[2, 1, 8, 8])).unwrap();
        assert_eq!(s, vec![0.5, 0.5]);
    }

    #[test]
    fn wrong_shape_rejected() {
        let m = Model::new(small(ModelKind::Baseline), 1).unwrap();
        assert!(m.predict(&Tensor::zeros(&[1, 1, 8, 4])).is_err());
        assert!(m.predict(&Tensor::zeros(&[1, 8, 8])).is_err());
        assert!(m.predict(&Tensor::zeros(&[0, 1, 8, 8])).is_err());
    }

    #[test]
    fn baseline_has_no_interventions() {
        let m = Model::new(small(ModelKind::Baseline), 1).unwrap();
        let err = m.predict_intervened(&Tensor::zeros(&[1, 1, 8, 8]), InterventionPhase::Sf);
        assert!(matches!(err, Err(CprlError::Unsupported(_))));
    }

    #[test]
    fn predictor_parameter_counts_match() {
        let b = Model::new(small(ModelKind::Baseline), 3).unwrap();
        let c = Model::new(small(ModelKind::Cprl), 3).unwrap();
        assert_eq!(b.predictor_param_count(), c.predictor_param_count());
        assert!(c.params().len() > b.params().len());
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = small(ModelKind::Cprl);
        cfg.image_size = 10;
        assert!(Model::new(cfg, 0).is_err());
        let mut cfg = small(ModelKind::Cprl);
        cfg.cprl.channels = 1;
        assert!(Model::new(cfg, 0).is_err());
    }

    #[test]
    fn records_reject_other_architecture() {
        let c = Model::new(small(ModelKind::Cprl), 3).unwrap();
        assert!(Model::from_records(small(ModelKind::Baseline), c.to_records()).is_err());
        let back = Model::from_records(small(ModelKind::Cprl), c.to_records()).unwrap();
        assert_eq!(back, c);
    }
}
