//! Optimizer family: plain ERM/Adam steps, SAM, and the domain-aware
//! two-pass step.
//!
//! A two-pass step evaluates the objective at θ, forms the ascent direction
//! `ε̂ = ρ·∇L/‖∇L‖₂`, re-evaluates the gradient at θ + ε̂ with the same batch and
//! the same frozen modulator weights, restores θ from a snapshot and hands the
//! perturbed gradient to the base update (Adam by default, SGD optional).

use serde::{Deserialize, Serialize};

use crate::autodiff::{l2, Graph, ParamSet};
use crate::error::{Error, Result};
use crate::gap::{DomainCenterBank, GapState};
use crate::losses::{compose_loss, features, LabeledBatch, LossBreakdown, LossTerms};
use crate::model::EncoderClassifier;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Single pass on cross-entropy with the configured base update.
    Erm,
    /// Single pass on cross-entropy, always with Adam.
    Adam,
    /// Two passes on cross-entropy.
    Sam,
    /// Two passes on the full objective.
    Dasm,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Erm => "erm",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sam => "sam",
            OptimizerKind::Dasm => "dasm",
        }
    }

    pub fn is_two_pass(self) -> bool {
        matches!(self, OptimizerKind::Sam | OptimizerKind::Dasm)
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "erm" => Ok(OptimizerKind::Erm),
            "adam" => Ok(OptimizerKind::Adam),
            "sam" => Ok(OptimizerKind::Sam),
            "dasm" => Ok(OptimizerKind::Dasm),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseUpdate {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Every hyperparameter of a training run. Serialized in full as the config
/// echo of a run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub base_update: BaseUpdate,
    pub lr: f64,
    pub rho: f64,
    pub tau: f64,
    pub momentum: f64,
    pub xi: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Early-stopping patience in epochs without validation-loss improvement.
    pub patience: usize,
    /// Interleave domains so every batch holds all of them when possible.
    pub stratified: bool,
    /// Objective components; `None` picks the optimizer's default.
    pub terms: Option<LossTerms>,
    pub adam: AdamParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Dasm,
            base_update: BaseUpdate::Adam,
            lr: 0.001,
            rho: 0.03,
            tau: 0.1,
            momentum: 0.9,
            xi: 1e-8,
            batch_size: 128,
            epochs: 100,
            seed: 0,
            patience: 10,
            stratified: true,
            terms: None,
            adam: AdamParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be > 0, got {}", self.lr));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return bad(format!("rho must be >= 0, got {}", self.rho));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1], got {}", self.momentum));
        }
        if !(self.xi > 0.0) {
            return bad(format!("xi must be > 0, got {}", self.xi));
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        Ok(())
    }

    /// Objective components actually used.
    pub fn effective_terms(&self) -> LossTerms {
        self.terms.unwrap_or(match self.optimizer {
            OptimizerKind::Dasm => LossTerms::FULL,
            _ => LossTerms::CE_ONLY,
        })
    }

    pub fn effective_base(&self) -> BaseUpdate {
        match self.optimizer {
            OptimizerKind::Adam => BaseUpdate::Adam,
            _ => self.base_update,
        }
    }
}

/// First and second moment buffers over the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub params: AdamParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize, params: AdamParams) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], params, t: 0 }
    }

    /// Bias-corrected Adam step `θ ← θ − η·m̂/(√v̂ + ε)`.
    pub fn apply(&mut self, theta: &mut ParamSet, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.m.len() {
            return Err(Error::Shape(format!("gradient of {} for {} moments", grad.len(), self.m.len())));
        }
        self.t += 1;
        let AdamParams { beta1, beta2, eps } = self.params;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let mut delta = vec![0.0; grad.len()];
        for i in 0..grad.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            delta[i] = -lr * mhat / (vhat.sqrt() + eps);
        }
        theta.add_in_place(&delta)
    }
}

pub fn sgd_apply(theta: &mut ParamSet, grad: &[f64], lr: f64) -> Result<()> {
    let delta: Vec<f64> = grad.iter().map(|g| -lr * g).collect();
    theta.add_in_place(&delta)
}

/// Ascent direction `ρ·g/‖g‖₂`; the zero vector (flagged) when `‖g‖ ≤ ξ`.
pub fn perturbation(grad: &[f64], rho: f64, xi: f64) -> (Vec<f64>, bool) {
    let norm = l2(grad);
    if norm <= xi {
        return (vec![0.0; grad.len()], true);
    }
    let scale = rho / norm;
    (grad.iter().map(|g| g * scale).collect(), false)
}

/// Forward and backward pass counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCounts {
    pub forward: u64,
    pub backward: u64,
    pub steps: u64,
}

/// Diagnostic record of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: u64,
    /// Objective at θ_t.
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub eps_norm: f64,
    /// Set when `‖g‖ ≤ ξ` made the perturbation zero.
    pub zero_grad_flag: bool,
    /// Objective at θ_t + ε̂ (two-pass optimizers only).
    pub perturbed_loss: Option<LossBreakdown>,
    pub gaps: Vec<f64>,
    pub weights: Vec<f64>,
    /// Weights used by the second pass; equal to `weights` by construction.
    pub perturbed_weights: Option<Vec<f64>>,
    /// θ after restoration equals the pre-perturbation snapshot bit-for-bit.
    pub restored_exact: bool,
}

/// Owns one model, its center bank and optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: EncoderClassifier,
    pub bank: DomainCenterBank,
    pub cfg: TrainConfig,
    adam: AdamState,
    counts: PassCounts,
}

impl Trainer {
    pub fn new(model: EncoderClassifier, n_stego: usize, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let n = model.params().numel();
        let bank = DomainCenterBank::new(n_stego, model.config().feature_dim, cfg.momentum, cfg.xi);
        let adam = AdamState::new(n, cfg.adam);
        Ok(Trainer { model, bank, cfg, adam, counts: PassCounts::default() })
    }

    pub fn counts(&self) -> PassCounts {
        self.counts
    }

    pub fn adam_state(&self) -> &AdamState {
        &self.adam
    }

    /// One forward+backward evaluation at the current θ. Returns the
    /// breakdown and the flat gradient.
    fn evaluate(
        &mut self,
        batch: &LabeledBatch,
        gaps: Option<&GapState>,
        update_bank: bool,
    ) -> Result<(LossBreakdown, Vec<f64>, Option<GapState>)> {
        let terms = self.cfg.effective_terms();
        let mut g = Graph::new();
        let feats = features(&mut g, &self.model, batch, self.cfg.xi)?;
        self.counts.forward += 1;
        let mut fresh = None;
        if update_bank {
            self.bank.update_centers(g.value(feats.z_norm), &batch.domain)?;
            fresh = self.bank.gap_state();
        }
        let state = if update_bank { fresh.as_ref() } else { gaps };
        let (root, breakdown) = compose_loss(&mut g, &feats, batch, state, self.cfg.tau, terms)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite {
                step: self.counts.steps,
                detail: format!("loss breakdown {breakdown:?}, gap state {state:?}"),
            });
        }
        let params = self.model.params_mut();
        params.zero_grad();
        g.backward_into(root, params)?;
        self.counts.backward += 1;
        Ok((breakdown, params.flat_grad(), fresh))
    }

    fn base_update(&mut self, grad: &[f64]) -> Result<()> {
        match self.cfg.effective_base() {
            BaseUpdate::Adam => self.adam.apply(self.model.params_mut(), grad, self.cfg.lr),
            BaseUpdate::Sgd => sgd_apply(self.model.params_mut(), grad, self.cfg.lr),
        }
    }

    /// One optimizer step of the configured kind.
    pub fn step(&mut self, batch: &LabeledBatch) -> Result<StepTrace> {
        if self.cfg.optimizer.is_two_pass() {
            self.two_pass_step(batch)
        } else {
            self.single_pass_step(batch)
        }
    }

    fn single_pass_step(&mut self, batch: &LabeledBatch) -> Result<StepTrace> {
        let update_bank = self.cfg.effective_terms().adgm;
        let (loss, grad, gs) = self.evaluate(batch, None, update_bank)?;
        self.base_update(&grad)?;
        self.counts.steps += 1;
        Ok(StepTrace {
            step: self.counts.steps,
            loss,
            grad_norm: l2(&grad),
            eps_norm: 0.0,
            zero_grad_flag: false,
            perturbed_loss: None,
            gaps: gs.as_ref().map(|s| s.gaps.clone()).unwrap_or_default(),
            weights: gs.map(|s| s.weights).unwrap_or_default(),
            perturbed_weights: None,
            restored_exact: true,
        })
    }

    /// The shared two-pass step; SAM and the domain-aware variant differ
    /// only in the objective components.
    fn two_pass_step(&mut self, batch: &LabeledBatch) -> Result<StepTrace> {
        let update_bank = self.cfg.effective_terms().adgm;
        // (a)-(c): centers, gaps and weights, then the objective at θ_t
        let (loss, grad, gs) = self.evaluate(batch, None, update_bank)?;
        // (d)
        let (eps, zero_flag) = perturbation(&grad, self.cfg.rho, self.cfg.xi);
        // (e)
        let before: Vec<f64> = self.model.params().flatten();
        self.model.params_mut().snapshot();
        self.model.params_mut().add_in_place(&eps)?;
        // (f): same batch, same frozen modulator state
        let result = self.evaluate(batch, gs.as_ref(), false);
        // (g) restore even when the perturbed pass failed
        self.model.params_mut().restore()?;
        let (perturbed, grad_adv, _) = result?;
        let after = self.model.params().flatten();
        let restored_exact = before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits());
        // (h)
        self.base_update(&grad_adv)?;
        self.counts.steps += 1;
        let weights = gs.as_ref().map(|s| s.weights.clone()).unwrap_or_default();
        Ok(StepTrace {
            step: self.counts.steps,
            loss,
            grad_norm: l2(&grad),
            eps_norm: l2(&eps),
            zero_grad_flag: zero_flag,
            perturbed_loss: Some(perturbed),
            gaps: gs.as_ref().map(|s| s.gaps.clone()).unwrap_or_default(),
            perturbed_weights: Some(weights.clone()),
            weights,
            restored_exact,
        })
    }
}

/// `dasm_step` with an explicit optimizer kind check.
pub fn dasm_step(trainer: &mut Trainer, batch: &LabeledBatch) -> Result<StepTrace> {
    if trainer.cfg.optimizer != OptimizerKind::Dasm {
        return Err(Error::Config(format!("trainer configured for {}", trainer.cfg.optimizer)));
    }
    trainer.step(batch)
}

pub fn sam_step(trainer: &mut Trainer, batch: &LabeledBatch) -> Result<StepTrace> {
    if trainer.cfg.optimizer != OptimizerKind::Sam {
        return Err(Error::Config(format!("trainer configured for {}", trainer.cfg.optimizer)));
    }
    trainer.step(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::model::ModelConfig;
    use rand::Rng;

    fn toy_batch(seed: u64, b: usize, d: usize, s: usize) -> LabeledBatch {
        let mut rng = crate::seed::rng(seed, &[]);
        let domain: Vec<usize> = (0..b).map(|i| i % (s + 1)).collect();
        let y: Vec<u8> = domain.iter().map(|&k| u8::from(k > 0)).collect();
        let x: Vec<f64> = (0..b * d)
            .map(|i| rng.random_range(-1.0..1.0) + 0.5 * domain[i / d] as f64 * f64::from(i % d == domain[i / d]))
            .collect();
        LabeledBatch::new(Tensor::matrix(b, d, x).unwrap(), y, domain).unwrap()
    }

    fn model() -> EncoderClassifier {
        EncoderClassifier::new(ModelConfig {
            input_dim: 6,
            hidden: vec![12],
            feature_dim: 5,
            init_seed: 4,
            init_scale: 1.0,
        })
        .unwrap()
    }

    #[test]
    fn perturbation_examples() {
        let (e, flag) = perturbation(&[3.0, 4.0], 0.03, 1e-8);
        assert!(!flag);
        assert!((e[0] - 0.018).abs() < 1e-15 && (e[1] - 0.024).abs() < 1e-15);
        assert!((l2(&e) - 0.03).abs() <= 1e-12 * 0.03);
        let (e, _) = perturbation(&[3.0, 4.0], 0.0, 1e-8);
        assert_eq!(e, vec![0.0, 0.0]);
        let (e, flag) = perturbation(&[0.0, 0.0], 0.05, 1e-8);
        assert!(flag);
        assert_eq!(e, vec![0.0, 0.0]);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.tau = 0.0;
        assert!(c.validate().is_err());
        let c = TrainConfig { momentum: 1.5, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        let c = TrainConfig { lr: 0.0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        let c = TrainConfig { rho: -0.1, ..TrainConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn adam_matches_hand_computation_first_step() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::vector(vec![1.0, -2.0]));
        let mut st = AdamState::new(2, AdamParams::default());
        st.apply(&mut p, &[0.5, -0.1], 0.01).unwrap();
        // first bias-corrected step moves each coordinate by ~lr·sign(g)
        let v = p.flatten();
        assert!((v[0] - (1.0 - 0.01 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert!((v[1] - (-2.0 + 0.01 * 0.1 / (0.1 + 1e-8))).abs() < 1e-15);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn two_pass_counts_and_frozen_weights() {
        let cfg = TrainConfig { optimizer: OptimizerKind::Dasm, tau: 0.5, lr: 0.01, ..Default::default() };
        let mut t = Trainer::new(model(), 2, cfg).unwrap();
        for s in 0..5 {
            let tr = dasm_step(&mut t, &toy_batch(s, 12, 6, 2)).unwrap();
            assert_eq!(tr.perturbed_weights.as_ref(), Some(&tr.weights));
            assert!(tr.restored_exact);
            assert!(!tr.weights.is_empty());
            assert!((tr.eps_norm - 0.03).abs() <= 1e-12 * 0.03);
            assert!((tr.loss.total - (tr.loss.ce + tr.loss.dscl + tr.loss.adgm)).abs() < 1e-12);
        }
        assert_eq!(t.counts(), PassCounts { forward: 10, backward: 10, steps: 5 });
        let mut a = Trainer::new(model(), 2, TrainConfig { optimizer: OptimizerKind::Adam, ..Default::default() })
            .unwrap();
        a.step(&toy_batch(0, 12, 6, 2)).unwrap();
        assert_eq!(a.counts(), PassCounts { forward: 1, backward: 1, steps: 1 });
        assert!(sam_step(&mut a, &toy_batch(0, 12, 6, 2)).is_err());
    }

    #[test]
    fn zero_rho_reduces_to_adam_on_ce() {
        let mk = |kind| TrainConfig { optimizer: kind, rho: 0.0, lr: 0.01, ..Default::default() };
        let mut dasm = Trainer::new(
            model(),
            2,
            TrainConfig { terms: Some(LossTerms::CE_ONLY), ..mk(OptimizerKind::Dasm) },
        )
        .unwrap();
        let mut sam = Trainer::new(model(), 2, mk(OptimizerKind::Sam)).unwrap();
        let mut adam = Trainer::new(model(), 2, mk(OptimizerKind::Adam)).unwrap();
        for s in 0..10 {
            let b = toy_batch(100 + s, 12, 6, 2);
            let l1 = dasm.step(&b).unwrap().loss.total;
            let l2 = sam.step(&b).unwrap().loss.total;
            let l3 = adam.step(&b).unwrap().loss.total;
            assert_eq!(l1.to_bits(), l3.to_bits());
            assert_eq!(l2.to_bits(), l3.to_bits());
        }
        assert_eq!(dasm.model.params().flatten(), adam.model.params().flatten());
    }

    #[test]
    fn single_domain_batches_keep_modulator_inactive() {
        let cfg = TrainConfig { optimizer: OptimizerKind::Dasm, ..Default::default() };
        let mut t = Trainer::new(model(), 2, cfg).unwrap();
        let b = toy_batch(1, 12, 6, 0);
        let tr = t.step(&b).unwrap();
        assert_eq!(tr.loss.adgm, 0.0);
        assert_eq!(tr.loss.dscl, 0.0);
        assert!(tr.weights.is_empty());
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut m = model();
        let n = m.params().numel();
        m.params_mut().set_flat(&vec![f64::NAN; n]).unwrap();
        let mut t = Trainer::new(m, 2, TrainConfig::default()).unwrap();
        let r = t.step(&toy_batch(0, 12, 6, 2));
        assert!(matches!(r, Err(Error::NonFinite { .. })), "{r:?}");
    }

    /// Gradient of ½λ₁x² + ½λ₂y².
    fn quad_grad(p: [f64; 2], l: [f64; 2]) -> [f64; 2] {
        [l[0] * p[0], l[1] * p[1]]
    }

    /// One SAM step with plain SGD on the quadratic, computed in closed form.
    fn sam_quadratic_step(p: [f64; 2], l: [f64; 2], rho: f64, lr: f64) -> [f64; 2] {
        let g = quad_grad(p, l);
        let n = (g[0] * g[0] + g[1] * g[1]).sqrt();
        let q = [p[0] + rho * g[0] / n, p[1] + rho * g[1] / n];
        let ga = quad_grad(q, l);
        [p[0] - lr * ga[0], p[1] - lr * ga[1]]
    }

    #[test]
    fn sam_step_emphasizes_the_sharp_axis_on_a_quadratic() {
        // Run the real trainer machinery through a one-parameter-vector model
        // is overkill here; the closed form is the oracle for the update rule,
        // and the trainer's update is the same composition of perturbation
        // and base step.
        let l = [100.0, 1.0];
        let p = [0.1, 0.1];
        let (lr, rho) = (0.001, 0.05);
        let g = quad_grad(p, l);
        let plain = [lr * g[0], lr * g[1]];
        let next = sam_quadratic_step(p, l, rho, lr);
        let sam = [p[0] - next[0], p[1] - next[1]];
        assert!(sam[0] / sam[1] > plain[0] / plain[1]);
        // the same numbers through `perturbation` + `sgd_apply`
        let mut theta = ParamSet::new();
        theta.push("p", Tensor::vector(p.to_vec()));
        let (eps, _) = perturbation(&g, rho, 1e-8);
        let q = [p[0] + eps[0], p[1] + eps[1]];
        sgd_apply(&mut theta, &quad_grad(q, l), lr).unwrap();
        let v = theta.flatten();
        assert!((v[0] - next[0]).abs() < 1e-15 && (v[1] - next[1]).abs() < 1e-15);
    }

    #[test]
    fn sam_on_quadratic_descends_to_origin_below_stability_bound() {
        let l = [4.0, 1.0];
        let (lr, rho) = (0.1, 0.01);
        let mut p = [1.0, -0.5];
        let loss = |p: [f64; 2]| 0.5 * (l[0] * p[0] * p[0] + l[1] * p[1] * p[1]);
        let mut prev = loss(p);
        for _ in 0..40 {
            p = sam_quadratic_step(p, l, rho, lr);
            let cur = loss(p);
            // monotone until the iterate enters the ρ-scale neighborhood of the fixed point
            if prev > 1e-3 {
                assert!(cur < prev);
            }
            prev = cur;
        }
        assert!(loss(p) < 1e-3);
    }
}
