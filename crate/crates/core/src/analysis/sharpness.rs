//! Zeroth-order sharpness `max_{‖ε‖≤ρ} L(θ+ε) − L(θ)`.
//!
//! The maximum is estimated from `m` seeded directions on the ρ-sphere and
//! one ascent candidate: start at `ρ·∇L/‖∇L‖` (or at the best sphere probe
//! when the gradient vanishes) and take `ascent_steps` normalized gradient
//! steps, each projected back to the sphere. Probe `i` depends only on
//! `(seed, i)`, so raising `m` never lowers the estimate.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{axpy, ModelObjective, Objective};
use crate::autodiff::l2;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::EncoderClassifier;
use crate::par::{map_indexed, Exec};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SharpnessConfig {
    pub rho: f64,
    pub m: usize,
    pub seed: u64,
    pub ascent_steps: usize,
}

impl Default for SharpnessConfig {
    fn default() -> Self {
        SharpnessConfig { rho: 0.05, m: 64, seed: 0, ascent_steps: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpnessEstimate {
    /// Reported sharpness, clamped at 0.
    pub value: f64,
    pub raw: f64,
    pub clamped: bool,
    pub base_loss: f64,
    pub best_random: f64,
    pub ascent: f64,
    /// Probes dropped because the loss was non-finite.
    pub excluded: usize,
}

fn sphere_direction(seed_: u64, i: usize, n: usize, rho: f64) -> Vec<f64> {
    let mut rng = seed::rng(seed_, &[31, i as u64]);
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let s = rho / l2(&v);
    v.into_iter().map(|x| x * s).collect()
}

fn onto_sphere(v: &[f64], rho: f64) -> Option<Vec<f64>> {
    let n = l2(v);
    (n > 0.0 && n.is_finite()).then(|| v.iter().map(|x| x * rho / n).collect())
}

pub fn sharpness_estimate(obj: &dyn Objective, cfg: &SharpnessConfig, exec: Exec) -> Result<SharpnessEstimate> {
    if cfg.m == 0 {
        return Err(Error::Config("sharpness needs at least one probe".into()));
    }
    if !(cfg.rho > 0.0 && cfg.rho.is_finite()) {
        return Err(Error::Config(format!("sharpness radius must be > 0, got {}", cfg.rho)));
    }
    let theta = obj.theta();
    let n = theta.len();
    let (base, grad) = obj.grad_at(&theta)?;
    if !base.is_finite() {
        return Err(Error::NonFinite { step: 0, detail: "loss at θ is not finite".into() });
    }
    let probes: Vec<Result<f64>> = map_indexed(exec, cfg.m, |i| {
        let eps = sphere_direction(cfg.seed, i, n, cfg.rho);
        obj.loss_at(&axpy(&theta, 1.0, &eps))
    });
    let mut excluded = 0;
    let mut best_random = f64::NEG_INFINITY;
    let mut best_idx = 0;
    for (i, p) in probes.into_iter().enumerate() {
        let v = p?;
        if !v.is_finite() {
            excluded += 1;
            continue;
        }
        if v > best_random {
            best_random = v;
            best_idx = i;
        }
    }
    let mut eps = onto_sphere(&grad, cfg.rho).unwrap_or_else(|| sphere_direction(cfg.seed, best_idx, n, cfg.rho));
    let mut ascent = f64::NEG_INFINITY;
    for step in 0..=cfg.ascent_steps {
        let (l, g) = obj.grad_at(&axpy(&theta, 1.0, &eps))?;
        if !l.is_finite() {
            excluded += 1;
            break;
        }
        ascent = ascent.max(l);
        if step == cfg.ascent_steps {
            break;
        }
        let Some(dir) = onto_sphere(&g, cfg.rho) else { break };
        match onto_sphere(&axpy(&eps, 1.0, &dir), cfg.rho) {
            Some(next) => eps = next,
            None => break,
        }
    }
    let top = best_random.max(ascent);
    if !top.is_finite() {
        return Err(Error::NonFinite { step: 0, detail: "every sharpness probe was non-finite".into() });
    }
    let raw = top - base;
    Ok(SharpnessEstimate { value: raw.max(0.0), raw, clamped: raw < 0.0, base_loss: base, best_random, ascent, excluded })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpnessReport {
    pub domain_names: Vec<String>,
    pub per_domain: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over domains.
    pub std: f64,
    /// Sharpness of the loss pooled over every domain's rows.
    pub total: f64,
    pub rho: f64,
    pub m: usize,
    pub seed: u64,
    pub clamped: bool,
    pub excluded: usize,
    pub loss: String,
}

/// Per-domain and pooled sharpness of the cross-entropy on `data`.
pub fn zeroth_order_sharpness(
    model: &EncoderClassifier,
    data: &Dataset,
    domain_names: &[String],
    cfg: &SharpnessConfig,
    exec: Exec,
) -> Result<SharpnessReport> {
    let mut per = Vec::with_capacity(domain_names.len());
    let mut clamped = false;
    let mut excluded = 0;
    for k in 1..=domain_names.len() {
        let sub = data.by_source(k);
        let est = sharpness_estimate(&ModelObjective::new(model, &sub)?, cfg, exec)?;
        clamped |= est.clamped;
        excluded += est.excluded;
        per.push(est.value);
    }
    let pooled = sharpness_estimate(&ModelObjective::new(model, data)?, cfg, exec)?;
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    let std = crate::gap::population_std(&per);
    Ok(SharpnessReport {
        domain_names: domain_names.to_vec(),
        per_domain: per,
        mean,
        std,
        total: pooled.value,
        rho: cfg.rho,
        m: cfg.m,
        seed: cfg.seed,
        clamped: clamped || pooled.clamped,
        excluded: excluded + pooled.excluded,
        loss: "cross-entropy".into(),
    })
}
