//! Hessian top eigenvalue and trace from gradient-difference
//! Hessian-vector products.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{axpy, Objective};
use crate::autodiff::{dot, l2};
use crate::error::{Error, Result};
use crate::par::{map_indexed, Exec};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HessianConfig {
    pub iters: usize,
    pub tol: f64,
    pub probes: usize,
    pub seed: u64,
}

impl Default for HessianConfig {
    fn default() -> Self {
        HessianConfig { iters: 100, tol: 1e-4, probes: 32, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianReport {
    pub lambda_max: f64,
    pub converged: bool,
    pub iterations: usize,
    pub trace: f64,
    /// Standard error of the Hutchinson mean.
    pub trace_se: f64,
    pub probes: usize,
    pub seed: u64,
}

/// `(∇L(θ+hv) − ∇L(θ−hv)) / 2h` with `h = 1e-4·(1+‖θ‖)/‖v‖`.
pub fn hvp(obj: &dyn Objective, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let vn = l2(v);
    if vn == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let h = 1e-4 * (1.0 + l2(theta)) / vn;
    let (_, gp) = obj.grad_at(&axpy(theta, h, v))?;
    let (_, gm) = obj.grad_at(&axpy(theta, -h, v))?;
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
}

pub fn hessian_probe(obj: &dyn Objective, cfg: &HessianConfig, exec: Exec) -> Result<HessianReport> {
    if cfg.iters == 0 || cfg.probes == 0 {
        return Err(Error::Config("Hessian probe needs at least one iteration and one probe".into()));
    }
    let theta = obj.theta();
    let n = theta.len();
    let mut rng = seed::rng(cfg.seed, &[61]);
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let vn = l2(&v);
    v.iter_mut().for_each(|x| *x /= vn);
    let mut lambda = 0.0;
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=cfg.iters {
        iterations = it;
        let w = hvp(obj, &theta, &v)?;
        let next = dot(&v, &w);
        let wn = l2(&w);
        if !next.is_finite() {
            break;
        }
        if wn == 0.0 {
            lambda = 0.0;
            converged = true;
            break;
        }
        let done = it > 1 && (next - lambda).abs() < cfg.tol * next.abs().max(f64::MIN_POSITIVE);
        lambda = next;
        v = w.into_iter().map(|x| x / wn).collect();
        if done {
            converged = true;
            break;
        }
    }
    let samples: Vec<Result<f64>> = map_indexed(exec, cfg.probes, |p| {
        let mut r = seed::rng(cfg.seed, &[62, p as u64]);
        let z: Vec<f64> = (0..n).map(|_| if r.random::<bool>() { 1.0 } else { -1.0 }).collect();
        Ok(dot(&z, &hvp(obj, &theta, &z)?))
    });
    let samples = samples.into_iter().collect::<Result<Vec<f64>>>()?;
    let k = samples.len() as f64;
    let trace = samples.iter().sum::<f64>() / k;
    let var = if samples.len() > 1 {
        samples.iter().map(|s| (s - trace).powi(2)).sum::<f64>() / (k - 1.0)
    } else {
        0.0
    };
    Ok(HessianReport {
        lambda_max: lambda,
        converged,
        iterations,
        trace,
        trace_se: (var / k).sqrt(),
        probes: cfg.probes,
        seed: cfg.seed,
    })
}
