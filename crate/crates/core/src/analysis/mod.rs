//! Geometry diagnostics around trained parameters: zeroth-order sharpness,
//! proxy A-distance, filter-normalized loss slices and Hessian probes.
//!
//! Every analysis works on flat parameter vectors through [`Objective`] and
//! never writes into the model, so θ is unchanged after any pass.

use std::ops::Range;

use crate::autodiff::{Graph, Tensor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::model::EncoderClassifier;

pub mod hessian;
pub mod landscape;
pub mod pad;
pub mod sharpness;

pub use hessian::{hessian_probe, hvp, HessianConfig, HessianReport};
pub use landscape::{landscape_slice, LandscapeConfig, LandscapeSlice};
pub use pad::{pad_from_error, pad_matrix, proxy_a_distance, FeatureSpace, PadMatrix, PadResult};
pub use sharpness::{sharpness_estimate, zeroth_order_sharpness, SharpnessConfig, SharpnessEstimate, SharpnessReport};

/// A scalar loss over a flat parameter vector.
pub trait Objective: Sync {
    fn theta(&self) -> Vec<f64>;
    /// Per-tensor index ranges of the flat vector.
    fn blocks(&self) -> Vec<Range<usize>>;
    fn loss_at(&self, theta: &[f64]) -> Result<f64>;
    fn grad_at(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// Mean cross-entropy of a model on a fixed dataset.
pub struct ModelObjective<'a> {
    model: &'a EncoderClassifier,
    data: &'a Dataset,
    x: Tensor,
}

impl<'a> ModelObjective<'a> {
    pub fn new(model: &'a EncoderClassifier, data: &'a Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Input("objective over an empty dataset".into()));
        }
        let x = Tensor::matrix(data.len(), data.dim, data.x.clone())?;
        Ok(ModelObjective { model, data, x })
    }

    fn at(&self, theta: &[f64]) -> Result<EncoderClassifier> {
        let mut m = self.model.clone();
        m.params_mut().set_flat(theta)?;
        Ok(m)
    }
}

impl Objective for ModelObjective<'_> {
    fn theta(&self) -> Vec<f64> {
        self.model.params().flatten()
    }

    fn blocks(&self) -> Vec<Range<usize>> {
        self.model.params().blocks()
    }

    fn loss_at(&self, theta: &[f64]) -> Result<f64> {
        let m = self.at(theta)?;
        let (_, logits) = m.forward_values(&self.data.x, self.data.len())?;
        Ok(ce_from_logits(&logits, &self.data.y))
    }

    fn grad_at(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut m = self.at(theta)?;
        let mut g = Graph::new();
        let x = g.constant(&self.x);
        let out = m.forward(&mut g, x)?;
        let ce = cross_entropy(&mut g, out.logits, &self.data.y)?;
        let loss = g.scalar(ce);
        m.params_mut().zero_grad();
        g.backward_into(ce, m.params_mut())?;
        Ok((loss, m.params().flat_grad()))
    }
}

/// Mean cross-entropy of two-class logits.
pub fn ce_from_logits(logits: &[f64], y: &[u8]) -> f64 {
    let mut s = 0.0;
    for (i, &c) in y.iter().enumerate() {
        let (a, b) = (logits[2 * i], logits[2 * i + 1]);
        let m = a.max(b);
        let lse = m + ((a - m).exp() + (b - m).exp()).ln();
        s += lse - logits[2 * i + c as usize];
    }
    s / y.len() as f64
}

/// `½ Σ λᵢ (θᵢ − cᵢ)² + bᵀθ` with a diagonal Hessian, for closed-form checks.
#[derive(Debug, Clone)]
pub struct Quadratic {
    pub lambda: Vec<f64>,
    pub center: Vec<f64>,
    pub linear: Vec<f64>,
    pub theta: Vec<f64>,
    pub blocks: Vec<Range<usize>>,
}

impl Quadratic {
    pub fn diagonal(lambda: Vec<f64>, theta: Vec<f64>) -> Self {
        let n = lambda.len();
        Quadratic { lambda, center: vec![0.0; n], linear: vec![0.0; n], theta, blocks: vec![0..n] }
    }
}

impl Objective for Quadratic {
    fn theta(&self) -> Vec<f64> {
        self.theta.clone()
    }

    fn blocks(&self) -> Vec<Range<usize>> {
        self.blocks.clone()
    }

    fn loss_at(&self, t: &[f64]) -> Result<f64> {
        Ok((0..t.len())
            .map(|i| 0.5 * self.lambda[i] * (t[i] - self.center[i]).powi(2) + self.linear[i] * t[i])
            .sum())
    }

    fn grad_at(&self, t: &[f64]) -> Result<(f64, Vec<f64>)> {
        let g = (0..t.len()).map(|i| self.lambda[i] * (t[i] - self.center[i]) + self.linear[i]).collect();
        Ok((self.loss_at(t)?, g))
    }
}

pub(crate) fn axpy(theta: &[f64], a: f64, v: &[f64]) -> Vec<f64> {
    theta.iter().zip(v).map(|(t, x)| t + a * x).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn model_objective_gradient_matches_differences() {
        let model = EncoderClassifier::new(ModelConfig {
            input_dim: 3,
            hidden: vec![6],
            feature_dim: 4,
            init_seed: 2,
            init_scale: 1.0,
        })
        .unwrap();
        let mut data = Dataset::empty(3);
        data.push(&[0.3, -0.2, 1.0], 0, 0, 1, 0);
        data.push(&[1.1, 0.4, -0.5], 1, 1, 1, 1);
        data.push(&[-0.7, 0.9, 0.2], 1, 1, 1, 2);
        let obj = ModelObjective::new(&model, &data).unwrap();
        let theta = obj.theta();
        let (l, g) = obj.grad_at(&theta).unwrap();
        assert!((l - obj.loss_at(&theta).unwrap()).abs() < 1e-12);
        let h = 1e-6;
        for i in (0..theta.len()).step_by(5) {
            let mut p = theta.clone();
            p[i] += h;
            let up = obj.loss_at(&p).unwrap();
            p[i] -= 2.0 * h;
            let dn = obj.loss_at(&p).unwrap();
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + g[i].abs()), "coord {i}: {fd} vs {}", g[i]);
        }
    }
}
