//! Adaptive domain-gap modulation.
//!
//! [`DomainCenterBank`] tracks an EMA centroid of normalized features for the
//! cover domain (index 0) and every stego domain `1..=S`. From the EMA centers
//! the modulator derives per-domain gaps `g_k = ‖c_k − c_cover‖₂`, an adaptive
//! temperature `τ_g = std(g) + ξ` and softmax weights over `−g_k / τ_g` that
//! favor the hardest (closest-to-cover) domains. The weights are frozen for a
//! whole optimizer step.
//!
//! The loss term `1 − Σ w_k g_k / (max g + ξ)` is evaluated with gaps taken
//! from the current batch's per-domain feature means against the EMA cover
//! center, so its gradient reaches the encoder through the batch means only.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DomainCenterBank {
    dim: usize,
    centers: Vec<Vec<f64>>,
    initialized: Vec<bool>,
    momentum: f64,
    xi: f64,
    step: u64,
}

/// Bank metadata stored in checkpoint headers; centers follow as raw floats.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BankHeader {
    pub dim: usize,
    pub n_domains: usize,
    pub momentum: f64,
    pub xi: f64,
    pub step: u64,
    pub initialized: Vec<bool>,
}

impl DomainCenterBank {
    /// Bank for `n_stego` stego domains plus cover, features of dimension `dim`.
    pub fn new(n_stego: usize, dim: usize, momentum: f64, xi: f64) -> Self {
        DomainCenterBank {
            dim,
            centers: vec![vec![0.0; dim]; n_stego + 1],
            initialized: vec![false; n_stego + 1],
            momentum,
            xi,
            step: 0,
        }
    }

    pub fn n_stego(&self) -> usize {
        self.centers.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn center(&self, k: usize) -> Option<&[f64]> {
        self.initialized.get(k).copied().unwrap_or(false).then(|| self.centers[k].as_slice())
    }

    pub fn is_initialized(&self, k: usize) -> bool {
        self.initialized.get(k).copied().unwrap_or(false)
    }

    /// EMA update from detached normalized features `z` (row-major, `dim`
    /// columns). The first observation of a domain sets its center to the
    /// batch mean; absent domains are untouched.
    pub fn update_centers(&mut self, z: &[f64], domains: &[usize]) -> Result<()> {
        if z.len() != domains.len() * self.dim {
            return Err(Error::Shape(format!(
                "{} feature values for {} rows of dim {}",
                z.len(),
                domains.len(),
                self.dim
            )));
        }
        if let Some(&bad) = domains.iter().find(|&&d| d >= self.centers.len()) {
            return Err(Error::Index(format!("domain {bad} exceeds S = {}", self.n_stego())));
        }
        let k = self.centers.len();
        let mut sums = vec![vec![0.0; self.dim]; k];
        let mut counts = vec![0usize; k];
        for (row, &d) in z.chunks(self.dim.max(1)).zip(domains) {
            sums[d].iter_mut().zip(row).for_each(|(s, v)| *s += v);
            counts[d] += 1;
        }
        let mu = self.momentum;
        for d in 0..k {
            if counts[d] == 0 {
                continue;
            }
            let n = counts[d] as f64;
            let mean = sums[d].iter().map(|s| s / n);
            if self.initialized[d] {
                self.centers[d].iter_mut().zip(mean).for_each(|(c, m)| *c = mu * *c + (1.0 - mu) * m);
            } else {
                self.centers[d].iter_mut().zip(mean).for_each(|(c, m)| *c = m);
                self.initialized[d] = true;
            }
        }
        self.step += 1;
        Ok(())
    }

    /// Gaps, temperature and weights from the EMA centers, or `None` while the
    /// cover center or every stego center is still uninitialized (the
    /// modulator is inactive and contributes 0).
    pub fn gap_state(&self) -> Option<GapState> {
        let cover = self.center(0)?;
        let domains: Vec<usize> = (1..self.centers.len()).filter(|&k| self.initialized[k]).collect();
        if domains.is_empty() {
            return None;
        }
        let gaps = domains.iter().map(|&k| euclid(&self.centers[k], cover)).collect();
        let mut gs = GapState::from_gaps(domains.clone(), gaps, self.xi);
        gs.cover_center = cover.to_vec();
        gs.centers = domains.iter().map(|&k| self.centers[k].clone()).collect();
        Some(gs)
    }

    pub(crate) fn header(&self) -> BankHeader {
        BankHeader {
            dim: self.dim,
            n_domains: self.centers.len(),
            momentum: self.momentum,
            xi: self.xi,
            step: self.step,
            initialized: self.initialized.clone(),
        }
    }

    pub(crate) fn flat_centers(&self) -> Vec<f64> {
        self.centers.concat()
    }

    pub(crate) fn from_parts(h: &BankHeader, flat: &[f64]) -> Result<Self> {
        if flat.len() != h.dim * h.n_domains || h.initialized.len() != h.n_domains || h.n_domains == 0 {
            return Err(Error::Input("center bank payload does not match header".into()));
        }
        Ok(DomainCenterBank {
            dim: h.dim,
            centers: flat.chunks(h.dim.max(1)).map(<[f64]>::to_vec).collect(),
            initialized: h.initialized.clone(),
            momentum: h.momentum,
            xi: h.xi,
            step: h.step,
        })
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Per-step modulator state. Weights are constants for the whole step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapState {
    /// Stego domain ids in the order of `gaps` and `weights`.
    pub domains: Vec<usize>,
    pub gaps: Vec<f64>,
    pub tau_g: f64,
    pub weights: Vec<f64>,
    pub xi: f64,
    #[serde(skip)]
    pub cover_center: Vec<f64>,
    #[serde(skip)]
    pub centers: Vec<Vec<f64>>,
}

/// Population standard deviation.
pub fn population_std(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Adaptive temperature and softmax weights over the negated gaps.
pub fn adaptive_weights(gaps: &[f64], xi: f64) -> (f64, Vec<f64>) {
    let tau = population_std(gaps) + xi;
    let logits: Vec<f64> = gaps.iter().map(|g| -g / tau).collect();
    let peak = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - peak).exp()).collect();
    let z: f64 = exps.iter().sum();
    (tau, exps.into_iter().map(|e| e / z).collect())
}

/// `1 − Σ w_k g_k / (max_k g_k + ξ)` on plain values.
pub fn adgm_value(gaps: &[f64], weights: &[f64], xi: f64) -> f64 {
    let max = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let num: f64 = gaps.iter().zip(weights).map(|(g, w)| g * w).sum();
    1.0 - num / (max + xi)
}

impl GapState {
    /// State from explicit gaps for domains `domains` (no centers attached).
    pub fn from_gaps(domains: Vec<usize>, gaps: Vec<f64>, xi: f64) -> Self {
        let (tau_g, weights) = adaptive_weights(&gaps, xi);
        GapState { domains, gaps, tau_g, weights, xi, cover_center: Vec::new(), centers: Vec::new() }
    }

    /// Loss value on the state's own gaps.
    pub fn adgm_value(&self) -> f64 {
        adgm_value(&self.gaps, &self.weights, self.xi)
    }
}

/// Differentiable modulation loss for a batch.
///
/// Gaps use this batch's mean normalized feature per stego domain against the
/// EMA cover center; domains absent from the batch fall back to their EMA
/// center as a constant. Weights, the cover center and the fallbacks are
/// constants in the graph.
pub fn adgm_loss(g: &mut Graph, state: &GapState, z_norm: Var, domains: &[usize]) -> Result<Var> {
    let shape = g.shape(z_norm).to_vec();
    if shape.len() != 2 || shape[0] != domains.len() {
        return Err(Error::Shape(format!("features {shape:?} for {} domain labels", domains.len())));
    }
    let (b, dim) = (shape[0], shape[1]);
    if state.cover_center.len() != dim || state.centers.len() != state.domains.len() {
        return Err(Error::State("gap state carries no centers of matching dimension".into()));
    }
    let k = state.domains.len();
    let mut avg = vec![0.0; k * b];
    let mut offset = vec![0.0; k * dim];
    for (r, &dk) in state.domains.iter().enumerate() {
        let rows: Vec<usize> = (0..b).filter(|&i| domains[i] == dk).collect();
        if rows.is_empty() {
            for j in 0..dim {
                offset[r * dim + j] = state.centers[r][j] - state.cover_center[j];
            }
        } else {
            let inv = 1.0 / rows.len() as f64;
            rows.iter().for_each(|&i| avg[r * b + i] = inv);
            for j in 0..dim {
                offset[r * dim + j] = -state.cover_center[j];
            }
        }
    }
    let a = g.constant(&Tensor::matrix(k, b, avg)?);
    let off = g.constant(&Tensor::matrix(k, dim, offset)?);
    let means = g.matmul(a, z_norm)?;
    let diff = g.add(means, off)?;
    let gaps = g.reduce(crate::autodiff::ReduceOp::L2Norm, diff, Some(1))?;
    let w = g.constant(&Tensor::vector(state.weights.clone()));
    let weighted = g.mul(gaps, w)?;
    let num = g.sum(weighted)?;
    let peak = g.max(gaps)?;
    let den = g.offset(peak, state.xi)?;
    let ratio = g.div(num, den)?;
    let neg = g.neg(ratio)?;
    g.offset(neg, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent scalar evaluation of the weight and loss formulas, written
    /// out term by term without the shared helpers.
    fn oracle(gaps: &[f64], xi: f64) -> (Vec<f64>, f64) {
        let n = gaps.len() as f64;
        let mean = gaps.iter().sum::<f64>() / n;
        let var = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n;
        let tau = var.sqrt() + xi;
        let denom: f64 = gaps.iter().map(|g| (-g / tau).exp()).sum();
        let w: Vec<f64> = gaps.iter().map(|g| (-g / tau).exp() / denom).collect();
        let mut max = gaps[0];
        for &g in gaps {
            if g > max {
                max = g;
            }
        }
        let mut num = 0.0;
        for i in 0..gaps.len() {
            num += w[i] * gaps[i];
        }
        (w, 1.0 - num / (max + xi))
    }

    #[test]
    fn worked_example_two_gaps() {
        let (w_or, l_or) = oracle(&[1.0, 3.0], 1e-8);
        assert!((w_or[0] - 0.8808).abs() < 1e-4 && (w_or[1] - 0.1192).abs() < 1e-4);
        assert!((l_or - 0.5872).abs() < 1e-3);
        let gs = GapState::from_gaps(vec![1, 2], vec![1.0, 3.0], 1e-8);
        assert!((gs.tau_g - 1.0).abs() < 1e-7);
        for (a, b) in gs.weights.iter().zip(&w_or) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((gs.adgm_value() - l_or).abs() < 1e-12);
    }

    #[test]
    fn equal_gaps_give_uniform_weights() {
        for s in 1..6 {
            let gs = GapState::from_gaps((1..=s).collect(), vec![0.7; s], 1e-8);
            gs.weights.iter().for_each(|w| assert!((w - 1.0 / s as f64).abs() < 1e-12));
            assert!((gs.adgm_value() - 1e-8 / (0.7 + 1e-8)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_domain_limits() {
        let gs = GapState::from_gaps(vec![1], vec![5.0], 1e-8);
        assert_eq!(gs.weights, vec![1.0]);
        assert_eq!(gs.tau_g, 1e-8);
        assert!((gs.adgm_value() - 1e-8 / 5.0).abs() < 1e-15);
        let tiny = GapState::from_gaps(vec![1], vec![1e-12], 1e-8);
        assert!((tiny.adgm_value() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn ema_substitution_examples() {
        let mut bank = DomainCenterBank::new(1, 2, 0.9, 1e-8);
        bank.update_centers(&[1.0, 0.0], &[1]).unwrap();
        bank.update_centers(&[0.0, 1.0], &[1]).unwrap();
        let c = bank.center(1).unwrap();
        assert!((c[0] - 0.9).abs() < 1e-15 && (c[1] - 0.1).abs() < 1e-15);
        assert!(bank.center(0).is_none());
    }

    #[test]
    fn momentum_zero_tracks_batch_mean_and_one_freezes() {
        let mut b0 = DomainCenterBank::new(1, 2, 0.0, 1e-8);
        let mut b1 = DomainCenterBank::new(1, 2, 1.0, 1e-8);
        let z1 = [1.0, 2.0, 3.0, 4.0];
        let z2 = [0.5, -1.0, 1.5, 0.0];
        for b in [&mut b0, &mut b1] {
            b.update_centers(&z1, &[1, 1]).unwrap();
            b.update_centers(&z2, &[1, 1]).unwrap();
        }
        assert_eq!(b0.center(1).unwrap(), &[1.0, -0.5]);
        assert_eq!(b1.center(1).unwrap(), &[2.0, 3.0]);
    }

    #[test]
    fn update_rejects_unknown_domain() {
        let mut b = DomainCenterBank::new(2, 1, 0.9, 1e-8);
        assert!(matches!(b.update_centers(&[1.0], &[3]), Err(Error::Index(_))));
    }

    #[test]
    fn inactive_until_cover_and_stego_seen() {
        let mut b = DomainCenterBank::new(2, 2, 0.9, 1e-8);
        assert!(b.gap_state().is_none());
        b.update_centers(&[1.0, 0.0], &[0]).unwrap();
        assert!(b.gap_state().is_none());
        b.update_centers(&[0.0, 1.0], &[2]).unwrap();
        let gs = b.gap_state().unwrap();
        assert_eq!(gs.domains, vec![2]);
        assert_eq!(gs.weights, vec![1.0]);
    }

    #[test]
    fn ema_converges_geometrically() {
        let mu = 0.7;
        let mut b = DomainCenterBank::new(1, 3, mu, 1e-8);
        b.update_centers(&[5.0, -2.0, 1.0], &[1]).unwrap();
        let target = [0.0, 1.0, 0.5];
        let mut prev = euclid(b.center(1).unwrap(), &target);
        for _ in 0..20 {
            b.update_centers(&target, &[1]).unwrap();
            let d = euclid(b.center(1).unwrap(), &target);
            assert!((d / prev - mu).abs() < 1e-12);
            prev = d;
        }
    }

    #[test]
    fn differentiable_loss_matches_scalar_formula() {
        let mut bank = DomainCenterBank::new(2, 2, 0.5, 1e-8);
        let z = [1.0, 0.0, 0.6, 0.8, 0.0, 1.0, 0.8, 0.6];
        let d = [0, 1, 2, 2];
        bank.update_centers(&z, &d).unwrap();
        let gs = bank.gap_state().unwrap();
        let mut g = Graph::new();
        let zv = g.constant(&Tensor::matrix(4, 2, z.to_vec()).unwrap());
        let loss = adgm_loss(&mut g, &gs, zv, &d).unwrap();
        // with a single update at any momentum the batch means equal the centers
        assert!((g.scalar(loss) - gs.adgm_value()).abs() < 1e-12);
    }

    #[test]
    fn absent_domain_uses_ema_center_constant() {
        let mut bank = DomainCenterBank::new(2, 2, 0.5, 1e-8);
        bank.update_centers(&[1.0, 0.0, 0.0, 1.0, -1.0, 0.0], &[0, 1, 2]).unwrap();
        let gs = bank.gap_state().unwrap();
        let mut g = Graph::new();
        let zv = g.input(&Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap().with_grad());
        let loss = adgm_loss(&mut g, &gs, zv, &[0, 1]).unwrap();
        assert!((g.scalar(loss) - gs.adgm_value()).abs() < 1e-12);
        let grads = g.backward(loss).unwrap();
        // cover rows only feed the constant EMA cover center: zero gradient
        assert_eq!(&grads.get(zv).unwrap()[..2], &[0.0, 0.0]);
    }

    #[test]
    fn recomputed_weights_can_make_widening_raise_loss() {
        // With weights re-derived from the widened gaps, pushing a gap that
        // already sits well above the weighted mean shifts weight away from
        // it faster than its own value grows.
        let gaps = [2.0518291554578174, 4.158925979298772, 4.922725408852461, 3.4418114790845498, 4.821534746278259];
        let ids: Vec<usize> = (1..=5).collect();
        let before = GapState::from_gaps(ids.clone(), gaps.to_vec(), 1e-8).adgm_value();
        let mut wider = gaps;
        wider[3] += 0.8937026065008629 * (gaps[2] - gaps[3]);
        let after = GapState::from_gaps(ids, wider.to_vec(), 1e-8).adgm_value();
        assert!(after > before);
    }

    proptest! {
        #[test]
        fn weights_sum_to_one_and_loss_in_unit_interval(
            gaps in proptest::collection::vec(0.0f64..10.0, 1..8)
        ) {
            let gs = GapState::from_gaps((1..=gaps.len()).collect(), gaps.clone(), 1e-8);
            prop_assert!((gs.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(gs.tau_g > 0.0);
            let l = gs.adgm_value();
            prop_assert!((0.0..1.0).contains(&l), "loss {}", l);
        }

        #[test]
        fn smaller_gap_gets_larger_weight(gaps in proptest::collection::vec(0.0f64..5.0, 2..8)) {
            let gs = GapState::from_gaps((1..=gaps.len()).collect(), gaps.clone(), 1e-8);
            for i in 0..gaps.len() {
                for j in 0..gaps.len() {
                    if gaps[i] < gaps[j] {
                        prop_assert!(gs.weights[i] >= gs.weights[j]);
                    }
                }
            }
        }

        #[test]
        fn shift_leaves_weights_but_moves_loss(
            gaps in proptest::collection::vec(0.0f64..5.0, 2..6),
            shift in 0.5f64..3.0,
        ) {
            prop_assume!(population_std(&gaps) > 1e-3);
            let a = GapState::from_gaps((1..=gaps.len()).collect(), gaps.clone(), 1e-8);
            let shifted: Vec<f64> = gaps.iter().map(|g| g + shift).collect();
            let b = GapState::from_gaps((1..=gaps.len()).collect(), shifted, 1e-8);
            for (x, y) in a.weights.iter().zip(&b.weights) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            prop_assert!((a.adgm_value() - b.adgm_value()).abs() > 1e-9);
        }

        #[test]
        fn widening_a_non_max_gap_lowers_loss_at_frozen_weights(
            gaps in proptest::collection::vec(0.1f64..5.0, 2..6),
            pick in any::<prop::sample::Index>(),
            frac in 0.01f64..1.0,
        ) {
            // Weights are constants within a step, so this is the direction
            // the gradient actually sees.
            let max = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let k = pick.index(gaps.len());
            prop_assume!(gaps[k] < max);
            let gs = GapState::from_gaps((1..=gaps.len()).collect(), gaps.clone(), 1e-8);
            let before = adgm_value(&gaps, &gs.weights, 1e-8);
            let mut wider = gaps.clone();
            wider[k] += frac * (max - gaps[k]);
            let after = adgm_value(&wider, &gs.weights, 1e-8);
            prop_assert!(after < before, "{} -> {}", before, after);
        }
    }
}
