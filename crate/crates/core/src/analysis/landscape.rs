//! Two-dimensional loss slices along filter-normalized random directions.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Objective;
use crate::autodiff::l2;
use crate::error::{Error, Result};
use crate::par::{map_indexed, Exec};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LandscapeConfig {
    /// Odd grid size per axis.
    pub grid: usize,
    pub extent: f64,
    pub seed: u64,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        LandscapeConfig { grid: 41, extent: 1.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeSlice {
    pub grid: usize,
    pub extent: f64,
    pub seed: u64,
    pub coords: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// Row-major over (α, β); `None` marks a non-finite cell.
    pub loss: Vec<Option<f64>>,
    pub base_loss: f64,
    pub missing: usize,
}

impl LandscapeSlice {
    pub fn at(&self, i: usize, j: usize) -> Option<f64> {
        self.loss[i * self.grid + j]
    }

    pub fn center(&self) -> Option<f64> {
        let c = self.grid / 2;
        self.at(c, c)
    }

    /// `alpha,beta,loss` rows; missing cells have an empty loss field.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["alpha", "beta", "loss"])?;
        for i in 0..self.grid {
            for j in 0..self.grid {
                w.write_record([
                    self.coords[i].to_string(),
                    self.coords[j].to_string(),
                    self.at(i, j).map(|l| l.to_string()).unwrap_or_default(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Gaussian direction rescaled block by block to the norm of the matching
/// parameter block; blocks of zero norm get a zero direction.
pub fn filter_normalized_direction(theta: &[f64], blocks: &[std::ops::Range<usize>], seed_: u64, stream: u64) -> Vec<f64> {
    let mut rng = seed::rng(seed_, &[51, stream]);
    let mut d: Vec<f64> = (0..theta.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    for b in blocks {
        let tn = l2(&theta[b.clone()]);
        let dn = l2(&d[b.clone()]);
        let s = if tn == 0.0 || dn == 0.0 { 0.0 } else { tn / dn };
        for x in &mut d[b.clone()] {
            *x *= s;
        }
    }
    d
}

pub fn grid_coords(grid: usize, extent: f64) -> Vec<f64> {
    let c = grid / 2;
    (0..grid)
        .map(|i| if i == c { 0.0 } else { -extent + 2.0 * extent * i as f64 / (grid - 1) as f64 })
        .collect()
}

pub fn landscape_slice(obj: &dyn Objective, cfg: &LandscapeConfig, exec: Exec) -> Result<LandscapeSlice> {
    if cfg.grid == 0 || cfg.grid % 2 == 0 {
        return Err(Error::Config(format!("landscape grid must be odd, got {}", cfg.grid)));
    }
    if !(cfg.extent > 0.0 && cfg.extent.is_finite()) {
        return Err(Error::Config(format!("landscape extent must be > 0, got {}", cfg.extent)));
    }
    let theta = obj.theta();
    let blocks = obj.blocks();
    let u = filter_normalized_direction(&theta, &blocks, cfg.seed, 0);
    let v = filter_normalized_direction(&theta, &blocks, cfg.seed, 1);
    let coords = grid_coords(cfg.grid, cfg.extent);
    let base_loss = obj.loss_at(&theta)?;
    let g = cfg.grid;
    let rows: Vec<Result<Vec<Option<f64>>>> = map_indexed(exec, g, |i| {
        (0..g)
            .map(|j| {
                let (a, b) = (coords[i], coords[j]);
                let p: Vec<f64> = theta.iter().zip(&u).zip(&v).map(|((t, x), y)| t + a * x + b * y).collect();
                obj.loss_at(&p).map(|l| l.is_finite().then_some(l))
            })
            .collect()
    });
    let mut loss = Vec::with_capacity(g * g);
    for r in rows {
        loss.extend(r?);
    }
    let missing = loss.iter().filter(|l| l.is_none()).count();
    Ok(LandscapeSlice { grid: g, extent: cfg.extent, seed: cfg.seed, coords, u, v, loss, base_loss, missing })
}
