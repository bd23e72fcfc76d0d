//! Proxy A-distance `d_A = 2(1 − 2ε)` from a linear domain probe.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::EncoderClassifier;
use crate::par::{map_indexed, Exec};
use crate::seed;

pub const PROBE_STEPS: usize = 500;
pub const PROBE_LR: f64 = 0.1;
pub const MIN_SIDE: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PadResult {
    pub d_a: f64,
    /// Held-out probe error before clipping.
    pub error: f64,
}

/// `2(1 − 2ε)` with ε clipped to `[0, 0.5]`.
pub fn pad_from_error(eps: f64) -> f64 {
    2.0 * (1.0 - 2.0 * eps.clamp(0.0, 0.5))
}

/// The permutation depends on the side size only, so a set probed against
/// itself gets identical splits on both sides.
fn split(n: usize, seed_: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed_, &[41, n as u64]));
    let cut = n * 4 / 5;
    let test = idx.split_off(cut);
    (idx, test)
}

/// Train a logistic probe (full-batch gradient descent, fixed budget,
/// features standardized on the training part) to tell row sets `a` and `b`
/// apart and convert its held-out error to `d_A`. Predictions tie to `a`.
pub fn proxy_a_distance(a: &[f64], b: &[f64], dim: usize, seed_: u64) -> Result<PadResult> {
    if dim == 0 || a.len() % dim != 0 || b.len() % dim != 0 {
        return Err(Error::Shape(format!("rows of dimension {dim} from {} and {} values", a.len(), b.len())));
    }
    let (na, nb) = (a.len() / dim, b.len() / dim);
    if na < MIN_SIDE || nb < MIN_SIDE {
        return Err(Error::SampleSize(format!("probe needs {MIN_SIDE} rows per side, got {na} and {nb}")));
    }
    let (tr_a, te_a) = split(na, seed_);
    let (tr_b, te_b) = split(nb, seed_);
    let row = |side: u8, i: usize| if side == 0 { &a[i * dim..(i + 1) * dim] } else { &b[i * dim..(i + 1) * dim] };
    let train: Vec<(u8, usize)> = tr_a.iter().map(|&i| (0, i)).chain(tr_b.iter().map(|&i| (1, i))).collect();
    let test: Vec<(u8, usize)> = te_a.iter().map(|&i| (0, i)).chain(te_b.iter().map(|&i| (1, i))).collect();

    let nt = train.len() as f64;
    let mut mu = vec![0.0; dim];
    for &(s, i) in &train {
        for (m, x) in mu.iter_mut().zip(row(s, i)) {
            *m += x / nt;
        }
    }
    let mut sd = vec![0.0; dim];
    for &(s, i) in &train {
        for ((v, x), m) in sd.iter_mut().zip(row(s, i)).zip(&mu) {
            *v += (x - m).powi(2) / nt;
        }
    }
    let sd: Vec<f64> = sd.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
    let std_row = |s: u8, i: usize| -> Vec<f64> {
        row(s, i).iter().zip(&mu).zip(&sd).map(|((x, m), d)| (x - m) / d).collect()
    };
    let xs: Vec<Vec<f64>> = train.iter().map(|&(s, i)| std_row(s, i)).collect();

    let mut w = vec![0.0; dim];
    let mut bias = 0.0;
    for _ in 0..PROBE_STEPS {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (x, &(s, _)) in xs.iter().zip(&train) {
            let z: f64 = bias + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            let r = 1.0 / (1.0 + (-z).exp()) - s as f64;
            gb += r;
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += r * xi;
            }
        }
        bias -= PROBE_LR * gb / nt;
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= PROBE_LR * g / nt;
        }
    }
    let wrong = test
        .iter()
        .filter(|&&(s, i)| {
            let x = std_row(s, i);
            let z: f64 = bias + w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
            u8::from(z > 0.0) != s
        })
        .count();
    let error = wrong as f64 / test.len() as f64;
    Ok(PadResult { d_a: pad_from_error(error), error })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSpace {
    /// Input rows as generated.
    Raw,
    /// Normalized encoder features of a model.
    Model,
}

/// Symmetric `(S+1)×(S+1)` matrix over {cover, domain 1..=S}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PadMatrix {
    pub er: f64,
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub probe_error: Vec<Vec<f64>>,
    pub space: FeatureSpace,
}

impl PadMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut head = vec!["domain".to_string()];
        head.extend(self.names.iter().cloned());
        w.write_record(&head)?;
        for (name, row) in self.names.iter().zip(&self.values) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Rows of each group: index 0 is every cover row, `k` the stego rows of
/// domain `k`.
fn groups(data: &Dataset, s: usize, feats: &[f64], dim: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new(); s + 1];
    for i in 0..data.len() {
        out[data.domain[i].min(s)].extend_from_slice(&feats[i * dim..(i + 1) * dim]);
    }
    out
}

/// Equal-size, seeded subsample of the larger side.
fn balance(a: &[f64], b: &[f64], dim: usize, seed_: u64) -> (Vec<f64>, Vec<f64>) {
    let (na, nb) = (a.len() / dim, b.len() / dim);
    let n = na.min(nb);
    let take = |rows: &[f64], total: usize, side: u64| -> Vec<f64> {
        if total == n {
            return rows.to_vec();
        }
        let mut idx: Vec<usize> = (0..total).collect();
        idx.shuffle(&mut seed::rng(seed_, &[42, side]));
        idx.truncate(n);
        idx.sort_unstable();
        idx.iter().flat_map(|&i| rows[i * dim..(i + 1) * dim].iter().copied()).collect()
    };
    (take(a, na, 0), take(b, nb, 1))
}

/// Pairwise PAD over cover and every stego domain. Each unordered pair is
/// probed once and mirrored; the diagonal probes a set against itself.
pub fn pad_matrix(
    model: Option<&EncoderClassifier>,
    data: &Dataset,
    domain_names: &[String],
    er: f64,
    seed_: u64,
    exec: Exec,
) -> Result<PadMatrix> {
    let s = domain_names.len();
    let (feats, dim, space) = match model {
        Some(m) => (m.normalized_features(&data.x, data.len(), 1e-8)?, m.config().feature_dim, FeatureSpace::Model),
        None => (data.x.clone(), data.dim, FeatureSpace::Raw),
    };
    let g = groups(data, s, &feats, dim);
    let pairs: Vec<(usize, usize)> = (0..=s).flat_map(|i| (i..=s).map(move |j| (i, j))).collect();
    let results = map_indexed(exec, pairs.len(), |p| {
        let (i, j) = pairs[p];
        let ps = seed::derive(seed_, &[i as u64, j as u64]);
        let (a, b) = balance(&g[i], &g[j], dim, ps);
        proxy_a_distance(&a, &b, dim, ps)
    });
    let n = s + 1;
    let mut values = vec![vec![0.0; n]; n];
    let mut probe_error = vec![vec![0.0; n]; n];
    for (&(i, j), r) in pairs.iter().zip(results) {
        let r = r?;
        values[i][j] = r.d_a;
        values[j][i] = r.d_a;
        probe_error[i][j] = r.error;
        probe_error[j][i] = r.error;
    }
    let mut names = vec!["cover".to_string()];
    names.extend(domain_names.iter().cloned());
    Ok(PadMatrix { er, names, values, probe_error, space })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{gen_feature_benchmark, BenchmarkConfig, DomainSpec};
    use rand_distr::{Distribution, StandardNormal};

    fn gauss(n: usize, d: usize, shift: f64, seed_: u64) -> Vec<f64> {
        let mut rng = seed::rng(seed_, &[]);
        (0..n * d).map(|k| Distribution::<f64>::sample(&StandardNormal, &mut rng) + if k % d == 0 { shift } else { 0.0 }).collect::<Vec<f64>>()
    }

    #[test]
    fn formula_endpoints() {
        assert_eq!(pad_from_error(0.0), 2.0);
        assert_eq!(pad_from_error(0.25), 1.0);
        assert_eq!(pad_from_error(0.5), 0.0);
        assert_eq!(pad_from_error(0.7), 0.0);
        assert_eq!(pad_from_error(-0.1), 2.0);
    }

    #[test]
    fn same_draw_is_indistinguishable() {
        let a = gauss(1000, 5, 0.0, 1);
        let r = proxy_a_distance(&a, &a, 5, 3).unwrap();
        assert!(r.d_a < 0.15);
    }

    #[test]
    fn independent_draws_of_one_law_are_close() {
        let a = gauss(1000, 5, 0.0, 1);
        let b = gauss(1000, 5, 0.0, 2);
        assert!(proxy_a_distance(&a, &b, 5, 3).unwrap().d_a < 0.15);
    }

    #[test]
    fn separated_sets_approach_two() {
        let a = gauss(300, 3, 0.0, 1);
        let b = gauss(300, 3, 8.0, 2);
        let r = proxy_a_distance(&a, &b, 3, 0).unwrap();
        assert!(r.d_a > 1.9, "{r:?}");
    }

    #[test]
    fn too_few_rows() {
        let a = gauss(19, 2, 0.0, 1);
        let b = gauss(50, 2, 0.0, 2);
        assert!(matches!(proxy_a_distance(&a, &b, 2, 0), Err(Error::SampleSize(_))));
    }

    #[test]
    fn matrix_symmetry_and_null_benchmark() {
        let cfg = BenchmarkConfig {
            dim: 6,
            domains: vec![DomainSpec::mean_shift("a", 0.0, 1), DomainSpec::mean_shift("b", 0.0, 2)],
            embedding_rates: vec![1.0],
            per_cell: 300,
            seed: 4,
        };
        let sp = gen_feature_benchmark(&cfg, Exec::Sequential).unwrap().remove(0);
        let model = EncoderClassifier::new(ModelConfig { input_dim: 6, ..Default::default() }).unwrap();
        let before = model.params().flatten();
        let pm = pad_matrix(Some(&model), &sp.train, &sp.domain_names, 1.0, 0, Exec::Parallel).unwrap();
        assert_eq!(model.params().flatten(), before);
        for i in 0..3 {
            assert!(pm.values[i][i] < 0.15);
            for j in 0..3 {
                assert_eq!(pm.values[i][j].to_bits(), pm.values[j][i].to_bits());
                assert!((0.0..=2.0).contains(&pm.values[i][j]));
                if i != j {
                    assert!(pm.values[i][j] < 0.3, "({i},{j}) = {}", pm.values[i][j]);
                }
            }
        }
        let seq = pad_matrix(Some(&model), &sp.train, &sp.domain_names, 1.0, 0, Exec::Sequential).unwrap();
        assert_eq!(pm, seq);
    }

    #[test]
    fn raw_matrix_orders_domains_by_gap() {
        let cfg = BenchmarkConfig { dim: 8, per_cell: 400, embedding_rates: vec![0.5], ..Default::default() };
        let sp = gen_feature_benchmark(&cfg, Exec::Sequential).unwrap().remove(0);
        let pm = pad_matrix(None, &sp.train, &sp.domain_names, 0.5, 1, Exec::Parallel).unwrap();
        assert!(pm.get(0, 1) < pm.get(0, 4));
        let dir = tempfile::tempdir().unwrap();
        pm.write_csv(&dir.path().join("p.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("p.csv")).unwrap();
        assert!(text.starts_with("domain,cover,pms,qim,lsb,ahcm"));
    }
}
