//! Synthetic cover/stego benchmarks.
//!
//! The feature benchmark draws cover rows from `N(0, I_d)` and stego rows
//! for algorithm `k` at embedding rate `r` from the same law shifted by
//! `r · base_gap_k` along a seeded unit direction. Each (domain, class) cell
//! has its own random stream that does not depend on the rate, so rates see
//! common random numbers and measured gaps grow monotonically with `r`.
//!
//! The PCM generator produces 16-bit waveforms and LSB-replacement stego
//! clips; [`extract_features`] maps a clip to a fixed-length vector.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetHeader, Splits};
use crate::error::{Error, Result};
use crate::par::{map_indexed, Exec};
use crate::seed;

const STREAM_DIRECTION: u64 = 1;
const STREAM_CELL: u64 = 2;
const STREAM_SPLIT: u64 = 3;
const STREAM_PCM: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Distortion {
    /// Shift along a dense seeded unit vector.
    MeanShift,
    /// Shift spread evenly over `dims` seeded coordinates.
    SparseSubspace { dims: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    /// Shift magnitude at embedding rate 1.
    pub base_gap: f64,
    pub direction_seed: u64,
    pub distortion: Distortion,
}

impl DomainSpec {
    pub fn mean_shift(name: &str, base_gap: f64, direction_seed: u64) -> Self {
        DomainSpec { name: name.into(), base_gap, direction_seed, distortion: Distortion::MeanShift }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub dim: usize,
    pub domains: Vec<DomainSpec>,
    pub embedding_rates: Vec<f64>,
    /// Rows per (domain, rate, class) cell.
    pub per_cell: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    /// Four algorithm profiles with increasing separation, five rates.
    fn default() -> Self {
        BenchmarkConfig {
            dim: 32,
            domains: vec![
                DomainSpec::mean_shift("pms", 0.5, 11),
                DomainSpec::mean_shift("qim", 1.0, 12),
                DomainSpec::mean_shift("lsb", 2.0, 13),
                DomainSpec::mean_shift("ahcm", 3.0, 14),
            ],
            embedding_rates: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            per_cell: 2000,
            seed: 0,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("dimension must be >= 1".into()));
        }
        if self.domains.is_empty() || self.domains.len() > 250 {
            return Err(Error::Config(format!("need 1..=250 stego domains, got {}", self.domains.len())));
        }
        for d in &self.domains {
            if !(d.base_gap >= 0.0 && d.base_gap.is_finite()) {
                return Err(Error::Config(format!("domain {}: base gap must be >= 0", d.name)));
            }
            if let Distortion::SparseSubspace { dims } = d.distortion {
                if dims == 0 || dims > self.dim {
                    return Err(Error::Config(format!(
                        "domain {}: sparse subspace of {dims} dims in dimension {}",
                        d.name, self.dim
                    )));
                }
            }
        }
        if self.embedding_rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Config("embedding rates must be finite and >= 0".into()));
        }
        if self.per_cell < 3 {
            return Err(Error::Config("need at least 3 rows per cell to split 70/15/15".into()));
        }
        Ok(())
    }

    pub fn domain_names(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.name.clone()).collect()
    }
}

/// Seeded unit direction of a domain.
pub fn direction(spec: &DomainSpec, dim: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = seed::rng(seed, &[STREAM_DIRECTION, spec.direction_seed]);
    match spec.distortion {
        Distortion::MeanShift => {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = crate::autodiff::l2(&v);
            Ok(v.into_iter().map(|x| x / n).collect())
        }
        Distortion::SparseSubspace { dims } => {
            if dims == 0 || dims > dim {
                return Err(Error::Config(format!("sparse subspace of {dims} dims in dimension {dim}")));
            }
            let mut coords: Vec<usize> = (0..dim).collect();
            coords.shuffle(&mut rng);
            let mut v = vec![0.0; dim];
            let a = 1.0 / (dims as f64).sqrt();
            for &c in &coords[..dims] {
                v[c] = if rng.random::<bool>() { a } else { -a };
            }
            Ok(v)
        }
    }
}

/// Sizes of the 70/15/15 partition of a cell.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 70 / 100;
    let val = n * 15 / 100;
    (train, val, n - train - val)
}

fn sample_id(rate_idx: usize, k: usize, class: u8, i: usize) -> u64 {
    ((rate_idx as u64) << 48) | ((k as u64) << 40) | ((class as u64) << 32) | i as u64
}

/// Generate every rate's splits. Cells are produced independently and in
/// parallel; output order is fixed by (domain, class, row).
pub fn gen_feature_benchmark(cfg: &BenchmarkConfig, exec: Exec) -> Result<Vec<Splits>> {
    cfg.validate()?;
    let dirs = cfg
        .domains
        .iter()
        .map(|d| direction(d, cfg.dim, cfg.seed))
        .collect::<Result<Vec<_>>>()?;
    let s = cfg.domains.len();
    let n = cfg.per_cell;
    let d = cfg.dim;
    // base draws per (domain, class) shared by every rate
    let base: Vec<Vec<f64>> = map_indexed(exec, 2 * s, |c| {
        let (k, class) = (c / 2, c % 2);
        let mut rng = seed::rng(cfg.seed, &[STREAM_CELL, k as u64, class as u64]);
        (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect()
    });
    let orders: Vec<Vec<usize>> = (0..2 * s)
        .map(|c| {
            let mut rng = seed::rng(cfg.seed, &[STREAM_SPLIT, (c / 2) as u64, (c % 2) as u64]);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            idx
        })
        .collect();
    let (n_train, n_val, _) = split_sizes(n);
    let out = map_indexed(exec, cfg.embedding_rates.len(), |ri| {
        let er = cfg.embedding_rates[ri];
        let mut train = Dataset::empty(d);
        let mut val = Dataset::empty(d);
        let mut test = Dataset::empty(d);
        let mut row = vec![0.0; d];
        for k in 0..s {
            let shift = er * cfg.domains[k].base_gap;
            for class in 0..2u8 {
                let c = 2 * k + class as usize;
                for (pos, &i) in orders[c].iter().enumerate() {
                    row.copy_from_slice(&base[c][i * d..(i + 1) * d]);
                    if class == 1 {
                        for (x, u) in row.iter_mut().zip(&dirs[k]) {
                            *x += shift * u;
                        }
                    }
                    let dom = if class == 1 { k + 1 } else { 0 };
                    let target = if pos < n_train {
                        &mut train
                    } else if pos < n_train + n_val {
                        &mut val
                    } else {
                        &mut test
                    };
                    target.push(&row, class, dom, k + 1, sample_id(ri, k, class, i));
                }
            }
        }
        Splits { er, domain_names: cfg.domain_names(), train, val, test }
    });
    Ok(out)
}

/// File stem for a rate, e.g. `er0.30`.
pub fn rate_tag(er: f64) -> String {
    format!("er{er:.2}")
}

/// Write `<dir>/<rate>_<split>.bin` plus CSV mirrors and the config echo.
pub fn write_benchmark(dir: &Path, cfg: &BenchmarkConfig, splits: &[Splits]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("benchmark.json"), serde_json::to_vec_pretty(cfg)?)?;
    for sp in splits {
        for (name, ds) in [("train", &sp.train), ("val", &sp.val), ("test", &sp.test)] {
            let header = DatasetHeader {
                split: name.into(),
                er: sp.er,
                seed: cfg.seed,
                domain_names: sp.domain_names.clone(),
                per_cell: cfg.per_cell,
                ..Default::default()
            };
            let stem = format!("{}_{name}", rate_tag(sp.er));
            ds.save(&dir.join(format!("{stem}.bin")), &header, Some(&dir.join(format!("{stem}.csv"))))?;
        }
    }
    Ok(())
}

/// Load the splits of one rate written by [`write_benchmark`].
pub fn read_splits(dir: &Path, er: f64) -> Result<Splits> {
    let tag = rate_tag(er);
    let (train, h) = Dataset::load(&dir.join(format!("{tag}_train.bin")))?;
    let (val, _) = Dataset::load(&dir.join(format!("{tag}_val.bin")))?;
    let (test, _) = Dataset::load(&dir.join(format!("{tag}_test.bin")))?;
    Ok(Splits { er: h.er, domain_names: h.domain_names, train, val, test })
}

/// 16-bit PCM waveform.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PcmClip {
    pub samples: Vec<i16>,
    pub rate: u32,
}

impl PcmClip {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub const PCM_RATE: u32 = 8000;

/// Cover clips are 2-4 sinusoids plus Gaussian noise, quantized to even
/// codes with a sparse odd dither (LSB set on about a quarter of samples).
/// Stego clips replace the LSB of `round(er·len)` seeded positions with
/// random bits.
pub fn gen_lsb_pcm(n_clips: usize, clip_len: usize, er: f64, seed_: u64) -> Result<(Vec<PcmClip>, Vec<PcmClip>)> {
    if !(0.0..=1.0).contains(&er) {
        return Err(Error::Config(format!("embedding rate {er} outside [0, 1]")));
    }
    let mut covers = Vec::with_capacity(n_clips);
    let mut stegos = Vec::with_capacity(n_clips);
    for c in 0..n_clips {
        let mut rng = seed::rng(seed_, &[STREAM_PCM, c as u64]);
        let tones = rng.random_range(2..=4);
        let parts: Vec<(f64, f64, f64)> = (0..tones)
            .map(|_| {
                (
                    rng.random_range(500.0..6000.0),
                    rng.random_range(80.0..3500.0),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        let noise = rng.random_range(50.0..400.0);
        let samples: Vec<i16> = (0..clip_len)
            .map(|t| {
                let time = t as f64 / PCM_RATE as f64;
                let mut v: f64 = parts
                    .iter()
                    .map(|(a, f, p)| a * (std::f64::consts::TAU * f * time + p).sin())
                    .sum();
                let z: f64 = StandardNormal.sample(&mut rng);
                v += noise * z;
                let even = 2.0 * (v / 2.0).round();
                let dither = if rng.random::<f64>() < 0.25 { 1.0 } else { 0.0 };
                (even + dither).clamp(i16::MIN as f64, i16::MAX as f64) as i16
            })
            .collect();
        let cover = PcmClip { samples, rate: PCM_RATE };
        let mut stego = cover.clone();
        let k = (er * clip_len as f64).round() as usize;
        let mut pos: Vec<usize> = (0..clip_len).collect();
        pos.shuffle(&mut rng);
        for &p in &pos[..k] {
            let bit = rng.random::<bool>() as i16;
            stego.samples[p] = (stego.samples[p] & !1) | bit;
        }
        covers.push(cover);
        stegos.push(stego);
    }
    Ok((covers, stegos))
}

pub const PCM_FEATURES: usize = 16;
pub const PCM_MIN_LEN: usize = 64;

/// Fixed-length clip features:
/// `[0]` LSB mean; `[1..9]` fractions of LSB runs of length 1..=7 and >=8;
/// `[9]` equal-parity adjacent pairs; `[10]` LSB agrees with bit 1;
/// `[11]` adjacent pairs differing by exactly 1; `[12..16]` mean, std,
/// skewness and excess kurtosis of the first difference (mean and std in
/// full-scale units).
pub fn extract_features(clip: &PcmClip) -> Result<Vec<f64>> {
    let s = &clip.samples;
    if s.len() < PCM_MIN_LEN {
        return Err(Error::Input(format!("clip of {} samples, need at least {PCM_MIN_LEN}", s.len())));
    }
    let n = s.len() as f64;
    let lsb: Vec<u8> = s.iter().map(|&v| (v & 1) as u8).collect();
    let mut f = vec![0.0; PCM_FEATURES];
    f[0] = lsb.iter().map(|&b| b as f64).sum::<f64>() / n;

    let mut runs = [0usize; 8];
    let mut run = 1usize;
    for i in 1..=lsb.len() {
        if i < lsb.len() && lsb[i] == lsb[i - 1] {
            run += 1;
        } else {
            runs[run.min(8) - 1] += 1;
            run = 1;
        }
    }
    let total: usize = runs.iter().sum();
    for (j, r) in runs.iter().enumerate() {
        f[1 + j] = *r as f64 / total as f64;
    }

    let pairs = (s.len() - 1) as f64;
    f[9] = lsb.windows(2).filter(|w| w[0] == w[1]).count() as f64 / pairs;
    f[10] = s.iter().filter(|&&v| (v & 1) == ((v >> 1) & 1)).count() as f64 / n;
    let diffs: Vec<f64> = s.windows(2).map(|w| w[1] as f64 - w[0] as f64).collect();
    f[11] = diffs.iter().filter(|d| d.abs() == 1.0).count() as f64 / pairs;

    let mean = diffs.iter().sum::<f64>() / pairs;
    let m2 = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / pairs;
    let sd = m2.sqrt();
    let (skew, kurt) = if sd > 0.0 {
        let m3 = diffs.iter().map(|d| (d - mean).powi(3)).sum::<f64>() / pairs;
        let m4 = diffs.iter().map(|d| (d - mean).powi(4)).sum::<f64>() / pairs;
        (m3 / sd.powi(3), m4 / (m2 * m2) - 3.0)
    } else {
        (0.0, 0.0)
    };
    let full = 32768.0;
    f[12] = mean / full;
    f[13] = sd / full;
    f[14] = skew;
    f[15] = kurt;
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small(seed: u64) -> BenchmarkConfig {
        BenchmarkConfig { dim: 8, per_cell: 40, seed, ..Default::default() }
    }

    fn mean_diff_norm(sp: &Dataset, k: usize) -> f64 {
        let d = sp.dim;
        let mut mc = vec![0.0; d];
        let mut ms = vec![0.0; d];
        let (mut nc, mut ns) = (0.0, 0.0);
        for i in 0..sp.len() {
            if sp.source[i] != k {
                continue;
            }
            let (m, cnt) = if sp.y[i] == 1 { (&mut ms, &mut ns) } else { (&mut mc, &mut nc) };
            for (a, b) in m.iter_mut().zip(sp.row(i)) {
                *a += b;
            }
            *cnt += 1.0;
        }
        mc.iter().zip(&ms).map(|(c, s)| (s / ns - c / nc).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn shapes_balance_and_disjoint_ids() {
        let out = gen_feature_benchmark(&small(1), Exec::Sequential).unwrap();
        assert_eq!(out.len(), 5);
        for sp in &out {
            let (a, b, c) = split_sizes(40);
            for (ds, per) in [(&sp.train, a), (&sp.val, b), (&sp.test, c)] {
                for k in 1..=4 {
                    let cell = ds.by_source(k);
                    assert_eq!(cell.y.iter().filter(|&&y| y == 0).count(), per);
                    assert_eq!(cell.y.iter().filter(|&&y| y == 1).count(), per);
                }
                for i in 0..ds.len() {
                    assert_eq!(ds.domain[i], if ds.y[i] == 1 { ds.source[i] } else { 0 });
                }
            }
            let mut ids: Vec<u64> = sp.train.id.iter().chain(&sp.val.id).chain(&sp.test.id).copied().collect();
            let n = ids.len();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), n);
        }
    }

    #[test]
    fn parallel_and_sequential_generation_agree() {
        let a = gen_feature_benchmark(&small(2), Exec::Sequential).unwrap();
        let b = gen_feature_benchmark(&small(2), Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn files_are_byte_identical_for_same_seed() {
        let cfg = small(3);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_benchmark(d1.path(), &cfg, &gen_feature_benchmark(&cfg, Exec::Parallel).unwrap()).unwrap();
        write_benchmark(d2.path(), &cfg, &gen_feature_benchmark(&cfg, Exec::Sequential).unwrap()).unwrap();
        for e in std::fs::read_dir(d1.path()).unwrap() {
            let name = e.unwrap().file_name();
            assert_eq!(
                std::fs::read(d1.path().join(&name)).unwrap(),
                std::fs::read(d2.path().join(&name)).unwrap(),
                "{name:?}"
            );
        }
        let back = read_splits(d1.path(), 0.3).unwrap();
        let orig = gen_feature_benchmark(&cfg, Exec::Sequential).unwrap();
        assert_eq!(back, orig[2]);
    }

    #[test]
    fn zero_gap_makes_stego_match_cover_law() {
        let cfg = BenchmarkConfig {
            dim: 4,
            domains: vec![DomainSpec::mean_shift("null", 0.0, 1)],
            embedding_rates: vec![0.5],
            per_cell: 10_000,
            seed: 5,
        };
        let sp = &gen_feature_benchmark(&cfg, Exec::Parallel).unwrap()[0];
        let mut all = sp.train.clone();
        all.extend(&sp.val);
        all.extend(&sp.test);
        // two independent N(0, I_4) means differ by about sqrt(4·2/n)
        assert!(mean_diff_norm(&all, 1) < 5.0 * (8.0f64 / 10_000.0).sqrt());
    }

    #[test]
    fn mean_difference_scales_with_rate() {
        let cfg = BenchmarkConfig {
            dim: 8,
            domains: vec![
                DomainSpec::mean_shift("a", 1.0, 1),
                DomainSpec { name: "b".into(), base_gap: 2.0, direction_seed: 2, distortion: Distortion::SparseSubspace { dims: 3 } },
            ],
            embedding_rates: vec![0.1, 0.5],
            per_cell: 10_000,
            seed: 9,
        };
        for sp in gen_feature_benchmark(&cfg, Exec::Parallel).unwrap() {
            let mut all = sp.train.clone();
            all.extend(&sp.val);
            all.extend(&sp.test);
            for (k, gap) in [(1, 1.0), (2, 2.0)] {
                let want = sp.er * gap;
                // the difference of two n-sample means has per-coordinate
                // sd sqrt(2/n); its norm fluctuates by about that amount
                let sigma = (2.0f64 / 10_000.0).sqrt();
                let noise_floor = sigma * (8.0f64).sqrt();
                let got = mean_diff_norm(&all, k);
                assert!((got - want).abs() <= 3.0 * sigma + noise_floor, "k={k} er={} got {got} want {want}", sp.er);
            }
        }
    }

    #[test]
    fn sparse_subspace_too_large_is_rejected() {
        let cfg = BenchmarkConfig {
            dim: 4,
            domains: vec![DomainSpec { name: "x".into(), base_gap: 1.0, direction_seed: 0, distortion: Distortion::SparseSubspace { dims: 5 } }],
            ..small(0)
        };
        assert!(matches!(gen_feature_benchmark(&cfg, Exec::Sequential), Err(Error::Config(_))));
    }

    #[test]
    fn sparse_direction_has_unit_norm_and_support() {
        let spec = DomainSpec { name: "x".into(), base_gap: 1.0, direction_seed: 3, distortion: Distortion::SparseSubspace { dims: 5 } };
        let v = direction(&spec, 12, 0).unwrap();
        assert_eq!(v.iter().filter(|x| **x != 0.0).count(), 5);
        assert!((crate::autodiff::l2(&v) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pcm_zero_rate_is_identity_and_bit_planes_are_preserved() {
        let (c, s) = gen_lsb_pcm(5, 500, 0.0, 1).unwrap();
        assert_eq!(c, s);
        let (c, s) = gen_lsb_pcm(5, 500, 0.7, 1).unwrap();
        for (a, b) in c.iter().zip(&s) {
            for (x, y) in a.samples.iter().zip(&b.samples) {
                assert_eq!(x & !1, y & !1);
            }
        }
        assert!(gen_lsb_pcm(1, 10, 1.5, 0).is_err());
    }

    #[test]
    fn pcm_full_rate_hamming_distance_is_half() {
        let len = 4000;
        let (c, s) = gen_lsb_pcm(20, len, 1.0, 2).unwrap();
        let mut flips = 0usize;
        for (a, b) in c.iter().zip(&s) {
            flips += a.samples.iter().zip(&b.samples).filter(|(x, y)| (*x & 1) != (*y & 1)).count();
        }
        let n = (20 * len) as f64;
        // Binomial(n, 1/2): sd sqrt(n)/2
        assert!((flips as f64 - n / 2.0).abs() < 4.0 * n.sqrt() / 2.0);
    }

    #[test]
    fn features_of_constant_clip() {
        for len in [64, 100, 1000] {
            let f = extract_features(&PcmClip { samples: vec![0; len], rate: PCM_RATE }).unwrap();
            assert_eq!(f.len(), PCM_FEATURES);
            assert_eq!(f[0], 0.0);
            assert_eq!(f[8], 1.0);
            assert_eq!(f[1..8].iter().sum::<f64>(), 0.0);
        }
        assert!(matches!(
            extract_features(&PcmClip { samples: vec![0; 63], rate: PCM_RATE }),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn lsb_mean_difference_monte_carlo() {
        let (c, s) = gen_lsb_pcm(1000, 256, 1.0, 7).unwrap();
        let mut diff = 0.0;
        for (a, b) in c.iter().zip(&s) {
            diff += extract_features(b).unwrap()[0] - extract_features(a).unwrap()[0];
        }
        diff /= 1000.0;
        // expectation 0.5 - 0.25; per-clip sd about sqrt(0.25/256 + 0.1875/256)
        let se = ((0.25 + 0.1875) / 256.0f64).sqrt() / (1000.0f64).sqrt();
        assert!((diff - 0.25).abs() < 5.0 * se, "diff {diff}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn features_are_finite_and_bounded(seed in 0u64..1000, len in 64usize..400, er in 0.0f64..=1.0) {
            let (c, s) = gen_lsb_pcm(1, len, er, seed).unwrap();
            for clip in [&c[0], &s[0]] {
                let f = extract_features(clip).unwrap();
                prop_assert_eq!(f.len(), PCM_FEATURES);
                prop_assert!(f.iter().all(|v| v.is_finite()));
                prop_assert!((0.0..=1.0).contains(&f[0]));
                prop_assert!((f[1..9].iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn cell_balance_holds_for_any_size(n in 3usize..60) {
            let cfg = BenchmarkConfig { dim: 3, per_cell: n, embedding_rates: vec![0.2], ..Default::default() };
            let sp = &gen_feature_benchmark(&cfg, Exec::Sequential).unwrap()[0];
            prop_assert_eq!(sp.train.len() + sp.val.len() + sp.test.len(), 8 * n);
            for ds in [&sp.train, &sp.val, &sp.test] {
                let pos = ds.y.iter().filter(|&&y| y == 1).count();
                prop_assert_eq!(2 * pos, ds.len());
            }
        }
    }
}
