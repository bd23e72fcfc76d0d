//! MLP encoder with a two-class head.
//!
//! The encoder maps `x ∈ R^d` through affine+ReLU hidden layers to a feature
//! vector `z ∈ R^D` (the last encoder layer is affine only, so features are
//! not confined to the positive orthant). The head maps `z` to two logits.
//! Contrastive and center computations use the row-normalized features.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{matmul_acc, Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::gap::DomainCenterBank;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub init_seed: u64,
    /// Multiplier on the Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { input_dim: 32, hidden: vec![64, 64], feature_dim: 16, init_seed: 0, init_scale: 1.0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be >= 1: {self:?}")));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::Config("init_scale must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Layer widths from input to logits.
    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.feature_dim);
        w.push(2);
        w
    }
}

/// Output of one differentiable forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOut {
    pub z: Var,
    pub logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderClassifier {
    config: ModelConfig,
    params: ParamSet,
}

impl EncoderClassifier {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::seed::rng(config.init_seed, &[0x1417]);
        let widths = config.widths();
        let mut params = ParamSet::new();
        for (l, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let s = config.init_scale * (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| if s > 0.0 { rng.random_range(-s..=s) } else { 0.0 })
                .collect();
            params.push(format!("layer{l}.weight"), Tensor::matrix(fan_in, fan_out, w)?);
            params.push(format!("layer{l}.bias"), Tensor::vector(vec![0.0; fan_out]));
        }
        Ok(EncoderClassifier { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn n_layers(&self) -> usize {
        self.params.len() / 2
    }

    /// Zero the head weights and bias so every logit is 0.
    pub fn zero_head(&mut self) {
        let l = self.n_layers() - 1;
        for idx in [2 * l, 2 * l + 1] {
            self.params.get_mut(idx).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.config.input_dim {
            return Err(Error::Shape(format!(
                "input has {cols} columns, model expects {}",
                self.config.input_dim
            )));
        }
        Ok(())
    }

    /// Differentiable forward pass: features `z` and logits.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<ForwardOut> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("input must be [B, d], got {shape:?}")));
        }
        self.check_input(shape[1])?;
        let n = self.n_layers();
        let mut h = x;
        let mut z = x;
        for l in 0..n {
            let w = g.param(&self.params, 2 * l);
            let b = g.param(&self.params, 2 * l + 1);
            let lin = g.matmul(h, w)?;
            h = g.add_bias(lin, b)?;
            if l + 2 < n {
                h = g.relu(h)?;
            }
            if l + 2 == n {
                z = h;
            }
        }
        Ok(ForwardOut { z, logits: h })
    }

    /// Forward pass outside any graph. Returns `(z, logits)` row-major.
    ///
    /// Uses the same kernels and operation order as [`forward`](Self::forward),
    /// so values agree bit-for-bit.
    pub fn forward_values(&self, x: &[f64], rows: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if rows == 0 {
            return Ok((Vec::new(), Vec::new()));
        }
        if x.len() % rows != 0 {
            return Err(Error::Shape("input length not divisible by row count".into()));
        }
        self.check_input(x.len() / rows)?;
        let n = self.n_layers();
        let mut h = x.to_vec();
        let mut z = Vec::new();
        for l in 0..n {
            let w = self.params.get(2 * l);
            let (fin, fout) = (w.shape()[0], w.shape()[1]);
            let mut out = vec![0.0; rows * fout];
            matmul_acc(&h, w.data(), &mut out, rows, fin, fout);
            let b = self.params.get(2 * l + 1).data();
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(b).for_each(|(o, bv)| *o += bv);
            }
            if l + 2 < n {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            if l + 2 == n {
                z = out.clone();
            }
            h = out;
        }
        Ok((z, h))
    }

    /// Predicted class per row (ties go to class 0).
    pub fn predict(&self, x: &[f64], rows: usize) -> Result<Vec<u8>> {
        let (_, logits) = self.forward_values(x, rows)?;
        Ok(logits.chunks(2).map(|l| u8::from(l[1] > l[0])).collect())
    }

    /// Row-normalized features outside any graph.
    pub fn normalized_features(&self, x: &[f64], rows: usize, xi: f64) -> Result<Vec<f64>> {
        let (z, _) = self.forward_values(x, rows)?;
        Ok(normalize_rows_values(&z, self.config.feature_dim, xi))
    }

    /// Write θ (and optionally the center bank) as a JSON header followed by
    /// little-endian `f64` values.
    pub fn save_checkpoint(&self, path: &Path, bank: Option<&DomainCenterBank>, step: u64) -> Result<()> {
        let header = CheckpointHeader {
            format: CHECKPOINT_MAGIC.to_string(),
            version: 1,
            config: self.config.clone(),
            names: self.params.names().to_vec(),
            shapes: self.params.tensors().iter().map(|t| t.shape().to_vec()).collect(),
            step,
            bank: bank.map(DomainCenterBank::header),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(8 + json.len() + 8 * self.params.numel());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for v in self.params.flatten() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(bank) = bank {
            for v in bank.flat_centers() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |m: &str| Error::Input(format!("checkpoint {}: {m}", path.display()));
        if bytes.len() < 8 {
            return Err(bad("truncated header"));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        if header.format != CHECKPOINT_MAGIC {
            return Err(bad("unknown format"));
        }
        let floats: Vec<f64> = bytes[8 + hlen..]
            .chunks(8)
            .map(|c| c.try_into().map(f64::from_le_bytes))
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("payload not a whole number of f64 values"))?;
        let mut model = EncoderClassifier::new(header.config.clone())?;
        let n = model.params.numel();
        if floats.len() < n {
            return Err(bad("payload shorter than parameter count"));
        }
        model.params.set_flat(&floats[..n])?;
        let bank = match &header.bank {
            Some(h) => Some(DomainCenterBank::from_parts(h, &floats[n..])?),
            None => None,
        };
        Ok(Checkpoint { model, bank, step: header.step })
    }
}

const CHECKPOINT_MAGIC: &str = "dasm-checkpoint";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    config: ModelConfig,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    step: u64,
    bank: Option<crate::gap::BankHeader>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub model: EncoderClassifier,
    pub bank: Option<DomainCenterBank>,
    pub step: u64,
}

/// Divide each row by `‖row‖₂ + xi` (differentiable).
pub fn normalize_rows(g: &mut Graph, z: Var, xi: f64) -> Result<Var> {
    g.normalize_rows(z, xi)
}

/// Value-only row normalization, identical arithmetic to the graph op.
pub fn normalize_rows_values(z: &[f64], cols: usize, xi: f64) -> Vec<f64> {
    let mut out = z.to_vec();
    for row in out.chunks_mut(cols.max(1)) {
        let denom = row.iter().map(|v| v * v).sum::<f64>().sqrt() + xi;
        if denom > 0.0 {
            row.iter_mut().for_each(|v| *v /= denom);
        }
    }
    out
}
