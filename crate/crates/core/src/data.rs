//! In-memory labeled datasets, splits and the on-disk format.
//!
//! A file holds an 8-byte little-endian header length, a JSON header, the
//! row-major `f64` features, then one byte each of label, domain and source
//! per row, then the `u64` sample ids.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::losses::LabeledBatch;

/// Rows of features with labels. `domain` is 0 for cover rows; `source` is
/// the stego algorithm cell a row was drawn for (cover rows included), so
/// per-algorithm accuracy can be evaluated on balanced cover/stego pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub dim: usize,
    pub x: Vec<f64>,
    pub y: Vec<u8>,
    pub domain: Vec<usize>,
    pub source: Vec<usize>,
    pub id: Vec<u64>,
}

impl Dataset {
    pub fn empty(dim: usize) -> Self {
        Dataset { dim, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, row: &[f64], y: u8, domain: usize, source: usize, id: u64) {
        debug_assert_eq!(row.len(), self.dim);
        self.x.extend_from_slice(row);
        self.y.push(y);
        self.domain.push(domain);
        self.source.push(source);
        self.id.push(id);
    }

    pub fn extend(&mut self, other: &Dataset) {
        debug_assert_eq!(self.dim, other.dim);
        self.x.extend_from_slice(&other.x);
        self.y.extend_from_slice(&other.y);
        self.domain.extend_from_slice(&other.domain);
        self.source.extend_from_slice(&other.source);
        self.id.extend_from_slice(&other.id);
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut out = Dataset::empty(self.dim);
        out.x.reserve(idx.len() * self.dim);
        for &i in idx {
            out.push(self.row(i), self.y[i], self.domain[i], self.source[i], self.id[i]);
        }
        out
    }

    /// Rows whose source cell is `k`.
    pub fn by_source(&self, k: usize) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.source[i] == k).collect();
        self.subset(&idx)
    }

    pub fn n_sources(&self) -> usize {
        self.source.iter().copied().max().unwrap_or(0)
    }

    pub fn batch(&self, idx: &[usize]) -> Result<LabeledBatch> {
        let sub = self.subset(idx);
        sub.into_batch()
    }

    pub fn into_batch(self) -> Result<LabeledBatch> {
        let n = self.len();
        LabeledBatch::new(Tensor::matrix(n, self.dim, self.x)?, self.y, self.domain)
    }

    /// Write the binary file and, when `csv_mirror` is given, a CSV copy.
    pub fn save(&self, path: &Path, header: &DatasetHeader, csv_mirror: Option<&Path>) -> Result<()> {
        let mut h = header.clone();
        h.format = DATASET_MAGIC.into();
        h.dim = self.dim;
        h.rows = self.len();
        let json = serde_json::to_vec(&h)?;
        let mut buf = Vec::with_capacity(8 + json.len() + self.len() * (8 * self.dim + 11));
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for v in &self.x {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.y);
        buf.extend(self.domain.iter().map(|&d| d as u8));
        buf.extend(self.source.iter().map(|&d| d as u8));
        for id in &self.id {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        if let Some(p) = csv_mirror {
            self.write_csv(p)?;
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut head = vec!["id".to_string(), "label".into(), "domain".into(), "source".into()];
        head.extend((0..self.dim).map(|j| format!("x{j}")));
        w.write_record(&head)?;
        for i in 0..self.len() {
            let mut rec = vec![
                self.id[i].to_string(),
                self.y[i].to_string(),
                self.domain[i].to_string(),
                self.source[i].to_string(),
            ];
            rec.extend(self.row(i).iter().map(|v| format!("{v:e}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Dataset, DatasetHeader)> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |m: &str| Error::Input(format!("dataset {}: {m}", path.display()));
        if bytes.len() < 8 {
            return Err(bad("truncated header"));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: DatasetHeader = serde_json::from_slice(body)?;
        if header.format != DATASET_MAGIC {
            return Err(bad("unknown format"));
        }
        let (n, d) = (header.rows, header.dim);
        let need = 8 * n * d + 3 * n + 8 * n;
        let rest = &bytes[8 + hlen..];
        if rest.len() != need {
            return Err(bad(&format!("payload of {} bytes, expected {need}", rest.len())));
        }
        let (xs, rest) = rest.split_at(8 * n * d);
        let x = xs.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let (y, rest) = rest.split_at(n);
        let (dom, rest) = rest.split_at(n);
        let (src, rest) = rest.split_at(n);
        let id = rest.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
        let ds = Dataset {
            dim: d,
            x,
            y: y.to_vec(),
            domain: dom.iter().map(|&b| b as usize).collect(),
            source: src.iter().map(|&b| b as usize).collect(),
            id,
        };
        Ok((ds, header))
    }
}

const DATASET_MAGIC: &str = "dasm-dataset";

/// JSON header of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DatasetHeader {
    pub format: String,
    pub dim: usize,
    pub rows: usize,
    pub split: String,
    pub er: f64,
    pub seed: u64,
    pub domain_names: Vec<String>,
    pub per_cell: usize,
}

/// Train/validation/test partitions of one embedding rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub er: f64,
    pub domain_names: Vec<String>,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn n_stego(&self) -> usize {
        self.domain_names.len()
    }

    pub fn dim(&self) -> usize {
        self.train.dim
    }
}
