//! Cross-entropy, domain-supervised contrastive loss and their composition
//! with the gap-modulation term into the training objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::gap::{adgm_loss, GapState};
use crate::model::{EncoderClassifier, ForwardOut};

/// Mini-batch of features, binary labels (0 cover, 1 stego) and domain ids
/// (0 cover, 1..=S stego algorithms).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub x: Tensor,
    pub y: Vec<u8>,
    pub domain: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(x: Tensor, y: Vec<u8>, domain: Vec<usize>) -> Result<Self> {
        if x.rank() != 2 {
            return Err(Error::Shape(format!("batch features must be [B, d], got {:?}", x.shape())));
        }
        let b = x.shape()[0];
        if y.len() != b || domain.len() != b {
            return Err(Error::Shape(format!(
                "batch of {b} rows with {} labels and {} domains",
                y.len(),
                domain.len()
            )));
        }
        for (i, (&yi, &di)) in y.iter().zip(&domain).enumerate() {
            if yi > 1 {
                return Err(Error::Input(format!("label {yi} at row {i} is not binary")));
            }
            if (yi == 0) != (di == 0) {
                return Err(Error::Input(format!(
                    "row {i}: label {yi} with domain {di} (cover must carry domain 0)"
                )));
            }
        }
        Ok(LabeledBatch { x, y, domain })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Loss components of one evaluation. `total == ce + dscl + adgm`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub dscl: f64,
    pub adgm: f64,
    pub total: f64,
}

/// Which components enter the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ce: bool,
    pub dscl: bool,
    pub adgm: bool,
}

impl LossTerms {
    pub const CE_ONLY: LossTerms = LossTerms { ce: true, dscl: false, adgm: false };
    pub const FULL: LossTerms = LossTerms { ce: true, dscl: true, adgm: true };
    pub const CE_DSCL: LossTerms = LossTerms { ce: true, dscl: true, adgm: false };
    pub const CE_ADGM: LossTerms = LossTerms { ce: true, dscl: false, adgm: true };
}

impl Default for LossTerms {
    fn default() -> Self {
        LossTerms::FULL
    }
}

/// Mean negative log-softmax of the labelled class, stabilized by
/// max-subtraction inside the row log-sum-exp.
pub fn cross_entropy(g: &mut Graph, logits: Var, y: &[u8]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != y.len() || shape[0] == 0 {
        return Err(Error::Shape(format!("logits {shape:?} for {} labels", y.len())));
    }
    let lse = g.logsumexp_rows(logits)?;
    let picked = g.gather(logits, y.iter().map(|&c| c as usize).collect())?;
    let nll = g.sub(lse, picked)?;
    g.mean(nll)
}

/// Contrastive loss value plus bookkeeping about excluded anchors.
#[derive(Debug, Clone, Copy)]
pub struct DsclOutput {
    pub loss: Var,
    /// Anchors with a non-empty positive set.
    pub anchors: usize,
    /// Set when no anchor had a positive; the loss is then exactly 0.
    pub degenerate: bool,
}

/// Domain-supervised InfoNCE over normalized features `z`.
///
/// For anchor `i`, positives are the other rows of its domain and negatives
/// all rows of other domains; the term is `−log(S⁺ / (S⁺ + S⁻))` with
/// `S = Σ exp(zᵢ·zⱼ / τ)`. Anchors without positives are excluded from the average.
pub fn dscl(g: &mut Graph, z: Var, domains: &[usize], tau: f64) -> Result<DsclOutput> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    let shape = g.shape(z).to_vec();
    if shape.len() != 2 || shape[0] != domains.len() {
        return Err(Error::Shape(format!("features {shape:?} for {} domains", domains.len())));
    }
    let (terms, anchors) = g.contrastive_log_ratio(z, domains, tau)?;
    if anchors.is_empty() {
        let loss = g.constant_scalar(0.0);
        return Ok(DsclOutput { loss, anchors: 0, degenerate: true });
    }
    let loss = g.mean(terms)?;
    Ok(DsclOutput { loss, anchors: anchors.len(), degenerate: false })
}

/// Forward pass plus normalized features, the common prefix of every loss
/// evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Features {
    pub out: ForwardOut,
    pub z_norm: Var,
}

pub fn features(g: &mut Graph, model: &EncoderClassifier, batch: &LabeledBatch, xi: f64) -> Result<Features> {
    let x = g.constant(&batch.x);
    let out = model.forward(g, x)?;
    let z_norm = g.normalize_rows(out.z, xi)?;
    Ok(Features { out, z_norm })
}

/// Sum the enabled components on an existing forward pass. Disabled
/// components, and the modulation term while `gaps` is `None`, contribute an
/// exact 0.
pub fn compose_loss(
    g: &mut Graph,
    feats: &Features,
    batch: &LabeledBatch,
    gaps: Option<&GapState>,
    tau: f64,
    terms: LossTerms,
) -> Result<(Var, LossBreakdown)> {
    let zero = g.constant_scalar(0.0);
    let ce = if terms.ce { cross_entropy(g, feats.out.logits, &batch.y)? } else { zero };
    let dl = if terms.dscl { dscl(g, feats.z_norm, &batch.domain, tau)?.loss } else { zero };
    let ad = match (terms.adgm, gaps) {
        (true, Some(gs)) => adgm_loss(g, gs, feats.z_norm, &batch.domain)?,
        _ => zero,
    };
    let s = g.add(ce, dl)?;
    let total = g.add(s, ad)?;
    let breakdown = LossBreakdown { ce: g.scalar(ce), dscl: g.scalar(dl), adgm: g.scalar(ad), total: g.scalar(total) };
    Ok((total, breakdown))
}

/// Full objective on a fresh forward pass with a frozen modulator state.
pub fn total_loss(
    g: &mut Graph,
    batch: &LabeledBatch,
    model: &EncoderClassifier,
    gaps: Option<&GapState>,
    tau: f64,
    xi: f64,
    terms: LossTerms,
) -> Result<(Var, LossBreakdown)> {
    let feats = features(g, model, batch, xi)?;
    compose_loss(g, &feats, batch, gaps, tau, terms)
}
